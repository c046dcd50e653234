//! 2D convolution (im2col + gemm) and max pooling over channels-last maps.

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    /// Input offset for (batch, output row/col, kernel row/col), `None` in the padding.
    #[inline]
    fn src(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            return None;
        }
        Some(((b * self.h + y as usize) * self.w + x as usize) * self.ci)
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.batch * g.oh * g.ow * patch];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(s) = g.src(b, oy, ox, ky, kx) {
                            let d = row + (ky * g.kw + kx) * g.ci;
                            cols[d..d + g.ci].copy_from_slice(&x[s..s + g.ci]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.ci];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(s) = g.src(b, oy, ox, ky, kx) {
                            let d = row + (ky * g.kw + kx) * g.ci;
                            for c in 0..g.ci {
                                dx[s + c] = dx[s + c] + cols[d + c];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Real> Tape<T> {
    /// Cross-correlation style convolution, `[B,]H,W,Cin` with kernel `kH,kW,Cin,Cout`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let batched = match xs.len() {
            4 => true,
            3 => false,
            _ => return Err(TensorError::shape("conv2d", format!("input rank {} (want 3 or 4)", xs.len()))),
        };
        let (batch, h, w, ci) = if batched { (xs[0], xs[1], xs[2], xs[3]) } else { (1, xs[0], xs[1], xs[2]) };
        if ks.len() != 4 || ks[2] != ci {
            return Err(TensorError::shape("conv2d", format!("kernel {ks:?} for input {xs:?}")));
        }
        if stride == 0 {
            return Err(TensorError::param("conv2d", "stride must be >= 1"));
        }
        let (kh, kw, co) = (ks[0], ks[1], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let g = ConvGeom { batch, h, w, ci, kh, kw, stride, pad: padding, oh, ow };
        let rows = batch * oh * ow;
        let cols = im2col(&g, self.value(x).data());
        let mut out = vec![T::zero(); rows * co];
        gemm(
            MatRef::new(&cols, rows, g.patch()),
            MatRef::new(self.value(kernel).data(), g.patch(), co),
            T::zero(),
            &mut out,
        );
        let out_shape = if batched { vec![batch, oh, ow, co] } else { vec![oh, ow, co] };
        let out = Tensor::new(&out_shape, out)?;
        self.push(
            "conv2d",
            out,
            &[x, kernel],
            Box::new(move |c| {
                let grad = c.grad.data();
                let dk = c.needs[1].then(|| {
                    let mut dk = vec![T::zero(); g.patch() * co];
                    gemm(MatRef::new(&cols, rows, g.patch()).t(), MatRef::new(grad, rows, co), T::zero(), &mut dk);
                    Tensor::new(&[kh, kw, ci, co], dk).unwrap()
                });
                let dx = c.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * g.patch()];
                    gemm(
                        MatRef::new(grad, rows, co),
                        MatRef::new(c.inputs[1].data(), g.patch(), co).t(),
                        T::zero(),
                        &mut dcols,
                    );
                    Tensor::new(c.inputs[0].shape(), col2im(&g, &dcols)).unwrap()
                });
                vec![dx, dk]
            }),
        )
    }

    /// Non-overlapping `size x size` max pooling of `[B, H, W, C]`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || size == 0 || xs[1] < size || xs[2] < size {
            return Err(TensorError::shape("max_pool2d", format!("input {xs:?} with window {size}")));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        let mut arg = vec![0usize; out.len()];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for dy in 0..size {
                            for dx in 0..size {
                                let s = ((bi * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                                if src[s] > best {
                                    best = src[s];
                                    at = s;
                                }
                            }
                        }
                        out[o + ch] = best;
                        arg[o + ch] = at;
                    }
                }
            }
        }
        let out = Tensor::new(&[b, oh, ow, c], out)?;
        self.push(
            "max_pool2d",
            out,
            &[x],
            Box::new(move |cx| {
                let mut dx = vec![T::zero(); cx.inputs[0].numel()];
                for (&a, &g) in arg.iter().zip(cx.grad.data()) {
                    dx[a] = dx[a] + g;
                }
                vec![Some(Tensor::new(cx.inputs[0].shape(), dx).unwrap())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f32>::new();
        let img = Tensor::from_fn(&[3, 3, 1], |i| i as f32 * 0.5 - 1.0);
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[5, 5, 2]));
        let k = tape.constant(Tensor::from_fn(&[3, 3, 2, 3], |i| i as f32));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[5, 5, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_extent_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 7, 6, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 4]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3, 4]);
    }

    #[test]
    fn oversized_kernel_is_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 1]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(TensorError::Shape { .. })));
        let k2 = tape.constant(Tensor::zeros(&[3, 3, 2, 1]));
        assert!(tape.conv2d(x, k2, 1, 1).is_err());
    }
}
