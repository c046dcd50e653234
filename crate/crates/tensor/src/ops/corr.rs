//! Correlation-tensor primitives: local self-correlation, 4D convolutions and
//! per-group standardization.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which spatial pair of a `[P, Hq, Wq, Hs, Ws, C]` tensor a plane kernel sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Query,
    Support,
}

/// Multiply-adds of a dense 3x3x3x3 convolution with padding 1.
pub fn conv4d_macs(positions: usize, c_in: usize, c_out: usize) -> usize {
    positions * 81 * c_in * c_out
}

/// Multiply-adds of the separable replacement: two depthwise 3x3 planes and a point-wise mix.
pub fn conv4d_separable_macs(positions: usize, c_in: usize, c_out: usize) -> usize {
    positions * (9 * c_in + 9 * c_in + c_in * c_out)
}

struct Window {
    du: usize,
    dv: usize,
}

impl Window {
    fn u(&self) -> usize {
        2 * self.du + 1
    }
    fn v(&self) -> usize {
        2 * self.dv + 1
    }
}

#[inline]
fn shifted(i: usize, d: usize, half: usize, len: usize) -> Option<usize> {
    let j = (i + d) as isize - half as isize;
    (j >= 0 && (j as usize) < len).then_some(j as usize)
}

impl<T: Real> Tape<T> {
    /// Group-summed products of each position with its `U x V` neighbours.
    ///
    /// Input `[B, H, W, C]`, output `[B, H, W, U, V, C / group]`; off-map
    /// neighbours contribute zero.
    pub fn neighborhood_product(&mut self, x: Var, du: usize, dv: usize, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("neighborhood_product", format!("input {xs:?}")));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        if group == 0 || c % group != 0 {
            return Err(TensorError::param(
                "neighborhood_product",
                format!("group size {group} does not divide {c} channels"),
            ));
        }
        let win = Window { du, dv };
        let (u, v, cg) = (win.u(), win.v(), c / group);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * h * w * u * v * cg];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let center = ((bi * h + y) * w + xx) * c;
                    for pu in 0..u {
                        let Some(ny) = shifted(y, pu, du, h) else { continue };
                        for pv in 0..v {
                            let Some(nx) = shifted(xx, pv, dv, w) else { continue };
                            let nbr = ((bi * h + ny) * w + nx) * c;
                            let o = ((((bi * h + y) * w + xx) * u + pu) * v + pv) * cg;
                            for gi in 0..cg {
                                let mut acc = T::zero();
                                for k in gi * group..(gi + 1) * group {
                                    acc = acc + src[center + k] * src[nbr + k];
                                }
                                out[o + gi] = acc;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, h, w, u, v, cg], out)?;
        self.push(
            "neighborhood_product",
            out,
            &[x],
            Box::new(move |ctx| {
                let (src, g) = (ctx.inputs[0].data(), ctx.grad.data());
                let mut dx = vec![T::zero(); src.len()];
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let center = ((bi * h + y) * w + xx) * c;
                            for pu in 0..u {
                                let Some(ny) = shifted(y, pu, du, h) else { continue };
                                for pv in 0..v {
                                    let Some(nx) = shifted(xx, pv, dv, w) else { continue };
                                    let nbr = ((bi * h + ny) * w + nx) * c;
                                    let o = ((((bi * h + y) * w + xx) * u + pu) * v + pv) * cg;
                                    for k in 0..c {
                                        let gk = g[o + k / group];
                                        dx[center + k] = dx[center + k] + gk * src[nbr + k];
                                        dx[nbr + k] = dx[nbr + k] + gk * src[center + k];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx).unwrap())]
            }),
        )
    }

    /// Dense 4D convolution with 3x3x3x3 kernels and padding 1.
    ///
    /// Input `[P, A, B, C, D, Cin]`, kernel `[3, 3, 3, 3, Cin, Cout]`.
    pub fn conv4d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 6 || ks.len() != 6 || ks[..4] != [3, 3, 3, 3] || ks[4] != xs[5] {
            return Err(TensorError::shape("conv4d", format!("input {xs:?} kernel {ks:?}")));
        }
        let dims = [xs[1], xs[2], xs[3], xs[4]];
        let (p, ci, co) = (xs[0], xs[5], ks[5]);
        let geo = Geo4 { dims };
        let src = self.value(x).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); p * geo.positions() * co];
        geo.for_each_tap(p, |o, s, tap| {
            let (xo, oo) = (s * ci, o * co);
            let kt = tap * ci * co;
            for cin in 0..ci {
                let xv = src[xo + cin];
                if xv == T::zero() {
                    continue;
                }
                let krow = &k[kt + cin * co..kt + (cin + 1) * co];
                for (dst, &kv) in out[oo..oo + co].iter_mut().zip(krow) {
                    *dst = *dst + xv * kv;
                }
            }
        });
        let mut out_shape = xs.clone();
        out_shape[5] = co;
        let out = Tensor::new(&out_shape, out)?;
        self.push(
            "conv4d",
            out,
            &[x, kernel],
            Box::new(move |ctx| {
                let (src, k, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); src.len()]);
                let mut dk = ctx.needs[1].then(|| vec![T::zero(); k.len()]);
                geo.for_each_tap(p, |o, s, tap| {
                    let (xo, oo, kt) = (s * ci, o * co, tap * ci * co);
                    let grow = &g[oo..oo + co];
                    for cin in 0..ci {
                        let krow = kt + cin * co;
                        if let Some(dx) = dx.as_mut() {
                            let acc: T = grow.iter().zip(&k[krow..krow + co]).map(|(&a, &b)| a * b).sum();
                            dx[xo + cin] = dx[xo + cin] + acc;
                        }
                        if let Some(dk) = dk.as_mut() {
                            let xv = src[xo + cin];
                            for (d, &gv) in dk[krow..krow + co].iter_mut().zip(grow) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                });
                vec![
                    dx.map(|d| Tensor::new(ctx.inputs[0].shape(), d).unwrap()),
                    dk.map(|d| Tensor::new(ctx.inputs[1].shape(), d).unwrap()),
                ]
            }),
        )
    }

    /// Depthwise 3x3 convolution (padding 1) over one spatial pair of a
    /// `[P, Hq, Wq, Hs, Ws, C]` tensor, kernel `[3, 3, C]`.
    pub fn conv4d_plane(&mut self, x: Var, kernel: Var, plane: Plane) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 6 || ks != [3, 3, xs[5]] {
            return Err(TensorError::shape("conv4d_plane", format!("input {xs:?} kernel {ks:?}")));
        }
        let ch = xs[5];
        let geo = match plane {
            Plane::Query => PlaneGeo { outer: xs[0], a: xs[1], b: xs[2], inner: xs[3] * xs[4] * ch },
            Plane::Support => PlaneGeo { outer: xs[0] * xs[1] * xs[2], a: xs[3], b: xs[4], inner: ch },
        };
        let src = self.value(x).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); src.len()];
        geo.for_each_tap(|o, s, tap| {
            let kt = &k[tap * ch..(tap + 1) * ch];
            for (dst, xs) in out[o..o + geo.inner].chunks_exact_mut(ch).zip(src[s..s + geo.inner].chunks_exact(ch)) {
                for ((d, &xv), &kv) in dst.iter_mut().zip(xs).zip(kt) {
                    *d = *d + kv * xv;
                }
            }
        });
        let out = Tensor::new(&xs, out)?;
        self.push(
            "conv4d_plane",
            out,
            &[x, kernel],
            Box::new(move |ctx| {
                let (src, k, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); src.len()]);
                let mut dk = ctx.needs[1].then(|| vec![T::zero(); k.len()]);
                geo.for_each_tap(|o, s, tap| {
                    let gs = &g[o..o + geo.inner];
                    if let Some(dx) = dx.as_mut() {
                        let kt = &k[tap * ch..(tap + 1) * ch];
                        for (dst, gc) in dx[s..s + geo.inner].chunks_exact_mut(ch).zip(gs.chunks_exact(ch)) {
                            for ((d, &gv), &kv) in dst.iter_mut().zip(gc).zip(kt) {
                                *d = *d + kv * gv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let dkt = &mut dk[tap * ch..(tap + 1) * ch];
                        for (gc, xs) in gs.chunks_exact(ch).zip(src[s..s + geo.inner].chunks_exact(ch)) {
                            for ((d, &gv), &xv) in dkt.iter_mut().zip(gc).zip(xs) {
                                *d = *d + gv * xv;
                            }
                        }
                    }
                });
                vec![
                    dx.map(|d| Tensor::new(ctx.inputs[0].shape(), d).unwrap()),
                    dk.map(|d| Tensor::new(ctx.inputs[1].shape(), d).unwrap()),
                ]
            }),
        )
    }

    /// Zero-mean, unit-variance rescaling of each consecutive run of `group_len` entries.
    pub fn standardize(&mut self, x: Var, group_len: usize, eps: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if group_len == 0 || n % group_len != 0 {
            return Err(TensorError::shape("standardize", format!("{n} entries in groups of {group_len}")));
        }
        let eps = T::lit(eps);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n];
        let mut inv_std = Vec::with_capacity(n / group_len);
        for (row, dst) in src.chunks(group_len).zip(out.chunks_mut(group_len)) {
            let len = T::lit(group_len as f64);
            let mean = row.iter().copied().sum::<T>() / len;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let is = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.push(
            "standardize",
            out,
            &[x],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let len = T::lit(group_len as f64);
                let mut dx = vec![T::zero(); n];
                for (gi, &is) in inv_std.iter().enumerate() {
                    let r = gi * group_len..(gi + 1) * group_len;
                    let (yr, gr) = (&y[r.clone()], &g[r.clone()]);
                    let sg: T = gr.iter().copied().sum();
                    let sgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dx[r].iter_mut().zip(gr).zip(yr) {
                        *d = is / len * (len * gv - sg - yv * sgy);
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape(), dx).unwrap())]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct Geo4 {
    dims: [usize; 4],
}

impl Geo4 {
    fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    /// Calls `f(out_pos, in_pos, tap)` for every in-bounds kernel tap, positions
    /// counted over `[P, A, B, C, D]`.
    fn for_each_tap(&self, p: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [a, b, c, d] = self.dims;
        let n = self.positions();
        for pi in 0..p {
            for i0 in 0..a {
                for i1 in 0..b {
                    for i2 in 0..c {
                        for i3 in 0..d {
                            let o = pi * n + ((i0 * b + i1) * c + i2) * d + i3;
                            for t0 in 0..3 {
                                let Some(j0) = shifted(i0, t0, 1, a) else { continue };
                                for t1 in 0..3 {
                                    let Some(j1) = shifted(i1, t1, 1, b) else { continue };
                                    for t2 in 0..3 {
                                        let Some(j2) = shifted(i2, t2, 1, c) else { continue };
                                        for t3 in 0..3 {
                                            let Some(j3) = shifted(i3, t3, 1, d) else { continue };
                                            let s = pi * n + ((j0 * b + j1) * c + j2) * d + j3;
                                            f(o, s, ((t0 * 3 + t1) * 3 + t2) * 3 + t3);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct PlaneGeo {
    outer: usize,
    a: usize,
    b: usize,
    inner: usize,
}

impl PlaneGeo {
    /// Calls `f(out_offset, in_offset, tap)` per in-bounds tap; each call covers `inner` entries.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for o in 0..self.outer {
            for y in 0..self.a {
                for x in 0..self.b {
                    let out = ((o * self.a + y) * self.b + x) * self.inner;
                    for ty in 0..3 {
                        let Some(sy) = shifted(y, ty, 1, self.a) else { continue };
                        for tx in 0..3 {
                            let Some(sx) = shifted(x, tx, 1, self.b) else { continue };
                            let src = ((o * self.a + sy) * self.b + sx) * self.inner;
                            f(out, src, ty * 3 + tx);
                        }
                    }
                }
            }
        }
    }
}
