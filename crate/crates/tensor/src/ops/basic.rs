//! Elementwise, shape and reduction primitives.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| zip_map(c.grad, c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| zip_map(c.grad, c.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, &[x], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    /// Adds a length-`F` vector to every row of a `[..., F]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let f = *self.shape(x).last().unwrap();
        if self.shape(bias) != [f] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(f) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        self.push(
            "add_bias",
            out,
            &[x, bias],
            Box::new(move |c| {
                let db = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); f];
                    for row in c.grad.data().chunks(f) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    Tensor::new(&[f], acc).unwrap()
                });
                vec![Some(c.grad.clone()), db]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(
            "relu",
            out,
            &[x],
            Box::new(|c| {
                vec![Some(zip_map(c.grad, c.inputs[0], |g, v| if v > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(
            "clamp",
            out,
            &[x],
            Box::new(move |c| {
                vec![Some(zip_map(c.grad, c.inputs[0], |g, v| {
                    if v >= lo && v <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).unwrap())]),
        )
    }

    /// Gathers slices along axis 0; repeated indices accumulate gradient.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if indices.is_empty() {
            return Err(TensorError::shape("index_select", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::shape(
                "index_select",
                format!("index {bad} out of range for axis of {}", shape[0]),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let out = Tensor::new(&out_shape, data)?;
        let idx = indices.to_vec();
        self.push(
            "index_select",
            out,
            &[x],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(c.inputs[0].shape());
                let d = dx.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    let g = &c.grad.data()[k * row..(k + 1) * row];
                    for (a, &b) in d[i * row..(i + 1) * row].iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Sums out `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("reduce", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let norm = if mean { T::one() / T::lit(len as f64) } else { T::one() };
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v = *v * norm;
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, data)?;
        self.push(
            if mean { "mean_axis" } else { "sum_axis" },
            out,
            &[x],
            Box::new(move |c| {
                let g = c.grad.data();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * norm;
                        }
                    }
                }
                vec![Some(Tensor::new(c.inputs[0].shape(), dx).unwrap())]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }
}
