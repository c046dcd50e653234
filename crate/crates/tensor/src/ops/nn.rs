//! Normalization and probability primitives.

use super::basic::axis_split;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor shared by every norm and variance.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-feature batch statistics returned by a train-mode [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub rows: usize,
}

/// Mean and population variance of each column of a row-major `[rows, features]` buffer.
pub fn batch_stats<T: Real>(data: &[T], features: usize) -> Result<BatchStats<T>> {
    if features == 0 || data.is_empty() {
        return Err(TensorError::EmptyBatch { op: "batch_norm" });
    }
    let rows = data.len() / features;
    let mut mean = vec![0f64; features];
    for row in data.chunks(features) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0f64; features];
    for row in data.chunks(features) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    Ok(BatchStats {
        mean: mean.into_iter().map(T::lit).collect(),
        var: var.into_iter().map(T::lit).collect(),
        rows,
    })
}

impl<T: Real> Tape<T> {
    /// Softmax of `x / temperature` along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::param("softmax", format!("temperature {temperature} must be > 0")));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let inv_t = T::lit(1.0 / temperature);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = ((src[at(a)] - mx) * inv_t).exp();
                    out[at(a)] = e;
                    z = z + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / z;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(
            "softmax",
            out,
            &[x],
            Box::new(move |c| {
                let (y, g) = (c.output.data(), c.grad.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot) * inv_t;
                        }
                    }
                }
                vec![Some(Tensor::new(c.output.shape(), dx).unwrap())]
            }),
        )
    }

    /// Mean over rows of `-log softmax(logits / temperature)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::param(
                "cross_entropy",
                format!("temperature {temperature} must be > 0"),
            ));
        }
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let (rows, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::param("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let inv_t = T::lit(1.0 / temperature);
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = ((v - mx) * inv_t).exp();
                z = z + *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            total = total + (z.ln() - (row[targets[r]] - mx) * inv_t);
        }
        let out = Tensor::scalar(total / T::lit(rows as f64));
        let targets = targets.to_vec();
        self.push(
            "cross_entropy",
            out,
            &[logits],
            Box::new(move |c| {
                let scale = c.grad.item() * inv_t / T::lit(rows as f64);
                let mut dx = probs;
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] = dx[r * k + t] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * scale);
                vec![Some(Tensor::new(&[rows, k], dx).unwrap())]
            }),
        )
    }

    /// `x / max(|x|, eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().unwrap();
        let eps = T::lit(eps);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / f);
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(f).zip(out.chunks_mut(f)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = n.max(eps);
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v / d;
            }
            norms.push(n);
        }
        let out = Tensor::new(&shape, out)?;
        self.push(
            "l2_normalize",
            out,
            &[x],
            Box::new(move |c| {
                let (y, g) = (c.output.data(), c.grad.data());
                let mut dx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * f..(r + 1) * f], &g[r * f..(r + 1) * f]);
                    let dst = &mut dx[r * f..(r + 1) * f];
                    if n > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gy), &yy) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = (gy - yy * dot) / n;
                        }
                    } else {
                        for (d, &gy) in dst.iter_mut().zip(gr) {
                            *d = gy / eps;
                        }
                    }
                }
                vec![Some(Tensor::new(c.output.shape(), dx).unwrap())]
            }),
        )
    }

    /// Batch normalization of `[rows, F]` with affine `scale`/`shift`.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can fold them into running averages; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::shape("batch_norm", format!("expected [rows, F], got {shape:?}")));
        }
        let (rows, f) = (shape[0], shape[1]);
        if self.shape(scale) != [f] || self.shape(shift) != [f] {
            return Err(TensorError::shape("batch_norm", "affine parameters must have length F"));
        }
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let s = batch_stats(self.value(x).data(), f)?;
                (s.mean.clone(), s.var.clone(), Some(s))
            }
            NormMode::Eval => {
                let (m, v) = running.ok_or_else(|| {
                    TensorError::param("batch_norm", "eval mode requires running statistics")
                })?;
                if m.len() != f || v.len() != f {
                    return Err(TensorError::shape("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); rows * f];
        let mut out = vec![T::zero(); rows * f];
        for r in 0..rows {
            for j in 0..f {
                let h = (src[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = h * gamma[j] + beta[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        let v = self.push(
            "batch_norm",
            out,
            &[x, scale, shift],
            Box::new(move |c| {
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for r in 0..rows {
                    for j in 0..f {
                        dbeta[j] = dbeta[j] + g[r * f + j];
                        dgamma[j] = dgamma[j] + g[r * f + j] * xhat[r * f + j];
                    }
                }
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![T::zero(); rows * f];
                    match mode {
                        NormMode::Train => {
                            let n = T::lit(rows as f64);
                            for r in 0..rows {
                                for j in 0..f {
                                    // dxhat = g * gamma; sums of dxhat reduce to dbeta/dgamma
                                    let dh = g[r * f + j] * gamma[j];
                                    dx[r * f + j] = inv_std[j] / n
                                        * (n * dh
                                            - dbeta[j] * gamma[j]
                                            - xhat[r * f + j] * dgamma[j] * gamma[j]);
                                }
                            }
                        }
                        NormMode::Eval => {
                            for r in 0..rows {
                                for j in 0..f {
                                    dx[r * f + j] = g[r * f + j] * gamma[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    Tensor::new(&[rows, f], dx).unwrap()
                });
                vec![
                    dx,
                    Some(Tensor::new(&[f], dgamma).unwrap()),
                    Some(Tensor::new(&[f], dbeta).unwrap()),
                ]
            }),
        )?;
        Ok((v, stats))
    }
}
