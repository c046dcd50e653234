//! Operations composed from primitives.

use super::nn::EPS;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Cosine similarity of two vectors, `a.b / (max(|a|, eps) max(|b|, eps))`, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T], eps: f64) -> Result<T> {
    if a.len() != b.len() {
        return Err(TensorError::shape("cosine_sim", format!("lengths {} and {}", a.len(), b.len())));
    }
    let eps = T::lit(eps);
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

impl<T: Real> Tape<T> {
    /// Row-wise cosine similarity of two `[..., F]` tensors, giving `[...]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let rank = self.shape(a).len();
        let na = self.l2_normalize(a, EPS)?;
        let nb = self.l2_normalize(b, EPS)?;
        let p = self.mul(na, nb)?;
        let s = self.sum_axis(p, rank - 1)?;
        self.clamp(s, -1.0, 1.0)
    }
}
