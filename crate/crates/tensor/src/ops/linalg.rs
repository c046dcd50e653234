//! Matrix products backed by `matrixmultiply` kernels.

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn op_dims(rows: usize, cols: usize, trans: bool) -> (usize, usize) {
    if trans {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

/// Batched `op(a) @ op(b)` over raw buffers; `a` is `[batch, ar, ac]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_product<T: Real>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    batch: usize,
    out: &mut [T],
) {
    let (m, _) = op_dims(ar, ac, ta);
    let (_, n) = op_dims(br, bc, tb);
    for i in 0..batch {
        let mut am = MatRef::new(&a[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        if ta {
            am = am.t();
        }
        let mut bm = MatRef::new(&b[i * br * bc..(i + 1) * br * bc], br, bc);
        if tb {
            bm = bm.t();
        }
        gemm(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
}

impl<T: Real> Tape<T> {
    /// `op(a) @ op(b)` for rank-2 operands; `ta`/`tb` select transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c3 = self.bmm_t(a3, b3, ta, tb)?;
        let s = self.shape(c3).to_vec();
        self.reshape(c3, &[s[1], s[2]])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[batch, ., .]` operands.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shape("bmm", format!("{sa:?} @ {sb:?}")));
        }
        let batch = sa[0];
        let (ar, ac) = (sa[1], sa[2]);
        let (br, bc) = (sb[1], sb[2]);
        let (m, k) = op_dims(ar, ac, ta);
        let (k2, n) = op_dims(br, bc, tb);
        if k != k2 {
            return Err(TensorError::shape(
                "bmm",
                format!("{sa:?}{} @ {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        batched_product(
            self.value(a).data(),
            (ar, ac),
            ta,
            self.value(b).data(),
            (br, bc),
            tb,
            batch,
            &mut out,
        );
        let out = Tensor::new(&[batch, m, n], out)?;
        self.push(
            "bmm",
            out,
            &[a, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
                // with A' = op(A), B' = op(B): dA' = G B'^T, dB' = A'^T G
                let da = c.needs[0].then(|| {
                    let mut da = vec![T::zero(); batch * ar * ac];
                    if ta {
                        // dA = B' G^T  ([k, m])
                        batched_product(bv, (br, bc), tb, g, (m, n), true, batch, &mut da);
                    } else {
                        batched_product(g, (m, n), false, bv, (br, bc), !tb, batch, &mut da);
                    }
                    Tensor::new(&[batch, ar, ac], da).unwrap()
                });
                let db = c.needs[1].then(|| {
                    let mut db = vec![T::zero(); batch * br * bc];
                    if tb {
                        // dB = G^T A'  ([n, k])
                        batched_product(g, (m, n), true, av, (ar, ac), ta, batch, &mut db);
                    } else {
                        batched_product(av, (ar, ac), !ta, g, (m, n), false, batch, &mut db);
                    }
                    Tensor::new(&[batch, br, bc], db).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_t(a, b, false, false)
    }
}
