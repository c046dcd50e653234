//! Central-difference verification of tape gradients, run in `f64`.

use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat coordinate of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences at `inputs`.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output coordinate contributes. `step` is snapped to the nearest power of
/// two so `x +- step` carries no representation error in the step itself.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&step) {
        return Err(TensorError::param("grad_check", format!("step {step} outside [1e-4, 1e-2]")));
    }
    let h = 2f64.powi(step.log2().round() as i32);

    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), want_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let w = projection.get_or_insert_with(|| {
                let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed);
                Tensor::uniform(&shape, -1.0, 1.0, &mut rng)
            });
            let w = tape.constant(w.clone());
            let p = tape.mul(out, w)?;
            tape.sum_all(p)?
        };
        let value = tape.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[ti].data_mut()[j] = x0 + h;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[j] = x0 - h;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let a = analytic[ti].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (ti, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
