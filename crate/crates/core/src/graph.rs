//! Forward-pass context: a tape, named parameter handles and norm buffers.

use std::collections::HashMap;

use relcorr_tensor::{BatchStats, NormMode, ParamSet, Real, Tape, Tensor, Var, EPS};

use crate::error::{CoreError, Result};

/// Running-statistic update weight.
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    vars: HashMap<String, Var>,
    buffers: Option<&'a ParamSet<T>>,
    pub mode: NormMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Binds every tensor of `params` onto `tape`.
    pub fn bind(
        tape: &'a mut Tape<T>,
        params: &ParamSet<T>,
        requires_grad: bool,
        buffers: Option<&'a ParamSet<T>>,
        mode: NormMode,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Graph { tape, vars, buffers, mode, stats: Vec::new() }
    }

    /// Uses already-recorded handles, e.g. the inputs of a gradient check.
    pub fn from_vars(tape: &'a mut Tape<T>, vars: HashMap<String, Var>, mode: NormMode) -> Self {
        Graph { tape, vars, buffers: None, mode, stats: Vec::new() }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var_map(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    /// Batch norm over the rows of `x` using `{prefix}.scale` / `{prefix}.shift`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        let running = match self.mode {
            NormMode::Train => None,
            NormMode::Eval => {
                let buffers = self.buffers.ok_or_else(|| CoreError::MissingParam(format!("{prefix}.mean")))?;
                let mean = buffers.get(&format!("{prefix}.mean"));
                let var = buffers.get(&format!("{prefix}.var"));
                match (mean, var) {
                    (Some(m), Some(v)) => Some((m.data(), v.data())),
                    _ => return Err(CoreError::MissingParam(format!("{prefix}.mean"))),
                }
            }
        };
        let (y, stats) = self.tape.batch_norm(x, scale, shift, self.mode, running, EPS)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

/// Folds batch statistics into running buffers; the variance uses the unbiased estimate.
pub fn update_running<T: Real>(buffers: &mut ParamSet<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    for (prefix, s) in stats {
        let correction = if s.rows > 1 { s.rows as f64 / (s.rows - 1) as f64 } else { 1.0 };
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let run = buffers.get_mut(&name).ok_or_else(|| CoreError::MissingParam(name.clone()))?;
            let c = if suffix == "var" { T::lit(correction) } else { T::one() };
            for (r, &b) in run.data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - m) * *r + m * b * c;
            }
        }
    }
    Ok(())
}

/// Registers scale/shift parameters and mean/var buffers for a norm layer.
pub fn add_norm<T: Real>(params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, prefix: &str, features: usize) {
    params.insert(format!("{prefix}.scale"), Tensor::ones(&[features]));
    params.insert(format!("{prefix}.shift"), Tensor::zeros(&[features]));
    buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[features]));
    buffers.insert(format!("{prefix}.var"), Tensor::ones(&[features]));
}
