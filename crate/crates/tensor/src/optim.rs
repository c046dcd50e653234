use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    learning_rate: f64,
    momentum: f64,
    /// `(epoch, multiplier)`: from `epoch` onward the rate is multiplied by `multiplier`.
    schedule: Vec<(usize, f64)>,
    velocity: ParamSet<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, schedule: Vec<(usize, f64)>) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(TensorError::param("sgd", format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::param("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(TensorError::param("sgd", "schedule epochs must be strictly increasing"));
        }
        if schedule.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(TensorError::param("sgd", "schedule multipliers must be > 0"));
        }
        Ok(Self { learning_rate, momentum, schedule, velocity: ParamSet::new() })
    }

    pub fn base_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.learning_rate, |lr, &(_, m)| lr * m)
    }

    pub fn velocity(&self) -> &ParamSet<T> {
        &self.velocity
    }

    /// Restores velocities saved from an earlier run.
    pub fn set_velocity(&mut self, velocity: ParamSet<T>) {
        self.velocity = velocity;
    }

    /// Applies one update. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::shape(
                "sgd",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        let lr = T::lit(self.rate_at(epoch));
        let mu = T::lit(self.momentum);
        let names: Vec<String> = params.names().to_vec();
        for ((name, theta), g) in names.iter().zip(params.tensors_mut()).zip(grads) {
            if let Some(g) = g {
                if g.shape() != theta.shape() {
                    return Err(TensorError::shape(
                        "sgd",
                        format!("gradient {:?} for `{name}` {:?}", g.shape(), theta.shape()),
                    ));
                }
            }
            if self.velocity.get(name).is_none() {
                self.velocity.insert(name.clone(), Tensor::zeros(theta.shape()));
            }
            let v = self.velocity.get_mut(name).unwrap();
            if v.shape() != theta.shape() {
                return Err(TensorError::shape("sgd", format!("velocity shape for `{name}`")));
            }
            let gdata = g.as_ref().map(Tensor::data);
            for (i, (vi, ti)) in v.data_mut().iter_mut().zip(theta.data_mut()).enumerate() {
                let gi = gdata.map_or(T::zero(), |g| g[i]);
                *vi = mu * *vi + gi;
                *ti = *ti - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_two_steps_unroll_the_recurrence() {
        let mut opt = Sgd::<f64>::new(0.1, 0.9, vec![]).unwrap();
        let mut p = one_param(1.0);
        let g = vec![Some(Tensor::scalar(1.0))];
        opt.step(&mut p, &g, 0).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-12);
        assert_eq!(opt.velocity().get("w").unwrap().item(), 1.0);
        opt.step(&mut p, &g, 0).unwrap();
        assert!((opt.velocity().get("w").unwrap().item() - 1.9).abs() < 1e-12);
        assert!((p.get("w").unwrap().item() - (0.9 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn schedule_applies_at_configured_epochs() {
        let opt = Sgd::<f32>::new(0.1, 0.9, vec![(60, 0.05), (70, 0.05)]).unwrap();
        assert_eq!(opt.rate_at(59), 0.1);
        assert!((opt.rate_at(60) - 0.005).abs() < 1e-15);
        assert!((opt.rate_at(69) - 0.005).abs() < 1e-15);
        assert!((opt.rate_at(70) - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(Sgd::<f32>::new(0.0, 0.9, vec![]).is_err());
        assert!(Sgd::<f32>::new(0.1, 1.0, vec![]).is_err());
        assert!(Sgd::<f32>::new(0.1, 0.9, vec![(5, 0.1), (5, 0.1)]).is_err());
        let mut opt = Sgd::<f64>::new(0.1, 0.9, vec![]).unwrap();
        let mut p = one_param(1.0);
        let bad = vec![Some(Tensor::zeros(&[2]))];
        assert!(matches!(opt.step(&mut p, &bad, 0), Err(TensorError::Shape { .. })));
    }
}
