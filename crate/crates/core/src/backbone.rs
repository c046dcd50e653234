//! Small convolutional extractor producing the base representation `Z`.

use rand::Rng;
use relcorr_tensor::{init, ParamSet, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::graph::{add_norm, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub channels: usize,
    pub layers: usize,
    /// Max-pool factor applied after the stage; 1 keeps the extent.
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<Stage>,
    /// Identity skips around layers whose input and output channels agree.
    pub residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels, pool| Stage { channels, layers: 1, pool };
        BackboneConfig {
            input_size: 32,
            in_channels: 3,
            stages: vec![stage(64, 2), stage(64, 2), stage(128, 2), stage(256, 1)],
            residual: false,
        }
    }
}

impl BackboneConfig {
    /// Spatial extent and channel count of `Z`, pooling with floor division.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let mut size = self.input_size;
        for s in &self.stages {
            size /= s.pool.max(1);
        }
        (size, size, self.out_channels())
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CoreError::config("backbone.channels", "at least one stage is required"));
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(CoreError::config("backbone.input_size", "extents must be positive"));
        }
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.layers == 0 || s.pool == 0 {
                return Err(CoreError::config("backbone.channels", format!("stage {i} has a zero entry")));
            }
            if size % s.pool != 0 {
                return Err(CoreError::config(
                    "backbone.pool",
                    format!("stage {i}: extent {size} is not divisible by pool {}", s.pool),
                ));
            }
            size /= s.pool;
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, rng: &mut impl Rng) {
        let mut cin = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            for j in 0..s.layers {
                let p = layer_prefix(i, j);
                params.insert(format!("{p}.conv.weight"), init::kaiming(&[3, 3, cin, s.channels], 9 * cin, rng));
                add_norm(params, buffers, &format!("{p}.bn"), s.channels);
                cin = s.channels;
            }
        }
    }
}

fn layer_prefix(stage: usize, layer: usize) -> String {
    format!("backbone.s{stage}.l{layer}")
}

/// Images `[B, H, W, Cin]` to base maps `[B, h, w, C]`.
pub fn extract_base<T: Real>(g: &mut Graph<'_, T>, cfg: &BackboneConfig, images: Var) -> Result<Var> {
    let shape = g.tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != cfg.input_size || shape[2] != cfg.input_size || shape[3] != cfg.in_channels {
        return Err(CoreError::Tensor(relcorr_tensor::TensorError::Shape {
            op: "extract_base",
            detail: format!(
                "images {shape:?}, expected [B, {s}, {s}, {}]",
                cfg.in_channels,
                s = cfg.input_size
            ),
        }));
    }
    let mut x = images;
    for (i, s) in cfg.stages.iter().enumerate() {
        for j in 0..s.layers {
            let p = layer_prefix(i, j);
            let k = g.param(&format!("{p}.conv.weight"))?;
            let y = g.tape.conv2d(x, k, 1, 1)?;
            let dims = g.tape.shape(y).to_vec();
            let rows = g.tape.reshape(y, &[dims[0] * dims[1] * dims[2], dims[3]])?;
            let n = g.batch_norm(rows, &format!("{p}.bn"))?;
            let n = g.tape.reshape(n, &dims)?;
            let mut y = g.tape.relu(n)?;
            if cfg.residual && g.tape.shape(x) == dims.as_slice() {
                y = g.tape.add(y, x)?;
            }
            x = y;
        }
        if s.pool > 1 {
            x = g.tape.max_pool2d(x, s.pool)?;
        }
    }
    Ok(x)
}

/// `[B, H, W, C]` to per-map channel means `[B, C]`.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return Err(CoreError::Tensor(relcorr_tensor::TensorError::Shape {
            op: "global_avg_pool",
            detail: format!("expected [B, H, W, C], got {s:?}"),
        }));
    }
    let flat = tape.reshape(z, &[s[0], s[1] * s[2], s[3]])?;
    let m = tape.mean_axis(flat, 1)?;
    Ok(tape.reshape(m, &[s[0], s[3]])?)
}

/// `logit = z W + b` for `z [B, C]`, `W [C, K]`, `b [K]`.
pub fn head_logits<T: Real>(tape: &mut Tape<T>, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(z, weight)?;
    Ok(tape.add_bias(y, bias)?)
}

pub fn init_head<T: Real>(params: &mut ParamSet<T>, channels: usize, classes: usize, rng: &mut impl Rng) {
    params.insert("head.weight", init::kaiming(&[channels, classes], channels, rng));
    params.insert("head.bias", Tensor::zeros(&[classes]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use relcorr_tensor::NormMode;

    fn run(cfg: &BackboneConfig, images: Tensor<f32>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut buffers) = (ParamSet::new(), ParamSet::new());
        cfg.init_params(&mut params, &mut buffers, &mut rng);
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &params, false, Some(&buffers), NormMode::Train);
        let x = g.tape.constant(images);
        let z = extract_base(&mut g, cfg, x).unwrap();
        tape.value(z).clone()
    }

    fn desk(channels: &[usize]) -> BackboneConfig {
        BackboneConfig {
            stages: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Stage { channels: c, layers: 1, pool: if i < 3 { 2 } else { 1 } })
                .collect(),
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn desk_config_shape_arithmetic() {
        let cfg = desk(&[16, 32, 64]);
        assert_eq!(cfg.output_shape(), (4, 4, 64));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = run(&cfg, Tensor::randn(&[2, 32, 32, 3], 1.0, &mut rng), 1);
        assert_eq!(z.shape(), &[2, 4, 4, 64]);
        assert_eq!(BackboneConfig::default().output_shape(), (4, 4, 256));
    }

    #[test]
    fn paper_scale_reference_extent() {
        let cfg = BackboneConfig {
            input_size: 84,
            in_channels: 3,
            stages: [64, 160, 320, 640].iter().map(|&c| Stage { channels: c, layers: 1, pool: 2 }).collect(),
            residual: false,
        };
        assert_eq!(cfg.output_shape(), (5, 5, 640));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = run(&cfg, Tensor::randn(&[1, 84, 84, 3], 1.0, &mut rng), 3);
        assert_eq!(z.shape(), &[1, 5, 5, 640]);
        // 21 -> 10 floors, which trainable configs reject
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let cfg = desk(&[8, 8, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 32, 32, 3], 1.0, &mut rng);
        let a = run(&cfg, x.clone(), 9);
        let b = run(&cfg, x, 9);
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_input_extent_is_rejected() {
        let cfg = desk(&[8, 8, 8]);
        let mut params = ParamSet::<f32>::new();
        let mut buffers = ParamSet::new();
        cfg.init_params(&mut params, &mut buffers, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &params, false, Some(&buffers), NormMode::Train);
        let x = g.tape.constant(Tensor::zeros(&[1, 28, 28, 3]));
        assert!(extract_base(&mut g, &cfg, x).is_err());
    }

    #[test]
    fn config_shapes_over_matrix() {
        for (size, pools, want) in [(32, vec![2, 2, 2], 4), (32, vec![2, 2, 1], 8), (16, vec![4], 4), (24, vec![2, 3], 4)] {
            let cfg = BackboneConfig {
                input_size: size,
                in_channels: 3,
                stages: pools.iter().map(|&p| Stage { channels: 4, layers: 2, pool: p }).collect(),
                residual: true,
            };
            cfg.validate().unwrap();
            assert_eq!(cfg.output_shape(), (want, want, 4));
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let z = run(&cfg, Tensor::randn(&[1, size, size, 3], 1.0, &mut rng), 0);
            assert_eq!(z.shape(), &[1, want, want, 4]);
        }
        let bad = BackboneConfig { input_size: 30, ..desk(&[4, 4, 4]) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::full(&[1, 3, 2, 4], 3.0));
        let p = global_avg_pool(&mut tape, z).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0; 4]);
        let z = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 5.0]).unwrap());
        let p = global_avg_pool(&mut tape, z).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
    }

    #[test]
    fn global_avg_pool_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f32>::randn(&[1, 4, 4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let p = global_avg_pool(&mut tape, zv).unwrap();
        for c in 0..8 {
            let mut acc = 0.0f64;
            for y in 0..4 {
                for x in 0..4 {
                    acc += z.at(&[0, y, x, c]) as f64;
                }
            }
            assert!((tape.value(p).data()[c] as f64 - acc / 16.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_logit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f32>::new();
        let w = Tensor::randn(&[6, 10], 1.0, &mut rng);
        let b = Tensor::randn(&[10], 1.0, &mut rng);
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let zero = tape.constant(Tensor::zeros(&[1, 6]));
        let l = head_logits(&mut tape, zero, wv, bv).unwrap();
        assert_eq!(tape.value(l).data(), b.data());

        let mut onehot = Tensor::zeros(&[1, 6]);
        onehot.set(&[0, 2], 1.0);
        let oh = tape.constant(onehot);
        let bz = tape.constant(Tensor::zeros(&[10]));
        let l = head_logits(&mut tape, oh, wv, bz).unwrap();
        assert_eq!(tape.value(l).data(), &w.data()[20..30]);

        let z = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let zv = tape.constant(z.clone());
        let l = head_logits(&mut tape, zv, wv, bv).unwrap();
        for k in 0..10 {
            let want: f64 = (0..6).map(|c| z.data()[c] as f64 * w.at(&[c, k]) as f64).sum::<f64>() + b.data()[k] as f64;
            assert!((tape.value(l).data()[k] as f64 - want).abs() < 1e-6);
        }
        let bad = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(head_logits(&mut tape, bad, wv, bv).is_err());
    }
}
