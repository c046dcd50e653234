//! The sequential training loop, its log and resumption.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcorr_core::episodic::{sample_episode, stream_seed, Split};
use relcorr_core::model::{base_maps, train_step, Batch, Model};
use relcorr_core::{backbone, episodic};
use relcorr_tensor::{Sgd, Tape, Tensor};

use crate::checkpoint::{epoch_dir, Checkpoint};
use crate::config::{AnchorBatch, RunConfig, TrainConfig};
use crate::dataset::{augment, load_dataset, CROP_RANGE};
use crate::error::{CliError, Result};

pub const LOG_HEADER: &str = "epoch,step,anchor_loss,metric_loss,combined_loss,lr";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub anchor: f64,
    pub metric: f64,
    pub combined: f64,
    pub lr: f64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{}", self.epoch, self.step, self.anchor, self.metric, self.combined, self.lr)
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub train: TrainConfig,
    pub model: Model<f32>,
    pub sgd: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, classes: usize) -> Result<Self> {
        let train = config.train()?;
        let model = Model::new(config.model()?, classes, train.seed)?;
        let schedule = train.decay_epochs.iter().map(|&e| (e, train.decay_factor)).collect();
        let sgd = Sgd::new(train.lr, train.momentum, schedule)?;
        Ok(Trainer { config: config.clone(), train, model, sgd, epoch: 0 })
    }

    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, ckpt.classes)?;
        ckpt.apply(&mut t.model)?;
        t.sgd.set_velocity(ckpt.velocity.clone());
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            classes: self.model.classes,
            config: self.config.clone(),
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            velocity: self.sgd.velocity().clone(),
        }
    }

    /// The batch of step `step` in epoch `epoch`, a pure function of the seed.
    pub fn batch(&self, split: &Split, epoch: usize, step: usize) -> Result<Batch> {
        let t = &self.train;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(t.seed, &[epoch as u64, step as u64]));
        let episode = sample_episode(split, t.way, t.shot, t.query, &mut rng)?;
        let layout = episode.layout();
        let mut picks: Vec<(usize, usize)> = episode.items().map(|it| (it.class, it.image)).collect();
        let (anchor_rows, anchor_labels): (Vec<usize>, Vec<usize>) = match t.anchor_batch {
            AnchorBatch::Episode => episode.queries.iter().enumerate().map(|(i, it)| (layout.supports() + i, it.class)).unzip(),
            AnchorBatch::Independent(n) => {
                let total = split.image_count();
                (0..n)
                    .map(|i| {
                        let mut k = rng.gen_range(0..total);
                        let class = split.classes.iter().position(|c| {
                            let hit = k < c.images.len();
                            if !hit {
                                k -= c.images.len();
                            }
                            hit
                        });
                        let class = class.expect("index below image count");
                        picks.push((class, k));
                        (layout.images() + i, class)
                    })
                    .unzip()
            }
        };
        let size: Vec<usize> = split.classes[0].images[0].shape().to_vec();
        let mut data = Vec::with_capacity(picks.len() * size.iter().product::<usize>());
        for &(c, i) in &picks {
            let img = &split.classes[c].images[i];
            if t.augment {
                let flip = rng.gen::<bool>();
                let (dy, dx) = (rng.gen_range(0..=CROP_RANGE), rng.gen_range(0..=CROP_RANGE));
                data.extend_from_slice(augment(img, flip, dy, dx).data());
            } else {
                data.extend_from_slice(img.data());
            }
        }
        let images = Tensor::new(&[&[picks.len()], size.as_slice()].concat(), data)?;
        Ok(Batch { images, layout, query_labels: episode.query_labels(), anchor_rows, anchor_labels })
    }

    /// Runs every step of the next epoch and returns its log rows.
    pub fn run_epoch(&mut self, split: &Split) -> Result<Vec<LogRow>> {
        let epoch = self.epoch;
        let lr = self.sgd.rate_at(epoch);
        let loss = self.config.loss()?;
        let mut rows = Vec::with_capacity(self.train.steps_per_epoch);
        for step in 0..self.train.steps_per_epoch {
            let batch = self.batch(split, epoch, step)?;
            let l = train_step(&mut self.model, &mut self.sgd, &loss, &batch, epoch)?;
            rows.push(LogRow { epoch, step, anchor: l.anchor, metric: l.metric, combined: l.combined, lr });
        }
        self.epoch += 1;
        Ok(rows)
    }
}

/// Fraction of `split` images the anchor head labels correctly, with running norm statistics.
pub fn anchor_accuracy(model: &Model<f32>, split: &Split) -> Result<f64> {
    let images: Vec<&Tensor<f32>> = split.classes.iter().flat_map(|c| c.images.iter()).collect();
    let labels: Vec<usize> = split.classes.iter().enumerate().flat_map(|(k, c)| std::iter::repeat(k).take(c.images.len())).collect();
    let maps = base_maps(model, &images, 64)?;
    let mut tape = Tape::new();
    let z = tape.constant(relcorr_core::model::stack(&maps.iter().collect::<Vec<_>>())?);
    let pooled = backbone::global_avg_pool(&mut tape, z)?;
    let w = tape.constant(model.params.require("head.weight")?.clone());
    let b = tape.constant(model.params.require("head.bias")?.clone());
    let logits = backbone::head_logits(&mut tape, pooled, w, b)?;
    let k = model.classes;
    let correct = tape
        .value(logits)
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &y)| episodic::classify_query(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn log_lines_before(path: &Path, epoch: usize) -> Result<Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
        .map(str::to_string)
        .collect())
}

/// Trains per the config, writing `epoch_NNN` checkpoints and the step log under `train.out`.
pub fn train_command(config: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let tc = config.train()?;
    let data = load_dataset(&tc.dataset)?;
    let split = data.split("train")?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(config, &Checkpoint::load(dir)?)?,
        None => Trainer::new(config, split.classes.len())?,
    };
    std::fs::create_dir_all(&tc.out).map_err(|e| CliError::io(&tc.out, e))?;
    let log_path = tc.out.join(LOG_FILE);
    let kept = log_lines_before(&log_path, trainer.epoch)?;
    let mut log = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let io = |e| CliError::io(&log_path, e);
    writeln!(log, "{LOG_HEADER}").map_err(io)?;
    for line in kept {
        writeln!(log, "{line}").map_err(io)?;
    }
    let mut last = epoch_dir(&tc.out, trainer.epoch);
    while trainer.epoch < tc.epochs {
        for row in trainer.run_epoch(split)? {
            writeln!(log, "{row}").map_err(io)?;
        }
        log.flush().map_err(io)?;
        last = epoch_dir(&tc.out, trainer.epoch);
        trainer.checkpoint().save(&last)?;
    }
    Ok(last)
}
