//! The full network and its training step and evaluation loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use relcorr_tensor::{NormMode, ParamSet, Real, Sgd, Tape, Tensor, Var};

use crate::backbone::{self, BackboneConfig};
use crate::cca::{self, CcaConfig, PairEmbedding};
use crate::episodic::{self, EvalReport, Layout, Split};
use crate::error::{CoreError, Result};
use crate::graph::{update_running, Graph};
use crate::scr::{self, ScrConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.2, lambda: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CoreError::config("loss.tau", format!("{} must be positive", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::config("loss.lambda", format!("{} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub scr: ScrConfig,
    pub cca: CcaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (h, w, c) = self.backbone.output_shape();
        self.scr.validate(c, h.min(w))?;
        self.cca.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub classes: usize,
    pub params: ParamSet<T>,
    /// Running norm statistics.
    pub buffers: ParamSet<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(CoreError::config("train.dataset", "training split has no classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut buffers) = (ParamSet::new(), ParamSet::new());
        config.backbone.init_params(&mut params, &mut buffers, &mut rng);
        let c = config.backbone.out_channels();
        backbone::init_head(&mut params, c, classes, &mut rng);
        if config.scr.enabled {
            config.scr.init_params(c, &mut params, &mut buffers, &mut rng);
        }
        config.cca.init_params(c, &mut params, &mut buffers, &mut rng);
        Ok(Model { config, classes, params, buffers })
    }
}

/// Episode-level outputs after the relational modules.
pub struct Relation {
    /// `[Q, N]` similarities of each class view with its prototype.
    pub sims: Var,
    pub pairs: PairEmbedding,
}

/// Shift, SCR, CCA and view aggregation over base maps `z` in batch order.
pub fn relate<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, z: Var, layout: Layout) -> Result<Relation> {
    let shifted = episodic::shift_channel_mean(g.tape, z)?;
    let f = scr::scr_forward(g, &cfg.scr, shifted)?;
    let pairs = cca::relational_embed_pairs(g, &cfg.cca, f, &layout.pairs())?;
    let q_bar = episodic::aggregate_views(g.tape, pairs.q, layout)?;
    let s_bar = episodic::aggregate_views(g.tape, pairs.s, layout)?;
    let sims = episodic::class_similarities(g.tape, q_bar, s_bar)?;
    Ok(Relation { sims, pairs })
}

/// One optimization batch: an episode plus optional extra anchor images.
pub struct Batch {
    /// `[B, H, W, C]`; the first `layout.images()` rows are the episode.
    pub images: Tensor<f32>,
    pub layout: Layout,
    pub query_labels: Vec<usize>,
    /// Rows of `images` used by the anchor loss and their train-class labels.
    pub anchor_rows: Vec<usize>,
    pub anchor_labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub anchor: f64,
    pub metric: f64,
    pub combined: f64,
}

struct Forward {
    anchor: Var,
    metric: Var,
    combined: Var,
}

fn forward_losses<T: Real>(g: &mut Graph<'_, T>, model_cfg: &ModelConfig, loss: &LossConfig, batch: &Batch) -> Result<Forward> {
    let images = g.tape.constant(batch.images.cast());
    let z = backbone::extract_base(g, &model_cfg.backbone, images)?;
    let episode_z = if g.tape.shape(z)[0] == batch.layout.images() {
        z
    } else {
        let rows: Vec<usize> = (0..batch.layout.images()).collect();
        g.tape.index_select(z, &rows)?
    };
    let pooled = backbone::global_avg_pool(g.tape, z)?;
    let anchor_z = g.tape.index_select(pooled, &batch.anchor_rows)?;
    let (hw, hb) = (g.param("head.weight")?, g.param("head.bias")?);
    let logits = backbone::head_logits(g.tape, anchor_z, hw, hb)?;
    let anchor = episodic::anchor_loss(g.tape, logits, &batch.anchor_labels)?;
    let rel = relate(g, model_cfg, episode_z, batch.layout)?;
    let metric = episodic::metric_loss(g.tape, rel.sims, &batch.query_labels, loss.tau)?;
    let combined = episodic::combined_loss(g.tape, anchor, metric, loss.lambda)?;
    Ok(Forward { anchor, metric, combined })
}

/// Losses on `batch` with train-mode norms and no parameter change.
pub fn batch_losses<T: Real>(model: &Model<T>, loss: &LossConfig, batch: &Batch) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, &model.params, false, Some(&model.buffers), NormMode::Train);
    let f = forward_losses(&mut g, &model.config, loss, batch)?;
    let v = |x: Var| tape.value(x).item().as_f64();
    Ok(StepLosses { anchor: v(f.anchor), metric: v(f.metric), combined: v(f.combined) })
}

/// Forward, backward and one SGD update of `model`.
pub fn train_step<T: Real>(model: &mut Model<T>, sgd: &mut Sgd<T>, loss: &LossConfig, batch: &Batch, epoch: usize) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, &model.params, true, Some(&model.buffers), NormMode::Train);
    let f = forward_losses(&mut g, &model.config, loss, batch)?;
    let stats = g.take_stats();
    let vars: Vec<Var> = model.params.names().iter().map(|n| g.param(n)).collect::<Result<_>>()?;
    let v = |x: Var| tape.value(x).item().as_f64();
    let losses = StepLosses { anchor: v(f.anchor), metric: v(f.metric), combined: v(f.combined) };
    let mut grads = tape.backward(f.combined)?;
    let gs: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
    sgd.step(&mut model.params, &gs, epoch)?;
    update_running(&mut model.buffers, &stats)?;
    Ok(losses)
}

/// Eval-mode base maps, one `[H, W, C]` tensor per image.
pub fn base_maps(model: &Model<f32>, images: &[&Tensor<f32>], chunk: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for group in images.chunks(chunk.max(1)) {
        let shape = group[0].shape().to_vec();
        let mut data = Vec::with_capacity(group.len() * group[0].numel());
        for img in group {
            data.extend_from_slice(img.data());
        }
        let batch = Tensor::new(&[&[group.len()], shape.as_slice()].concat(), data)?;
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &model.params, false, Some(&model.buffers), NormMode::Eval);
        let x = g.tape.constant(batch);
        let z = backbone::extract_base(&mut g, &model.config.backbone, x)?;
        let z = tape.value(z);
        let per = z.numel() / group.len();
        for i in 0..group.len() {
            out.push(Tensor::new(&z.shape()[1..], z.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

/// Stacks per-image maps in episode batch order.
pub fn stack(maps: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = maps[0].shape();
    let mut data = Vec::with_capacity(maps.len() * maps[0].numel());
    for m in maps {
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::new(&[&[maps.len()], shape].concat(), data)?)
}

/// Everything one evaluation episode produces.
pub struct EpisodeResult {
    pub episode: episodic::Episode,
    pub sims: Tensor<f32>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// `[P, H, W, H, W]`, `[P, H, W]`, `[P, H, W]` when cross attention is on.
    pub corr: Option<Tensor<f32>>,
    pub attn_q: Option<Tensor<f32>>,
    pub attn_s: Option<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Worker cap; 0 uses every core.
    pub threads: usize,
}

/// Runs one seeded episode over precomputed base maps of `split`.
pub fn run_episode(model: &Model<f32>, split: &Split, maps: &[Vec<Tensor<f32>>], opts: &EvalOptions, seed: u64) -> Result<EpisodeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = episodic::sample_episode(split, opts.way, opts.shot, opts.query, &mut rng)?;
    let z: Vec<&Tensor<f32>> = episode.items().map(|it| &maps[it.class][it.image]).collect();
    let z = stack(&z)?;
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, &model.params, false, Some(&model.buffers), NormMode::Eval);
    let zv = g.tape.constant(z);
    let rel = relate(&mut g, &model.config, zv, episode.layout())?;
    let sims = tape.value(rel.sims).clone();
    let n = episode.way;
    let predictions: Vec<usize> = sims.data().chunks(n).map(episodic::classify_query).collect();
    let correct = predictions.iter().zip(&episode.queries).filter(|(p, q)| **p == q.label).count();
    let accuracy = correct as f64 / episode.queries.len() as f64;
    let grab = |v: Option<Var>| v.map(|v| tape.value(v).clone());
    Ok(EpisodeResult {
        corr: grab(rel.pairs.corr),
        attn_q: grab(rel.pairs.attn_q),
        attn_s: grab(rel.pairs.attn_s),
        episode,
        sims,
        predictions,
        accuracy,
    })
}

/// Episode `i` uses seed `opts.seed + i`; results are reduced in index order.
pub fn evaluate(model: &Model<f32>, split: &Split, opts: &EvalOptions) -> Result<EvalReport> {
    let images: Vec<Vec<&Tensor<f32>>> = split.classes.iter().map(|c| c.images.iter().collect()).collect();
    let flat: Vec<&Tensor<f32>> = images.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(CoreError::Sampling("split contains no images".into()));
    }
    let mut all = base_maps(model, &flat, 64)?.into_iter();
    let maps: Vec<Vec<Tensor<f32>>> = images.iter().map(|c| all.by_ref().take(c.len()).collect()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| CoreError::config("eval.threads", e.to_string()))?;
    let accuracies: Vec<f64> = pool.install(|| {
        (0..opts.episodes)
            .into_par_iter()
            .map(|i| run_episode(model, split, &maps, opts, opts.seed.wrapping_add(i as u64)).map(|r| r.accuracy))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(EvalReport::from_accuracies(accuracies, opts.seed))
}
