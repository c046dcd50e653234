//! Evaluation, sweeps, attention export and data generation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use relcorr_core::cca::CcaMode;
use relcorr_core::episodic::EvalReport;
use relcorr_core::model::{base_maps, evaluate, run_episode, EvalOptions, Model};
use relcorr_tensor::{rten, Tensor};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SWEEPABLE};
use crate::dataset::{load_dataset, Dataset, Manifest};
use crate::error::{CliError, Result};
use crate::synth;
use crate::train::train_command;

pub const THREADS_VAR: &str = "RELCORR_THREADS";

/// Worker count from `RELCORR_THREADS`; 0 means every core.
pub fn eval_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| CliError::key(THREADS_VAR, format!("`{v}` is not a thread count"))),
    }
}

/// Builds the configured model and loads `ckpt` into it.
pub fn restore(config: &RunConfig, ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut model = Model::new(config.model()?, ckpt.classes, 0)?;
    ckpt.apply(&mut model)?;
    Ok(model)
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("episode_index,accuracy\n");
    for (i, a) in report.accuracies.iter().enumerate() {
        let _ = writeln!(out, "{i},{a}");
    }
    let _ = writeln!(out, "mean,ci95,episodes,seed");
    let _ = writeln!(out, "{},{},{},{}", report.mean, report.ci95, report.episodes, report.seed);
    out
}

pub fn eval_with(config: &RunConfig, model: &Model<f32>, data: &Dataset, episodes: Option<usize>, seed: Option<u64>) -> Result<EvalReport> {
    let e = config.eval()?;
    let opts = EvalOptions {
        way: e.way,
        shot: e.shot,
        query: e.query,
        episodes: episodes.unwrap_or(e.episodes),
        seed: seed.unwrap_or(e.seed),
        threads: eval_threads()?,
    };
    if opts.episodes == 0 {
        return Err(CliError::key("eval.episodes", "must be positive"));
    }
    Ok(evaluate(model, data.split(&e.split)?, &opts)?)
}

pub fn eval_command(config: &RunConfig, ckpt: &Path, episodes: Option<usize>, seed: Option<u64>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(ckpt)?;
    let model = restore(config, &ckpt)?;
    let data = load_dataset(&config.train()?.dataset)?;
    eval_with(config, &model, &data, episodes, seed)
}

/// The config for one sweep point, with its own output directory.
pub fn sweep_point(config: &RunConfig, key: &str, value: &str) -> Result<RunConfig> {
    if !SWEEPABLE.contains(&key) {
        return Err(CliError::key(key, format!("not sweepable; choose one of {}", SWEEPABLE.join(", "))));
    }
    let mut c = config.clone();
    if key == "scr.du" || key == "scr.dv" {
        c.set("scr.du", value)?;
        c.set("scr.dv", value)?;
    } else {
        c.set(key, value)?;
    }
    let out = config.train()?.out.join(format!("sweep_{key}_{value}"));
    c.set("train.out", &out.to_string_lossy())?;
    c.validate()?;
    Ok(c)
}

/// Trains and evaluates each value; every point is validated before any training starts.
pub fn sweep_command(config: &RunConfig, key: &str, values: &[String]) -> Result<Vec<(String, EvalReport)>> {
    let points: Vec<RunConfig> = values.iter().map(|v| sweep_point(config, key, v)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(points.len());
    for (v, c) in values.iter().zip(&points) {
        let ckpt = train_command(c, None)?;
        out.push((v.clone(), eval_command(c, &ckpt, None, None)?));
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("value,mean,ci95\n");
    for (v, r) in rows {
        let _ = writeln!(out, "{v},{},{}", r.mean, r.ci95);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRef {
    pub class: String,
    pub file: PathBuf,
    /// Label within the episode.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportedPair {
    pub query: usize,
    pub support: usize,
    pub query_image: ImageRef,
    pub support_image: ImageRef,
    pub attn_query: String,
    pub attn_support: String,
    pub corr: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportManifest {
    pub episode: usize,
    pub seed: u64,
    pub split: String,
    pub way: usize,
    pub shot: usize,
    pub gamma: f64,
    pub pairs: Vec<ExportedPair>,
}

fn pair_slice(t: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let per = t.numel() / t.shape()[0];
    Ok(Tensor::new(&t.shape()[1..], t.data()[p * per..(p + 1) * per].to_vec())?)
}

/// Writes attention maps and refined correlations of one seeded episode under `out`.
pub fn export_attention(ckpt_dir: &Path, out: &Path, seed: u64) -> Result<ExportManifest> {
    const EPISODE: usize = 0;
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let config = &ckpt.config;
    let model = restore(config, &ckpt)?;
    if model.config.cca.mode == CcaMode::Off {
        return Err(CliError::key("cca.mode", "attention export needs cross attention enabled"));
    }
    let e = config.eval()?;
    let data = load_dataset(&config.train()?.dataset)?;
    let split = data.split(&e.split)?;
    let images: Vec<&Tensor<f32>> = split.classes.iter().flat_map(|c| c.images.iter()).collect();
    let mut all = base_maps(&model, &images, 64)?.into_iter();
    let maps: Vec<Vec<Tensor<f32>>> = split.classes.iter().map(|c| all.by_ref().take(c.images.len()).collect()).collect();
    let opts = EvalOptions { way: e.way, shot: e.shot, query: e.query, episodes: 1, seed, threads: 1 };
    let r = run_episode(&model, split, &maps, &opts, seed)?;
    let (corr, aq, a_s) = match (&r.corr, &r.attn_q, &r.attn_s) {
        (Some(c), Some(q), Some(s)) => (c, q, s),
        _ => return Err(CliError::key("cca.mode", "episode produced no attention")),
    };
    for sub in ["query", "support", "corr"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|err| CliError::io(&d, err))?;
    }
    let files = &data.files[&e.split];
    let image = |it: &relcorr_core::episodic::Item| ImageRef {
        class: split.classes[it.class].name.clone(),
        file: files[it.class][it.image].clone(),
        label: it.label,
    };
    let ns = r.episode.support.len();
    let mut pairs = Vec::new();
    for (i, qi) in r.episode.queries.iter().enumerate() {
        for (j, sj) in r.episode.support.iter().enumerate() {
            let p = i * ns + j;
            let name = format!("attn_{EPISODE}_{i}_{j}.rten");
            let entry = ExportedPair {
                query: i,
                support: j,
                query_image: image(qi),
                support_image: image(sj),
                attn_query: format!("query/{name}"),
                attn_support: format!("support/{name}"),
                corr: format!("corr/corr_{EPISODE}_{i}_{j}.rten"),
            };
            for (file, t) in [(&entry.attn_query, aq), (&entry.attn_support, a_s), (&entry.corr, corr)] {
                let path = out.join(file);
                rten::write(&path, &pair_slice(t, p)?).map_err(|err| CliError::Checkpoint(format!("{}: {err}", path.display())))?;
            }
            pairs.push(entry);
        }
    }
    let manifest = ExportManifest {
        episode: EPISODE,
        seed,
        split: e.split.clone(),
        way: e.way,
        shot: e.shot,
        gamma: model.config.cca.gamma,
        pairs,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("export manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|err| CliError::io(&path, err))?;
    Ok(manifest)
}

pub fn gen_data_command(out: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Manifest> {
    if classes == 0 || per_class == 0 || size == 0 {
        return Err(CliError::Dataset("class count, images per class and size must be positive".into()));
    }
    synth::gen_synthetic(out, classes, per_class, size, seed)
}
