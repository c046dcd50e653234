//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relcorr_core::backbone::{BackboneConfig, Stage};
use relcorr_core::cca::CcaConfig;
use relcorr_core::model::{LossConfig, ModelConfig};
use relcorr_core::scr::ScrConfig;

use crate::error::{CliError, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("backbone.channels", "64,64,128,256"),
    ("backbone.layers", "1"),
    ("backbone.pool", "2,2,2,1"),
    ("backbone.residual", "false"),
    ("backbone.input_size", "32"),
    ("backbone.in_channels", "3"),
    ("scr.enabled", "true"),
    ("scr.du", "1"),
    ("scr.dv", "1"),
    ("scr.c_prime", "64"),
    ("scr.group_size", "1"),
    ("cca.mode", "full"),
    ("cca.c_prime", "64"),
    ("cca.c_l", "16"),
    ("cca.kernel", "separable"),
    ("cca.gamma", "5"),
    ("cca.norm_scope", "tensor"),
    ("loss.tau", "0.2"),
    ("loss.lambda", "0.25"),
    ("train.dataset", "data/manifest.json"),
    ("train.out", "runs/default"),
    ("train.epochs", "30"),
    ("train.steps_per_epoch", "100"),
    ("train.lr", "0.1"),
    ("train.momentum", "0.9"),
    ("train.decay_epochs", "20,25"),
    ("train.decay_factor", "0.05"),
    ("train.way", "5"),
    ("train.shot", "1"),
    ("train.query", "15"),
    ("train.anchor_batch", "independent:64"),
    ("train.augment", "true"),
    ("train.seed", "0"),
    ("eval.way", "5"),
    ("eval.shot", "1"),
    ("eval.query", "15"),
    ("eval.episodes", "2000"),
    ("eval.seed", "0"),
    ("eval.split", "test"),
];

/// Keys `sweep` may vary.
pub const SWEEPABLE: &[&str] = &["cca.gamma", "scr.du", "scr.dv", "scr.group_size", "cca.c_l", "cca.mode"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AnchorBatch {
    /// The episode's own query images.
    Episode,
    /// This many extra train images per step.
    Independent(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub anchor_batch: AnchorBatch,
    pub augment: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub split: String,
}

/// Every key with its current value; unknown keys never enter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            base: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: i + 1,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn with_base(mut self, base: impl Into<PathBuf>) -> Self {
        self.base = base.into();
        self
    }

    pub fn base(&self) -> &Path {
        &self.base
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::key(key, "unknown key")),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// One `key = value` line per key, sorted.
    pub fn serialize(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    fn parse_as<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e: T::Err| CliError::key(key, format!("`{raw}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|e: T::Err| CliError::key(key, format!("`{p}`: {e}"))))
            .collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        let p = PathBuf::from(self.raw(key));
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let channels: Vec<usize> = self.list("backbone.channels")?;
        let n = channels.len();
        let broadcast = |key: &str| -> Result<Vec<usize>> {
            let v: Vec<usize> = self.list(key)?;
            match v.len() {
                1 => Ok(vec![v[0]; n]),
                len if len == n => Ok(v),
                len => Err(CliError::key(key, format!("{len} entries for {n} stages"))),
            }
        };
        let layers = broadcast("backbone.layers")?;
        let pools = broadcast("backbone.pool")?;
        let backbone = BackboneConfig {
            input_size: self.parse_as("backbone.input_size")?,
            in_channels: self.parse_as("backbone.in_channels")?,
            stages: (0..n).map(|i| Stage { channels: channels[i], layers: layers[i], pool: pools[i] }).collect(),
            residual: self.parse_as("backbone.residual")?,
        };
        let scr = ScrConfig {
            enabled: self.parse_as("scr.enabled")?,
            du: self.parse_as("scr.du")?,
            dv: self.parse_as("scr.dv")?,
            c_prime: self.parse_as("scr.c_prime")?,
            group_size: self.parse_as("scr.group_size")?,
        };
        let cca = CcaConfig {
            mode: self.parse_as("cca.mode")?,
            c_prime: self.parse_as("cca.c_prime")?,
            c_l: self.parse_as("cca.c_l")?,
            kernel: self.parse_as("cca.kernel")?,
            gamma: self.parse_as("cca.gamma")?,
            norm_scope: self.parse_as("cca.norm_scope")?,
        };
        Ok(ModelConfig { backbone, scr, cca })
    }

    pub fn loss(&self) -> Result<LossConfig> {
        Ok(LossConfig { tau: self.parse_as("loss.tau")?, lambda: self.parse_as("loss.lambda")? })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let anchor = self.raw("train.anchor_batch");
        let anchor_batch = match anchor.split_once(':') {
            None if anchor == "episode" => AnchorBatch::Episode,
            Some(("independent", n)) => match n.trim().parse::<usize>() {
                Ok(n) if n > 0 => AnchorBatch::Independent(n),
                _ => return Err(CliError::key("train.anchor_batch", format!("bad batch size `{n}`"))),
            },
            _ => {
                return Err(CliError::key("train.anchor_batch", format!("`{anchor}`: expected episode or independent:N")))
            }
        };
        let t = TrainConfig {
            dataset: self.path("train.dataset"),
            out: self.path("train.out"),
            epochs: self.parse_as("train.epochs")?,
            steps_per_epoch: self.parse_as("train.steps_per_epoch")?,
            lr: self.parse_as("train.lr")?,
            momentum: self.parse_as("train.momentum")?,
            decay_epochs: self.list("train.decay_epochs")?,
            decay_factor: self.parse_as("train.decay_factor")?,
            way: self.parse_as("train.way")?,
            shot: self.parse_as("train.shot")?,
            query: self.parse_as("train.query")?,
            anchor_batch,
            augment: self.parse_as("train.augment")?,
            seed: self.parse_as("train.seed")?,
        };
        let positive = [
            ("train.epochs", t.epochs),
            ("train.steps_per_epoch", t.steps_per_epoch),
            ("train.way", t.way),
            ("train.shot", t.shot),
            ("train.query", t.query),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::key(*k, "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::key("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(CliError::key("train.momentum", "must lie in [0, 1)"));
        }
        if !(t.decay_factor > 0.0 && t.decay_factor.is_finite()) {
            return Err(CliError::key("train.decay_factor", "must be positive"));
        }
        if t.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::key("train.decay_epochs", "must be strictly increasing"));
        }
        Ok(t)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let e = EvalConfig {
            way: self.parse_as("eval.way")?,
            shot: self.parse_as("eval.shot")?,
            query: self.parse_as("eval.query")?,
            episodes: self.parse_as("eval.episodes")?,
            seed: self.parse_as("eval.seed")?,
            split: self.raw("eval.split").to_string(),
        };
        for (k, v) in [("eval.way", e.way), ("eval.shot", e.shot), ("eval.query", e.query), ("eval.episodes", e.episodes)] {
            if v == 0 {
                return Err(CliError::key(k, "must be positive"));
            }
        }
        if !["train", "val", "test"].contains(&e.split.as_str()) {
            return Err(CliError::key("eval.split", format!("`{}` is not train, val or test", e.split)));
        }
        Ok(e)
    }

    /// Parses every section and checks each against its module's invariants.
    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.loss()?.validate()?;
        self.train()?;
        self.eval()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let m = RunConfig::default().model().unwrap();
        assert_eq!(m.backbone.output_shape(), (4, 4, 256));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# header\n\ncca.gamma = 2   # fine-grained\nscr.enabled=false\n").unwrap();
        assert_eq!(cfg.get("cca.gamma"), Some("2"));
        assert!(!cfg.model().unwrap().scr.enabled);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("cca.temperature = 2"), Err(CliError::Key { .. })));
        assert!(RunConfig::parse("cca.gamma = 0").is_err());
        assert!(RunConfig::parse("scr.group_size = 3").is_err());
        assert!(RunConfig::parse("train.momentum = 1.0").is_err());
        assert!(RunConfig::parse("loss.lambda = -1").is_err());
        assert!(RunConfig::parse("cca.kernel = dense").is_err());
        assert!(matches!(RunConfig::parse("just words"), Err(CliError::Syntax { line: 1, .. })));
    }

    #[test]
    fn anchor_batch_forms() {
        let c = RunConfig::parse("train.anchor_batch = episode").unwrap();
        assert_eq!(c.train().unwrap().anchor_batch, AnchorBatch::Episode);
        assert_eq!(RunConfig::default().train().unwrap().anchor_batch, AnchorBatch::Independent(64));
        assert!(RunConfig::parse("train.anchor_batch = independent:0").is_err());
    }

    #[test]
    fn presets_are_accepted() {
        for g in ["5", "2"] {
            RunConfig::parse(&format!("cca.gamma = {g}")).unwrap();
        }
        for l in ["0.25", "0.5", "1.5"] {
            RunConfig::parse(&format!("loss.lambda = {l}")).unwrap();
        }
        assert_eq!(RunConfig::default().loss().unwrap().tau, 0.2);
    }
}
