//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Keys are grouped by prefix:
//! `seed`, `task.*`, `model.*`, `base.*`, `novel.*`, `sweep.*` and
//! `stream.*`; [`KEYS`] lists them all.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use fewseg_core::embeddings::ProviderSpec;
use fewseg_core::model::ModelConfig;
use fewseg_core::probabilistic::SamplingMode;
use fewseg_core::prototypes::CalibrationFormat;
use fewseg_core::taskgen::SynthTaskSpec;
use fewseg_core::training::{FtStrategy, OptimizerConfig, PhaseConfig};
use fewseg_core::{Error, Result};

pub const KEYS: &[&str] = &[
    "seed",
    "task.n_classes",
    "task.folds",
    "task.fold",
    "task.shots",
    "task.samples_per_base_class",
    "task.test_images",
    "task.min_objects",
    "task.max_objects",
    "task.text_alignment",
    "task.appearance_sigma",
    "task.pixel_noise",
    "task.contrast",
    "model.format",
    "model.probabilistic",
    "model.samples",
    "model.sampling",
    "model.sigma_zero",
    "model.prob_heads",
    "model.prob_hidden",
    "model.logvar_init",
    "model.dec_width",
    "model.dec_heads",
    "model.bypass_refine",
    "model.eval_seed",
    "base.lr",
    "base.weight_decay",
    "base.steps",
    "base.batch_size",
    "base.lambda_kl",
    "base.samples",
    "novel.lr",
    "novel.steps",
    "novel.batch_size",
    "novel.lambda_kl",
    "novel.samples",
    "novel.strategy",
    "sweep.m",
    "stream.sessions",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: SynthTaskSpec,
    pub model: ModelConfig,
    pub base: PhaseConfig,
    pub novel: PhaseConfig,
    /// Overrides the provider's registration step size.
    pub novel_lr: Option<f64>,
    pub strategy: FtStrategy,
    pub sweep_m: Vec<usize>,
    /// Number of sessions the novel classes are split into.
    pub sessions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: SynthTaskSpec::default(),
            model: ModelConfig::default(),
            base: PhaseConfig::base_default(),
            novel: PhaseConfig::novel_default(),
            novel_lr: None,
            strategy: FtStrategy::Pc,
            sweep_m: vec![1, 2, 5, 10, 20],
            sessions: 2,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn set_lr(opt: &mut OptimizerConfig, lr: f64) {
    *opt = opt.with_lr(lr);
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "task.n_classes" => self.task.n_classes = parse(key, v)?,
            "task.folds" => self.task.folds = parse(key, v)?,
            "task.fold" => self.task.fold = parse(key, v)?,
            "task.shots" => self.task.shots = parse(key, v)?,
            "task.samples_per_base_class" => self.task.samples_per_base_class = parse(key, v)?,
            "task.test_images" => self.task.test_images = parse(key, v)?,
            "task.min_objects" => self.task.min_objects = parse(key, v)?,
            "task.max_objects" => self.task.max_objects = parse(key, v)?,
            "task.text_alignment" => self.task.text_alignment = parse(key, v)?,
            "task.appearance_sigma" => self.task.appearance_sigma = parse(key, v)?,
            "task.pixel_noise" => self.task.pixel_noise = parse(key, v)?,
            "task.contrast" => self.task.contrast = parse(key, v)?,
            "model.format" => self.model.format = v.parse::<CalibrationFormat>()?,
            "model.probabilistic" => self.model.probabilistic = parse_bool(key, v)?,
            "model.samples" => self.model.samples = parse(key, v)?,
            "model.sampling" => {
                self.model.sampling = match v {
                    "per_component" => SamplingMode::PerComponent,
                    "mixture" => SamplingMode::Mixture,
                    _ => return Err(Error::Config(format!("unknown sampling mode `{v}`"))),
                }
            }
            "model.sigma_zero" => self.model.sigma_zero = parse_bool(key, v)?,
            "model.prob_heads" => self.model.prob_heads = parse(key, v)?,
            "model.prob_hidden" => self.model.prob_hidden = parse(key, v)?,
            "model.logvar_init" => self.model.logvar_init = parse(key, v)?,
            "model.dec_width" => self.model.dec_width = parse(key, v)?,
            "model.dec_heads" => self.model.dec_heads = parse(key, v)?,
            "model.bypass_refine" => self.model.bypass_refine = parse_bool(key, v)?,
            "model.eval_seed" => self.model.eval_seed = parse(key, v)?,
            "base.lr" => set_lr(&mut self.base.optimizer, parse(key, v)?),
            "base.weight_decay" => {
                let wd = parse(key, v)?;
                match &mut self.base.optimizer {
                    OptimizerConfig::AdamW { weight_decay, .. } => *weight_decay = wd,
                    OptimizerConfig::Sgd { .. } => {
                        return Err(Error::Config("base optimizer has no weight decay".into()))
                    }
                }
            }
            "base.steps" => self.base.steps = parse(key, v)?,
            "base.batch_size" => self.base.batch_size = parse(key, v)?,
            "base.lambda_kl" => self.base.lambda_kl = parse(key, v)?,
            "base.samples" => self.base.samples = parse(key, v)?,
            "novel.lr" => self.novel_lr = Some(parse(key, v)?),
            "novel.steps" => self.novel.steps = parse(key, v)?,
            "novel.batch_size" => self.novel.batch_size = parse(key, v)?,
            "novel.lambda_kl" => self.novel.lambda_kl = parse(key, v)?,
            "novel.samples" => self.novel.samples = parse(key, v)?,
            "novel.strategy" => self.strategy = v.parse()?,
            "sweep.m" => {
                self.sweep_m = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "stream.sessions" => self.sessions = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k, v)
    }

    pub fn base_phase(&self) -> PhaseConfig {
        PhaseConfig {
            seed: self.seed,
            ..self.base.clone()
        }
    }

    pub fn novel_phase(&self, provider: &ProviderSpec) -> PhaseConfig {
        let defaults = PhaseConfig::novel_for(provider);
        let lr = self.novel_lr.unwrap_or(defaults.optimizer.lr());
        PhaseConfig {
            seed: self.seed,
            optimizer: self.novel.optimizer.with_lr(lr),
            ..self.novel.clone()
        }
    }

    pub fn task_spec(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            seed: self.seed,
            ..self.task.clone()
        }
    }
}
