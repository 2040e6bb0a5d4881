//! Base training and novel-class registration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::embeddings::{ClassEntry, EmbeddingBundle, EmbeddingProvider, ProviderSpec, BACKGROUND};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ImageInput, Phase, SegModel};
use crate::numerics::{derive_seed, masked_cross_entropy, Bound, Mat, ParameterRegistry, Tape, IGNORE};
use crate::probabilistic::{kl_to_standard_normal, NoiseSource};
use crate::prototypes::{pc_name, pt_name, pv_name, register_novel, P0};

const TRAIN_STREAM: u64 = 0x7a1b;

/// Registration step size on the seeded toy backbone, whose prototypes and
/// tokens have norm `sqrt(d)`; exported embeddings keep the default.
pub const TOY_NOVEL_LR: f64 = 2.0;
const ORDER_STREAM: u64 = 0x0bde;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Adam with decoupled weight decay.
    AdamW {
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::AdamW { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }

    pub fn with_lr(self, new: f64) -> Self {
        match self {
            OptimizerConfig::AdamW {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => OptimizerConfig::AdamW {
                lr: new,
                weight_decay,
                beta1,
                beta2,
                eps,
            },
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr: new },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Base,
    Novel,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Base => "base",
            PhaseKind::Novel => "novel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: PhaseKind,
    pub optimizer: OptimizerConfig,
    /// Optimizer steps; one step consumes one batch.
    pub steps: usize,
    pub batch_size: usize,
    pub lambda_kl: f64,
    /// Samples `M` per image during training.
    pub samples: usize,
    pub seed: u64,
    pub sigma_zero: bool,
}

impl PhaseConfig {
    pub fn base_default() -> Self {
        Self {
            phase: PhaseKind::Base,
            optimizer: OptimizerConfig::adamw(2.5e-4, 1e-2),
            steps: 200,
            batch_size: 8,
            lambda_kl: 0.001,
            samples: 5,
            seed: 0,
            sigma_zero: false,
        }
    }

    pub fn novel_default() -> Self {
        Self {
            phase: PhaseKind::Novel,
            optimizer: OptimizerConfig::Sgd { lr: 0.5 },
            steps: 100,
            batch_size: 8,
            lambda_kl: 0.001,
            samples: 5,
            seed: 0,
            sigma_zero: false,
        }
    }

    /// Registration defaults for a provider.
    pub fn novel_for(provider: &ProviderSpec) -> Self {
        let cfg = Self::novel_default();
        match provider {
            ProviderSpec::Toy(_) => Self {
                optimizer: cfg.optimizer.with_lr(TOY_NOVEL_LR),
                ..cfg
            },
            ProviderSpec::Export { .. } => cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config(format!("lambda_kl must be ≥ 0, got {}", self.lambda_kl)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.samples == 0 || self.samples > crate::probabilistic::MAX_SAMPLES {
            return Err(Error::Config(format!("samples must be in 1..=32, got {}", self.samples)));
        }
        if !(self.optimizer.lr() >= 0.0) {
            return Err(Error::Config("learning rate must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parameter updates over registry tensors, keyed by name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Gradients of frozen tensors are a registry error.
    pub fn step(&mut self, reg: &mut ParameterRegistry, grads: &BTreeMap<String, Mat>) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            if !reg.entry(name)?.trainable {
                return Err(Error::Registry(format!("update of frozen tensor `{name}`")));
            }
            let p = reg.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient shape of `{name}`")));
            }
            match self.cfg {
                OptimizerConfig::Sgd { lr } => {
                    for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * gi;
                    }
                }
                OptimizerConfig::AdamW {
                    lr,
                    weight_decay,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (rows, cols) = g.shape();
                    let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(rows, cols));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(rows, cols));
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((x, gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let step = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *x -= lr * (step + weight_decay * *x);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub ce: f64,
    pub kl: f64,
    pub loss: f64,
    pub lr: f64,
    pub phase: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Loss of one image: mean over samples of the masked cross-entropy plus
/// `lambda_kl` times the KL term. Returns gradients of trainable tensors when
/// `want_grads` is set.
pub fn forward_loss(
    model: &SegModel,
    provider: &EmbeddingProvider,
    input: ImageInput<'_>,
    labels: &[u8],
    opts: &ForwardOptions,
    lambda_kl: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, BTreeMap<String, Mat>)> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.registry);
    let trace = model.forward(&mut tape, &mut bound, provider, input, opts)?;
    let targets = model.vocab.to_channels(labels);
    let mut ces = Vec::with_capacity(trace.logits.len());
    for &l in &trace.logits {
        ces.push(masked_cross_entropy(&mut tape, l, &targets)?);
    }
    let ce = if ces.len() == 1 {
        ces[0]
    } else {
        let all = tape.concat_rows(&ces);
        tape.mean(all)
    };
    let ce_value = tape.value(ce).scalar();
    let (loss, kl_value) = match trace.gauss {
        Some(g) if lambda_kl > 0.0 => {
            let kl = kl_to_standard_normal(&mut tape, g);
            let weighted = tape.scale(kl, lambda_kl);
            (tape.add(ce, weighted), tape.value(kl).scalar())
        }
        Some(g) => {
            let kl = kl_to_standard_normal(&mut tape, g);
            (ce, tape.value(kl).scalar())
        }
        None => (ce, 0.0),
    };
    let breakdown = LossBreakdown {
        loss: tape.value(loss).scalar(),
        ce: ce_value,
        kl: kl_value,
    };
    let grads = if want_grads {
        bound.gradients(&tape.backward(loss))
    } else {
        BTreeMap::new()
    };
    Ok((breakdown, grads))
}

/// Fine-tuning strategy of the registration phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtStrategy {
    /// Register textual rows only; no optimizer steps.
    None,
    /// Fine-tune the new textual rows (ablation only).
    Pt,
    /// Fine-tune visual prompts, mask decoder and background prototype.
    BackboneHead,
    /// Fine-tune the new calibration rows.
    #[default]
    Pc,
    /// Replace new classes' prototypes with free vectors initialised from the
    /// support images; no class names involved.
    VisionOnly,
}

impl FtStrategy {
    pub const ALL: [FtStrategy; 4] = [
        FtStrategy::None,
        FtStrategy::Pt,
        FtStrategy::BackboneHead,
        FtStrategy::Pc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FtStrategy::None => "ft_none",
            FtStrategy::Pt => "ft_pt",
            FtStrategy::BackboneHead => "ft_backbone_head",
            FtStrategy::Pc => "ft_pc",
            FtStrategy::VisionOnly => "vision_only",
        }
    }
}

impl fmt::Display for FtStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FtStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        [
            FtStrategy::None,
            FtStrategy::Pt,
            FtStrategy::BackboneHead,
            FtStrategy::Pc,
            FtStrategy::VisionOnly,
        ]
        .into_iter()
        .find(|f| f.tag() == s || f.tag().trim_start_matches("ft_") == s)
        .ok_or_else(|| Error::Config(format!("unknown fine-tuning strategy `{s}`")))
    }
}

/// Every label is background, ignore, or one of `allowed`.
fn check_labels(samples: &[SegSample], allowed: &[u8], what: &str) -> Result<()> {
    let mut ok = [false; 256];
    ok[BACKGROUND as usize] = true;
    ok[IGNORE as usize] = true;
    for &c in allowed {
        ok[c as usize] = true;
    }
    for s in samples {
        if let Some(&bad) = s.labels.data.iter().find(|&&l| !ok[l as usize]) {
            return Err(Error::Protocol(format!(
                "{what} sample `{}` contains class {bad}",
                s.key
            )));
        }
    }
    Ok(())
}

fn prompts_trainable(model: &SegModel) -> bool {
    model
        .prompt_names()
        .iter()
        .any(|n| model.registry.entry(n).map(|e| e.trainable).unwrap_or(false))
}

/// Runs `cfg.steps` optimizer steps over `data`. Images are re-encoded on the
/// tape only while prompts are trainable; otherwise their embeddings are
/// computed once.
fn run_phase(
    model: &mut SegModel,
    provider: &EmbeddingProvider,
    data: &[SegSample],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() || cfg.steps == 0 {
        return Ok(TrainReport::default());
    }
    let cached: Option<Vec<EmbeddingBundle>> = if prompts_trainable(model) {
        None
    } else {
        Some(
            data.iter()
                .map(|s| model.embed(provider, s))
                .collect::<Result<_>>()?,
        )
    };
    let noise = NoiseSource {
        seed: derive_seed(&[cfg.seed, TRAIN_STREAM]),
        mode: model.config.sampling,
    };
    let samples = if model.config.probabilistic { cfg.samples } else { 1 };
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, ORDER_STREAM]));
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let batch = cfg.batch_size.min(data.len());
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut sum: BTreeMap<String, Mat> = BTreeMap::new();
        let mut acc = LossBreakdown {
            loss: 0.0,
            ce: 0.0,
            kl: 0.0,
        };
        for _ in 0..batch {
            if pos == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                pos = 0;
            }
            let idx = order[pos];
            pos += 1;
            let sample = &data[idx];
            let input = match &cached {
                Some(c) => ImageInput::Embedded(&c[idx]),
                None => ImageInput::Sample(sample),
            };
            let opts = ForwardOptions {
                samples,
                sigma_zero: cfg.sigma_zero || model.config.sigma_zero,
                noise,
                uid: derive_seed(&[step as u64, idx as u64]),
                size: (sample.labels.h, sample.labels.w),
            };
            let (l, grads) = forward_loss(
                model,
                provider,
                input,
                &sample.labels.data,
                &opts,
                cfg.lambda_kl,
                true,
            )?;
            acc.loss += l.loss;
            acc.ce += l.ce;
            acc.kl += l.kl;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(s) => s.add_assign(&g),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / batch as f64;
        for g in sum.values_mut() {
            *g = g.scale(inv);
        }
        opt.step(&mut model.registry, &sum)?;
        report.log.push(LogRecord {
            step: step + 1,
            ce: acc.ce * inv,
            kl: acc.kl * inv,
            loss: acc.loss * inv,
            lr: cfg.optimizer.lr(),
            phase: cfg.phase.to_string(),
        });
    }
    Ok(report)
}

/// Trains every non-textual tensor on base-class data.
pub fn train_base(
    model: &mut SegModel,
    provider: &EmbeddingProvider,
    data: &[SegSample],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    if model.phase != Phase::Initialized {
        return Err(Error::Protocol("base training runs once, on a fresh model".into()));
    }
    check_labels(data, &model.vocab.ids(), "base-training")?;
    let names: Vec<String> = model.registry.names().cloned().collect();
    for n in &names {
        if !model.registry.entry(n)?.structural {
            model.registry.set_trainable(n, false)?;
        }
    }
    let report = run_phase(model, provider, data, cfg)?;
    model.registry.freeze_all();
    model.phase = Phase::BaseTrained;
    Ok(report)
}

/// Mean patch embedding of each class over the support masks, in the
/// calibrated-prototype space.
fn visual_prototypes(
    model: &SegModel,
    provider: &EmbeddingProvider,
    classes: &[ClassEntry],
    support: &[SegSample],
) -> Result<BTreeMap<u8, Mat>> {
    let d = provider.dim();
    let (gh, gw) = provider.grid();
    let mut sums: BTreeMap<u8, (Vec<f64>, f64)> = classes
        .iter()
        .map(|c| (c.class_id, (vec![0.0; d], 0.0)))
        .collect();
    for s in support {
        let b = model.embed(provider, s)?;
        let (h, w) = (s.labels.h, s.labels.w);
        for y in 0..h {
            for x in 0..w {
                let l = s.labels.at(y, x);
                if let Some((acc, count)) = sums.get_mut(&l) {
                    let token = (y * gh / h) * gw + x * gw / w;
                    for (a, v) in acc.iter_mut().zip(b.h.row(token)) {
                        *a += v;
                    }
                    *count += 1.0;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(id, (acc, count))| {
            let v = if count > 0.0 {
                acc.iter().map(|a| a / count).collect()
            } else {
                acc
            };
            (id, Mat::row_vector(v))
        })
        .collect())
}

/// Registers `new_classes` from `support` and fine-tunes according to
/// `strategy`. Rows and tensors from earlier phases stay bitwise unchanged
/// under the default strategy.
pub fn register_novel_phase(
    model: &mut SegModel,
    provider: &EmbeddingProvider,
    new_classes: &[ClassEntry],
    support: &[SegSample],
    cfg: &PhaseConfig,
    strategy: FtStrategy,
) -> Result<TrainReport> {
    if model.phase == Phase::Initialized {
        return Err(Error::Protocol(
            "novel registration needs a base-trained model".into(),
        ));
    }
    cfg.validate()?;
    let ids: Vec<u8> = new_classes.iter().map(|c| c.class_id).collect();
    check_labels(support, &ids, "novel-support")?;
    if strategy == FtStrategy::VisionOnly && model.config.format.width_factor() != 1 {
        return Err(Error::Config(format!(
            "vision-only registration needs a non-concatenating format, not {}",
            model.config.format
        )));
    }
    let visual = if strategy == FtStrategy::VisionOnly {
        visual_prototypes(model, provider, new_classes, support)?
    } else {
        BTreeMap::new()
    };
    let stage = model.stage + 1;
    register_novel(&mut model.registry, &mut model.vocab, new_classes, provider, stage)?;
    model.stage = stage;
    model.phase = Phase::NovelRegistered;

    let reg = &mut model.registry;
    match strategy {
        FtStrategy::Pc => {}
        FtStrategy::None => reg.freeze_all(),
        FtStrategy::Pt => {
            reg.freeze_all();
            for &id in &ids {
                reg.set_trainable(&pt_name(id), true)?;
            }
        }
        FtStrategy::BackboneHead => {
            reg.freeze_all();
            let names: Vec<String> = reg
                .names()
                .filter(|n| n.starts_with("prompts.") || n.starts_with("dec.") || *n == P0)
                .cloned()
                .collect();
            for n in names {
                reg.set_trainable(&n, false)?;
            }
        }
        FtStrategy::VisionOnly => {
            reg.freeze_all();
            for (id, v) in visual {
                reg.insert(pv_name(id), v, stage);
                reg.set_trainable(&pv_name(id), false)?;
            }
        }
    }
    let report = if strategy == FtStrategy::None {
        TrainReport::default()
    } else {
        run_phase(model, provider, support, cfg)?
    };
    model.registry.freeze_all();
    Ok(report)
}

/// Names of calibration rows registered in `stage`.
pub fn stage_rows(model: &SegModel, stage: u32) -> Vec<String> {
    model
        .vocab
        .entries()
        .iter()
        .map(|e| pc_name(e.class_id))
        .filter(|n| model.registry.entry(n).map(|e| e.stage == stage).unwrap_or(false))
        .collect()
}
