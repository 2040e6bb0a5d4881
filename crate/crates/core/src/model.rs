//! The full segmentation model: parameter layout and forward pass.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::decoder::{aggregate_logits, decode, init_decoder, DecodeOptions, DecoderVars, LogitMap, Prediction, Upsampler};
use crate::embeddings::{
    ClassVocabulary, EmbeddingBundle, EmbeddingProvider, ProviderSpec, VisualPrompts,
};
use crate::error::{Error, Result};
use crate::numerics::nn::{init_mlp2, Mlp2};
use crate::numerics::{derive_seed, stable_hash, Bound, Mat, ParameterRegistry, Stage, Tape, Var};
use crate::probabilistic::{
    infer_gaussians, init_prob_encoder, probabilistic_calibrate, sample_on_tape, GaussianVars,
    LatentNoise, NoiseSource, ProbEncoder, SamplingMode, MAX_SAMPLES,
};
use crate::prototypes::{
    calibrate, init_bank, pv_name, stack_rows, BankPart, CalibrationFormat, P0, PROJ,
};

pub fn prompt_name(layer: usize) -> String {
    format!("prompts.{layer}")
}

const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub format: CalibrationFormat,
    /// Use the probabilistic encoder; otherwise `P̂_c = P_c`.
    pub probabilistic: bool,
    /// Samples `M` drawn per image.
    pub samples: usize,
    pub sampling: SamplingMode,
    /// Force `σ = 0` so every sample equals `μ`.
    pub sigma_zero: bool,
    pub prob_heads: usize,
    /// Hidden width of φ_μ and φ_σ; 0 means `d`.
    pub prob_hidden: usize,
    pub logvar_init: f64,
    /// Decoder width `d'`; 0 means `d`.
    pub dec_width: usize,
    pub dec_heads: usize,
    pub proj_activation: bool,
    pub bypass_refine: bool,
    /// Seed of the evaluation noise stream.
    pub eval_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            format: CalibrationFormat::MulAdd,
            probabilistic: true,
            samples: 5,
            sampling: SamplingMode::PerComponent,
            sigma_zero: false,
            prob_heads: 4,
            prob_hidden: 0,
            logvar_init: -4.0,
            dec_width: 0,
            dec_heads: 4,
            proj_activation: true,
            bypass_refine: false,
            eval_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.samples == 0 || self.samples > MAX_SAMPLES {
            return Err(Error::Config(format!(
                "samples must be in 1..={MAX_SAMPLES}, got {}",
                self.samples
            )));
        }
        let dec = self.decoder_width(d);
        if self.prob_heads == 0 || d % self.prob_heads != 0 {
            return Err(Error::Config(format!(
                "{} probabilistic heads do not divide d={d}",
                self.prob_heads
            )));
        }
        if self.dec_heads == 0 || dec % self.dec_heads != 0 {
            return Err(Error::Config(format!(
                "{} decoder heads do not divide d'={dec}",
                self.dec_heads
            )));
        }
        Ok(())
    }

    pub fn decoder_width(&self, d: usize) -> usize {
        if self.dec_width == 0 {
            d
        } else {
            self.dec_width
        }
    }

    /// Samples actually drawn per forward pass.
    pub fn effective_samples(&self) -> usize {
        if self.probabilistic {
            self.samples
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialized,
    BaseTrained,
    NovelRegistered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub provider: ProviderSpec,
    pub vocab: ClassVocabulary,
    pub registry: ParameterRegistry,
    pub phase: Phase,
    /// Latest registration session; 0 until novel classes arrive.
    pub stage: Stage,
}

/// Image side of a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ImageInput<'a> {
    /// Encode pixels (or look up exported embeddings) on the tape; prompt
    /// gradients flow when prompts are trainable.
    Sample(&'a SegSample),
    /// Precomputed embeddings, used as constants.
    Embedded(&'a EmbeddingBundle),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub samples: usize,
    pub sigma_zero: bool,
    pub noise: NoiseSource,
    /// Identifies the image (and training step) within the noise stream.
    pub uid: u64,
    /// Output size `(h, w)`.
    pub size: (usize, usize),
}

pub struct ForwardTrace {
    /// Per-sample logits, `M` entries.
    pub logits: Vec<Var>,
    /// Patch-resolution logits per sample.
    pub patch_logits: Vec<Var>,
    pub channels: usize,
    pub gauss: Option<GaussianVars>,
    pub noise: Option<LatentNoise>,
    /// Calibrated prototypes from `P_c` alone, before sampling.
    pub calibrated: Var,
    pub textual: Var,
    pub upsampler: Arc<Upsampler>,
}

/// Shared bilinear upsamplers keyed by grid and output size.
pub fn upsampler(grid: (usize, usize), size: (usize, usize)) -> Result<Arc<Upsampler>> {
    static CACHE: OnceLock<Mutex<HashMap<((usize, usize), (usize, usize)), Arc<Upsampler>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("upsampler cache poisoned");
    if let Some(u) = map.get(&(grid, size)) {
        return Ok(u.clone());
    }
    let u = Arc::new(Upsampler::new(grid, size)?);
    map.insert((grid, size), u.clone());
    Ok(u)
}

/// Noise stream id of an evaluation image.
pub fn sample_uid(key: &str) -> u64 {
    derive_seed(&[EVAL_STREAM, stable_hash(key)])
}

impl SegModel {
    /// Fresh model over `vocab` (the base classes) with seeded parameters.
    pub fn new(
        config: ModelConfig,
        provider_spec: ProviderSpec,
        provider: &EmbeddingProvider,
        vocab: ClassVocabulary,
        seed: u64,
    ) -> Result<Self> {
        let d = provider.dim();
        config.validate(d)?;
        if vocab.is_empty() {
            return Err(Error::Config("the base vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1417]));
        let mut reg = ParameterRegistry::new();
        if let EmbeddingProvider::Toy(t) = provider {
            let prompts = VisualPrompts::random(t.config(), &mut rng);
            for (l, m) in prompts.tokens.into_iter().enumerate() {
                reg.insert(prompt_name(l), m, 0);
            }
        }
        let width = d * config.format.width_factor();
        init_bank(&mut reg, &vocab, provider, width, &mut rng)?;
        init_mlp2(&mut reg, PROJ, (width, d, d), 0, &mut rng);
        if config.probabilistic {
            let hidden = if config.prob_hidden == 0 { d } else { config.prob_hidden };
            init_prob_encoder(&mut reg, d, hidden, config.logvar_init, 0, &mut rng);
        }
        init_decoder(&mut reg, d, config.decoder_width(d), 0, &mut rng);
        Ok(Self {
            config,
            provider: provider_spec,
            vocab,
            registry: reg,
            phase: Phase::Initialized,
            stage: 0,
        })
    }

    pub fn prompt_names(&self) -> Vec<String> {
        (0..)
            .map(prompt_name)
            .take_while(|n| self.registry.contains(n))
            .collect()
    }

    pub fn prompts(&self) -> Result<VisualPrompts> {
        let names = self.prompt_names();
        let trainable = names
            .iter()
            .any(|n| self.registry.entry(n).map(|e| e.trainable).unwrap_or(false));
        Ok(VisualPrompts {
            tokens: names
                .iter()
                .map(|n| self.registry.get(n).cloned())
                .collect::<Result<_>>()?,
            trainable,
        })
    }

    /// Embeds a sample with the current prompts.
    pub fn embed(&self, provider: &EmbeddingProvider, sample: &SegSample) -> Result<EmbeddingBundle> {
        provider.embed(sample, &self.prompts()?)
    }

    /// Options for deterministic evaluation of one image.
    pub fn eval_options(&self, key: &str, size: (usize, usize)) -> ForwardOptions {
        ForwardOptions {
            samples: self.config.effective_samples(),
            sigma_zero: self.config.sigma_zero,
            noise: NoiseSource {
                seed: self.config.eval_seed,
                mode: self.config.sampling,
            },
            uid: sample_uid(key),
            size,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound<'_>,
        provider: &EmbeddingProvider,
        input: ImageInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let (g, h, grid) = match input {
            ImageInput::Sample(sample) => {
                let prompts = self
                    .prompt_names()
                    .iter()
                    .map(|n| bound.param(tape, n))
                    .collect::<Result<Vec<_>>>()?;
                let enc = provider.encode_image(tape, sample, &prompts)?;
                (enc.g, enc.h, provider.grid())
            }
            ImageInput::Embedded(b) => (tape.constant(b.g.clone()), tape.constant(b.h.clone()), b.grid),
        };
        let up = upsampler(grid, opts.size)?;
        let n = self.vocab.len();
        let pt = stack_rows(tape, bound, &self.vocab, BankPart::Textual)?;
        let pc = stack_rows(tape, bound, &self.vocab, BankPart::Calibration)?;
        let format = self.config.format;
        let calibrated = calibrate(tape, pt, pc, format)?;

        let (pc_hat, gauss, noise) = if self.config.probabilistic {
            let enc = ProbEncoder::bind(tape, bound)?;
            let gauss = infer_gaussians(tape, &enc, pt, g, self.config.prob_heads)?;
            let d = tape.value(pt).cols();
            let noise = opts.noise.draw(opts.uid, &self.vocab.ids(), opts.samples, d)?;
            let z = sample_on_tape(tape, gauss, &noise, opts.sigma_zero)?;
            (probabilistic_calibrate(tape, pc, &z)?, Some(gauss), Some(noise))
        } else {
            (vec![pc], None, None)
        };
        let m = pc_hat.len();

        let pm = if m == 1 {
            calibrate(tape, pt, pc_hat[0], format)?
        } else {
            let pts = tape.concat_rows(&vec![pt; m]);
            let pcs = tape.concat_rows(&pc_hat);
            calibrate(tape, pts, pcs, format)?
        };
        let pm = self.splice_visual_rows(tape, bound, pm, m)?;

        let p0 = bound.param(tape, P0)?;
        let mut rows = Vec::with_capacity(2 * m);
        for k in 0..m {
            rows.push(p0);
            rows.push(if m == 1 { pm } else { tape.slice_rows(pm, k * n, n) });
        }
        let stacked = tape.concat_rows(&rows);
        let proj = Mlp2::bind(tape, bound, PROJ)?;
        let width = proj.first.in_width(tape);
        if tape.value(stacked).cols() != width {
            return Err(Error::Config(format!(
                "projection expects width {width}, calibrated prototypes have {}",
                tape.value(stacked).cols()
            )));
        }
        let protos = proj.apply(tape, stacked, self.config.proj_activation)?;

        let dec = DecoderVars::bind(tape, bound)?;
        let u = tape.constant(up.matrix.clone());
        let dopts = DecodeOptions {
            heads: self.config.dec_heads,
            bypass_refine: self.config.bypass_refine,
        };
        let out = decode(tape, protos, h, &dec, &dopts, &up, u)?;
        let c = n + 1;
        let (logits, patch_logits) = if m == 1 {
            (vec![out.full], vec![out.patch])
        } else {
            (
                (0..m).map(|k| tape.slice_rows(out.full, k * c, c)).collect(),
                (0..m).map(|k| tape.slice_rows(out.patch, k * c, c)).collect(),
            )
        };
        Ok(ForwardTrace {
            logits,
            patch_logits,
            channels: c,
            gauss,
            noise,
            calibrated,
            textual: pt,
            upsampler: up,
        })
    }

    /// Replaces calibrated rows of classes that carry a free visual
    /// prototype (vision-only registration).
    fn splice_visual_rows(
        &self,
        tape: &mut Tape,
        bound: &mut Bound<'_>,
        pm: Var,
        m: usize,
    ) -> Result<Var> {
        let ids = self.vocab.ids();
        if !ids.iter().any(|&id| self.registry.contains(&pv_name(id))) {
            return Ok(pm);
        }
        let n = ids.len();
        let mut rows = Vec::with_capacity(m * n);
        for k in 0..m {
            for (i, &id) in ids.iter().enumerate() {
                let name = pv_name(id);
                rows.push(if self.registry.contains(&name) {
                    bound.param(tape, &name)?
                } else {
                    tape.slice_rows(pm, k * n + i, 1)
                });
            }
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Full-resolution logit maps for one image, one per sample.
    pub fn logit_maps(
        &self,
        provider: &EmbeddingProvider,
        input: ImageInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<Vec<LogitMap>> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.registry);
        let trace = self.forward(&mut tape, &mut bound, provider, input, opts)?;
        Ok(trace
            .logits
            .iter()
            .zip(&trace.patch_logits)
            .map(|(&full, &patch)| LogitMap {
                patch: tape.value(patch).clone(),
                full: tape.value(full).clone(),
                grid: trace.upsampler.grid,
                size: trace.upsampler.size,
            })
            .collect())
    }

    pub fn predict(
        &self,
        provider: &EmbeddingProvider,
        input: ImageInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<Prediction> {
        aggregate_logits(&self.logit_maps(provider, input, opts)?)
    }

    /// Textual and calibrated prototypes of the first forward pass.
    pub fn calibrated_prototypes(&self) -> Result<(Mat, Mat)> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.registry);
        let pt = stack_rows(&mut tape, &mut bound, &self.vocab, BankPart::Textual)?;
        let pc = stack_rows(&mut tape, &mut bound, &self.vocab, BankPart::Calibration)?;
        let pm = calibrate(&mut tape, pt, pc, self.config.format)?;
        Ok((tape.value(pt).clone(), tape.value(pm).clone()))
    }
}
