//! Textual prototypes and image embeddings.

pub mod export;
pub mod toy;
pub mod vocab;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::numerics::{Mat, Tape, Var};

pub use export::{load_embedding_export, EmbeddingExport};
pub use toy::{EncodedImage, ToyConfig, ToyEncoder};
pub use vocab::{ClassEntry, ClassId, ClassVocabulary, Split, BACKGROUND};

/// Serializable description of how to rebuild a provider.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Toy(ToyConfig),
    Export { path: PathBuf },
}

impl ProviderSpec {
    pub fn build(&self) -> Result<EmbeddingProvider> {
        match self {
            ProviderSpec::Toy(cfg) => Ok(EmbeddingProvider::Toy(ToyEncoder::new(cfg.clone())?)),
            ProviderSpec::Export { path } => {
                Ok(EmbeddingProvider::Export(load_embedding_export(path)?))
            }
        }
    }
}

/// Deep visual prompts: one `n_prompts × d` token block per encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompts {
    pub tokens: Vec<Mat>,
    pub trainable: bool,
}

impl VisualPrompts {
    pub fn zeros(cfg: &ToyConfig) -> Self {
        Self {
            tokens: (0..cfg.depth).map(|_| Mat::zeros(cfg.n_prompts, cfg.d)).collect(),
            trainable: false,
        }
    }

    pub fn random<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Self {
        Self {
            tokens: (0..cfg.depth)
                .map(|_| Mat::randn(cfg.n_prompts, cfg.d, 1.0, rng))
                .collect(),
            trainable: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(Mat::is_finite)
    }
}

/// Global token and patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    /// `1 × d`
    pub g: Mat,
    /// `L × d`, raster order over the patch grid.
    pub h: Mat,
    pub grid: (usize, usize),
    pub provider_id: String,
    /// Set when the provider could not consume the prompts (exported embeddings).
    pub prompts_ignored: bool,
}

pub enum EmbeddingProvider {
    Toy(ToyEncoder),
    Export(EmbeddingExport),
}

impl EmbeddingProvider {
    pub fn provider_id(&self) -> &'static str {
        match self {
            EmbeddingProvider::Toy(_) => "toy",
            EmbeddingProvider::Export(_) => "export",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Toy(t) => t.config().d,
            EmbeddingProvider::Export(e) => e.d,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            EmbeddingProvider::Toy(t) => (t.config().grid_h, t.config().grid_w),
            EmbeddingProvider::Export(e) => (e.grid_h, e.grid_w),
        }
    }

    /// `(depth, n_prompts)` for providers that consume prompts.
    pub fn prompt_shape(&self) -> Option<(usize, usize)> {
        match self {
            EmbeddingProvider::Toy(t) => Some((t.config().depth, t.config().n_prompts)),
            EmbeddingProvider::Export(_) => None,
        }
    }

    pub fn supports_prompt_training(&self) -> bool {
        self.prompt_shape().is_some()
    }

    pub fn text_embedding(&self, name: &str) -> Result<Vec<f64>> {
        if name.trim().is_empty() {
            return Err(Error::Argument("class names must be nonempty".into()));
        }
        match self {
            EmbeddingProvider::Toy(t) => Ok(t.text_embedding(name)),
            EmbeddingProvider::Export(e) => e
                .text
                .get(name)
                .map(|v| v.iter().map(|&x| x as f64).collect())
                .ok_or_else(|| Error::MissingEmbedding(name.to_string())),
        }
    }

    /// Textual prototypes, row `i` for vocabulary entry `i`.
    pub fn encode_text(&self, vocab: &ClassVocabulary) -> Result<Mat> {
        let rows = vocab
            .entries()
            .iter()
            .map(|e| self.text_embedding(&e.name))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Mat::zeros(0, self.dim()));
        }
        Mat::from_rows(&rows)
    }

    /// Encodes one image on `tape`. Exported embeddings come back as
    /// constants and ignore `prompts`.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        sample: &SegSample,
        prompts: &[Var],
    ) -> Result<EncodedImage> {
        match self {
            EmbeddingProvider::Toy(t) => {
                let img = sample.image().ok_or_else(|| {
                    Error::Config(format!(
                        "sample `{}` has no pixels for the toy encoder",
                        sample.key
                    ))
                })?;
                t.encode(tape, img, prompts)
            }
            EmbeddingProvider::Export(_) => {
                let b = self.exported_bundle(&sample.key)?;
                Ok(EncodedImage {
                    g: tape.constant(b.g),
                    h: tape.constant(b.h),
                })
            }
        }
    }

    fn exported_bundle(&self, key: &str) -> Result<EmbeddingBundle> {
        let EmbeddingProvider::Export(e) = self else {
            unreachable!("exported_bundle on a toy provider")
        };
        let g = e
            .global
            .get(key)
            .ok_or_else(|| Error::MissingSample(key.to_string()))?;
        let h = &e.patches[key];
        Ok(EmbeddingBundle {
            g: Mat::row_vector(g.iter().map(|&v| v as f64).collect()),
            h: Mat::from_vec(e.tokens(), e.d, h.iter().map(|&v| v as f64).collect())?,
            grid: (e.grid_h, e.grid_w),
            provider_id: "export".into(),
            prompts_ignored: true,
        })
    }

    /// Value-level image encoding.
    pub fn embed(&self, sample: &SegSample, prompts: &VisualPrompts) -> Result<EmbeddingBundle> {
        match self {
            EmbeddingProvider::Toy(_) => {
                let mut tape = Tape::new();
                let vars: Vec<Var> = prompts
                    .tokens
                    .iter()
                    .map(|m| tape.constant(m.clone()))
                    .collect();
                let enc = self.encode_image(&mut tape, sample, &vars)?;
                Ok(EmbeddingBundle {
                    g: tape.value(enc.g).clone(),
                    h: tape.value(enc.h).clone(),
                    grid: self.grid(),
                    provider_id: "toy".into(),
                    prompts_ignored: false,
                })
            }
            EmbeddingProvider::Export(_) => self.exported_bundle(&sample.key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, LabelMap, SampleSource};
    use crate::numerics::gradcheck::{finite_diff_check, DEFAULT_STEP, DEFAULT_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn toy(cfg: ToyConfig) -> EmbeddingProvider {
        EmbeddingProvider::Toy(ToyEncoder::new(cfg).unwrap())
    }

    fn pixel_sample(cfg: &ToyConfig, seed: u64) -> SegSample {
        let (h, w) = cfg.image_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(h, w, cfg.channels);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        SegSample {
            key: format!("s{seed}"),
            source: SampleSource::Pixels(Arc::new(img)),
            labels: LabelMap::filled(h, w, 0),
        }
    }

    fn vocab(names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassEntry::new(i as u8 + 1, *n, Split::Base))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_text_is_deterministic_and_row_aligned() {
        let p = toy(ToyConfig::default());
        let a = p.encode_text(&vocab(&["cat", "dog"])).unwrap();
        let b = p.encode_text(&vocab(&["cat", "dog"])).unwrap();
        assert_eq!(a, b);
        let swapped = p.encode_text(&vocab(&["dog", "cat"])).unwrap();
        assert_eq!(swapped, a.permute_rows(&[1, 0]));
    }

    #[test]
    fn export_provider_reports_missing_class() {
        let mut e = EmbeddingExport::new(2, 1, 1);
        e.insert_text("cat", vec![1.0, 0.0]).unwrap();
        let p = EmbeddingProvider::Export(e);
        match p.encode_text(&vocab(&["cat", "sofa"])) {
            Err(Error::MissingEmbedding(name)) => assert_eq!(name, "sofa"),
            other => panic!("expected missing embedding, got {other:?}"),
        }
    }

    #[test]
    fn zero_image_zero_prompts_is_finite_and_repeatable() {
        let cfg = ToyConfig::default();
        let p = toy(cfg.clone());
        let (h, w) = cfg.image_size();
        let s = SegSample {
            key: "zero".into(),
            source: SampleSource::Pixels(Arc::new(Image::zeros(h, w, cfg.channels))),
            labels: LabelMap::filled(h, w, 0),
        };
        let prompts = VisualPrompts::zeros(&cfg);
        let a = p.embed(&s, &prompts).unwrap();
        assert!(a.g.is_finite() && a.h.is_finite());
        assert_eq!(a.h.shape(), (64, 64));
        for _ in 0..1000 {
            assert_eq!(p.embed(&s, &prompts).unwrap(), a);
        }
    }

    #[test]
    fn perturbing_a_prompt_changes_the_global_token() {
        let cfg = ToyConfig::default();
        let p = toy(cfg.clone());
        let s = pixel_sample(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prompts = VisualPrompts::random(&cfg, &mut rng);
        let base = p.embed(&s, &prompts).unwrap();
        let mut bumped = prompts.clone();
        bumped.tokens[0].data_mut()[3] += 1e-3;
        let moved = p.embed(&s, &bumped).unwrap();
        assert!(moved.g.max_abs_diff(&base.g) > 0.0);
    }

    #[test]
    fn global_token_gradient_matches_finite_differences() {
        let cfg = ToyConfig::tiny();
        let p = toy(cfg.clone());
        let s = pixel_sample(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prompts = VisualPrompts::random(&cfg, &mut rng);
        let flat: Vec<f64> = prompts.tokens.iter().flat_map(|m| m.data().to_vec()).collect();
        let per = cfg.n_prompts * cfg.d;
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = (0..cfg.depth)
                .map(|l| {
                    let m = Mat::from_vec(cfg.n_prompts, cfg.d, x[l * per..(l + 1) * per].to_vec())
                        .unwrap();
                    tape.leaf(m, true)
                })
                .collect();
            let enc = p.encode_image(&mut tape, &s, &vars).unwrap();
            let sg = tape.sum(enc.g);
            // weight H so the scalar is not invariant under LayerNorm
            let w = tape.constant(Mat::from_vec(
                cfg.tokens(),
                cfg.d,
                (0..cfg.tokens() * cfg.d).map(|i| ((i % 5) as f64) - 2.0).collect(),
            )
            .unwrap());
            let hw = tape.mul(enc.h, w);
            let sh = tape.sum(hw);
            let total = tape.add(sg, sh);
            let grads = tape.backward(total);
            let g: Vec<f64> = vars
                .iter()
                .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
                .collect();
            (tape.value(total).scalar(), g)
        };
        let (_, analytic) = eval(&flat);
        let report =
            finite_diff_check(|x| eval(x).0, &flat, &analytic, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(report.checked > 0);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn export_provider_ignores_prompts() {
        let mut e = EmbeddingExport::new(2, 1, 1);
        e.insert_image("k", vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let p = EmbeddingProvider::Export(e);
        let s = SegSample {
            key: "k".into(),
            source: SampleSource::External,
            labels: LabelMap::filled(1, 1, 0),
        };
        let cfg = ToyConfig::tiny();
        let b = p.embed(&s, &VisualPrompts::zeros(&cfg)).unwrap();
        assert!(b.prompts_ignored);
        assert_eq!(b.provider_id, "export");
        assert_eq!(b.h.data(), &[3.0, 4.0]);
        assert!(!p.supports_prompt_training());
    }
}
