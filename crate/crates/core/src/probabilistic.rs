//! Probabilistic multi-modal encoder: class-wise Gaussians conditioned on the
//! textual prototype and the image's global token, reparameterized sampling
//! and the KL regularizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::ClassId;
use crate::error::{Error, Result};
use crate::numerics::nn::{init_attention, init_linear, multi_head_attention, AttentionVars, Mlp2};
use crate::numerics::{derive_seed, Bound, Mat, ParameterRegistry, Stage, Tape, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const MAX_SAMPLES: usize = 32;

pub const MHCA: &str = "prob.mhca";
pub const PHI_MU: &str = "prob.mu";
pub const PHI_SIGMA: &str = "prob.sigma";

const MIXTURE_STREAM: u64 = 0x3d1c;

/// Per-class diagonal Gaussians, `N × d` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseGaussians {
    pub mu: Mat,
    pub logvar: Mat,
}

impl ClasswiseGaussians {
    /// Clamps `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mu: Mat, logvar: Mat) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::Dimension(format!(
                "mu {:?} vs logvar {:?}",
                mu.shape(),
                logvar.shape()
            )));
        }
        if !mu.is_finite() || logvar.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Argument("Gaussian parameters must be finite".into()));
        }
        let logvar = logvar.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(Self { mu, logvar })
    }

    pub fn classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn sigma(&self) -> Mat {
        self.logvar.map(|v| (0.5 * v).exp())
    }
}

/// Tape handles of the inferred Gaussians.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn values(&self, tape: &Tape) -> ClasswiseGaussians {
        ClasswiseGaussians {
            mu: tape.value(self.mu).clone(),
            logvar: tape.value(self.logvar).clone(),
        }
    }
}

/// Bound parameters of the probabilistic encoder.
#[derive(Clone, Copy, Debug)]
pub struct ProbEncoder {
    pub attn: AttentionVars,
    pub phi_mu: Mlp2,
    pub phi_sigma: Mlp2,
}

impl ProbEncoder {
    pub fn bind(tape: &mut Tape, bound: &mut Bound<'_>) -> Result<Self> {
        Ok(Self {
            attn: AttentionVars::bind(tape, bound, MHCA)?,
            phi_mu: Mlp2::bind(tape, bound, PHI_MU)?,
            phi_sigma: Mlp2::bind(tape, bound, PHI_SIGMA)?,
        })
    }
}

/// Registers the cross-attention and both MLPs. The output layers start
/// small so that initial samples stay close to zero, with `logvar` near
/// `logvar_init`.
pub fn init_prob_encoder<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    d: usize,
    hidden: usize,
    logvar_init: f64,
    stage: Stage,
    rng: &mut R,
) {
    init_attention(reg, MHCA, d, stage, rng);
    let std_in = (1.0 / d as f64).sqrt();
    let std_out = 0.1 / (hidden as f64).sqrt();
    for prefix in [PHI_MU, PHI_SIGMA] {
        init_linear(reg, &format!("{prefix}.l1"), d, hidden, std_in, stage, rng);
        init_linear(reg, &format!("{prefix}.l2"), hidden, d, std_out, stage, rng);
    }
    let bias = reg.get_mut(&format!("{PHI_SIGMA}.l2.b")).expect("just inserted");
    *bias = Mat::filled(1, d, logvar_init);
}

/// Cross-attention of textual prototypes (queries) over image tokens
/// (keys and values). With a single key every head's weight is exactly 1.
pub fn mhca(
    tape: &mut Tape,
    query: Var,
    key_value: Var,
    attn: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let (dq, dk) = (tape.value(query).cols(), tape.value(key_value).cols());
    if dq != dk {
        return Err(Error::Dimension(format!("query width {dq} vs key width {dk}")));
    }
    multi_head_attention(tape, query, key_value, attn, heads)
}

/// `mu_i = φ_μ(P_t^i + mhca(P_t^i, g))`, `logvar_i` likewise through φ_σ and
/// clamped. The query residual keeps the fused feature class-specific; the
/// attention term alone cannot depend on the query when there is one key.
pub fn infer_gaussians(
    tape: &mut Tape,
    enc: &ProbEncoder,
    pt: Var,
    g: Var,
    heads: usize,
) -> Result<GaussianVars> {
    if tape.value(g).rows() != 1 {
        return Err(Error::Dimension("global token must be a single row".into()));
    }
    let a = mhca(tape, pt, g, &enc.attn, heads)?;
    let fused = tape.add(pt, a);
    let mu = enc.phi_mu.apply(tape, fused, true)?;
    let raw = enc.phi_sigma.apply(tape, fused, true)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok(GaussianVars { mu, logvar })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Class `i` draws only from its own Gaussian.
    #[default]
    PerComponent,
    /// Each draw for class `i` first picks a mixture component uniformly.
    Mixture,
}

/// Standard-normal draws for one image, fixed before sampling so the same
/// noise can be replayed (finite differences, evaluation).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    /// `M` matrices of `N × d`.
    pub eps: Vec<Mat>,
    /// Mixture component per `(m, i)`; `None` for per-component sampling.
    pub component: Option<Vec<Vec<usize>>>,
    /// Per-class stream seeds.
    pub seed_record: Vec<u64>,
}

impl LatentNoise {
    pub fn samples(&self) -> usize {
        self.eps.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
    pub mode: SamplingMode,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            mode: SamplingMode::PerComponent,
        }
    }

    /// Draws `m` noise slices. Class `i` reads its own stream keyed by
    /// `(seed, uid, class_ids[i])`, so adding classes never changes the noise
    /// of existing ones.
    pub fn draw(&self, uid: u64, class_ids: &[ClassId], m: usize, d: usize) -> Result<LatentNoise> {
        if m < 1 {
            return Err(Error::Argument(format!("need at least one sample, got M={m}")));
        }
        let n = class_ids.len();
        let mut eps = vec![Mat::zeros(n, d); m];
        let mut seed_record = Vec::with_capacity(n);
        for (i, &c) in class_ids.iter().enumerate() {
            let s = derive_seed(&[self.seed, uid, c as u64]);
            seed_record.push(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for slice in eps.iter_mut() {
                for v in slice.row_mut(i) {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
        let component = match self.mode {
            SamplingMode::PerComponent => None,
            SamplingMode::Mixture => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, uid, MIXTURE_STREAM]));
                Some(
                    (0..m)
                        .map(|_| (0..n).map(|_| rng.gen_range(0..n)).collect())
                        .collect(),
                )
            }
        };
        Ok(LatentNoise {
            eps,
            component,
            seed_record,
        })
    }
}

/// `z[m] = mu + exp(0.5·logvar) ⊙ eps[m]` on the tape. With `sigma_zero`
/// every slice is exactly `mu`.
pub fn sample_on_tape(
    tape: &mut Tape,
    gauss: GaussianVars,
    noise: &LatentNoise,
    sigma_zero: bool,
) -> Result<Vec<Var>> {
    let shape = tape.value(gauss.mu).shape();
    if noise.eps.iter().any(|e| e.shape() != shape) {
        return Err(Error::Dimension(format!(
            "noise slices do not match Gaussians of shape {shape:?}"
        )));
    }
    if sigma_zero {
        return Ok(vec![gauss.mu; noise.samples()]);
    }
    let half = tape.scale(gauss.logvar, 0.5);
    let sigma = tape.exp(half);
    let mut out = Vec::with_capacity(noise.samples());
    for (m, eps) in noise.eps.iter().enumerate() {
        let (mu, sigma) = match &noise.component {
            None => (gauss.mu, sigma),
            Some(comp) => (
                gather_rows(tape, gauss.mu, &comp[m]),
                gather_rows(tape, sigma, &comp[m]),
            ),
        };
        let e = tape.constant(eps.clone());
        let scaled = tape.mul(sigma, e);
        out.push(tape.add(mu, scaled));
    }
    Ok(out)
}

fn gather_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Var {
    let parts: Vec<Var> = rows.iter().map(|&r| tape.slice_rows(x, r, 1)).collect();
    tape.concat_rows(&parts)
}

/// Sampled latent prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSamples {
    /// `M` matrices of `N × d`.
    pub z: Vec<Mat>,
    pub seed_record: Vec<u64>,
}

/// Value-level sampling of `m` latent prototypes per class.
pub fn sample_latents(
    gauss: &ClasswiseGaussians,
    m: usize,
    source: &NoiseSource,
    uid: u64,
    class_ids: &[ClassId],
) -> Result<LatentSamples> {
    if class_ids.len() != gauss.classes() {
        return Err(Error::Dimension(format!(
            "{} class ids for {} Gaussians",
            class_ids.len(),
            gauss.classes()
        )));
    }
    let noise = source.draw(uid, class_ids, m, gauss.dim())?;
    let mut tape = Tape::new();
    let vars = GaussianVars {
        mu: tape.constant(gauss.mu.clone()),
        logvar: tape.constant(gauss.logvar.clone()),
    };
    let z = sample_on_tape(&mut tape, vars, &noise, false)?
        .into_iter()
        .map(|v| tape.value(v).clone())
        .collect();
    Ok(LatentSamples {
        z,
        seed_record: noise.seed_record,
    })
}

/// `P̂_c[m] = P_c + z[m]`.
pub fn probabilistic_calibrate(tape: &mut Tape, pc: Var, z: &[Var]) -> Result<Vec<Var>> {
    let shape = tape.value(pc).shape();
    z.iter()
        .map(|&zm| {
            if tape.value(zm).shape() != shape {
                return Err(Error::Dimension(format!(
                    "latent slice {:?} vs calibration prototypes {shape:?}",
                    tape.value(zm).shape()
                )));
            }
            Ok(tape.add(pc, zm))
        })
        .collect()
}

pub fn probabilistic_calibrate_values(pc: &Mat, z: &[Mat]) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let p = tape.constant(pc.clone());
    let zs: Vec<Var> = z.iter().map(|m| tape.constant(m.clone())).collect();
    let out = probabilistic_calibrate(&mut tape, p, &zs)?;
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Mean over classes of `0.5·Σ_d (μ² + σ² − logvar − 1)`.
pub fn kl_to_standard_normal(tape: &mut Tape, gauss: GaussianVars) -> Var {
    let n = tape.value(gauss.mu).rows().max(1);
    let mu2 = tape.square(gauss.mu);
    let var = tape.exp(gauss.logvar);
    let s = tape.add(mu2, var);
    let s = tape.sub(s, gauss.logvar);
    let s = tape.affine(s, 1.0, -1.0);
    let total = tape.sum(s);
    tape.scale(total, 0.5 / n as f64)
}

pub fn kl_value(gauss: &ClasswiseGaussians) -> f64 {
    let mut tape = Tape::new();
    let vars = GaussianVars {
        mu: tape.constant(gauss.mu.clone()),
        logvar: tape.constant(gauss.logvar.clone()),
    };
    let kl = kl_to_standard_normal(&mut tape, vars);
    tape.value(kl).scalar()
}
