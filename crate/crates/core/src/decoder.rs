//! Mask decoder: prototype and patch projections, one cross-attention block
//! refining prototypes against patches, dot-product scoring, bilinear
//! upsampling and aggregation of sampled predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{ClassId, ClassVocabulary};
use crate::error::{Error, Result};
use crate::numerics::nn::{init_attention, init_linear, multi_head_attention, AttentionVars, LinearVars};
use crate::numerics::{softmax_columns, Bound, Mat, ParameterRegistry, Stage, Tape, Var};

pub const PSI: &str = "dec.psi";
pub const PATCH_PROJ: &str = "dec.patch";
pub const ATTN: &str = "dec.attn";

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub psi: LinearVars,
    pub patch: LinearVars,
    pub attn: AttentionVars,
}

impl DecoderVars {
    pub fn bind(tape: &mut Tape, bound: &mut Bound<'_>) -> Result<Self> {
        Ok(Self {
            psi: LinearVars::bind(tape, bound, PSI)?,
            patch: LinearVars::bind(tape, bound, PATCH_PROJ)?,
            attn: AttentionVars::bind(tape, bound, ATTN)?,
        })
    }

    pub fn width(&self, tape: &Tape) -> usize {
        tape.value(self.psi.w).cols()
    }
}

pub fn init_decoder<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    d_in: usize,
    d_dec: usize,
    stage: Stage,
    rng: &mut R,
) {
    let std = (1.0 / d_in as f64).sqrt();
    init_linear(reg, PSI, d_in, d_dec, std, stage, rng);
    init_linear(reg, PATCH_PROJ, d_in, d_dec, std, stage, rng);
    init_attention(reg, ATTN, d_dec, stage, rng);
    // start the refinement close to a no-op
    let o = reg.get_mut(&format!("{ATTN}.o.w")).expect("just inserted");
    *o = o.scale(0.1);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub heads: usize,
    /// Skip the cross-attention block (identity checks only).
    pub bypass_refine: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            heads: 4,
            bypass_refine: false,
        }
    }
}

/// Bilinear resampling from the patch grid to pixels as an `L × (h·w)`
/// matrix, half-pixel centres, edges clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub grid: (usize, usize),
    pub size: (usize, usize),
    pub matrix: Mat,
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Upsampler {
    pub fn new(grid: (usize, usize), size: (usize, usize)) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 || size.0 == 0 || size.1 == 0 {
            return Err(Error::Dimension("empty grid or image size".into()));
        }
        let (gh, gw) = grid;
        let (h, w) = size;
        let ys = axis_weights(gh, h);
        let xs = axis_weights(gw, w);
        let mut m = Mat::zeros(gh * gw, h * w);
        for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                let p = y * w + x;
                for (r, c, wt) in [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ] {
                    let l = r * gw + c;
                    m.set(l, p, m.get(l, p) + wt);
                }
            }
        }
        Ok(Self {
            grid,
            size,
            matrix: m,
        })
    }

    pub fn pixels(&self) -> usize {
        self.size.0 * self.size.1
    }

    pub fn apply(&self, patch_logits: &Mat) -> Mat {
        patch_logits.matmul(&self.matrix)
    }
}

/// Tape handles of one decoded logit map.
#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    /// `(N+1) × L`
    pub patch: Var,
    /// `(N+1) × (h·w)`
    pub full: Var,
}

/// Per-class logits at patch and pixel resolution; channel 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    pub patch: Mat,
    pub full: Mat,
    pub grid: (usize, usize),
    pub size: (usize, usize),
}

impl LogitMap {
    pub fn from_vars(tape: &Tape, vars: LogitVars, up: &Upsampler) -> Self {
        Self {
            patch: tape.value(vars.patch).clone(),
            full: tape.value(vars.full).clone(),
            grid: up.grid,
            size: up.size,
        }
    }

    pub fn channels(&self) -> usize {
        self.full.rows()
    }
}

/// Scores projected prototypes (`(N+1) × d`) against patch tokens (`L × d`).
/// `upsample` is the constant upsampling matrix, shared across samples.
pub fn decode(
    tape: &mut Tape,
    protos: Var,
    patches: Var,
    vars: &DecoderVars,
    opts: &DecodeOptions,
    up: &Upsampler,
    upsample: Var,
) -> Result<LogitVars> {
    let l = tape.value(patches).rows();
    if l != up.grid.0 * up.grid.1 {
        return Err(Error::Dimension(format!(
            "{l} patch tokens for a {}x{} grid",
            up.grid.0, up.grid.1
        )));
    }
    if tape.value(upsample).shape() != up.matrix.shape() {
        return Err(Error::Dimension("upsampling matrix does not match grid".into()));
    }
    let q = vars.psi.apply(tape, protos)?;
    let k = vars.patch.apply(tape, patches)?;
    let q = if opts.bypass_refine {
        q
    } else {
        let a = multi_head_attention(tape, q, k, &vars.attn, opts.heads)?;
        tape.add(q, a)
    };
    let d = vars.width(tape);
    let scores = tape.matmul_t(q, k);
    let patch = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let full = tape.matmul(patch, upsample);
    Ok(LogitVars { patch, full })
}

/// Mean and population variance of per-pixel class probabilities over the
/// sampled predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `(N+1) × (h·w)`
    pub prob_mean: Mat,
    pub prob_var: Mat,
    /// Argmax channel per pixel, ties to the lowest channel.
    pub channels: Vec<u8>,
    pub size: (usize, usize),
}

impl Prediction {
    /// Argmax channels translated to label values.
    pub fn label_map(&self, vocab: &ClassVocabulary) -> Vec<ClassId> {
        self.channels
            .iter()
            .map(|&c| vocab.class_of_channel(c as usize))
            .collect()
    }

    /// Per-pixel variance of the most uncertain channel.
    pub fn uncertainty(&self) -> Vec<f32> {
        let (c, p) = self.prob_var.shape();
        (0..p)
            .map(|j| {
                (0..c)
                    .map(|i| self.prob_var.get(i, j))
                    .fold(0.0f64, f64::max) as f32
            })
            .collect()
    }
}

/// Softmax over channels at full resolution for each map, then mean and
/// population variance over maps.
pub fn aggregate(maps: &[Mat], size: (usize, usize)) -> Result<Prediction> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument("aggregate needs at least one logit map".into()))?;
    let (c, p) = first.shape();
    if p != size.0 * size.1 || maps.iter().any(|m| m.shape() != (c, p)) {
        return Err(Error::Dimension("logit maps have inconsistent shapes".into()));
    }
    // Welford updates keep identical maps at exactly zero variance
    let mut mean = Mat::zeros(c, p);
    let mut m2 = Mat::zeros(c, p);
    for (k, map) in maps.iter().enumerate() {
        let pr = softmax_columns(map);
        let inv = 1.0 / (k + 1) as f64;
        for ((x, mu), s) in pr
            .data()
            .iter()
            .zip(mean.data_mut().iter_mut())
            .zip(m2.data_mut().iter_mut())
        {
            let delta = x - *mu;
            *mu += delta * inv;
            *s += delta * (x - *mu);
        }
    }
    let var = m2.scale(1.0 / maps.len() as f64);
    let channels = (0..p)
        .map(|j| {
            let mut best = 0;
            for i in 1..c {
                if mean.get(i, j) > mean.get(best, j) {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    Ok(Prediction {
        prob_mean: mean,
        prob_var: var,
        channels,
        size,
    })
}

pub fn aggregate_logits(maps: &[LogitMap]) -> Result<Prediction> {
    let size = maps
        .first()
        .ok_or_else(|| Error::Argument("aggregate needs at least one logit map".into()))?
        .size;
    let full: Vec<Mat> = maps.iter().map(|m| m.full.clone()).collect();
    aggregate(&full, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_check, DEFAULT_STEP, DEFAULT_TOL};
    use crate::numerics::masked_cross_entropy;
    use crate::numerics::nn::init_linear_identity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_decoder(d: usize) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        init_linear_identity(&mut reg, PSI, d, 0);
        init_linear_identity(&mut reg, PATCH_PROJ, d, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_attention(&mut reg, ATTN, d, 0, &mut rng);
        reg
    }

    fn bypass() -> DecodeOptions {
        DecodeOptions {
            heads: 4,
            bypass_refine: true,
        }
    }

    fn run(reg: &ParameterRegistry, protos: &Mat, patches: &Mat, opts: DecodeOptions, up: &Upsampler) -> LogitMap {
        let mut tape = Tape::new();
        let mut bound = Bound::new(reg);
        let vars = DecoderVars::bind(&mut tape, &mut bound).unwrap();
        let p = tape.constant(protos.clone());
        let h = tape.constant(patches.clone());
        let u = tape.constant(up.matrix.clone());
        let out = decode(&mut tape, p, h, &vars, &opts, up, u).unwrap();
        LogitMap::from_vars(&tape, out, up)
    }

    #[test]
    fn matching_patch_scores_highest() {
        let reg = identity_decoder(4);
        let protos = Mat::identity(4);
        let patches = Mat::from_rows(&[
            vec![0.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let up = Upsampler::new((2, 2), (4, 4)).unwrap();
        let out = run(&reg, &protos, &patches, bypass(), &up);
        for (l, want) in [2, 0, 1, 3].into_iter().enumerate() {
            for c in 0..4 {
                if c != want {
                    assert!(out.patch.get(want, l) > out.patch.get(c, l));
                }
            }
        }
    }

    #[test]
    fn scaling_a_prototype_scales_its_logits() {
        let reg = identity_decoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos = Mat::randn(3, 4, 1.0, &mut rng);
        let patches = Mat::randn(4, 4, 1.0, &mut rng);
        let up = Upsampler::new((2, 2), (4, 4)).unwrap();
        let a = run(&reg, &protos, &patches, bypass(), &up);
        let mut doubled = protos.clone();
        for v in doubled.row_mut(1) {
            *v *= 2.0;
        }
        let b = run(&reg, &doubled, &patches, bypass(), &up);
        for l in 0..4 {
            assert!((b.patch.get(1, l) - 2.0 * a.patch.get(1, l)).abs() < 1e-12);
            assert_eq!(b.patch.get(0, l), a.patch.get(0, l));
        }
    }

    #[test]
    fn prototype_permutation_permutes_channels() {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_decoder(&mut reg, 8, 8, 0, &mut rng);
        let protos = Mat::randn(4, 8, 1.0, &mut rng);
        let patches = Mat::randn(4, 8, 1.0, &mut rng);
        let up = Upsampler::new((2, 2), (4, 4)).unwrap();
        let a = run(&reg, &protos, &patches, DecodeOptions::default(), &up);
        let perm = [0, 3, 1, 2];
        let b = run(&reg, &protos.permute_rows(&perm), &patches, DecodeOptions::default(), &up);
        assert!(b.full.max_abs_diff(&a.full.permute_rows(&perm)) < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_a_dimension_error() {
        let reg = identity_decoder(4);
        let up = Upsampler::new((2, 2), (4, 4)).unwrap();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&reg);
        let vars = DecoderVars::bind(&mut tape, &mut bound).unwrap();
        let p = tape.constant(Mat::zeros(2, 4));
        let h = tape.constant(Mat::zeros(3, 4));
        let u = tape.constant(up.matrix.clone());
        assert!(matches!(
            decode(&mut tape, p, h, &vars, &bypass(), &up, u),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn constant_maps_upsample_to_the_same_constant() {
        for (grid, size) in [((2, 2), (4, 4)), ((8, 8), (32, 32)), ((3, 5), (7, 11))] {
            let up = Upsampler::new(grid, size).unwrap();
            let l = grid.0 * grid.1;
            let m = Mat::from_rows(&[vec![2.5; l], vec![-1.25; l]]).unwrap();
            let full = up.apply(&m);
            assert!(full.row(0).iter().all(|v| (v - 2.5).abs() < 1e-12));
            assert!(full.row(1).iter().all(|v| (v + 1.25).abs() < 1e-12));
        }
    }

    #[test]
    fn upsampling_matches_half_pixel_bilinear() {
        // 1x2 grid to 1x4 pixels: centres at 0.25, 0.75, 1.25, 1.75 in grid units
        let up = Upsampler::new((1, 2), (1, 4)).unwrap();
        let out = up.apply(&Mat::row_vector(vec![0.0, 1.0]));
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn aggregation_arithmetic() {
        let to_logits = |p: [f64; 2]| Mat::from_vec(2, 1, vec![p[0].ln(), p[1].ln()]).unwrap();
        let pred = aggregate(&[to_logits([0.2, 0.8]), to_logits([0.6, 0.4])], (1, 1)).unwrap();
        assert!((pred.prob_mean.get(0, 0) - 0.4).abs() < 1e-12);
        assert!((pred.prob_mean.get(1, 0) - 0.6).abs() < 1e-12);
        assert!((pred.prob_var.get(0, 0) - 0.04).abs() < 1e-12);
        assert!((pred.prob_var.get(1, 0) - 0.04).abs() < 1e-12);
        assert_eq!(pred.channels, vec![1]);
    }

    #[test]
    fn degenerate_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Mat::randn(3, 16, 2.0, &mut rng);
        let one = aggregate(&[m.clone()], (4, 4)).unwrap();
        assert!(one.prob_var.data().iter().all(|&v| v == 0.0));
        let two = aggregate(&[m.clone(), m.clone()], (4, 4)).unwrap();
        assert!(two.prob_var.data().iter().all(|&v| v == 0.0));
        assert_eq!(one.channels, two.channels);
        assert!(matches!(aggregate(&[], (4, 4)), Err(Error::Argument(_))));
    }

    #[test]
    fn ties_go_to_the_lowest_channel() {
        let pred = aggregate(&[Mat::zeros(3, 1)], (1, 1)).unwrap();
        assert_eq!(pred.channels, vec![0]);
        let m = Mat::from_vec(3, 1, vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(aggregate(&[m], (1, 1)).unwrap().channels, vec![1]);
    }

    #[test]
    fn cross_entropy_gradient_wrt_prototype_projection() {
        let d = 4;
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        init_decoder(&mut reg, d, d, 0, &mut rng);
        reg.set_trainable(&format!("{PSI}.w"), false).unwrap();
        let protos = Mat::randn(2, d, 1.0, &mut rng);
        let patches = Mat::randn(4, d, 1.0, &mut rng);
        let up = Upsampler::new((2, 2), (4, 4)).unwrap();
        let labels: Vec<u8> = (0..16).map(|i| ((i / 2 + i / 8) % 2) as u8).collect();
        let eval = |reg: &ParameterRegistry, grad: bool| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(reg);
            let vars = DecoderVars::bind(&mut tape, &mut bound).unwrap();
            let p = tape.constant(protos.clone());
            let h = tape.constant(patches.clone());
            let u = tape.constant(up.matrix.clone());
            let out = decode(&mut tape, p, h, &vars, &DecodeOptions::default(), &up, u).unwrap();
            let loss = masked_cross_entropy(&mut tape, out.full, &labels).unwrap();
            let v = tape.value(loss).scalar();
            let g = grad.then(|| bound.gradients(&tape.backward(loss)));
            (v, g)
        };
        let name = format!("{PSI}.w");
        let analytic = eval(&reg, true).1.unwrap().remove(&name).unwrap();
        let params = reg.get(&name).unwrap().data().to_vec();
        let report = finite_diff_check(
            |p| {
                let mut r = reg.clone();
                r.get_mut(&name).unwrap().data_mut().copy_from_slice(p);
                eval(&r, false).0
            },
            &params,
            analytic.data(),
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
