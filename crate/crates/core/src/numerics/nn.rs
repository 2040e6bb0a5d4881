//! Layer building blocks shared by the encoder, the probabilistic encoder and
//! the mask decoder.

use rand::Rng;

use super::registry::{Bound, ParameterRegistry, Stage};
use super::tape::{Tape, Var};
use super::tensor::Mat;
use crate::error::{Error, Result};

/// Registers `{prefix}.w` (`d_in × d_out`, N(0, std²)) and `{prefix}.b` (zeros).
pub fn init_linear<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    stage: Stage,
    rng: &mut R,
) {
    reg.insert(format!("{prefix}.w"), Mat::randn(d_in, d_out, std, rng), stage);
    reg.insert(format!("{prefix}.b"), Mat::zeros(1, d_out), stage);
}

pub fn init_linear_identity(reg: &mut ParameterRegistry, prefix: &str, d: usize, stage: Stage) {
    reg.insert(format!("{prefix}.w"), Mat::identity(d), stage);
    reg.insert(format!("{prefix}.b"), Mat::zeros(1, d), stage);
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn bind(tape: &mut Tape, bound: &mut Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: bound.param(tape, &format!("{prefix}.w"))?,
            b: bound.param(tape, &format!("{prefix}.b"))?,
        })
    }

    pub fn constant(tape: &mut Tape, w: &Mat, b: &Mat) -> Self {
        Self {
            w: tape.constant(w.clone()),
            b: tape.constant(b.clone()),
        }
    }

    pub fn in_width(&self, tape: &Tape) -> usize {
        tape.value(self.w).rows()
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (d_in, _) = tape.value(self.w).shape();
        let got = tape.value(x).cols();
        if got != d_in {
            return Err(Error::Dimension(format!(
                "linear layer expects width {d_in}, got {got}"
            )));
        }
        Ok(tape.linear(x, self.w, self.b))
    }
}

/// Two linear layers with a GELU in between, applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: LinearVars,
    pub second: LinearVars,
}

impl Mlp2 {
    pub fn bind(tape: &mut Tape, bound: &mut Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            first: LinearVars::bind(tape, bound, &format!("{prefix}.l1"))?,
            second: LinearVars::bind(tape, bound, &format!("{prefix}.l2"))?,
        })
    }

    /// `activation = false` skips the GELU (identity checks only).
    pub fn apply(&self, tape: &mut Tape, x: Var, activation: bool) -> Result<Var> {
        let h = self.first.apply(tape, x)?;
        let h = if activation { tape.gelu(h) } else { h };
        self.second.apply(tape, h)
    }
}

pub fn init_mlp2<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    prefix: &str,
    dims: (usize, usize, usize),
    stage: Stage,
    rng: &mut R,
) {
    let (d_in, hidden, d_out) = dims;
    init_linear(reg, &format!("{prefix}.l1"), d_in, hidden, (1.0 / d_in as f64).sqrt(), stage, rng);
    init_linear(reg, &format!("{prefix}.l2"), hidden, d_out, (1.0 / hidden as f64).sqrt(), stage, rng);
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

impl AttentionVars {
    pub fn bind(tape: &mut Tape, bound: &mut Bound<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: LinearVars::bind(tape, bound, &format!("{prefix}.q"))?,
            k: LinearVars::bind(tape, bound, &format!("{prefix}.k"))?,
            v: LinearVars::bind(tape, bound, &format!("{prefix}.v"))?,
            o: LinearVars::bind(tape, bound, &format!("{prefix}.o"))?,
        })
    }
}

pub fn init_attention<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    prefix: &str,
    d: usize,
    stage: Stage,
    rng: &mut R,
) {
    let std = (1.0 / d as f64).sqrt();
    for part in ["q", "k", "v", "o"] {
        init_linear(reg, &format!("{prefix}.{part}"), d, d, std, stage, rng);
    }
}

pub fn init_attention_identity(reg: &mut ParameterRegistry, prefix: &str, d: usize, stage: Stage) {
    for part in ["q", "k", "v", "o"] {
        init_linear_identity(reg, &format!("{prefix}.{part}"), d, stage);
    }
}

/// Scaled dot-product multi-head attention of `queries` (n × d) over
/// `keys_values` (m × d), followed by the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(p.q.w).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = p.q.apply(tape, queries)?;
    let k = p.k.apply(tape, keys_values)?;
    let v = p.v.apply(tape, keys_values)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh));
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    p.o.apply(tape, joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_attention(&mut reg, "a", 6, 0, &mut rng);
        let mut tape = Tape::new();
        let mut bound = Bound::new(&reg);
        let p = AttentionVars::bind(&mut tape, &mut bound, "a").unwrap();
        let x = tape.constant(Mat::zeros(2, 6));
        assert!(matches!(
            multi_head_attention(&mut tape, x, x, &p, 4),
            Err(Error::Config(_))
        ));
        assert!(multi_head_attention(&mut tape, x, x, &p, 3).is_ok());
    }
}
