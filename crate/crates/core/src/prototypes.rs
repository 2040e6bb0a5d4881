//! Prototype bank, calibration and background concatenation.
//!
//! Bank rows live in the parameter registry as one tensor per class so that
//! freezing is per row: `bank.pt.<id>` (textual, structurally frozen),
//! `bank.pc.<id>` (calibration), `bank.pv.<id>` (free visual prototype, only
//! in the vision-only ablation) and `bank.p0` (background).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{ClassEntry, ClassId, ClassVocabulary, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::numerics::nn::Mlp2;
use crate::numerics::{tensor_checksum, Bound, Mat, ParameterRegistry, Stage, Tape, Var};

pub const P0: &str = "bank.p0";
pub const PROJ: &str = "proj";

pub fn pt_name(id: ClassId) -> String {
    format!("bank.pt.{id}")
}

pub fn pc_name(id: ClassId) -> String {
    format!("bank.pc.{id}")
}

pub fn pv_name(id: ClassId) -> String {
    format!("bank.pv.{id}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationFormat {
    Add,
    Sub,
    Mul,
    Concat,
    MulConcat,
    #[default]
    MulAdd,
}

impl CalibrationFormat {
    pub const ALL: [CalibrationFormat; 6] = [
        CalibrationFormat::Add,
        CalibrationFormat::Sub,
        CalibrationFormat::Mul,
        CalibrationFormat::Concat,
        CalibrationFormat::MulConcat,
        CalibrationFormat::MulAdd,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CalibrationFormat::Add => "add",
            CalibrationFormat::Sub => "sub",
            CalibrationFormat::Mul => "mul",
            CalibrationFormat::Concat => "concat",
            CalibrationFormat::MulConcat => "mul_concat",
            CalibrationFormat::MulAdd => "mul_add",
        }
    }

    /// Human-readable formula.
    pub fn formula(self) -> &'static str {
        match self {
            CalibrationFormat::Add => "Pt+Pc",
            CalibrationFormat::Sub => "Pt-Pc",
            CalibrationFormat::Mul => "Pt*Pc",
            CalibrationFormat::Concat => "[Pt,Pc]",
            CalibrationFormat::MulConcat => "[Pt*Pc,Pt]",
            CalibrationFormat::MulAdd => "Pt*Pc+Pt",
        }
    }

    /// Output width relative to the prototype width.
    pub fn width_factor(self) -> usize {
        match self {
            CalibrationFormat::Concat | CalibrationFormat::MulConcat => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CalibrationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CalibrationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown calibration format `{s}`")))
    }
}

/// Calibrated prototypes from textual prototypes `pt` and calibration
/// prototypes `pc` (both `N × d`).
pub fn calibrate(tape: &mut Tape, pt: Var, pc: Var, format: CalibrationFormat) -> Result<Var> {
    let (a, b) = (tape.value(pt).shape(), tape.value(pc).shape());
    if a != b {
        return Err(Error::Dimension(format!(
            "textual prototypes {a:?} vs calibration prototypes {b:?}"
        )));
    }
    Ok(match format {
        CalibrationFormat::Add => tape.add(pt, pc),
        CalibrationFormat::Sub => tape.sub(pt, pc),
        CalibrationFormat::Mul => tape.mul(pt, pc),
        CalibrationFormat::Concat => tape.concat_cols(&[pt, pc]),
        CalibrationFormat::MulConcat => {
            let m = tape.mul(pt, pc);
            tape.concat_cols(&[m, pt])
        }
        CalibrationFormat::MulAdd => {
            let m = tape.mul(pt, pc);
            tape.add(m, pt)
        }
    })
}

pub fn calibrate_values(pt: &Mat, pc: &Mat, format: CalibrationFormat) -> Result<Mat> {
    let mut tape = Tape::new();
    let a = tape.constant(pt.clone());
    let b = tape.constant(pc.clone());
    let out = calibrate(&mut tape, a, b, format)?;
    Ok(tape.value(out).clone())
}

/// Prepends the background prototype and projects every row through the
/// two-layer projection. Output row 0 is background.
pub fn concat_background(
    tape: &mut Tape,
    p0: Var,
    pm: Var,
    proj: &Mlp2,
    activation: bool,
) -> Result<Var> {
    let width = proj.first.in_width(tape);
    let (w0, wm) = (tape.value(p0).cols(), tape.value(pm).cols());
    if tape.value(p0).rows() != 1 || w0 != width || wm != width {
        return Err(Error::Config(format!(
            "projection expects width {width}, got background {w0} and prototypes {wm}"
        )));
    }
    let stacked = tape.concat_rows(&[p0, pm]);
    proj.apply(tape, stacked, activation)
}

/// Which bank tensor to stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankPart {
    Textual,
    Calibration,
}

/// Stacks per-class rows in vocabulary order.
pub fn stack_rows(
    tape: &mut Tape,
    bound: &mut Bound<'_>,
    vocab: &ClassVocabulary,
    part: BankPart,
) -> Result<Var> {
    let rows = vocab
        .entries()
        .iter()
        .map(|e| {
            let name = match part {
                BankPart::Textual => pt_name(e.class_id),
                BankPart::Calibration => pc_name(e.class_id),
            };
            bound.param(tape, &name)
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    Ok(tape.concat_rows(&rows))
}

/// Initialises textual rows (frozen), zero calibration rows and the
/// background prototype for `vocab`.
pub fn init_bank<R: Rng + ?Sized>(
    reg: &mut ParameterRegistry,
    vocab: &ClassVocabulary,
    provider: &EmbeddingProvider,
    background_width: usize,
    rng: &mut R,
) -> Result<()> {
    for e in vocab.entries() {
        insert_rows(reg, e, provider, 0)?;
    }
    reg.insert(P0, Mat::randn(1, background_width, 0.02, rng), 0);
    Ok(())
}

fn insert_rows(
    reg: &mut ParameterRegistry,
    e: &ClassEntry,
    provider: &EmbeddingProvider,
    stage: Stage,
) -> Result<()> {
    let pt = provider.text_embedding(&e.name)?;
    let d = pt.len();
    reg.insert_structural(pt_name(e.class_id), Mat::row_vector(pt), stage);
    reg.insert(pc_name(e.class_id), Mat::zeros(1, d), stage);
    Ok(())
}

/// Appends textual and zero calibration rows for `new_classes`, freezes every
/// existing tensor and marks only the new calibration rows trainable. Nothing
/// is changed when any class collides with the vocabulary.
pub fn register_novel(
    reg: &mut ParameterRegistry,
    vocab: &mut ClassVocabulary,
    new_classes: &[ClassEntry],
    provider: &EmbeddingProvider,
    stage: Stage,
) -> Result<()> {
    let mut next = vocab.clone();
    for e in new_classes {
        next.push(e.clone())?;
    }
    // resolve every embedding before touching the registry
    for e in new_classes {
        provider.text_embedding(&e.name)?;
    }
    for e in new_classes {
        insert_rows(reg, e, provider, stage)?;
    }
    reg.freeze_all();
    for e in new_classes {
        reg.set_trainable(&pc_name(e.class_id), false)?;
    }
    *vocab = next;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub class_id: ClassId,
    pub stage: Stage,
    pub pt_checksum: String,
    pub pc_checksum: String,
}

/// Snapshot of the bank rows with their provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub pt: Mat,
    pub pc: Mat,
    pub p0: Mat,
    pub rows: Vec<RowMeta>,
}

impl PrototypeBank {
    pub fn snapshot(reg: &ParameterRegistry, vocab: &ClassVocabulary) -> Result<Self> {
        let mut pt_rows = Vec::new();
        let mut pc_rows = Vec::new();
        let mut rows = Vec::new();
        for e in vocab.entries() {
            let pt = reg.get(&pt_name(e.class_id))?;
            let pc = reg.get(&pc_name(e.class_id))?;
            pt_rows.push(pt.data().to_vec());
            pc_rows.push(pc.data().to_vec());
            rows.push(RowMeta {
                class_id: e.class_id,
                stage: reg.entry(&pc_name(e.class_id))?.stage,
                pt_checksum: tensor_checksum(pt),
                pc_checksum: tensor_checksum(pc),
            });
        }
        let d = reg.get(P0)?.cols();
        let stack = |r: Vec<Vec<f64>>| {
            if r.is_empty() {
                Ok(Mat::zeros(0, d))
            } else {
                Mat::from_rows(&r)
            }
        };
        Ok(Self {
            pt: stack(pt_rows)?,
            pc: stack(pc_rows)?,
            p0: reg.get(P0)?.clone(),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_checksums(&self) -> BTreeMap<ClassId, (String, String)> {
        self.rows
            .iter()
            .map(|r| (r.class_id, (r.pt_checksum.clone(), r.pc_checksum.clone())))
            .collect()
    }
}
