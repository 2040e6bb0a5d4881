//! Confusion accumulation, IoU, split means, harmonic mean and fold
//! aggregation.
//!
//! Values inside [`EvalReport`] are percentages at full precision; they are
//! rounded to two decimals only when serialized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::embeddings::{ClassVocabulary, Split};
use crate::error::{Error, Result};
use crate::numerics::IGNORE;

/// `(N+1) × (N+1)` counts indexed by channel; rows are ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(channels: usize) -> Self {
        Self {
            n: channels,
            counts: vec![0; channels * channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image of channel indices. Ground-truth pixels equal to 255 are
    /// skipped; any other out-of-range value is an error.
    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "{} ground-truth pixels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                continue;
            }
            for v in [g, p] {
                if v as usize >= self.n {
                    return Err(Error::LabelRange {
                        label: v,
                        channels: self.n,
                    });
                }
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Dimension("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` for channel `c`; `None` when the union is empty.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.n).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.n).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// `2·mb·mn / (mb + mn)`, or 0 when both are 0.
pub fn hiou(mb: f64, mn: f64) -> f64 {
    if mb + mn == 0.0 {
        0.0
    } else {
        2.0 * mb * mn / (mb + mn)
    }
}

fn round2<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 100.0).round() / 100.0)
}

fn round2_map<S: Serializer>(
    m: &BTreeMap<String, Option<f64>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rounded: BTreeMap<&String, Option<f64>> = m
        .iter()
        .map(|(k, v)| (k, v.map(|x| (x * 100.0).round() / 100.0)))
        .collect();
    rounded.serialize(s)
}

/// Percentages for one evaluation (or a fold summary).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class name to IoU; `None` where undefined. Background is `background`.
    #[serde(serialize_with = "round2_map")]
    pub iou_per_class: BTreeMap<String, Option<f64>>,
    #[serde(serialize_with = "round2")]
    pub miou_base: f64,
    #[serde(serialize_with = "round2")]
    pub miou_novel: f64,
    #[serde(serialize_with = "round2")]
    pub miou_overall: f64,
    #[serde(serialize_with = "round2")]
    pub hiou: f64,
    /// Per-fold reports of a summary; empty for a single run.
    #[serde(default)]
    pub folds: Vec<EvalReport>,
    /// Split of every class in `iou_per_class`.
    #[serde(default)]
    pub splits: BTreeMap<String, String>,
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

impl EvalReport {
    /// Builds a report from a confusion matrix whose channel `i + 1` is
    /// vocabulary entry `i`.
    pub fn from_confusion(cm: &ConfusionMatrix, vocab: &ClassVocabulary) -> Result<Self> {
        if cm.channels() != vocab.channels() {
            return Err(Error::Dimension(format!(
                "{} confusion channels for {} vocabulary channels",
                cm.channels(),
                vocab.channels()
            )));
        }
        let mut iou_per_class = BTreeMap::new();
        let mut splits = BTreeMap::new();
        let mut base = Vec::new();
        let mut novel = Vec::new();
        let bg = cm.iou(0);
        let mut overall = vec![bg];
        iou_per_class.insert("background".to_string(), bg);
        splits.insert("background".to_string(), "background".to_string());
        for (i, e) in vocab.entries().iter().enumerate() {
            let v = cm.iou(i + 1);
            iou_per_class.insert(e.name.clone(), v);
            splits.insert(
                e.name.clone(),
                match e.split {
                    Split::Base => "base".to_string(),
                    Split::Novel => "novel".to_string(),
                    Split::Session(s) => format!("session{s}"),
                },
            );
            overall.push(v);
            if e.split.is_novel() {
                novel.push(v);
            } else {
                base.push(v);
            }
        }
        let miou_base = 100.0 * mean_defined(&base);
        let miou_novel = 100.0 * mean_defined(&novel);
        Ok(Self {
            iou_per_class: iou_per_class
                .into_iter()
                .map(|(k, v)| (k, v.map(|x| 100.0 * x)))
                .collect(),
            miou_base,
            miou_novel,
            miou_overall: 100.0 * mean_defined(&overall),
            hiou: hiou(miou_base, miou_novel),
            folds: Vec::new(),
            splits,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Arithmetic mean of every split metric across folds; hIoU is the mean of
/// per-fold harmonic means.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Argument("aggregate_folds needs at least one fold".into()));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        iou_per_class: BTreeMap::new(),
        miou_base: avg(|r| r.miou_base),
        miou_novel: avg(|r| r.miou_novel),
        miou_overall: avg(|r| r.miou_overall),
        hiou: avg(|r| r.hiou),
        folds: reports.to_vec(),
        splits: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::ClassEntry;

    fn cm_of(gt: &[u8], pred: &[u8], n: usize) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(gt, pred).unwrap();
        cm
    }

    #[test]
    fn small_iou_example() {
        // gt [[1,0],[1,0]], pred [[1,1],[0,0]]
        let cm = cm_of(&[1, 0, 1, 0], &[1, 1, 0, 0], 2);
        assert!((cm.iou(1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let cm = cm_of(&[0, 1, 1, 0], &[0, 1, 1, 0], 3);
        assert_eq!(cm.iou(1), Some(1.0));
        assert_eq!(cm.iou(2), None);
    }

    #[test]
    fn ignore_pixels_are_skipped_and_bad_labels_rejected() {
        let cm = cm_of(&[255, 1, 255], &[1, 1, 0], 2);
        assert_eq!(cm.total(), 1);
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[3], &[0]),
            Err(Error::LabelRange { label: 3, .. })
        ));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(hiou(50.0, 50.0), 50.0);
        assert!((hiou(76.68, 52.70) - 62.47).abs() < 0.005);
        assert_eq!(hiou(40.0, 0.0), 0.0);
        assert_eq!(hiou(0.0, 0.0), 0.0);
    }

    fn report(b: f64, n: f64, h: f64) -> EvalReport {
        EvalReport {
            iou_per_class: BTreeMap::new(),
            miou_base: b,
            miou_novel: n,
            miou_overall: 0.0,
            hiou: h,
            folds: vec![],
            splits: BTreeMap::new(),
        }
    }

    #[test]
    fn single_fold_summary_is_the_fold() {
        let r = report(70.0, 40.0, hiou(70.0, 40.0));
        let s = aggregate_folds(&[r.clone()]).unwrap();
        assert_eq!(s.miou_base, r.miou_base);
        assert_eq!(s.hiou, r.hiou);
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn report_excludes_background_from_base_mean() {
        let vocab = ClassVocabulary::new(vec![
            ClassEntry::new(1, "a", Split::Base),
            ClassEntry::new(2, "b", Split::Novel),
        ])
        .unwrap();
        // background perfect, class a half right, class b perfect
        let cm = cm_of(&[0, 0, 1, 1, 2], &[0, 0, 1, 0, 2], 3);
        let r = EvalReport::from_confusion(&cm, &vocab).unwrap();
        assert!((r.miou_base - 50.0).abs() < 1e-12);
        assert!((r.miou_novel - 100.0).abs() < 1e-12);
        let bg = 2.0 / 3.0;
        assert!((r.miou_overall - 100.0 * (bg + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for k in ["iou_per_class", "miou_base", "miou_novel", "miou_overall", "hiou", "folds"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        assert_eq!(json["iou_per_class"]["background"], 66.67);
    }
}
