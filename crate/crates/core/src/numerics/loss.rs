use std::rc::Rc;

use super::tape::{Tape, Var, IGNORE};
use super::tensor::Mat;
use crate::error::{Error, Result};

fn check_targets(targets: &[u8], channels: usize) -> Result<()> {
    if let Some(&bad) = targets
        .iter()
        .find(|&&t| t != IGNORE && t as usize >= channels)
    {
        return Err(Error::LabelRange {
            label: bad,
            channels,
        });
    }
    Ok(())
}

/// Mean pixel cross-entropy of a `channels × pixels` logit map against channel
/// targets, skipping [`IGNORE`]. All-ignored maps give zero loss and zero gradient.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, targets: &[u8]) -> Result<Var> {
    let (channels, pixels) = tape.value(logits).shape();
    if targets.len() != pixels {
        return Err(Error::Dimension(format!(
            "{} targets for {pixels} pixels",
            targets.len()
        )));
    }
    check_targets(targets, channels)?;
    let targets: Rc<[u8]> = Rc::from(targets);
    Ok(tape.masked_cross_entropy(logits, targets))
}

/// Value-only convenience wrapper around [`masked_cross_entropy`].
pub fn masked_cross_entropy_value(logits: &Mat, targets: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = masked_cross_entropy(&mut tape, l, targets)?;
    Ok(tape.value(loss).scalar())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_channels() {
        let logits = Mat::zeros(4, 6);
        let loss = masked_cross_entropy_value(&logits, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let mut logits = Mat::zeros(3, 2);
        logits.set(1, 0, 50.0);
        logits.set(2, 1, 50.0);
        let loss = masked_cross_entropy_value(&logits, &[1, 2]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn fully_ignored_map_has_zero_loss_and_gradient() {
        let mut tape = Tape::new();
        let l = tape.leaf(Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap(), true);
        let loss = masked_cross_entropy(&mut tape, l, &[IGNORE; 3]).unwrap();
        assert_eq!(tape.value(loss).scalar(), 0.0);
        let g = tape.backward(loss);
        assert!(g.get(l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ignored_pixels_get_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let l = tape.leaf(Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap(), true);
        let loss = masked_cross_entropy(&mut tape, l, &[0, IGNORE, 1]).unwrap();
        let g = tape.backward(loss);
        let g = g.get(l).unwrap();
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(1, 1), 0.0);
        assert!(g.get(0, 0) != 0.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Mat::zeros(3, 2);
        let err = masked_cross_entropy_value(&logits, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelRange { label: 3, channels: 3 }));
    }

    #[test]
    fn shifted_logits_give_identical_loss() {
        let base = Mat::from_vec(3, 2, vec![0.1, -0.4, 2.0, 0.3, -1.0, 0.7]).unwrap();
        let shifted = base.map(|v| v + 1e4);
        let a = masked_cross_entropy_value(&base, &[1, 2]).unwrap();
        let b = masked_cross_entropy_value(&shifted, &[1, 2]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
