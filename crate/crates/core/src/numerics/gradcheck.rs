//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Coordinates whose analytic gradient is at most this large are skipped.
pub const MIN_ANALYTIC: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares `analytic` against `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every
/// coordinate. The objective is evaluated twice at `params` first; differing
/// values mean it is not a function of `params` alone.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if step <= 0.0 {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let first = f(params);
    let second = f(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut p = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = None;
    let mut checked = 0;
    for i in 0..p.len() {
        let a = analytic[i];
        if a.abs() <= MIN_ANALYTIC {
            continue;
        }
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        checked += 1;
        if rel > max_rel_err || worst_index.is_none() {
            max_rel_err = max_rel_err.max(rel);
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        checked,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::loss::masked_cross_entropy;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Mat;
    use rand::Rng;

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = vec![0.3, -1.2, 2.5, 0.01];
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let report = finite_diff_check(f, &p, &p, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn masked_cross_entropy_passes_on_small_map() {
        let logits = vec![0.2, -0.3, 1.1, 0.4, -0.7, 0.5, 0.0, 0.9, 0.3, -1.0, 0.8, 0.1];
        let targets = [0u8, 2, 255, 1];
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let l = t.leaf(Mat::from_vec(3, 4, x.to_vec()).unwrap(), true);
            let loss = masked_cross_entropy(&mut t, l, &targets).unwrap();
            let g = t.backward(loss);
            (t.value(loss).scalar(), g.get(l).unwrap().data().to_vec())
        };
        let (_, grad) = eval(&logits);
        let report =
            finite_diff_check(|x| eval(x).0, &logits, &grad, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn unseeded_objective_is_rejected() {
        let mut rng = rand::thread_rng();
        let f = move |x: &[f64]| x[0] + rng.gen::<f64>();
        let err = finite_diff_check(f, &[1.0], &[1.0], DEFAULT_STEP, DEFAULT_TOL).unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }
}
