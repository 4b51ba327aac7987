use rayon::prelude::*;
use serde::Serialize;

use super::{branch, Tensor};
use crate::error::{Error, Result};

/// Finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    /// Name of the checked parameter.
    pub op: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: (usize, usize),
    pub pass: bool,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates compared with a step below the base step because the
    /// base probes crossed a non-smooth branch.
    pub reduced_step: usize,
    /// Coordinates whose probes changed a non-smooth branch decision
    /// (ReLU sign, clamp, max-pool winner, hinge activity) even at the
    /// smallest step; the difference quotient there does not estimate the
    /// derivative and is not compared.
    pub skipped_kinks: usize,
}

/// Smallest step tried near a kink, relative to `max(1, |θ|)`.
const MIN_STEP: f64 = 1e-6;

/// Relative error floor in the denominator.
const REL_FLOOR: f64 = 1e-8;

/// Step size for coordinate value `theta`.
pub(crate) fn step_for(theta: f64) -> f64 {
    1e-3 * theta.abs().max(1.0)
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(params)` against central
/// differences, coordinate by coordinate.
///
/// `f` receives the parameters in the order given. For the analytic pass they
/// are tracked leaves; for the probes they are untracked copies with one
/// coordinate moved by `±h`, `h = 1e-3·max(1, |θ|)`. The relative error is
/// `|a − n| / max(1e-8, |a| + |n|)` and a report passes when its maximum is
/// below `tol`.
///
/// A coordinate whose plain central difference misses `tol` is re-estimated
/// with one Richardson step, `(4·D(h/2) − D(h)) / 3`, which cancels the
/// `h²` truncation term. When a probe flips a branch decision the step is
/// shrunk tenfold, down to `1e-6·max(1, |θ|)`, before the coordinate is
/// given up as a kink.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], tol: f64) -> Result<Vec<GradReport>>
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Sync,
{
    let tracked: Vec<Tensor> = params.iter().map(|(_, t)| t.to_param()).collect();
    let loss = f(&tracked)?;
    if loss.shape() != (1, 1) {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: loss.shape(),
            rhs: (1, 1),
        });
    }
    if !loss.scalar().is_finite() {
        return Err(Error::numeric("grad_check", "non-finite loss at base point"));
    }
    let grads = loss.backward()?;

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.detach()).collect();
    let (base_loss, base_print) = branch::record(|| f(&base));
    base_loss?;

    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, original)) in params.iter().enumerate() {
        let analytic = grads.get_or_zero(&tracked[pi]);
        let cols = original.cols();

        let probe = |idx: usize, delta: f64| -> Result<(f64, u64)> {
            let mut data = original.data().to_vec();
            data[idx] += delta;
            let mut list = base.clone();
            list[pi] = Tensor::new(original.rows(), cols, data)?;
            let (value, print) = branch::record(|| f(&list));
            let v = value?.scalar();
            if !v.is_finite() {
                return Err(Error::numeric(
                    name.clone(),
                    format!("non-finite loss probing ({}, {})", idx / cols, idx % cols),
                ));
            }
            Ok((v, print))
        };

        // Difference quotient at step h, or None if a probe changed a branch.
        let quotient = |idx: usize, h: f64| -> Result<Option<f64>> {
            let (plus, p_print) = probe(idx, h)?;
            let (minus, m_print) = probe(idx, -h)?;
            if p_print != base_print || m_print != base_print {
                return Ok(None);
            }
            Ok(Some((plus - minus) / (2.0 * h)))
        };

        let outcomes: Vec<Option<(f64, bool)>> = (0..original.len())
            .into_par_iter()
            .map(|idx| {
                let a = analytic.data()[idx];
                let floor = MIN_STEP * original.data()[idx].abs().max(1.0);
                let mut h = step_for(original.data()[idx]);
                let mut reduced = false;
                while h >= floor * (1.0 - 1e-9) {
                    if let Some(d_h) = quotient(idx, h)? {
                        let rel = relative_error(a, d_h);
                        if rel < tol {
                            return Ok(Some((rel, reduced)));
                        }
                        if let Some(d_half) = quotient(idx, h / 2.0)? {
                            let refined = (4.0 * d_half - d_h) / 3.0;
                            return Ok(Some((relative_error(a, refined).min(rel), reduced)));
                        }
                    }
                    h /= 10.0;
                    reduced = true;
                }
                Ok(None)
            })
            .collect::<Result<_>>()?;

        let mut max_rel = 0.0;
        let mut worst = 0;
        let mut checked = 0;
        let mut reduced = 0;
        for (idx, o) in outcomes.iter().enumerate() {
            if let Some((rel, shrunk)) = o {
                reduced += usize::from(*shrunk);
                checked += 1;
                if *rel > max_rel || checked == 1 {
                    max_rel = *rel;
                    worst = idx;
                }
            }
        }
        reports.push(GradReport {
            op: name.clone(),
            max_rel_error: max_rel,
            worst: (worst / cols.max(1), worst % cols.max(1)),
            pass: max_rel < tol,
            checked,
            reduced_step: reduced,
            skipped_kinks: outcomes.len() - checked,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn named(name: &str, t: Tensor) -> (String, Tensor) {
        (name.to_string(), t)
    }

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_fn(3, 4, |r, c| (r as f64 - 1.3) * (c as f64 + 0.7));
        let reports = grad_check(|p| Ok(p[0].sum()), &[named("x", x)], 1e-10).unwrap();
        assert!(reports[0].pass);
        assert!(reports[0].max_rel_error < 1e-9);
        assert_eq!(reports[0].checked, 12);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // Square with a backward rule scaled by 2.
        let square_bad = |x: &Tensor| {
            let out = Tensor::new(x.rows(), x.cols(), x.data().iter().map(|v| v * v).collect()).unwrap();
            Tensor::custom(
                "square_x2",
                &[x.clone()],
                out,
                Arc::new(|inputs: &[Tensor], _out: &Tensor, g: &[f64]| {
                    vec![g.iter().zip(inputs[0].data()).map(|(g, x)| 2.0 * 2.0 * x * g).collect()]
                }),
            )
        };
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0]]);
        let reports = grad_check(|p| Ok(square_bad(&p[0]).sum()), &[named("x", x)], 1e-4).unwrap();
        assert!(!reports[0].pass);
        assert!(reports[0].max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let x = Tensor::from_rows(&[[1.0]]);
        let err = grad_check(
            |p| {
                let v = p[0].scalar();
                let out = if p[0].is_tracked() || v == 1.0 { v } else { f64::NAN };
                Ok(p[0].scale(0.0).sum().add(&Tensor::filled(1, 1, out))?)
            },
            &[named("weights.w", x)],
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("weights.w"), "{err}");
    }

    #[test]
    fn relu_kink_probe_is_skipped() {
        // x[0] sits within the smallest step of the ReLU hinge.
        let x = Tensor::from_rows(&[[1e-8, 0.8]]);
        let reports = grad_check(|p| Ok(p[0].relu().sum()), &[named("x", x)], 1e-6).unwrap();
        assert_eq!(reports[0].skipped_kinks, 1);
        assert_eq!(reports[0].checked, 1);
        assert!(reports[0].pass);
    }

    #[test]
    fn near_kink_uses_smaller_step() {
        let x = Tensor::from_rows(&[[1e-4, -0.5]]);
        let reports = grad_check(|p| Ok(p[0].relu().sum()), &[named("x", x)], 1e-6).unwrap();
        assert_eq!(reports[0].skipped_kinks, 0);
        assert_eq!(reports[0].reduced_step, 1);
        assert!(reports[0].pass);
    }

    #[test]
    fn curvature_error_is_extrapolated_away() {
        // exp has large third derivative at 6: plain central differences at
        // h = 6e-3 miss 1e-6, the extrapolated estimate does not.
        let x = Tensor::from_rows(&[[6.0]]);
        let f = |p: &[Tensor]| {
            let out = Tensor::new(1, 1, vec![p[0].scalar().exp()])?;
            Ok(Tensor::custom(
                "exp",
                &[p[0].clone()],
                out,
                Arc::new(|inputs: &[Tensor], _o: &Tensor, g: &[f64]| vec![vec![g[0] * inputs[0].scalar().exp()]]),
            ))
        };
        let reports = grad_check(f, &[named("x", x)], 1e-6).unwrap();
        assert!(reports[0].pass, "{:?}", reports[0]);
    }
}
