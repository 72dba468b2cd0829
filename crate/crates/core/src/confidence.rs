//! Scalar confidence intervals and sup-t uniform confidence bands.
//!
//! Both take the critical value from the resample draws: the scalar
//! interval from the quantile of |e_b|, the uniform band from the quantile
//! of the normalized maximum over coordinates, so all coordinates share one
//! critical value and the band covers the whole vector jointly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimateVector;
use crate::resample::ResampleDraws;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    /// Unit normalizers: a constant-width band.
    Constant,
    /// Per-coordinate standard deviations of the draws.
    Studentized,
}

impl std::fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormalizerKind::Constant => write!(f, "constant"),
            NormalizerKind::Studentized => write!(f, "studentized"),
        }
    }
}

/// Per-coordinate intervals sharing one critical value. Degenerate
/// coordinates are reported as width-zero at 0 with normalizer 0 and are
/// excluded from the sup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    /// Confidence level 1 - alpha.
    pub level: f64,
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub critical_value: f64,
    pub normalizers: Vec<f64>,
    pub normalizer_kind: NormalizerKind,
}

impl ConfidenceBand {
    /// Tidy CSV: label, estimate, lower, upper.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("label,estimate,lower,upper\n");
        for s in 0..self.labels.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.labels[s], self.estimate[s], self.lower[s], self.upper[s]
            ));
        }
        out
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Ceiling with a guard against floating-point fuzz on exact integers
/// (0.95 * 100 must rank as 95, not 96).
fn ceil_guarded(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

fn check_b_draws(b: usize, alpha: f64) -> Result<()> {
    let needed = ceil_guarded(1.0 / alpha);
    if b < needed {
        return Err(Error::validation(format!(
            "{b} draws are too few for alpha = {alpha}; need at least {needed}"
        )));
    }
    Ok(())
}

/// `ceil((1-alpha) B)`-th order statistic (1-based) of `values`.
fn quantile_order_stat(mut values: Vec<f64>, alpha: f64) -> f64 {
    let b = values.len();
    let rank = ceil_guarded((1.0 - alpha) * b as f64).clamp(1, b);
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[rank - 1]
}

/// Symmetric confidence interval for a scalar target: the estimate plus or
/// minus the `1 - alpha` empirical quantile of |e_b|.
pub fn ci_scalar(
    estimate: &EstimateVector,
    draws: &ResampleDraws,
    alpha: f64,
) -> Result<ConfidenceBand> {
    if estimate.values.len() != 1 || draws.k_target() != 1 {
        return Err(Error::validation("ci_scalar requires a one-dimensional target"));
    }
    check_alpha(alpha)?;
    check_b_draws(draws.n_draws(), alpha)?;
    let abs: Vec<f64> = (0..draws.n_draws()).map(|r| draws.draws[(r, 0)].abs()).collect();
    let q = quantile_order_stat(abs, alpha);
    let center = estimate.values[0];
    Ok(ConfidenceBand {
        level: 1.0 - alpha,
        labels: estimate.labels.clone(),
        estimate: estimate.values.clone(),
        lower: vec![center - q],
        upper: vec![center + q],
        critical_value: q,
        normalizers: vec![1.0],
        normalizer_kind: NormalizerKind::Constant,
    })
}

/// Sup-t uniform confidence band: per-coordinate intervals
/// `estimate_s +- iota_s * q`, with `q` the `1 - alpha` quantile of
/// `max_s |e_{b,s} / iota_s|` over nondegenerate coordinates.
pub fn uniform_band(
    estimate: &EstimateVector,
    draws: &ResampleDraws,
    alpha: f64,
    normalizer: NormalizerKind,
) -> Result<ConfidenceBand> {
    let k = draws.k_target();
    if estimate.values.len() != k {
        return Err(Error::validation(format!(
            "estimate has {} coordinates, draws have {k}",
            estimate.values.len()
        )));
    }
    check_alpha(alpha)?;
    check_b_draws(draws.n_draws(), alpha)?;
    let nondeg: Vec<usize> = (0..k).filter(|s| !draws.degenerate.contains(s)).collect();
    if nondeg.is_empty() {
        return Err(Error::validation(
            "every coordinate is degenerate; no band can be formed",
        ));
    }
    let b = draws.n_draws();

    let mut normalizers = vec![0.0; k];
    match normalizer {
        NormalizerKind::Constant => {
            for &s in &nondeg {
                normalizers[s] = 1.0;
            }
        }
        NormalizerKind::Studentized => {
            for &s in &nondeg {
                let mean: f64 =
                    (0..b).map(|r| draws.draws[(r, s)]).sum::<f64>() / b as f64;
                let var: f64 = (0..b)
                    .map(|r| (draws.draws[(r, s)] - mean).powi(2))
                    .sum::<f64>()
                    / b as f64;
                let sd = var.sqrt();
                if sd == 0.0 {
                    return Err(Error::validation(format!(
                        "coordinate `{}` has no sampling variation; \
                         use the constant normalizer",
                        estimate.labels[s]
                    )));
                }
                normalizers[s] = sd;
            }
        }
    }

    let stats: Vec<f64> = (0..b)
        .map(|r| {
            nondeg
                .iter()
                .map(|&s| (draws.draws[(r, s)] / normalizers[s]).abs())
                .fold(0.0_f64, f64::max)
        })
        .collect();
    let q = quantile_order_stat(stats, alpha);

    let mut lower = vec![0.0; k];
    let mut upper = vec![0.0; k];
    for s in 0..k {
        if draws.degenerate.contains(&s) {
            lower[s] = estimate.values[s];
            upper[s] = estimate.values[s];
        } else {
            lower[s] = estimate.values[s] - normalizers[s] * q;
            upper[s] = estimate.values[s] + normalizers[s] * q;
        }
    }
    Ok(ConfidenceBand {
        level: 1.0 - alpha,
        labels: estimate.labels.clone(),
        estimate: estimate.values.clone(),
        lower,
        upper,
        critical_value: q,
        normalizers,
        normalizer_kind: normalizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use std::collections::BTreeSet;

    fn draws_from_rows(rows: Vec<Vec<f64>>, degenerate: &[usize]) -> ResampleDraws {
        let b = rows.len();
        let k = rows[0].len();
        ResampleDraws {
            draws: DMatrix::from_fn(b, k, |r, c| rows[r][c]),
            seed: 0,
            degenerate: degenerate.iter().copied().collect::<BTreeSet<_>>(),
            scheme_fingerprint: String::new(),
            hetero_fingerprint: String::new(),
        }
    }

    fn scalar_estimate(v: f64) -> EstimateVector {
        EstimateVector {
            values: vec![v],
            labels: vec!["att".into()],
            scheme_fingerprint: String::new(),
        }
    }

    #[test]
    fn order_statistic_convention_on_one_to_hundred() {
        let rows: Vec<Vec<f64>> = (1..=100).map(|i| vec![i as f64]).collect();
        let band = ci_scalar(&scalar_estimate(10.0), &draws_from_rows(rows, &[]), 0.05).unwrap();
        assert_abs_diff_eq!(band.critical_value, 95.0);
        assert_abs_diff_eq!(band.lower[0], 10.0 - 95.0);
        assert_abs_diff_eq!(band.upper[0], 10.0 + 95.0);
    }

    #[test]
    fn zero_draws_give_zero_width_interval() {
        let rows = vec![vec![0.0]; 50];
        let band = ci_scalar(&scalar_estimate(2.5), &draws_from_rows(rows, &[]), 0.05).unwrap();
        assert_abs_diff_eq!(band.lower[0], 2.5);
        assert_abs_diff_eq!(band.upper[0], 2.5);
    }

    #[test]
    fn symmetric_two_point_draws_pin_the_quantile() {
        let v = 1.75;
        let mut rows = vec![vec![v]; 50];
        rows.extend(vec![vec![-v]; 50]);
        for alpha in [0.01, 0.05, 0.25, 0.5] {
            let band =
                ci_scalar(&scalar_estimate(0.0), &draws_from_rows(rows.clone(), &[]), alpha)
                    .unwrap();
            assert_abs_diff_eq!(band.critical_value, v);
        }
    }

    #[test]
    fn too_few_draws_for_alpha_is_an_error() {
        let rows = vec![vec![1.0]; 10];
        let err = ci_scalar(&scalar_estimate(0.0), &draws_from_rows(rows, &[]), 0.05).unwrap_err();
        assert!(err.to_string().contains("too few"), "{err}");
    }

    #[test]
    fn uniform_band_with_one_coordinate_equals_ci_scalar() {
        let rows: Vec<Vec<f64>> = (1..=100).map(|i| vec![i as f64 * 0.5 - 25.0]).collect();
        let est = scalar_estimate(3.0);
        let draws = draws_from_rows(rows, &[]);
        let ci = ci_scalar(&est, &draws, 0.05).unwrap();
        for kind in [NormalizerKind::Constant, NormalizerKind::Studentized] {
            let band = uniform_band(&est, &draws, 0.05, kind).unwrap();
            assert_abs_diff_eq!(band.lower[0], ci.lower[0], epsilon = 1e-12);
            assert_abs_diff_eq!(band.upper[0], ci.upper[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn studentized_band_is_invariant_to_coordinate_scaling() {
        // Coordinate 2 is exactly twice coordinate 1 in every draw.
        let base: Vec<f64> = (0..200).map(|i| (i as f64 - 100.0) * 0.01).collect();
        let rows: Vec<Vec<f64>> = base.iter().map(|&v| vec![v, 2.0 * v]).collect();
        let est = EstimateVector {
            values: vec![1.0, 2.0],
            labels: vec!["a".into(), "b".into()],
            scheme_fingerprint: String::new(),
        };
        let band =
            uniform_band(&est, &draws_from_rows(rows, &[]), 0.05, NormalizerKind::Studentized)
                .unwrap();
        let width0 = band.upper[0] - band.lower[0];
        let width1 = band.upper[1] - band.lower[1];
        assert_abs_diff_eq!(width1, 2.0 * width0, epsilon = 1e-12);
        assert_abs_diff_eq!(band.normalizers[1], 2.0 * band.normalizers[0], epsilon = 1e-12);
    }

    #[test]
    fn studentized_rejects_zero_variance_coordinate() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 0.0]).collect();
        let est = EstimateVector {
            values: vec![0.0, 0.0],
            labels: vec!["a".into(), "b".into()],
            scheme_fingerprint: String::new(),
        };
        let err =
            uniform_band(&est, &draws_from_rows(rows, &[]), 0.05, NormalizerKind::Studentized)
                .unwrap_err();
        assert!(err.to_string().contains("constant normalizer"), "{err}");
    }

    #[test]
    fn degenerate_coordinates_get_zero_width_and_skip_the_sup() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 - 50.0, 0.0]).collect();
        let est = EstimateVector {
            values: vec![1.0, 0.0],
            labels: vec!["a".into(), "0".into()],
            scheme_fingerprint: String::new(),
        };
        let band =
            uniform_band(&est, &draws_from_rows(rows, &[1]), 0.05, NormalizerKind::Constant)
                .unwrap();
        assert_abs_diff_eq!(band.lower[1], 0.0);
        assert_abs_diff_eq!(band.upper[1], 0.0);
        assert_abs_diff_eq!(band.normalizers[1], 0.0);
        assert!(band.critical_value > 0.0);
    }

    #[test]
    fn critical_value_is_monotone_in_alpha() {
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|i| vec![((i * 37) % 101) as f64 / 10.0 - 5.0, ((i * 53) % 89) as f64 / 10.0 - 4.0])
            .collect();
        let est = EstimateVector {
            values: vec![0.0, 0.0],
            labels: vec!["a".into(), "b".into()],
            scheme_fingerprint: String::new(),
        };
        let draws = draws_from_rows(rows, &[]);
        let q10 = uniform_band(&est, &draws, 0.10, NormalizerKind::Constant)
            .unwrap()
            .critical_value;
        let q05 = uniform_band(&est, &draws, 0.05, NormalizerKind::Constant)
            .unwrap()
            .critical_value;
        assert!(q10 <= q05, "q(0.10)={q10} > q(0.05)={q05}");
    }

    #[test]
    fn uniform_band_beats_pointwise_boxes_for_gaussian_draws() {
        // Two independent standard normal coordinates: the sup-t critical
        // value must exceed the pointwise 97.5th percentile, the pointwise
        // box must cover ~90% jointly, and the uniform band ~95%.
        use crate::rng::substream;
        use rand_distr::{Distribution, StandardNormal};
        let b = 100_000;
        let mut rng = substream(1234, 0);
        let rows: Vec<Vec<f64>> =
            (0..b).map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]).collect();
        let est = EstimateVector {
            values: vec![0.0, 0.0],
            labels: vec!["a".into(), "b".into()],
            scheme_fingerprint: String::new(),
        };
        let draws = draws_from_rows(rows.clone(), &[]);
        let band = uniform_band(&est, &draws, 0.05, NormalizerKind::Studentized).unwrap();

        // Pointwise 95% per-coordinate half-width.
        let mut abs0: Vec<f64> = rows.iter().map(|r| r[0].abs()).collect();
        abs0.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pointwise = abs0[(0.95 * b as f64).ceil() as usize - 1];
        assert!(
            band.critical_value * band.normalizers[0] > pointwise,
            "uniform half-width {} should exceed pointwise {}",
            band.critical_value * band.normalizers[0],
            pointwise
        );

        // Empirical simultaneous coverage on an independent sample.
        let mut rng = substream(4321, 0);
        let reps = 100_000;
        let mut cover_uniform = 0;
        let mut cover_pointwise = 0;
        for _ in 0..reps {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let in_uniform = z0.abs() <= band.critical_value * band.normalizers[0]
                && z1.abs() <= band.critical_value * band.normalizers[1];
            let in_pointwise = z0.abs() <= pointwise && z1.abs() <= pointwise;
            cover_uniform += in_uniform as usize;
            cover_pointwise += in_pointwise as usize;
        }
        let cu = cover_uniform as f64 / reps as f64;
        let cp = cover_pointwise as f64 / reps as f64;
        assert!((0.94..=0.96).contains(&cu), "uniform coverage {cu}");
        assert!((0.89..=0.92).contains(&cp), "pointwise coverage {cp}");
    }
}
