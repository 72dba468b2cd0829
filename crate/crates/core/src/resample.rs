//! Residual resampling: simulated draws of the estimation error, their
//! empirical distribution, and the exact enumeration oracle.
//!
//! Each draw picks one control per treated unit (with replacement,
//! independently across draws and units), rescales that control's
//! normalized residual by the treated unit's own fitted scale, and sums the
//! contributions. The exact distribution enumerates all `N0^N1` control
//! assignments instead of sampling them; the sampler is unbiased for it.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::hetero::{scale_matrix, size_value_for_unit, FittedHetero, NormalizedResiduals};
use crate::linalg::serde_mat;
use crate::panel::PanelData;
use crate::rng::substream;

/// Largest `N0^N1` the exact enumeration will attempt.
pub const ENUMERATION_BUDGET: u128 = 100_000_000;

/// B simulated error vectors, one per row. Degenerate coordinates are
/// identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleDraws {
    #[serde(with = "serde_mat")]
    pub draws: DMatrix<f64>,
    pub seed: u64,
    pub degenerate: BTreeSet<usize>,
    pub scheme_fingerprint: String,
    pub hetero_fingerprint: String,
}

impl ResampleDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn k_target(&self) -> usize {
        self.draws.ncols()
    }
}

/// Per-unit bank of rescaled residuals: row i holds `H_j(Z_j) W~_i(j)` on
/// the unit's nondegenerate coordinates. Draws and the exact enumeration
/// both sum rows of these banks.
fn scaled_banks(
    normres: &NormalizedResiduals,
    fitted: &FittedHetero,
    panel: &PanelData,
) -> Result<Vec<DMatrix<f64>>> {
    if normres.hetero_fingerprint != fitted.fingerprint() {
        return Err(Error::validation(
            "normalized residuals were produced by a different fitted model",
        ));
    }
    let mut banks = Vec::with_capacity(normres.per_unit.len());
    for (j, rows) in normres.per_unit.iter().enumerate() {
        let z = size_value_for_unit(fitted, panel, j)?;
        let h = scale_matrix(fitted, j, &z)?;
        // (H w)' = w' H for symmetric H.
        banks.push(rows * &h);
    }
    Ok(banks)
}

/// Run the resampling algorithm `b_draws` times. Deterministic in
/// `(seed, b)` via per-draw substreams, so the result is bit-identical for
/// any degree of parallelism.
pub fn draw(
    normres: &NormalizedResiduals,
    fitted: &FittedHetero,
    panel: &PanelData,
    b_draws: usize,
    seed: u64,
) -> Result<ResampleDraws> {
    if b_draws == 0 {
        return Err(Error::validation("number of draws must be at least 1"));
    }
    let banks = scaled_banks(normres, fitted, panel)?;
    let n1 = banks.len();
    let n0 = panel.n_control();
    let k = normres.k_target;
    let coords = &normres.nondegenerate_by_unit;

    let rows: Vec<Vec<f64>> = (0..b_draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let mut e = vec![0.0; k];
            for j in 0..n1 {
                let pick = rng.random_range(0..n0);
                let bank = &banks[j];
                for (c, &s) in coords[j].iter().enumerate() {
                    e[s] += bank[(pick, c)];
                }
            }
            e
        })
        .collect();

    let draws = DMatrix::from_fn(b_draws, k, |r, c| rows[r][c]);
    Ok(ResampleDraws {
        draws,
        seed,
        degenerate: normres.degenerate_global.clone(),
        scheme_fingerprint: normres.scheme_fingerprint.clone(),
        hetero_fingerprint: normres.hetero_fingerprint.clone(),
    })
}

/// Fraction of draws weakly below `c` in every coordinate.
pub fn empirical_cdf(draws: &ResampleDraws, c: &[f64]) -> f64 {
    assert_eq!(c.len(), draws.k_target(), "threshold length must equal K");
    let b = draws.n_draws();
    let mut count = 0usize;
    for r in 0..b {
        if (0..c.len()).all(|s| draws.draws[(r, s)] <= c[s]) {
            count += 1;
        }
    }
    count as f64 / b as f64
}

/// Exact distribution of the resampled error at `c`: full enumeration of
/// all `N0^N1` control assignments. Errors when the enumeration would
/// exceed [`ENUMERATION_BUDGET`]; use [`empirical_cdf`] then.
pub fn exact_cdf(
    normres: &NormalizedResiduals,
    fitted: &FittedHetero,
    panel: &PanelData,
    c: &[f64],
) -> Result<f64> {
    let k = normres.k_target;
    if c.len() != k {
        return Err(Error::validation(format!(
            "threshold has length {}, target dimension is {k}",
            c.len()
        )));
    }
    let banks = scaled_banks(normres, fitted, panel)?;
    let n1 = banks.len();
    let n0 = panel.n_control() as u128;
    let total = n0
        .checked_pow(n1 as u32)
        .filter(|&t| t <= ENUMERATION_BUDGET)
        .ok_or_else(|| {
            Error::validation(format!(
                "exact enumeration needs {}^{} tuples, over the {} budget; \
                 use the sampled empirical_cdf instead",
                n0, n1, ENUMERATION_BUDGET
            ))
        })?;

    let coords = &normres.nondegenerate_by_unit;
    let n0 = panel.n_control();

    // Recursive enumeration carrying the partial sum; the tuple count per
    // branch is integral, so any summation order gives the same result.
    fn count_leq(
        banks: &[DMatrix<f64>],
        coords: &[Vec<usize>],
        c: &[f64],
        j: usize,
        n0: usize,
        prefix: &[f64],
    ) -> u64 {
        if j == banks.len() {
            return if prefix.iter().zip(c).all(|(v, cv)| v <= cv) { 1 } else { 0 };
        }
        let mut total = 0u64;
        let mut next = prefix.to_vec();
        for pick in 0..n0 {
            next.copy_from_slice(prefix);
            for (col, &s) in coords[j].iter().enumerate() {
                next[s] += banks[j][(pick, col)];
            }
            total += count_leq(banks, coords, c, j + 1, n0, &next);
        }
        total
    }

    let zero = vec![0.0; k];
    let count: u64 = if n1 >= 2 {
        (0..n0)
            .into_par_iter()
            .map(|first| {
                let mut prefix = zero.clone();
                for (col, &s) in coords[0].iter().enumerate() {
                    prefix[s] += banks[0][(first, col)];
                }
                count_leq(&banks, coords, c, 1, n0, &prefix)
            })
            .sum()
    } else {
        count_leq(&banks, coords, c, 0, n0, &zero)
    };
    Ok(count as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_scheme_att;
    use crate::estimator::control_residuals;
    use crate::hetero::{fit, normalize, HeteroSpec};
    use crate::panel::{PanelData, TreatTime};
    use approx::assert_abs_diff_eq;

    fn identity_pipeline(
        outcomes: DMatrix<f64>,
        n_treated: usize,
        t_star: &[usize],
    ) -> (PanelData, NormalizedResiduals, FittedHetero) {
        let n = outcomes.nrows();
        let mut tt: Vec<TreatTime> =
            t_star.iter().map(|&s| TreatTime::Treated(s)).collect();
        tt.extend(std::iter::repeat_n(TreatTime::Never, n - n_treated));
        let panel = PanelData::from_parts(outcomes, tt, None, None, None).unwrap();
        let scheme = build_scheme_att(&panel).unwrap();
        let res = control_residuals(&panel, &scheme).unwrap();
        let fitted = fit(&HeteroSpec::identity(), &res, &panel).unwrap();
        let norm = normalize(&res, &fitted, &panel).unwrap();
        (panel, norm, fitted)
    }

    #[test]
    fn single_unit_draws_come_from_the_residual_set() {
        let outcomes = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 4.0, 0.0, 1.0, 0.0, 3.0, 1.0, 1.5],
        );
        let (panel, norm, fitted) = identity_pipeline(outcomes, 1, &[1]);
        let residual_set: Vec<f64> = norm.per_unit[0].column(0).iter().copied().collect();
        let draws = draw(&norm, &fitted, &panel, 5000, 11).unwrap();
        for r in 0..draws.n_draws() {
            let v = draws.draws[(r, 0)];
            assert!(
                residual_set.iter().any(|&w| w == v),
                "draw {v} not among residuals {residual_set:?}"
            );
        }
        // Every residual should appear with roughly its 1/N0 frequency.
        for &w in &residual_set {
            let freq = (0..draws.n_draws())
                .filter(|&r| draws.draws[(r, 0)] == w)
                .count() as f64
                / draws.n_draws() as f64;
            assert_abs_diff_eq!(freq, 1.0 / 3.0, epsilon = 0.03);
        }
    }

    #[test]
    fn draws_are_bit_identical_across_thread_counts() {
        let outcomes = DMatrix::from_fn(6, 3, |j, t| ((j * 5 + t * 7) % 13) as f64 * 0.25);
        let (panel, norm, fitted) = identity_pipeline(outcomes, 2, &[1, 2]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| draw(&norm, &fitted, &panel, 2000, 42).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.draws, b.draws);
        let bits_a: Vec<u64> = a.draws.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.draws.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn index_pairs_hit_multinomial_frequencies() {
        // N1=2, N0=3: 9 equally likely (i_1, i_2) pairs. Staggered timing
        // makes the two residual banks differ so pairs are identifiable.
        let outcomes = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 4.0, 2.0, // treated, t*=1
                0.5, 2.0, 1.0, // treated, t*=2
                0.0, 1.7, 0.3, // controls
                2.1, 0.4, 1.9, //
                0.9, 2.2, 0.6,
            ],
        );
        let (panel, norm, fitted) = identity_pipeline(outcomes, 2, &[1, 2]);
        let bank0: Vec<f64> = norm.per_unit[0].column(0).iter().copied().collect();
        let bank1: Vec<f64> = norm.per_unit[1].column(0).iter().copied().collect();
        let sums: Vec<f64> = bank0
            .iter()
            .flat_map(|&w0| bank1.iter().map(move |&w1| w0 + w1))
            .collect();
        for (p, &a) in sums.iter().enumerate() {
            for &b in &sums[p + 1..] {
                assert_ne!(a, b, "pair sums must be distinct for this check");
            }
        }
        let b_draws = 100_000;
        let draws = draw(&norm, &fitted, &panel, b_draws, 33).unwrap();
        let mut counts = [[0usize; 3]; 3];
        'outer: for r in 0..b_draws {
            let v = draws.draws[(r, 0)];
            for (i, &w0) in bank0.iter().enumerate() {
                for (l, &w1) in bank1.iter().enumerate() {
                    if v == w0 + w1 {
                        counts[i][l] += 1;
                        continue 'outer;
                    }
                }
            }
            panic!("draw {v} does not decompose into bank values");
        }
        let p = 1.0 / 9.0;
        let tol = 3.0 * (p * (1.0 - p) / b_draws as f64).sqrt();
        for row in &counts {
            for &cnt in row {
                assert_abs_diff_eq!(cnt as f64 / b_draws as f64, p, epsilon = tol);
            }
        }
    }

    #[test]
    fn empirical_cdf_counts_componentwise() {
        let draws = ResampleDraws {
            draws: DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 2.0]),
            seed: 0,
            degenerate: BTreeSet::new(),
            scheme_fingerprint: String::new(),
            hetero_fingerprint: String::new(),
        };
        assert_abs_diff_eq!(empirical_cdf(&draws, &[0.0]), 2.0 / 3.0);
        assert_abs_diff_eq!(empirical_cdf(&draws, &[f64::INFINITY]), 1.0);
        assert_abs_diff_eq!(empirical_cdf(&draws, &[f64::NEG_INFINITY]), 0.0);
    }

    #[test]
    fn empirical_cdf_is_monotone_and_right_continuous() {
        let outcomes = DMatrix::from_fn(6, 3, |j, t| ((j * 3 + t * 5) % 7) as f64 * 0.5);
        let (panel, norm, fitted) = identity_pipeline(outcomes, 1, &[2]);
        let draws = draw(&norm, &fitted, &panel, 500, 5).unwrap();
        let grid: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.2).collect();
        let mut prev = 0.0;
        for &c in &grid {
            let v = empirical_cdf(&draws, &[c]);
            assert!(v >= prev, "cdf decreased at {c}");
            prev = v;
            // Right continuity: nudging c upward cannot drop the value.
            assert!(empirical_cdf(&draws, &[c + 1e-12]) >= v);
        }
    }

    #[test]
    fn exact_cdf_matches_hand_enumeration_of_nine_tuples() {
        let outcomes = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 4.0, 0.5, 2.0, 0.0, 1.0, 0.0, 3.0, 1.0, 1.25],
        );
        let (panel, norm, fitted) = identity_pipeline(outcomes, 2, &[1, 1]);
        let bank0: Vec<f64> = norm.per_unit[0].column(0).iter().copied().collect();
        let bank1: Vec<f64> = norm.per_unit[1].column(0).iter().copied().collect();
        for c in [-1.0, -0.25, 0.0, 0.4, 1.5] {
            // Independent oracle: direct loop over the 9 assignments.
            let mut hits = 0;
            for &w0 in &bank0 {
                for &w1 in &bank1 {
                    if w0 + w1 <= c {
                        hits += 1;
                    }
                }
            }
            let expected = hits as f64 / 9.0;
            let got = exact_cdf(&norm, &fitted, &panel, &[c]).unwrap();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn exact_cdf_single_unit_is_residual_ecdf() {
        let outcomes = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 4.0, 0.0, 1.0, 0.0, 3.0, 1.0, 1.5],
        );
        let (panel, norm, fitted) = identity_pipeline(outcomes, 1, &[1]);
        let residuals: Vec<f64> = norm.per_unit[0].column(0).iter().copied().collect();
        for c in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let expected =
                residuals.iter().filter(|&&w| w <= c).count() as f64 / residuals.len() as f64;
            let got = exact_cdf(&norm, &fitted, &panel, &[c]).unwrap();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        // N0 = 30, N1 = 6 -> 30^6 = 7.29e8 > budget.
        let n0 = 30;
        let n1 = 6;
        let outcomes = DMatrix::from_fn(n0 + n1, 3, |j, t| ((j * 11 + t) % 17) as f64);
        let (panel, norm, fitted) =
            identity_pipeline(outcomes, n1, &[1, 1, 2, 2, 1, 2]);
        let err = exact_cdf(&norm, &fitted, &panel, &[0.0]).unwrap_err();
        assert!(err.to_string().contains("empirical_cdf"), "{err}");
    }

    #[test]
    fn sampler_mean_matches_exact_cdf_over_seeds() {
        let outcomes = DMatrix::from_fn(6, 3, |j, t| ((j * 5 + t * 3) % 11) as f64 * 0.3);
        let (panel, norm, fitted) = identity_pipeline(outcomes, 2, &[1, 2]);
        let c = [0.2];
        let exact = exact_cdf(&norm, &fitted, &panel, &c).unwrap();
        let n_seeds: u64 = 200;
        let b: usize = 200;
        let mean: f64 = (0..n_seeds)
            .map(|s| empirical_cdf(&draw(&norm, &fitted, &panel, b, s).unwrap(), &c))
            .sum::<f64>()
            / n_seeds as f64;
        let se = (exact * (1.0 - exact) / (n_seeds as usize * b) as f64).sqrt();
        assert_abs_diff_eq!(mean, exact, epsilon = 4.0 * se + 1e-12);
    }
}
