//! Point estimation and control residuals.
//!
//! The estimate is the sum over treated units of `B_j A_j` applied to the
//! unit's outcome path net of the never-treated average. The control
//! residuals `W_i(j)` are the same transform applied to each control path,
//! centered at the control mean; they carry all the information the
//! resampler uses to mimic the estimator's error distribution.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{AggregationScheme, SchemeKind};
use crate::error::Result;
use crate::linalg::serde_mats;
use crate::panel::PanelData;

/// The K-dimensional point estimate with its coordinate labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateVector {
    pub values: Vec<f64>,
    pub labels: Vec<String>,
    pub scheme_fingerprint: String,
}

/// Centered control residuals, one N0 x K matrix per treated unit; row i
/// holds `W_i(j)`. Scheme metadata rides along for the inference stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResiduals {
    #[serde(with = "serde_mats")]
    pub per_unit: Vec<DMatrix<f64>>,
    pub scheme_kind: SchemeKind,
    pub t_star: Vec<usize>,
    pub k_target: usize,
    pub degenerate_by_unit: Vec<BTreeSet<usize>>,
    pub degenerate_global: BTreeSet<usize>,
    pub scheme_fingerprint: String,
}

impl ControlResiduals {
    pub fn n_control(&self) -> usize {
        self.per_unit.first().map_or(0, |m| m.nrows())
    }

    /// Coordinates unit j contributes to, ascending.
    pub fn nondegenerate_for_unit(&self, j: usize) -> Vec<usize> {
        (0..self.k_target).filter(|s| !self.degenerate_by_unit[j].contains(s)).collect()
    }
}

/// Mean outcome path of the never-treated units.
fn control_mean_path(panel: &PanelData) -> DVector<f64> {
    let t = panel.n_periods();
    let mut mean = DVector::zeros(t);
    for i in panel.control_indices() {
        for p in 0..t {
            mean[p] += panel.outcomes()[(i, p)];
        }
    }
    mean / panel.n_control() as f64
}

fn unit_path(panel: &PanelData, j: usize) -> DVector<f64> {
    DVector::from_fn(panel.n_periods(), |p, _| panel.outcomes()[(j, p)])
}

/// Point estimate: sum over treated units of `B_j A_j (Y_j - mean control Y)`.
/// Globally degenerate coordinates are exactly zero.
pub fn point_estimate(panel: &PanelData, scheme: &AggregationScheme) -> Result<EstimateVector> {
    scheme.compatible_with(panel)?;
    let k = scheme.k_target();
    let control_mean = control_mean_path(panel);
    let mut values = DVector::zeros(k);
    for j in 0..panel.n_treated() {
        let diff = unit_path(panel, j) - &control_mean;
        values += scheme.b_block(j) * (scheme.a_block(j) * diff);
    }
    let mut values: Vec<f64> = values.iter().copied().collect();
    for &s in scheme.degenerate_global() {
        values[s] = 0.0;
    }
    Ok(EstimateVector {
        values,
        labels: scheme.labels().to_vec(),
        scheme_fingerprint: scheme.fingerprint(),
    })
}

/// Control residuals `W_i(j) = B_j A_j Y_i - (1/N0) sum B_j A_j Y_i'` for
/// every control i and treated j. For each j the rows sum to zero.
pub fn control_residuals(panel: &PanelData, scheme: &AggregationScheme) -> Result<ControlResiduals> {
    scheme.compatible_with(panel)?;
    let k = scheme.k_target();
    let n0 = panel.n_control();
    let mut per_unit = Vec::with_capacity(panel.n_treated());
    for j in 0..panel.n_treated() {
        let map = scheme.product(j); // K x T
        let mut rows = DMatrix::zeros(n0, k);
        for (row, i) in panel.control_indices().enumerate() {
            let w = &map * unit_path(panel, i);
            for s in 0..k {
                rows[(row, s)] = w[s];
            }
        }
        let mean = rows.row_mean();
        for row in 0..n0 {
            for s in 0..k {
                rows[(row, s)] -= mean[s];
            }
        }
        for &s in scheme.degenerate_for_unit(j) {
            rows.column_mut(s).fill(0.0);
        }
        per_unit.push(rows);
    }
    Ok(ControlResiduals {
        per_unit,
        scheme_kind: scheme.kind(),
        t_star: scheme.t_star().to_vec(),
        k_target: k,
        degenerate_by_unit: (0..panel.n_treated())
            .map(|j| scheme.degenerate_for_unit(j).clone())
            .collect(),
        degenerate_global: scheme.degenerate_global().clone(),
        scheme_fingerprint: scheme.fingerprint(),
    })
}
