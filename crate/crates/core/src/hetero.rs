//! Parametric scale models for the transformed errors `B_j A_j eta_i`.
//!
//! Three families are supported, each fitted per treated unit j on the
//! nondegenerate coordinates only:
//!
//! - `identity`: H = I, the iid case;
//! - `panel_agg`: H(Z)^2 = Lambda0 + Lambda1 / Z, for outcomes aggregating
//!   Z individuals followed over all periods;
//! - `repeated_cs`: H(Z)^2 = Lambda0 + (omega0 / Z_{t*}) * ones-block +
//!   diag(omega_k / Z_{t*+k}), for repeated cross-sections with per-period
//!   sample sizes.
//!
//! Fitting minimizes the Frobenius distance between the residual outer
//! products and the model second moments; the solution is linear least
//! squares followed by a PSD projection. A floor on the smallest singular
//! value of the fitted scale matrices is enforced by a minimal ridge.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::SchemeKind;
use crate::error::{Error, Result};
use crate::estimator::ControlResiduals;
use crate::linalg::{min_eigenvalue, psd_project, serde_mat, solve_spd, sqrt_psd};
use crate::panel::{PanelData, Sizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeteroKind {
    Identity,
    PanelAgg,
    RepeatedCs,
}

impl std::fmt::Display for HeteroKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeteroKind::Identity => "identity",
            HeteroKind::PanelAgg => "panel_agg",
            HeteroKind::RepeatedCs => "repeated_cs",
        };
        write!(f, "{s}")
    }
}

/// Model family choice plus the smallest-singular-value floor. With
/// `sv_floor = None` the floor defaults to 1e-6 times the median eigenvalue
/// of the pooled residual covariance, per treated unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeteroSpec {
    pub kind: HeteroKind,
    pub sv_floor: Option<f64>,
}

impl HeteroSpec {
    pub fn new(kind: HeteroKind) -> Self {
        HeteroSpec { kind, sv_floor: None }
    }

    pub fn identity() -> Self {
        Self::new(HeteroKind::Identity)
    }
}

/// Fitted parameters for one treated unit, on its nondegenerate coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeteroParams {
    Identity,
    PanelAgg {
        #[serde(with = "serde_mat")]
        lambda0: DMatrix<f64>,
        #[serde(with = "serde_mat")]
        lambda1: DMatrix<f64>,
    },
    RepeatedCs {
        #[serde(with = "serde_mat")]
        lambda0: DMatrix<f64>,
        omega0: f64,
        /// One weight per post period (att) or per exposure coordinate
        /// (event study).
        omega_post: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFit {
    pub params: HeteroParams,
    /// Ridge added to H so its smallest singular value reaches the floor.
    pub ridge: f64,
    /// Resolved floor in force for this unit.
    pub sv_floor: f64,
    /// Frobenius objective at the returned parameters (fitted families only).
    pub objective: Option<f64>,
    pub iterations: usize,
    /// Nondegenerate coordinate indices (ascending) this fit covers.
    pub nondegenerate: Vec<usize>,
    pub t_star: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedHetero {
    pub kind: HeteroKind,
    pub scheme_kind: SchemeKind,
    pub t_periods: usize,
    pub units: Vec<UnitFit>,
    pub scheme_fingerprint: String,
}

impl FittedHetero {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("fit serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Size argument for [`scale_matrix`]: one scalar for the panel-aggregation
/// model, per-period values for repeated cross-sections.
#[derive(Debug, Clone, PartialEq)]
pub enum SizeValue {
    Scalar(f64),
    PerPeriod(Vec<f64>),
}

/// Residuals premultiplied by the inverse fitted scale, per treated unit,
/// restricted to nondegenerate coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedResiduals {
    /// N0 x m_j per treated unit.
    pub per_unit: Vec<DMatrix<f64>>,
    pub nondegenerate_by_unit: Vec<Vec<usize>>,
    pub k_target: usize,
    pub degenerate_global: BTreeSet<usize>,
    pub scheme_fingerprint: String,
    pub hetero_fingerprint: String,
}

/// Fit the scale model to the control residuals.
pub fn fit(
    spec: &HeteroSpec,
    residuals: &ControlResiduals,
    panel: &PanelData,
) -> Result<FittedHetero> {
    if let Some(floor) = spec.sv_floor {
        if !(floor >= 0.0) {
            return Err(Error::validation("sv_floor must be nonnegative"));
        }
    }
    let n1 = residuals.per_unit.len();
    let mut units = Vec::with_capacity(n1);
    for j in 0..n1 {
        let unit = match spec.kind {
            HeteroKind::Identity => UnitFit {
                params: HeteroParams::Identity,
                ridge: 0.0,
                sv_floor: spec.sv_floor.unwrap_or(0.0),
                objective: None,
                iterations: 0,
                nondegenerate: residuals.nondegenerate_for_unit(j),
                t_star: residuals.t_star[j],
            },
            HeteroKind::PanelAgg => fit_panel_agg(spec, residuals, panel, j)?,
            HeteroKind::RepeatedCs => fit_repeated_cs(spec, residuals, panel, j)?,
        };
        units.push(unit);
    }
    Ok(FittedHetero {
        kind: spec.kind,
        scheme_kind: residuals.scheme_kind,
        t_periods: panel.n_periods(),
        units,
        scheme_fingerprint: residuals.scheme_fingerprint.clone(),
    })
}

/// Residual rows of unit j restricted to its nondegenerate coordinates.
fn restricted_rows(residuals: &ControlResiduals, j: usize) -> (DMatrix<f64>, Vec<usize>) {
    let coords = residuals.nondegenerate_for_unit(j);
    let full = &residuals.per_unit[j];
    let m = coords.len();
    let rows = DMatrix::from_fn(full.nrows(), m, |r, c| full[(r, coords[c])]);
    (rows, coords)
}

fn control_sizes_per_unit(panel: &PanelData) -> Result<Vec<f64>> {
    match panel.sizes() {
        Some(Sizes::PerUnit(z)) => Ok(panel.control_indices().map(|i| z[i]).collect()),
        Some(Sizes::PerUnitPeriod(_)) => Err(Error::validation(
            "panel_agg requires one size per unit; panel has per-period sizes",
        )),
        None => Err(Error::validation("panel_agg requires unit sizes; panel has none")),
    }
}

/// Resolve the floor: explicit value, or 1e-6 times the median eigenvalue of
/// the pooled residual covariance.
fn resolve_floor(spec: &HeteroSpec, rows: &DMatrix<f64>) -> f64 {
    if let Some(floor) = spec.sv_floor {
        return floor;
    }
    let n0 = rows.nrows() as f64;
    let pooled = rows.transpose() * rows / n0;
    let mut eigs: Vec<f64> = pooled.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if eigs.is_empty() {
        0.0
    } else if eigs.len() % 2 == 1 {
        eigs[eigs.len() / 2]
    } else {
        0.5 * (eigs[eigs.len() / 2 - 1] + eigs[eigs.len() / 2])
    };
    1e-6 * median.max(0.0).sqrt().powi(2).sqrt() // median eigenvalue of PSD = singular value
}

/// Minimal ridge lifting the smallest singular value of every control's
/// scale matrix to the floor. `moment(i)` returns H^2 for control i.
fn ridge_for_floor(
    n0: usize,
    floor: f64,
    moment: impl Fn(usize) -> DMatrix<f64>,
) -> f64 {
    let mut h_min = f64::INFINITY;
    for i in 0..n0 {
        let lam = min_eigenvalue(&moment(i)).max(0.0);
        h_min = h_min.min(lam.sqrt());
    }
    (floor - h_min).max(0.0)
}

fn fit_panel_agg(
    spec: &HeteroSpec,
    residuals: &ControlResiduals,
    panel: &PanelData,
    j: usize,
) -> Result<UnitFit> {
    let z = control_sizes_per_unit(panel)?;
    let n0 = z.len();
    let mut distinct = z.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::validation(
            "all control sizes are identical: Lambda0 and Lambda1 are not separately \
             identified; use the identity model or provide varying sizes",
        ));
    }

    let (rows, coords) = restricted_rows(residuals, j);
    let m = coords.len();
    let x: Vec<f64> = z.iter().map(|&v| 1.0 / v).collect();
    let x_mean = x.iter().sum::<f64>() / n0 as f64;
    let sxx: f64 = x.iter().map(|&v| (v - x_mean).powi(2)).sum();

    // Per-entry least squares of W[a] W[b] on (1, 1/Z).
    let mut lambda0 = DMatrix::zeros(m, m);
    let mut lambda1 = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let y: Vec<f64> = (0..n0).map(|i| rows[(i, a)] * rows[(i, b)]).collect();
            let y_mean = y.iter().sum::<f64>() / n0 as f64;
            let sxy: f64 =
                x.iter().zip(&y).map(|(&xv, &yv)| (xv - x_mean) * (yv - y_mean)).sum();
            let slope = sxy / sxx;
            lambda0[(a, b)] = y_mean - slope * x_mean;
            lambda1[(a, b)] = slope;
        }
    }
    let lambda0 = psd_project(&lambda0);
    let lambda1 = psd_project(&lambda1);

    let moment = |i: usize| &lambda0 + &lambda1 * x[i];
    let objective: f64 = (0..n0)
        .map(|i| {
            let s = rows.row(i).transpose() * rows.row(i);
            (s - moment(i)).norm_squared()
        })
        .sum();

    let floor = resolve_floor(spec, &rows);
    let ridge = ridge_for_floor(n0, floor, moment);

    Ok(UnitFit {
        params: HeteroParams::PanelAgg { lambda0, lambda1 },
        ridge,
        sv_floor: floor,
        objective: Some(objective),
        iterations: 1,
        nondegenerate: coords,
        t_star: residuals.t_star[j],
    })
}

/// Index of (a, b), a <= b, in the stacked upper triangle of an m x m
/// symmetric matrix.
fn vech_index(a: usize, b: usize, m: usize) -> usize {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    lo * m - lo * (lo + 1) / 2 + hi
}

fn fit_repeated_cs(
    spec: &HeteroSpec,
    residuals: &ControlResiduals,
    panel: &PanelData,
    j: usize,
) -> Result<UnitFit> {
    match residuals.scheme_kind {
        SchemeKind::Att | SchemeKind::EventStudy => {}
        other => {
            return Err(Error::validation(format!(
                "unsupported combination: repeated_cs sizes with `{other}` scheme; \
                 the per-period variance model is defined for att and event_study"
            )));
        }
    }
    let sizes = match panel.sizes() {
        Some(Sizes::PerUnitPeriod(m)) => m,
        Some(Sizes::PerUnit(_)) => {
            return Err(Error::validation(
                "repeated_cs requires per-period sizes; panel has one size per unit",
            ))
        }
        None => return Err(Error::validation("repeated_cs requires sizes; panel has none")),
    };

    let (rows, coords) = restricted_rows(residuals, j);
    let n0 = rows.nrows();
    let m = coords.len();
    let t_star = residuals.t_star[j];
    let t = panel.n_periods();
    // One omega per post period (att aggregates them all into its single
    // coordinate; event study pairs omega_k with coordinate k).
    let n_omega = match residuals.scheme_kind {
        SchemeKind::Att => t - t_star,
        _ => m,
    };
    let n_params = m * (m + 1) / 2 + 1 + n_omega;
    let omega0_idx = m * (m + 1) / 2;

    // Inverse sizes at the pre period t* and each post period, per control.
    let inv_pre: Vec<f64> = panel
        .control_indices()
        .map(|i| 1.0 / sizes[(i, t_star - 1)])
        .collect();
    let inv_post: Vec<Vec<f64>> = panel
        .control_indices()
        .map(|i| (0..n_omega).map(|r| 1.0 / sizes[(i, t_star + r)]).collect())
        .collect();

    // Normal equations over all controls and ordered coordinate pairs.
    let mut xtx = DMatrix::<f64>::zeros(n_params, n_params);
    let mut xty = DVector::<f64>::zeros(n_params);
    let mut feat_idx: Vec<usize> = Vec::with_capacity(3);
    let mut feat_val: Vec<f64> = Vec::with_capacity(3);
    for i in 0..n0 {
        for a in 0..m {
            for b in 0..m {
                feat_idx.clear();
                feat_val.clear();
                feat_idx.push(vech_index(a, b, m));
                feat_val.push(1.0);
                feat_idx.push(omega0_idx);
                feat_val.push(inv_pre[i]);
                if a == b {
                    match residuals.scheme_kind {
                        SchemeKind::Att => {
                            for (r, &xv) in inv_post[i].iter().enumerate() {
                                feat_idx.push(omega0_idx + 1 + r);
                                feat_val.push(xv);
                            }
                        }
                        _ => {
                            feat_idx.push(omega0_idx + 1 + a);
                            feat_val.push(inv_post[i][a]);
                        }
                    }
                }
                let y = rows[(i, a)] * rows[(i, b)];
                for (p, (&ip, &vp)) in feat_idx.iter().zip(&feat_val).enumerate() {
                    xty[ip] += vp * y;
                    for (&iq, &vq) in feat_idx.iter().zip(&feat_val).skip(p) {
                        xtx[(ip, iq)] += vp * vq;
                        if ip != iq {
                            xtx[(iq, ip)] += vp * vq;
                        }
                    }
                }
            }
        }
    }

    let svd = xtx.clone().svd(true, true);
    let sv_max = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let eps = sv_max * 1e-10;
    if svd.rank(eps) < n_params {
        return Err(Error::validation(
            "repeated_cs model is not identified: per-period sizes lack the variation \
             needed to separate Lambda0 from the size-driven terms",
        ));
    }
    let beta = svd
        .solve(&xty, eps)
        .map_err(|e| Error::internal(format!("repeated_cs normal equations: {e}")))?;

    let mut lambda0 = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = beta[vech_index(a, b, m)];
            lambda0[(a, b)] = v;
            lambda0[(b, a)] = v;
        }
    }
    let lambda0 = psd_project(&lambda0);
    let omega0 = beta[omega0_idx].max(0.0);
    let omega_post: Vec<f64> =
        (0..n_omega).map(|r| beta[omega0_idx + 1 + r].max(0.0)).collect();

    let moment = |i: usize| {
        repeated_cs_moment(
            &lambda0,
            omega0,
            &omega_post,
            inv_pre[i],
            &inv_post[i],
            residuals.scheme_kind,
        )
    };
    let objective: f64 = (0..n0)
        .map(|i| {
            let s = rows.row(i).transpose() * rows.row(i);
            (s - moment(i)).norm_squared()
        })
        .sum();

    let floor = resolve_floor(spec, &rows);
    let ridge = ridge_for_floor(n0, floor, moment);

    Ok(UnitFit {
        params: HeteroParams::RepeatedCs { lambda0, omega0, omega_post },
        ridge,
        sv_floor: floor,
        objective: Some(objective),
        iterations: 1,
        nondegenerate: coords,
        t_star,
    })
}

/// H^2 for the repeated cross-section family: ones-block pre term plus
/// per-post-period diagonal (event study) or fully pooled (att) terms.
fn repeated_cs_moment(
    lambda0: &DMatrix<f64>,
    omega0: f64,
    omega_post: &[f64],
    inv_pre: f64,
    inv_post: &[f64],
    scheme_kind: SchemeKind,
) -> DMatrix<f64> {
    let m = lambda0.nrows();
    let mut out = lambda0.clone();
    for a in 0..m {
        for b in 0..m {
            out[(a, b)] += omega0 * inv_pre;
        }
    }
    match scheme_kind {
        SchemeKind::Att => {
            let extra: f64 =
                omega_post.iter().zip(inv_post).map(|(&w, &x)| w * x).sum();
            out[(0, 0)] += extra;
        }
        _ => {
            for a in 0..m {
                out[(a, a)] += omega_post[a] * inv_post[a];
            }
        }
    }
    out
}

/// The fitted scale matrix `H_j` evaluated at size `z`: the symmetric PSD
/// square root of the model second moment, plus the unit's ridge.
pub fn scale_matrix(fitted: &FittedHetero, j: usize, z: &SizeValue) -> Result<DMatrix<f64>> {
    let unit = &fitted.units[j];
    let m = unit.nondegenerate.len();
    match (&unit.params, z) {
        (HeteroParams::Identity, _) => Ok(DMatrix::identity(m, m)),
        (HeteroParams::PanelAgg { lambda0, lambda1 }, SizeValue::Scalar(zv)) => {
            if !(*zv > 0.0) {
                return Err(Error::validation(format!("size must be positive, got {zv}")));
            }
            let mut h = sqrt_psd(&(lambda0 + lambda1 / *zv));
            add_ridge(&mut h, unit.ridge);
            Ok(h)
        }
        (HeteroParams::PanelAgg { .. }, SizeValue::PerPeriod(_)) => Err(Error::validation(
            "panel_agg scale takes one size per unit, got per-period sizes",
        )),
        (HeteroParams::RepeatedCs { lambda0, omega0, omega_post }, SizeValue::PerPeriod(zv)) => {
            if zv.len() != fitted.t_periods {
                return Err(Error::validation(format!(
                    "expected {} per-period sizes, got {}",
                    fitted.t_periods,
                    zv.len()
                )));
            }
            let t_star = unit.t_star;
            let used = std::iter::once(zv[t_star - 1])
                .chain((0..omega_post.len()).map(|r| zv[t_star + r]));
            for v in used {
                if !(v > 0.0) {
                    return Err(Error::validation(format!("size must be positive, got {v}")));
                }
            }
            let inv_pre = 1.0 / zv[t_star - 1];
            let inv_post: Vec<f64> =
                (0..omega_post.len()).map(|r| 1.0 / zv[t_star + r]).collect();
            let moment = repeated_cs_moment(
                lambda0,
                *omega0,
                omega_post,
                inv_pre,
                &inv_post,
                fitted.scheme_kind,
            );
            let mut h = sqrt_psd(&moment);
            add_ridge(&mut h, unit.ridge);
            Ok(h)
        }
        (HeteroParams::RepeatedCs { .. }, SizeValue::Scalar(_)) => Err(Error::validation(
            "repeated_cs scale takes per-period sizes, got a single scalar",
        )),
    }
}

fn add_ridge(h: &mut DMatrix<f64>, ridge: f64) {
    if ridge > 0.0 {
        for d in 0..h.nrows() {
            h[(d, d)] += ridge;
        }
    }
}

/// Size value of unit `unit` as required by the fitted family.
pub fn size_value_for_unit(
    fitted: &FittedHetero,
    panel: &PanelData,
    unit: usize,
) -> Result<SizeValue> {
    match fitted.kind {
        HeteroKind::Identity => Ok(SizeValue::Scalar(1.0)),
        HeteroKind::PanelAgg => match panel.sizes() {
            Some(Sizes::PerUnit(z)) => Ok(SizeValue::Scalar(z[unit])),
            _ => Err(Error::validation("panel_agg requires per-unit sizes")),
        },
        HeteroKind::RepeatedCs => match panel.sizes() {
            Some(Sizes::PerUnitPeriod(z)) => {
                Ok(SizeValue::PerPeriod(z.row(unit).iter().copied().collect()))
            }
            _ => Err(Error::validation("repeated_cs requires per-period sizes")),
        },
    }
}

/// Normalized residuals `H_j(Z_i)^{-1} W_i(j)` on nondegenerate coordinates.
pub fn normalize(
    residuals: &ControlResiduals,
    fitted: &FittedHetero,
    panel: &PanelData,
) -> Result<NormalizedResiduals> {
    if fitted.scheme_fingerprint != residuals.scheme_fingerprint {
        return Err(Error::validation(
            "fitted model and residuals come from different schemes",
        ));
    }
    let n1 = residuals.per_unit.len();
    let n0 = residuals.n_control();
    let mut per_unit = Vec::with_capacity(n1);
    let mut nondeg = Vec::with_capacity(n1);
    for j in 0..n1 {
        let (rows, coords) = restricted_rows(residuals, j);
        let m = coords.len();
        let mut out = DMatrix::zeros(n0, m);
        if matches!(fitted.units[j].params, HeteroParams::Identity)
            && fitted.units[j].ridge == 0.0
        {
            out.copy_from(&rows);
        } else {
            for (row, i) in panel.control_indices().enumerate() {
                let z = size_value_for_unit(fitted, panel, i)?;
                let h = scale_matrix(fitted, j, &z)?;
                let w = rows.row(row).transpose();
                let solved = solve_spd(&h, &w)?;
                for c in 0..m {
                    out[(row, c)] = solved[c];
                }
            }
        }
        per_unit.push(out);
        nondeg.push(coords);
    }
    Ok(NormalizedResiduals {
        per_unit,
        nondegenerate_by_unit: nondeg,
        k_target: residuals.k_target,
        degenerate_global: residuals.degenerate_global.clone(),
        scheme_fingerprint: residuals.scheme_fingerprint.clone(),
        hetero_fingerprint: fitted.fingerprint(),
    })
}
