//! Aggregation schemes: per-treated-unit extraction matrices `A_j` and
//! aggregation matrices `B_j`.
//!
//! `A_j` (K_j x T) turns an outcome path into building-block contrasts
//! (post period minus a weighted pre-period average, or differences to the
//! last pre period), and `B_j` (K x K_j) weights those blocks into the
//! K-dimensional target. The product `B_j A_j` must have zero row sums so
//! unit fixed effects cancel. Coordinates whose `B_j A_j` row is identically
//! zero are degenerate: their sampling distribution is a point mass at zero.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::MatDoc;
use crate::panel::PanelData;

/// Tolerance for `B_j A_j` row sums.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Fallback tolerance for detecting zero rows in user-supplied schemes;
/// constructors produce exact zeros.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Att,
    EventStudy,
    Pretrends,
    Generic,
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchemeKind::Att => "att",
            SchemeKind::EventStudy => "event_study",
            SchemeKind::Pretrends => "pretrends",
            SchemeKind::Generic => "generic",
        };
        write!(f, "{s}")
    }
}

/// The complete description of an estimator target: blocks, aggregation,
/// degenerate coordinates, and coordinate labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeDoc", into = "SchemeDoc")]
pub struct AggregationScheme {
    kind: SchemeKind,
    k_target: usize,
    t_periods: usize,
    t_star: Vec<usize>,
    a_blocks: Vec<DMatrix<f64>>,
    b_blocks: Vec<DMatrix<f64>>,
    degenerate_by_unit: Vec<BTreeSet<usize>>,
    degenerate_global: BTreeSet<usize>,
    labels: Vec<String>,
}

impl AggregationScheme {
    /// Assemble a scheme from raw blocks. Dimension conformance is enforced;
    /// degenerate sets are recomputed from the blocks. Row-sum violations are
    /// NOT rejected here — [`verify_scheme`] reports them.
    pub fn from_parts(
        kind: SchemeKind,
        t_periods: usize,
        t_star: Vec<usize>,
        a_blocks: Vec<DMatrix<f64>>,
        b_blocks: Vec<DMatrix<f64>>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if a_blocks.len() != t_star.len() || b_blocks.len() != t_star.len() {
            return Err(Error::validation("one A and one B block required per treated unit"));
        }
        if a_blocks.is_empty() {
            return Err(Error::validation("scheme needs at least one treated unit"));
        }
        let k_target = b_blocks[0].nrows();
        if labels.len() != k_target {
            return Err(Error::validation("labels length must equal target dimension"));
        }
        for (j, (a, b)) in a_blocks.iter().zip(&b_blocks).enumerate() {
            if a.ncols() != t_periods {
                return Err(Error::validation(format!(
                    "A block {} has {} columns, panel has {} periods",
                    j + 1,
                    a.ncols(),
                    t_periods
                )));
            }
            if b.nrows() != k_target || b.ncols() != a.nrows() {
                return Err(Error::validation(format!(
                    "B block {} is {}x{}, expected {}x{}",
                    j + 1,
                    b.nrows(),
                    b.ncols(),
                    k_target,
                    a.nrows()
                )));
            }
        }
        let mut scheme = AggregationScheme {
            kind,
            k_target,
            t_periods,
            t_star,
            a_blocks,
            b_blocks,
            degenerate_by_unit: Vec::new(),
            degenerate_global: BTreeSet::new(),
            labels,
        };
        let (by_unit, global) = scheme.recompute_degenerate(DEGENERATE_TOL);
        scheme.degenerate_by_unit = by_unit;
        scheme.degenerate_global = global;
        Ok(scheme)
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    /// Target dimension K.
    pub fn k_target(&self) -> usize {
        self.k_target
    }

    pub fn t_periods(&self) -> usize {
        self.t_periods
    }

    pub fn n_treated(&self) -> usize {
        self.t_star.len()
    }

    pub fn t_star(&self) -> &[usize] {
        &self.t_star
    }

    pub fn a_block(&self, j: usize) -> &DMatrix<f64> {
        &self.a_blocks[j]
    }

    pub fn b_block(&self, j: usize) -> &DMatrix<f64> {
        &self.b_blocks[j]
    }

    /// `B_j A_j`, the K x T map from an outcome path to its contribution.
    pub fn product(&self, j: usize) -> DMatrix<f64> {
        &self.b_blocks[j] * &self.a_blocks[j]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Coordinates with an identically zero `B_j A_j` row for unit j.
    pub fn degenerate_for_unit(&self, j: usize) -> &BTreeSet<usize> {
        &self.degenerate_by_unit[j]
    }

    /// Coordinates degenerate for every treated unit.
    pub fn degenerate_global(&self) -> &BTreeSet<usize> {
        &self.degenerate_global
    }

    /// Coordinates unit j actually contributes to, ascending.
    pub fn nondegenerate_for_unit(&self, j: usize) -> Vec<usize> {
        (0..self.k_target).filter(|s| !self.degenerate_by_unit[j].contains(s)).collect()
    }

    /// Check that the scheme was built for this panel: same period count and
    /// the same treated timing.
    pub fn compatible_with(&self, panel: &PanelData) -> Result<()> {
        if self.t_periods != panel.n_periods() {
            return Err(Error::validation(format!(
                "scheme built for {} periods, panel has {}",
                self.t_periods,
                panel.n_periods()
            )));
        }
        if self.t_star.len() != panel.n_treated() {
            return Err(Error::validation(format!(
                "scheme built for {} treated units, panel has {}",
                self.t_star.len(),
                panel.n_treated()
            )));
        }
        for (j, &ts) in self.t_star.iter().enumerate() {
            if panel.t_star(j) != ts {
                return Err(Error::validation(format!(
                    "scheme treat time {} for unit {} does not match panel ({})",
                    ts,
                    j + 1,
                    panel.t_star(j)
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash of the serialized scheme.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("scheme serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    fn recompute_degenerate(&self, tol: f64) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
        let mut by_unit = Vec::with_capacity(self.t_star.len());
        for j in 0..self.t_star.len() {
            let prod = self.product(j);
            let mut set = BTreeSet::new();
            for s in 0..self.k_target {
                if prod.row(s).iter().all(|v| v.abs() <= tol) {
                    set.insert(s);
                }
            }
            by_unit.push(set);
        }
        let global = (0..self.k_target)
            .filter(|s| by_unit.iter().all(|set| set.contains(s)))
            .collect();
        (by_unit, global)
    }
}

/// Wire format: dense row-major matrices plus degeneracy index lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemeDoc {
    kind: SchemeKind,
    k_target: usize,
    t_periods: usize,
    t_star: Vec<usize>,
    a_blocks: Vec<MatDoc>,
    b_blocks: Vec<MatDoc>,
    degenerate_by_unit: Vec<Vec<usize>>,
    degenerate_global: Vec<usize>,
    labels: Vec<String>,
}

impl From<AggregationScheme> for SchemeDoc {
    fn from(s: AggregationScheme) -> Self {
        SchemeDoc {
            kind: s.kind,
            k_target: s.k_target,
            t_periods: s.t_periods,
            t_star: s.t_star,
            a_blocks: s.a_blocks.iter().map(MatDoc::from_matrix).collect(),
            b_blocks: s.b_blocks.iter().map(MatDoc::from_matrix).collect(),
            degenerate_by_unit: s
                .degenerate_by_unit
                .iter()
                .map(|set| set.iter().copied().collect())
                .collect(),
            degenerate_global: s.degenerate_global.iter().copied().collect(),
            labels: s.labels,
        }
    }
}

impl TryFrom<SchemeDoc> for AggregationScheme {
    type Error = Error;

    /// Dimension conformance is enforced; the stored degenerate sets are
    /// trusted as-is so that [`verify_scheme`] can detect stale ones.
    fn try_from(doc: SchemeDoc) -> Result<Self> {
        let a_blocks: Vec<DMatrix<f64>> =
            doc.a_blocks.iter().map(MatDoc::to_matrix).collect::<Result<_>>()?;
        let b_blocks: Vec<DMatrix<f64>> =
            doc.b_blocks.iter().map(MatDoc::to_matrix).collect::<Result<_>>()?;
        let mut scheme = AggregationScheme::from_parts(
            doc.kind,
            doc.t_periods,
            doc.t_star,
            a_blocks,
            b_blocks,
            doc.labels,
        )?;
        if doc.k_target != scheme.k_target {
            return Err(Error::validation("k_target does not match B block rows"));
        }
        scheme.degenerate_by_unit =
            doc.degenerate_by_unit.into_iter().map(|v| v.into_iter().collect()).collect();
        scheme.degenerate_global = doc.degenerate_global.into_iter().collect();
        if scheme.degenerate_by_unit.len() != scheme.t_star.len() {
            return Err(Error::validation("degenerate set count does not match treated units"));
        }
        Ok(scheme)
    }
}

/// Scalar target: the average post-treatment effect across all treated
/// units and post periods, each post period contrasted with the uniform
/// pre-period average.
pub fn build_scheme_att(panel: &PanelData) -> Result<AggregationScheme> {
    let t = panel.n_periods();
    let n1 = panel.n_treated();
    let total_blocks: usize = (0..n1).map(|j| t - panel.t_star(j)).sum();

    let mut a_blocks = Vec::with_capacity(n1);
    let mut b_blocks = Vec::with_capacity(n1);
    for j in 0..n1 {
        let ts = panel.t_star(j);
        a_blocks.push(post_vs_uniform_pre(t, ts));
        b_blocks.push(DMatrix::from_element(1, t - ts, 1.0 / total_blocks as f64));
    }
    AggregationScheme::from_parts(
        SchemeKind::Att,
        t,
        (0..n1).map(|j| panel.t_star(j)).collect(),
        a_blocks,
        b_blocks,
        vec!["att".to_string()],
    )
}

/// Event-study target: one coordinate per exposure length k = 1..K, each
/// averaging across the treated units observed at that exposure.
pub fn build_scheme_event_study(panel: &PanelData) -> Result<AggregationScheme> {
    let t = panel.n_periods();
    let n1 = panel.n_treated();
    let k_j: Vec<usize> = (0..n1).map(|j| t - panel.t_star(j)).collect();
    let k = *k_j.iter().max().expect("at least one treated unit");
    // N_k: treated units with at least k post periods.
    let n_at: Vec<usize> =
        (1..=k).map(|expo| k_j.iter().filter(|&&kj| kj >= expo).count()).collect();

    let mut a_blocks = Vec::with_capacity(n1);
    let mut b_blocks = Vec::with_capacity(n1);
    for j in 0..n1 {
        let ts = panel.t_star(j);
        a_blocks.push(post_vs_uniform_pre(t, ts));
        let mut b = DMatrix::zeros(k, k_j[j]);
        for expo in 0..k_j[j] {
            b[(expo, expo)] = 1.0 / n_at[expo] as f64;
        }
        b_blocks.push(b);
    }
    AggregationScheme::from_parts(
        SchemeKind::EventStudy,
        t,
        (0..n1).map(|j| panel.t_star(j)).collect(),
        a_blocks,
        b_blocks,
        (1..=k).map(|expo| expo.to_string()).collect(),
    )
}

/// Differential-trend target: every period contrasted with the last pre
/// period, aggregated by relative event time. Relative time 0 is the
/// reference and is degenerate by construction.
pub fn build_scheme_pretrends(panel: &PanelData) -> Result<AggregationScheme> {
    let t = panel.n_periods() as i64;
    let n1 = panel.n_treated();
    let lower: Vec<i64> = (0..n1).map(|j| 1 - panel.t_star(j) as i64).collect();
    let upper: Vec<i64> = (0..n1).map(|j| t - panel.t_star(j) as i64).collect();
    let lo = *lower.iter().min().unwrap();
    let hi = *upper.iter().max().unwrap();
    let k = (hi - lo + 1) as usize;
    // N_k: treated units observed at relative time rel.
    let n_at: Vec<usize> = (lo..=hi)
        .map(|rel| (0..n1).filter(|&j| lower[j] <= rel && rel <= upper[j]).count())
        .collect();

    let mut a_blocks = Vec::with_capacity(n1);
    let mut b_blocks = Vec::with_capacity(n1);
    for j in 0..n1 {
        let ts = panel.t_star(j); // 1-based
        let tp = t as usize;
        let mut a = DMatrix::zeros(tp, tp);
        for period in 0..tp {
            if period + 1 == ts {
                continue; // zero row at the reference period
            }
            a[(period, period)] = 1.0;
            a[(period, ts - 1)] = -1.0;
        }
        a_blocks.push(a);

        // Row order of A matches ascending relative time lower[j]..=upper[j].
        let mut b = DMatrix::zeros(k, tp);
        for (row, rel) in (lower[j]..=upper[j]).enumerate() {
            let coord = (rel - lo) as usize;
            b[(coord, row)] = 1.0 / n_at[coord] as f64;
        }
        b_blocks.push(b);
    }
    AggregationScheme::from_parts(
        SchemeKind::Pretrends,
        t as usize,
        (0..n1).map(|j| panel.t_star(j)).collect(),
        a_blocks,
        b_blocks,
        (lo..=hi).map(|rel| rel.to_string()).collect(),
    )
}

/// Pre-period weights and aggregation weights for [`build_scheme_generic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericWeights {
    pub k_target: usize,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub units: Vec<UnitWeights>,
}

/// Weights for a single treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitWeights {
    /// One weight vector per post period `t = t*+1..=T`, each of length `t*`
    /// and summing to one: the pre-period average each post period is
    /// contrasted with.
    pub pre_weights: Vec<Vec<f64>>,
    /// Aggregation weights: coordinate `k` (1-based) gets weight `w` on the
    /// building block of post period `t` (1-based panel period).
    pub agg_weights: Vec<AggWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggWeight {
    pub k: usize,
    pub t: usize,
    pub w: f64,
}

/// Build a scheme from explicit pre-period weights `nu` and aggregation
/// weights `omega`. Row sums of `B_j A_j` are zero by construction given
/// each `nu` vector sums to one.
pub fn build_scheme_generic(
    panel: &PanelData,
    weights: &GenericWeights,
) -> Result<AggregationScheme> {
    let t = panel.n_periods();
    let n1 = panel.n_treated();
    if weights.units.len() != n1 {
        return Err(Error::validation(format!(
            "weights describe {} units, panel has {} treated",
            weights.units.len(),
            n1
        )));
    }
    if weights.k_target == 0 {
        return Err(Error::validation("k_target must be at least 1"));
    }
    let k = weights.k_target;
    let labels = match &weights.labels {
        Some(l) => {
            if l.len() != k {
                return Err(Error::validation("labels length must equal k_target"));
            }
            l.clone()
        }
        None => (1..=k).map(|s| s.to_string()).collect(),
    };

    let mut a_blocks = Vec::with_capacity(n1);
    let mut b_blocks = Vec::with_capacity(n1);
    for (j, uw) in weights.units.iter().enumerate() {
        let ts = panel.t_star(j);
        let kj = t - ts;
        if uw.pre_weights.len() != kj {
            return Err(Error::validation(format!(
                "unit {}: expected {} pre-weight vectors (one per post period), got {}",
                j + 1,
                kj,
                uw.pre_weights.len()
            )));
        }
        let mut a = DMatrix::zeros(kj, t);
        for (row, nu) in uw.pre_weights.iter().enumerate() {
            if nu.len() != ts {
                return Err(Error::validation(format!(
                    "unit {}: pre-weight vector {} has length {}, expected t*={}",
                    j + 1,
                    row + 1,
                    nu.len(),
                    ts
                )));
            }
            let sum: f64 = nu.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!(
                    "unit {}: pre-weights for post period {} sum to {sum}, expected 1",
                    j + 1,
                    ts + row + 1
                )));
            }
            for (tau, &v) in nu.iter().enumerate() {
                a[(row, tau)] = -v;
            }
            a[(row, ts + row)] = 1.0;
        }
        a_blocks.push(a);

        let mut b = DMatrix::zeros(k, kj);
        let mut seen = BTreeSet::new();
        for entry in &uw.agg_weights {
            if entry.k < 1 || entry.k > k {
                return Err(Error::validation(format!(
                    "unit {}: aggregation weight references coordinate {} outside 1..={k}",
                    j + 1,
                    entry.k
                )));
            }
            if entry.t <= ts {
                return Err(Error::validation(format!(
                    "unit {}: aggregation weight references pre-treatment period {} (t* = {ts})",
                    j + 1,
                    entry.t
                )));
            }
            if entry.t > t {
                return Err(Error::validation(format!(
                    "unit {}: aggregation weight references period {} beyond T={t}",
                    j + 1,
                    entry.t
                )));
            }
            if !seen.insert((entry.k, entry.t)) {
                return Err(Error::validation(format!(
                    "unit {}: duplicate aggregation weight for (k={}, t={})",
                    j + 1,
                    entry.k,
                    entry.t
                )));
            }
            b[(entry.k - 1, entry.t - ts - 1)] = entry.w;
        }
        b_blocks.push(b);
    }
    AggregationScheme::from_parts(
        SchemeKind::Generic,
        t,
        (0..n1).map(|j| panel.t_star(j)).collect(),
        a_blocks,
        b_blocks,
        labels,
    )
}

/// Check row-sum-zero and dimension conformance for every `B_j A_j`, and
/// that the stored degenerate sets match a recomputation. Returns one
/// message per violation.
pub fn verify_scheme(scheme: &AggregationScheme) -> Vec<String> {
    let mut out = Vec::new();
    for j in 0..scheme.n_treated() {
        let a = scheme.a_block(j);
        let b = scheme.b_block(j);
        if a.ncols() != scheme.t_periods() {
            out.push(format!("unit {}: A block has {} columns, expected {}", j + 1, a.ncols(), scheme.t_periods()));
        }
        if b.nrows() != scheme.k_target() || b.ncols() != a.nrows() {
            out.push(format!(
                "unit {}: B block is {}x{}, expected {}x{}",
                j + 1,
                b.nrows(),
                b.ncols(),
                scheme.k_target(),
                a.nrows()
            ));
        }
        let prod = scheme.product(j);
        for s in 0..scheme.k_target() {
            let row_sum: f64 = prod.row(s).iter().sum();
            if row_sum.abs() > ROW_SUM_TOL {
                out.push(format!(
                    "unit {}: row {} of B_j A_j sums to {row_sum:e}, expected 0",
                    j + 1,
                    s + 1
                ));
            }
        }
    }
    let (by_unit, global) = scheme.recompute_degenerate(DEGENERATE_TOL);
    if by_unit != scheme.degenerate_by_unit {
        out.push("degenerate set mismatch: per-unit sets are stale".into());
    }
    if global != scheme.degenerate_global {
        out.push("degenerate set mismatch: global set is stale".into());
    }
    out
}

/// A_j of the uniform-pre-average form: row r contrasts post period
/// `t*+1+r` with the mean of all pre periods.
fn post_vs_uniform_pre(t: usize, t_star: usize) -> DMatrix<f64> {
    let kj = t - t_star;
    let mut a = DMatrix::zeros(kj, t);
    for r in 0..kj {
        for tau in 0..t_star {
            a[(r, tau)] = -1.0 / t_star as f64;
        }
        a[(r, t_star + r)] = 1.0;
    }
    a
}
