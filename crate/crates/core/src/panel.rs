//! Balanced outcome panels with staggered absorbing treatment.
//!
//! A panel holds an N x T outcome matrix, per-unit treatment timing
//! (`t*`, the last pre-treatment period), and optional unit sizes used by
//! the heteroskedasticity models. Units are normalized to treated-first
//! order and periods to 1..T at load; original labels are kept for
//! reporting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_mat;

/// Treatment timing of one unit: `Treated(t_star)` with `t_star` the last
/// pre-treatment period (1-based, so post periods are `t_star+1..=T`), or
/// `Never` for controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreatTime {
    Treated(usize),
    Never,
}

/// Unit sizes entering the variance models: one value per unit (outcomes
/// aggregate `Z_j` individuals observed in every period) or one value per
/// unit and period (repeated cross-sections).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sizes {
    PerUnit(Vec<f64>),
    #[serde(with = "serde_mat")]
    PerUnitPeriod(DMatrix<f64>),
}

/// Balanced N x T panel, immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    #[serde(with = "serde_mat")]
    outcomes: DMatrix<f64>,
    treat_time: Vec<TreatTime>,
    n_treated: usize,
    n_control: usize,
    sizes: Option<Sizes>,
    unit_labels: Vec<String>,
    period_labels: Vec<String>,
}

impl PanelData {
    /// Build a panel from raw parts. Units may arrive in any order; they are
    /// normalized to treated-first. Errors if any invariant is violated.
    pub fn from_parts(
        outcomes: DMatrix<f64>,
        treat_time: Vec<TreatTime>,
        sizes: Option<Sizes>,
        unit_labels: Option<Vec<String>>,
        period_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = outcomes.nrows();
        let t = outcomes.ncols();
        let unit_labels =
            unit_labels.unwrap_or_else(|| (1..=n).map(|i| i.to_string()).collect());
        let period_labels =
            period_labels.unwrap_or_else(|| (1..=t).map(|i| i.to_string()).collect());
        if unit_labels.len() != n || period_labels.len() != t {
            return Err(Error::validation("label lengths do not match panel dimensions"));
        }

        // Stable treated-first reordering.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&j| matches!(treat_time.get(j), Some(TreatTime::Never) | None));

        let outcomes = reorder_rows(&outcomes, &order);
        let treat_time: Vec<TreatTime> = order.iter().map(|&j| treat_time[j]).collect();
        let unit_labels: Vec<String> = order.iter().map(|&j| unit_labels[j].clone()).collect();
        let sizes = sizes.map(|s| match s {
            Sizes::PerUnit(v) => Sizes::PerUnit(order.iter().map(|&j| v[j]).collect()),
            Sizes::PerUnitPeriod(m) => Sizes::PerUnitPeriod(reorder_rows(&m, &order)),
        });

        let n_treated =
            treat_time.iter().take_while(|tt| matches!(tt, TreatTime::Treated(_))).count();
        let n_control = n - n_treated;

        let panel = PanelData {
            outcomes,
            treat_time,
            n_treated,
            n_control,
            sizes,
            unit_labels,
            period_labels,
        };
        let violations = panel.validate();
        if !violations.is_empty() {
            return Err(Error::validation(format!("invalid panel: {}", violations.join("; "))));
        }
        Ok(panel)
    }

    /// Re-check every invariant; returns one message per violation, empty
    /// when the panel is valid. Pure: nothing is mutated or thrown.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.outcomes.nrows();
        let t = self.outcomes.ncols();
        if n == 0 || t < 2 {
            out.push(format!("panel must have at least 1 unit and 2 periods, got {n}x{t}"));
        }
        if self.treat_time.len() != n {
            out.push("treat_time length does not match unit count".into());
        }
        if self.n_treated + self.n_control != n {
            out.push("treated + control counts do not sum to N".into());
        }
        if self.n_treated == 0 {
            out.push("no treated units".into());
        }
        if self.n_control < 2 {
            out.push(format!("need at least 2 never-treated controls, got {}", self.n_control));
        }
        for (j, tt) in self.treat_time.iter().enumerate() {
            match tt {
                TreatTime::Treated(ts) => {
                    if j >= self.n_treated {
                        out.push(format!("treated unit {} after control block", j + 1));
                    }
                    if *ts < 1 || *ts + 1 > t {
                        out.push(format!(
                            "unit {}: treat time {} out of range 1..={} (needs a post period)",
                            j + 1,
                            ts,
                            t.saturating_sub(1)
                        ));
                    }
                }
                TreatTime::Never => {
                    if j < self.n_treated {
                        out.push(format!("never-treated unit {} inside treated block", j + 1));
                    }
                }
            }
        }
        if self.outcomes.iter().any(|v| !v.is_finite()) {
            out.push("outcomes contain non-finite values".into());
        }
        match &self.sizes {
            Some(Sizes::PerUnit(z)) => {
                if z.len() != n {
                    out.push("per-unit sizes length does not match unit count".into());
                }
                if z.iter().any(|&v| !(v > 0.0)) {
                    out.push("nonpositive size".into());
                }
            }
            Some(Sizes::PerUnitPeriod(z)) => {
                if z.nrows() != n || z.ncols() != t {
                    out.push("per-period sizes shape does not match panel".into());
                }
                if z.iter().any(|&v| !(v > 0.0)) {
                    out.push("nonpositive size".into());
                }
            }
            None => {}
        }
        if self.unit_labels.len() != n || self.period_labels.len() != t {
            out.push("label lengths do not match panel dimensions".into());
        }
        out
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn treat_times(&self) -> &[TreatTime] {
        &self.treat_time
    }

    /// Last pre-treatment period of treated unit `j` (0-based, `j < N1`).
    pub fn t_star(&self, j: usize) -> usize {
        match self.treat_time[j] {
            TreatTime::Treated(ts) => ts,
            TreatTime::Never => unreachable!("t_star queried for a control unit"),
        }
    }

    /// 0-based indices of the never-treated units.
    pub fn control_indices(&self) -> std::ops::Range<usize> {
        self.n_treated..self.n_units()
    }

    pub fn sizes(&self) -> Option<&Sizes> {
        self.sizes.as_ref()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    /// Add `theta[j]` to every period of unit j and `gamma[t]` to every unit
    /// at period t. Used by shift-invariance checks and the simulator.
    pub fn with_effects_added(&self, theta: &[f64], gamma: &[f64]) -> Result<Self> {
        if theta.len() != self.n_units() || gamma.len() != self.n_periods() {
            return Err(Error::validation("shift vectors do not match panel dimensions"));
        }
        let mut outcomes = self.outcomes.clone();
        for j in 0..self.n_units() {
            for t in 0..self.n_periods() {
                outcomes[(j, t)] += theta[j] + gamma[t];
            }
        }
        Ok(PanelData { outcomes, ..self.clone() })
    }
}

fn reorder_rows(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(order[r], c)])
}

/// Column names used when reading or writing panel CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub treat_time: String,
    /// Size column; used only when present in the header.
    pub size: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            treat_time: "treat_time".into(),
            size: "size".into(),
        }
    }
}

/// Load a balanced panel from a CSV file with a header row.
///
/// Expected columns (names configurable through `map`): unit, period,
/// outcome, treat_time, and optionally size. `treat_time` holds the label
/// of the unit's last pre-treatment period, or `never`/empty for controls.
/// Lines starting with `#` are ignored.
pub fn load_panel(path: impl AsRef<Path>, map: &ColumnMap) -> Result<PanelData> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::validation(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    read_panel(file, map)
}

/// Same as [`load_panel`] but from any reader.
pub fn read_panel<R: Read>(reader: R, map: &ColumnMap) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let unit_col = col(&map.unit)
        .ok_or_else(|| Error::validation(format!("missing required column `{}`", map.unit)))?;
    let period_col = col(&map.period)
        .ok_or_else(|| Error::validation(format!("missing required column `{}`", map.period)))?;
    let outcome_col = col(&map.outcome)
        .ok_or_else(|| Error::validation(format!("missing required column `{}`", map.outcome)))?;
    let treat_col = col(&map.treat_time).ok_or_else(|| {
        Error::validation(format!("missing required column `{}`", map.treat_time))
    })?;
    let size_col = col(&map.size);

    struct Row {
        unit: String,
        period: String,
        outcome: f64,
        treat: String,
        size: Option<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let outcome_raw = get(outcome_col);
        let outcome: f64 = outcome_raw.parse().map_err(|_| {
            Error::validation(format!("row {}: cannot parse outcome `{outcome_raw}`", line + 2))
        })?;
        let size = match size_col {
            Some(c) => {
                let raw = get(c);
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse::<f64>().map_err(|_| {
                        Error::validation(format!("row {}: cannot parse size `{raw}`", line + 2))
                    })?)
                }
            }
            None => None,
        };
        rows.push(Row { unit: get(unit_col), period: get(period_col), outcome, treat: get(treat_col), size });
    }
    if rows.is_empty() {
        return Err(Error::validation("panel file contains no data rows"));
    }

    // Distinct periods in natural order (numeric when every label parses).
    let mut period_labels: Vec<String> = Vec::new();
    for r in &rows {
        if !period_labels.contains(&r.period) {
            period_labels.push(r.period.clone());
        }
    }
    sort_labels(&mut period_labels);
    let period_idx: BTreeMap<&str, usize> =
        period_labels.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let t = period_labels.len();

    // Units in order of first appearance.
    let mut unit_labels: Vec<String> = Vec::new();
    for r in &rows {
        if !unit_labels.contains(&r.unit) {
            unit_labels.push(r.unit.clone());
        }
    }
    let unit_idx: BTreeMap<&str, usize> =
        unit_labels.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let n = unit_labels.len();

    // Balance check: exactly one row per (unit, period).
    let mut seen = vec![false; n * t];
    let mut outcomes = DMatrix::<f64>::zeros(n, t);
    let mut sizes_cells: Vec<Option<f64>> = vec![None; n * t];
    let mut treat_raw: Vec<Option<String>> = vec![None; n];
    for r in &rows {
        let j = unit_idx[r.unit.as_str()];
        let p = period_idx[r.period.as_str()];
        if seen[j * t + p] {
            return Err(Error::validation(format!(
                "duplicate row for (unit {}, period {})",
                r.unit, r.period
            )));
        }
        seen[j * t + p] = true;
        outcomes[(j, p)] = r.outcome;
        sizes_cells[j * t + p] = r.size;
        match &treat_raw[j] {
            None => treat_raw[j] = Some(r.treat.clone()),
            Some(prev) if prev != &r.treat => {
                return Err(Error::validation(format!(
                    "unit {}: treat_time changes across rows (`{}` vs `{}`); treatment must be absorbing",
                    r.unit, prev, r.treat
                )));
            }
            _ => {}
        }
    }
    let missing: Vec<String> = (0..n * t)
        .filter(|&k| !seen[k])
        .map(|k| format!("({}, {})", unit_labels[k / t], period_labels[k % t]))
        .collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(8).cloned().collect::<Vec<_>>().join(", ");
        let more = if missing.len() > 8 { format!(" and {} more", missing.len() - 8) } else { String::new() };
        return Err(Error::validation(format!(
            "unbalanced panel: missing (unit, period) pairs {shown}{more}"
        )));
    }

    // Map treat labels to t* indices.
    let mut treat_time = Vec::with_capacity(n);
    for (j, raw) in treat_raw.iter().enumerate() {
        let raw = raw.as_deref().unwrap_or("");
        if raw.is_empty() || raw.eq_ignore_ascii_case("never") {
            treat_time.push(TreatTime::Never);
        } else {
            let p = period_idx.get(raw).copied().ok_or_else(|| {
                Error::validation(format!(
                    "unit {}: treat_time `{raw}` is not a period label",
                    unit_labels[j]
                ))
            })?;
            if p + 1 == t {
                return Err(Error::validation(format!(
                    "unit {}: treat_time `{raw}` is the last period; no post-treatment period exists",
                    unit_labels[j]
                )));
            }
            treat_time.push(TreatTime::Treated(p + 1));
        }
    }

    // Sizes: all-or-nothing, collapsed to per-unit when constant over periods.
    let any_size = sizes_cells.iter().any(|s| s.is_some());
    let sizes = if any_size {
        if sizes_cells.iter().any(|s| s.is_none()) {
            return Err(Error::validation("size column is present but some cells are empty"));
        }
        let z = DMatrix::from_fn(n, t, |j, p| sizes_cells[j * t + p].unwrap());
        let per_unit = (0..n).all(|j| (1..t).all(|p| z[(j, p)] == z[(j, 0)]));
        Some(if per_unit {
            Sizes::PerUnit((0..n).map(|j| z[(j, 0)]).collect())
        } else {
            Sizes::PerUnitPeriod(z)
        })
    } else {
        None
    };

    PanelData::from_parts(outcomes, treat_time, sizes, Some(unit_labels), Some(period_labels))
}

/// Write a panel as CSV in the format accepted by [`load_panel`].
pub fn write_panel<W: Write>(panel: &PanelData, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let has_sizes = panel.sizes().is_some();
    let mut header = vec!["unit", "period", "outcome", "treat_time"];
    if has_sizes {
        header.push("size");
    }
    wtr.write_record(&header)?;
    for j in 0..panel.n_units() {
        let treat_label = match panel.treat_time[j] {
            TreatTime::Treated(ts) => panel.period_labels[ts - 1].clone(),
            TreatTime::Never => "never".to_string(),
        };
        for t in 0..panel.n_periods() {
            let mut rec = vec![
                panel.unit_labels[j].clone(),
                panel.period_labels[t].clone(),
                format!("{}", panel.outcomes[(j, t)]),
                treat_label.clone(),
            ];
            if let Some(sizes) = panel.sizes() {
                let z = match sizes {
                    Sizes::PerUnit(v) => v[j],
                    Sizes::PerUnitPeriod(m) => m[(j, t)],
                };
                rec.push(format!("{z}"));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn sort_labels(labels: &mut [String]) {
    let all_int = labels.iter().all(|l| l.parse::<i64>().is_ok());
    if all_int {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
        return;
    }
    let all_float = labels.iter().all(|l| l.parse::<f64>().is_ok());
    if all_float {
        labels.sort_by(|a, b| {
            a.parse::<f64>().unwrap().partial_cmp(&b.parse::<f64>().unwrap()).unwrap()
        });
        return;
    }
    labels.sort();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_bytes(s: &str) -> std::io::Cursor<Vec<u8>> {
        std::io::Cursor::new(s.as_bytes().to_vec())
    }

    #[test]
    fn loads_minimal_valid_panel() {
        let data = "\
unit,period,outcome,treat_time
A,1,1.0,1
A,2,4.0,1
B,1,0.0,never
B,2,1.0,never
C,1,2.0,
C,2,3.0,
";
        let panel = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap();
        assert_eq!(panel.n_treated(), 1);
        assert_eq!(panel.n_control(), 2);
        assert_eq!(panel.n_periods(), 2);
        assert_eq!(panel.t_star(0), 1);
        assert!(panel.validate().is_empty());
        assert_eq!(panel.outcomes()[(0, 1)], 4.0);
    }

    #[test]
    fn missing_cell_reports_unbalanced_pair() {
        let data = "\
unit,period,outcome,treat_time
A,1,1.0,1
A,2,4.0,1
B,1,0.0,never
C,1,2.0,never
C,2,3.0,never
";
        let err = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unbalanced"), "{msg}");
        assert!(msg.contains("(B, 2)"), "{msg}");
    }

    #[test]
    fn treat_time_at_last_period_is_rejected() {
        let data = "\
unit,period,outcome,treat_time
A,1,1.0,2
A,2,4.0,2
B,1,0.0,never
B,2,1.0,never
C,1,2.0,never
C,2,3.0,never
";
        let err = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("no post-treatment period"), "{err}");
    }

    #[test]
    fn non_absorbing_treat_time_is_rejected() {
        let data = "\
unit,period,outcome,treat_time
A,1,1.0,1
A,2,4.0,never
B,1,0.0,never
B,2,1.0,never
C,1,2.0,never
C,2,3.0,never
";
        let err = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("absorbing"), "{err}");
    }

    #[test]
    fn no_control_units_is_rejected() {
        let data = "\
unit,period,outcome,treat_time
A,1,1.0,1
A,2,4.0,1
B,1,0.0,1
B,2,1.0,1
";
        let err = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("never-treated"), "{err}");
    }

    #[test]
    fn validate_flags_nonpositive_sizes_and_missing_controls() {
        let outcomes = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 2.0, 3.0]);
        let violations = PanelData {
            outcomes: outcomes.clone(),
            treat_time: vec![TreatTime::Treated(1), TreatTime::Never, TreatTime::Never],
            n_treated: 1,
            n_control: 2,
            sizes: Some(Sizes::PerUnit(vec![1.0, 0.0, 2.0])),
            unit_labels: vec!["a".into(), "b".into(), "c".into()],
            period_labels: vec!["1".into(), "2".into()],
        }
        .validate();
        assert_eq!(violations, vec!["nonpositive size".to_string()]);

        let violations = PanelData {
            outcomes,
            treat_time: vec![TreatTime::Treated(1); 3],
            n_treated: 3,
            n_control: 0,
            sizes: None,
            unit_labels: vec!["a".into(), "b".into(), "c".into()],
            period_labels: vec!["1".into(), "2".into()],
        }
        .validate();
        assert!(violations.iter().any(|v| v.contains("never-treated")), "{violations:?}");
    }

    #[test]
    fn from_parts_reorders_units_treated_first() {
        let outcomes = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 4.0, 2.0, 3.0]);
        let panel = PanelData::from_parts(
            outcomes,
            vec![TreatTime::Never, TreatTime::Treated(1), TreatTime::Never],
            None,
            Some(vec!["B".into(), "A".into(), "C".into()]),
            None,
        )
        .unwrap();
        assert_eq!(panel.unit_labels(), &["A", "B", "C"]);
        assert_eq!(panel.outcomes()[(0, 1)], 4.0);
        assert_eq!(panel.treat_times()[0], TreatTime::Treated(1));
    }

    #[test]
    fn write_then_load_round_trips() {
        let data = "\
unit,period,outcome,treat_time,size
A,2001,1.5,2001,10
A,2002,4.25,2001,10
B,2001,0.125,never,20
B,2002,1.0,never,20
C,2001,2.0,never,30
C,2002,3.0,never,30
";
        let panel = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap();
        let mut buf = Vec::new();
        write_panel(&panel, &mut buf).unwrap();
        let reloaded = read_panel(std::io::Cursor::new(buf), &ColumnMap::default()).unwrap();
        assert_eq!(panel, reloaded);
        assert!(reloaded.validate().is_empty());
    }

    #[test]
    fn per_period_sizes_are_detected() {
        let data = "\
unit,period,outcome,treat_time,size
A,1,1.0,1,10
A,2,4.0,1,12
B,1,0.0,never,20
B,2,1.0,never,21
C,1,2.0,never,30
C,2,3.0,never,31
";
        let panel = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap();
        match panel.sizes().unwrap() {
            Sizes::PerUnitPeriod(m) => assert_eq!(m[(0, 1)], 12.0),
            other => panic!("expected per-period sizes, got {other:?}"),
        }
    }

    #[test]
    fn numeric_period_labels_sort_numerically() {
        let data = "\
unit,period,outcome,treat_time
A,10,2.0,2
A,2,1.0,2
B,10,1.0,never
B,2,0.0,never
C,2,0.0,never
C,10,1.0,never
";
        let panel = read_panel(csv_bytes(data), &ColumnMap::default()).unwrap();
        assert_eq!(panel.period_labels(), &["2", "10"]);
        assert_eq!(panel.t_star(0), 1);
    }
}
