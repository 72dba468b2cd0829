//! Panel simulation and coverage experiments.
//!
//! Panels are generated as unit effect + period effect + error + treatment
//! effect on treated post cells. Errors decompose into a group shock with
//! covariance V0 plus the average of Z idiosyncratic shocks with covariance
//! V1, so Var[eta_i] = V0 + V1 / Z_i. Coverage experiments run the full
//! pipeline per replication and report how often the bands contain the
//! known truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::{uniform_band, ConfidenceBand, NormalizerKind};
use crate::design::{
    build_scheme_att, build_scheme_event_study, build_scheme_generic, build_scheme_pretrends,
    AggregationScheme, GenericWeights, SchemeKind,
};
use crate::error::{Error, Result};
use crate::estimator::{control_residuals, point_estimate};
use crate::hetero::{fit, normalize, HeteroKind, HeteroSpec};
use crate::linalg::{min_eigenvalue, serde_mat, sqrt_psd};
use crate::panel::{PanelData, Sizes, TreatTime};
use crate::resample::draw;
use crate::rng::{derive_seed, substream, DOMAIN_RESAMPLE, DOMAIN_SIMULATE, DOMAIN_SIZES};

/// Rule for the unit and period effects, redrawn each replication. They
/// must cancel exactly in the estimator, so randomizing them exercises that
/// cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffectsRule {
    Zero,
    Normal { sd: f64 },
}

/// Rule for unit sizes: absent, fixed per unit, or treated units at a fixed
/// size with controls drawn uniformly from an integer range per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRule {
    None,
    Fixed(Vec<f64>),
    UniformInt { treated: u64, lo: u64, hi: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockFamily {
    Normal,
    /// Student t rescaled to unit variance; requires df > 2.
    ScaledT { df: f64 },
}

/// Complete description of a simulated data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_treated: usize,
    pub n_control: usize,
    pub t_periods: usize,
    /// Last pre-treatment period per treated unit.
    pub treat_times: Vec<usize>,
    /// True treatment effects per treated unit and period; zero on
    /// pre-treatment cells.
    pub effects: Vec<Vec<f64>>,
    pub fixed_effects: FixedEffectsRule,
    /// Group-shock covariance V0 (T x T, PSD).
    #[serde(with = "serde_mat")]
    pub group_cov: DMatrix<f64>,
    /// Idiosyncratic covariance V1 (T x T, PSD); scaled by 1/Z per unit.
    #[serde(with = "serde_mat")]
    pub idio_cov: DMatrix<f64>,
    pub sizes: SizeRule,
    pub shocks: ShockFamily,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.t_periods;
        if self.n_treated == 0 {
            return Err(Error::validation("need at least one treated unit"));
        }
        if self.n_control < 2 {
            return Err(Error::validation("need at least two control units"));
        }
        if self.treat_times.len() != self.n_treated {
            return Err(Error::validation("one treat time required per treated unit"));
        }
        for &ts in &self.treat_times {
            if ts < 1 || ts >= t {
                return Err(Error::validation(format!(
                    "treat time {ts} out of range 1..={}",
                    t - 1
                )));
            }
        }
        if self.effects.len() != self.n_treated {
            return Err(Error::validation("one effects vector required per treated unit"));
        }
        for (j, eff) in self.effects.iter().enumerate() {
            if eff.len() != t {
                return Err(Error::validation(format!(
                    "effects vector {} has length {}, expected {t}",
                    j + 1,
                    eff.len()
                )));
            }
            for (p, &v) in eff.iter().enumerate() {
                if p < self.treat_times[j] && v != 0.0 {
                    return Err(Error::validation(format!(
                        "unit {}: effect at pre-treatment period {} must be zero",
                        j + 1,
                        p + 1
                    )));
                }
            }
        }
        for (name, m) in [("group", &self.group_cov), ("idiosyncratic", &self.idio_cov)] {
            if m.nrows() != t || m.ncols() != t {
                return Err(Error::validation(format!("{name} covariance must be {t}x{t}")));
            }
            if min_eigenvalue(m) < -1e-10 {
                return Err(Error::validation(format!(
                    "{name} covariance is not positive semidefinite"
                )));
            }
        }
        match &self.sizes {
            SizeRule::None => {}
            SizeRule::Fixed(z) => {
                if z.len() != self.n_treated + self.n_control {
                    return Err(Error::validation("fixed sizes must cover every unit"));
                }
                if z.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::validation("sizes must be positive"));
                }
            }
            SizeRule::UniformInt { treated, lo, hi } => {
                if *treated == 0 || *lo == 0 || lo > hi {
                    return Err(Error::validation("size range must satisfy 0 < lo <= hi"));
                }
            }
        }
        if let ShockFamily::ScaledT { df } = self.shocks {
            if !(df > 2.0) {
                return Err(Error::validation("scaled-t shocks require df > 2"));
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.n_treated + self.n_control
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// The fixed effects array backing a simulated panel; the target for any
/// scheme follows from it via [`true_target`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub effects: Vec<Vec<f64>>,
}

/// True target value under a scheme: sum over treated units of
/// `B_j A_j alpha_j` with `alpha_j` zero on pre-treatment cells.
pub fn true_target(scheme: &AggregationScheme, truth: &TruthRecord) -> Vec<f64> {
    let k = scheme.k_target();
    let mut out = DVector::zeros(k);
    for (j, eff) in truth.effects.iter().enumerate() {
        let alpha = DVector::from_column_slice(eff);
        out += scheme.b_block(j) * (scheme.a_block(j) * alpha);
    }
    let mut out: Vec<f64> = out.iter().copied().collect();
    for &s in scheme.degenerate_global() {
        out[s] = 0.0;
    }
    out
}

fn sample_standardized(rng: &mut ChaCha8Rng, family: ShockFamily) -> f64 {
    match family {
        ShockFamily::Normal => StandardNormal.sample(rng),
        ShockFamily::ScaledT { df } => {
            let t: f64 = StudentT::new(df).expect("validated df").sample(rng);
            t * ((df - 2.0) / df).sqrt()
        }
    }
}

fn shock_vector(
    rng: &mut ChaCha8Rng,
    factor: &DMatrix<f64>,
    family: ShockFamily,
) -> DVector<f64> {
    let t = factor.nrows();
    let xi = DVector::from_fn(t, |_, _| sample_standardized(rng, family));
    factor * xi
}

fn draw_sizes(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    match &config.sizes {
        SizeRule::None => None,
        SizeRule::Fixed(z) => Some(z.clone()),
        SizeRule::UniformInt { treated, lo, hi } => {
            let mut z = Vec::with_capacity(config.n_units());
            for _ in 0..config.n_treated {
                z.push(*treated as f64);
            }
            for _ in 0..config.n_control {
                z.push(rng.random_range(*lo..=*hi) as f64);
            }
            Some(z)
        }
    }
}

/// Simulate one panel. Deterministic in `(config.seed, rep_seed)`.
pub fn simulate_panel(config: &DgpConfig, rep_seed: u64) -> Result<(PanelData, TruthRecord)> {
    config.validate()?;
    let t = config.t_periods;
    let n = config.n_units();
    let group_factor = sqrt_psd(&config.group_cov);
    let idio_factor = sqrt_psd(&config.idio_cov);

    let mut size_rng = substream(derive_seed(config.seed, DOMAIN_SIZES, rep_seed), 0);
    let sizes = draw_sizes(config, &mut size_rng);

    let mut rng = substream(derive_seed(config.seed, DOMAIN_SIMULATE, rep_seed), 0);
    let (theta, gamma) = match config.fixed_effects {
        FixedEffectsRule::Zero => (vec![0.0; n], vec![0.0; t]),
        FixedEffectsRule::Normal { sd } => {
            let theta: Vec<f64> =
                (0..n).map(|_| sd * sample_standardized(&mut rng, ShockFamily::Normal)).collect();
            let gamma: Vec<f64> =
                (0..t).map(|_| sd * sample_standardized(&mut rng, ShockFamily::Normal)).collect();
            (theta, gamma)
        }
    };

    let mut outcomes = DMatrix::zeros(n, t);
    for j in 0..n {
        let z = sizes.as_ref().map_or(1.0, |s| s[j]);
        let group = shock_vector(&mut rng, &group_factor, config.shocks);
        // Idiosyncratic part: a single draw scaled by 1/sqrt(Z) for normal
        // shocks (distributionally identical to averaging Z draws); the
        // literal average of Z draws otherwise.
        let idio = match config.shocks {
            ShockFamily::Normal => {
                shock_vector(&mut rng, &idio_factor, config.shocks) / z.sqrt()
            }
            ShockFamily::ScaledT { .. } => {
                let reps = z.round().max(1.0) as usize;
                let mut acc = DVector::zeros(t);
                for _ in 0..reps {
                    acc += shock_vector(&mut rng, &idio_factor, config.shocks);
                }
                acc / reps as f64
            }
        };
        for p in 0..t {
            let mut y = theta[j] + gamma[p] + group[p] + idio[p];
            if j < config.n_treated && p + 1 > config.treat_times[j] {
                y += config.effects[j][p];
            }
            outcomes[(j, p)] = y;
        }
    }

    let mut treat_time: Vec<TreatTime> =
        config.treat_times.iter().map(|&ts| TreatTime::Treated(ts)).collect();
    treat_time.extend(std::iter::repeat_n(TreatTime::Never, config.n_control));
    let panel = PanelData::from_parts(
        outcomes,
        treat_time,
        sizes.map(Sizes::PerUnit),
        None,
        None,
    )?;
    Ok((panel, TruthRecord { effects: config.effects.clone() }))
}

/// Scheme selection for pipeline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Att,
    EventStudy,
    Pretrends,
    Generic(GenericWeights),
}

impl SchemeChoice {
    pub fn build(&self, panel: &PanelData) -> Result<AggregationScheme> {
        match self {
            SchemeChoice::Att => build_scheme_att(panel),
            SchemeChoice::EventStudy => build_scheme_event_study(panel),
            SchemeChoice::Pretrends => build_scheme_pretrends(panel),
            SchemeChoice::Generic(w) => build_scheme_generic(panel, w),
        }
    }

    pub fn kind(&self) -> SchemeKind {
        match self {
            SchemeChoice::Att => SchemeKind::Att,
            SchemeChoice::EventStudy => SchemeKind::EventStudy,
            SchemeChoice::Pretrends => SchemeKind::Pretrends,
            SchemeChoice::Generic(_) => SchemeKind::Generic,
        }
    }
}

/// Inference settings for a coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSpec {
    pub scheme: SchemeChoice,
    pub hetero: HeteroKind,
    pub sv_floor: Option<f64>,
    pub alpha: f64,
    pub replications: usize,
    pub draws: usize,
    pub normalizer: NormalizerKind,
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub contained: Vec<bool>,
    pub simultaneous: bool,
    pub estimate: Vec<f64>,
    pub width: Vec<f64>,
}

/// Aggregated coverage results. Fully reproducible from the embedded config
/// and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub replications: usize,
    pub alpha: f64,
    pub scheme: SchemeKind,
    pub hetero: HeteroKind,
    pub normalizer: NormalizerKind,
    pub b_draws: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub truth: Vec<f64>,
    pub per_coordinate_coverage: Vec<f64>,
    pub simultaneous_coverage: f64,
    pub per_coordinate_mc_se: Vec<f64>,
    pub simultaneous_mc_se: f64,
    pub mean_estimate: Vec<f64>,
    pub sd_estimate: Vec<f64>,
    pub mean_width: Vec<f64>,
    pub config: DgpConfig,
    pub config_fingerprint: String,
    #[serde(skip, default)]
    pub records: Vec<RepRecord>,
}

impl CoverageReport {
    /// Per-replication records as CSV.
    pub fn records_csv_string(&self) -> String {
        let mut out = String::from("rep,simultaneous");
        for label in &self.labels {
            out.push_str(&format!(",contained_{label},estimate_{label},width_{label}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{}", r.rep, r.simultaneous as u8));
            for s in 0..self.labels.len() {
                out.push_str(&format!(
                    ",{},{},{}",
                    r.contained[s] as u8, r.estimate[s], r.width[s]
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the band for one simulated panel; shared by the coverage loop and
/// callers needing a single replication.
pub fn run_replication(
    config: &DgpConfig,
    spec: &CoverageSpec,
    rep: usize,
) -> Result<(ConfidenceBand, Vec<f64>)> {
    let (panel, truth) = simulate_panel(config, rep as u64)?;
    let scheme = spec.scheme.build(&panel)?;
    let target = true_target(&scheme, &truth);
    let est = point_estimate(&panel, &scheme)?;
    let res = control_residuals(&panel, &scheme)?;
    let fitted = fit(&HeteroSpec { kind: spec.hetero, sv_floor: spec.sv_floor }, &res, &panel)?;
    let norm = normalize(&res, &fitted, &panel)?;
    let draws = draw(
        &norm,
        &fitted,
        &panel,
        spec.draws,
        derive_seed(config.seed, DOMAIN_RESAMPLE, rep as u64),
    )?;
    let band = uniform_band(&est, &draws, spec.alpha, spec.normalizer)?;
    Ok((band, target))
}

/// Simulate, estimate, resample, and build a band `replications` times;
/// aggregate per-coordinate and simultaneous coverage of the known truth.
pub fn coverage_experiment(config: &DgpConfig, spec: &CoverageSpec) -> Result<CoverageReport> {
    config.validate()?;
    if spec.replications < 100 {
        return Err(Error::validation("coverage experiments need at least 100 replications"));
    }
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::validation("alpha must be in (0, 1)"));
    }

    let results: Vec<Result<(ConfidenceBand, Vec<f64>, usize)>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| {
            run_replication(config, spec, rep)
                .map(|(band, target)| (band, target, rep))
                .map_err(|e| Error::validation(format!("replication {rep}: {e}")))
        })
        .collect();

    let mut records = Vec::with_capacity(spec.replications);
    let mut labels: Vec<String> = Vec::new();
    let mut truth: Vec<f64> = Vec::new();
    for result in results {
        let (band, target, rep) = result?;
        if labels.is_empty() {
            labels = band.labels.clone();
            truth = target.clone();
        }
        let k = band.labels.len();
        let contained: Vec<bool> = (0..k)
            .map(|s| band.lower[s] <= target[s] && target[s] <= band.upper[s])
            .collect();
        let simultaneous = contained.iter().all(|&c| c);
        let width: Vec<f64> = (0..k).map(|s| band.upper[s] - band.lower[s]).collect();
        records.push(RepRecord { rep, contained, simultaneous, estimate: band.estimate, width });
    }

    // Fixed-order reduction keeps reports bit-reproducible.
    let r = spec.replications as f64;
    let k = labels.len();
    let mut per_coord = vec![0.0; k];
    let mut mean_estimate = vec![0.0; k];
    let mut mean_width = vec![0.0; k];
    let mut simultaneous = 0.0;
    for rec in &records {
        for s in 0..k {
            per_coord[s] += rec.contained[s] as u8 as f64;
            mean_estimate[s] += rec.estimate[s];
            mean_width[s] += rec.width[s];
        }
        simultaneous += rec.simultaneous as u8 as f64;
    }
    for s in 0..k {
        per_coord[s] /= r;
        mean_estimate[s] /= r;
        mean_width[s] /= r;
    }
    simultaneous /= r;
    let mut sd_estimate = vec![0.0; k];
    for rec in &records {
        for s in 0..k {
            sd_estimate[s] += (rec.estimate[s] - mean_estimate[s]).powi(2);
        }
    }
    for s in 0..k {
        sd_estimate[s] = (sd_estimate[s] / r).sqrt();
    }
    let mc_se = |p: f64| (p * (1.0 - p) / r).sqrt();

    Ok(CoverageReport {
        replications: spec.replications,
        alpha: spec.alpha,
        scheme: spec.scheme.kind(),
        hetero: spec.hetero,
        normalizer: spec.normalizer,
        b_draws: spec.draws,
        seed: config.seed,
        labels,
        truth,
        per_coordinate_mc_se: per_coord.iter().map(|&p| mc_se(p)).collect(),
        simultaneous_mc_se: mc_se(simultaneous),
        per_coordinate_coverage: per_coord,
        simultaneous_coverage: simultaneous,
        mean_estimate,
        sd_estimate,
        mean_width,
        config: config.clone(),
        config_fingerprint: config.fingerprint(),
        records,
    })
}
