//! Difference-in-differences estimation and inference when only a few
//! units are ever treated.
//!
//! With a small, fixed number of treated units the usual DID estimator is
//! unbiased but not consistent, and cluster-robust standard errors are
//! unreliable. This crate estimates flexible aggregated targets (overall
//! ATT, event studies, pre-trend checks) under staggered adoption and runs
//! inference by resampling control-unit residuals: the controls reveal the
//! error distribution the treated units are drawn from, optionally after a
//! parametric heteroskedasticity correction based on unit sizes. Scalar
//! confidence intervals and sup-t uniform confidence bands come from the
//! quantiles of the resampled errors.
//!
//! Pipeline: [`panel::load_panel`] -> scheme builders in [`design`] ->
//! [`estimator::point_estimate`] / [`estimator::control_residuals`] ->
//! [`hetero::fit`] / [`hetero::normalize`] -> [`resample::draw`] ->
//! [`confidence::uniform_band`]. The [`montecarlo`] module simulates panels
//! from the same error model and measures band coverage.

pub mod confidence;
pub mod design;
pub mod error;
pub mod estimator;
pub mod hetero;
pub mod linalg;
pub mod montecarlo;
pub mod panel;
pub mod resample;
pub mod rng;

pub use confidence::{ci_scalar, uniform_band, ConfidenceBand, NormalizerKind};
pub use design::{
    build_scheme_att, build_scheme_event_study, build_scheme_generic, build_scheme_pretrends,
    verify_scheme, AggregationScheme, GenericWeights, SchemeKind,
};
pub use error::{Error, Result};
pub use estimator::{control_residuals, point_estimate, ControlResiduals, EstimateVector};
pub use hetero::{
    fit, normalize, scale_matrix, FittedHetero, HeteroKind, HeteroSpec, NormalizedResiduals,
};
pub use montecarlo::{
    coverage_experiment, simulate_panel, true_target, CoverageReport, CoverageSpec, DgpConfig,
    SchemeChoice,
};
pub use panel::{load_panel, write_panel, ColumnMap, PanelData, Sizes, TreatTime};
pub use resample::{draw, empirical_cdf, exact_cdf, ResampleDraws};
