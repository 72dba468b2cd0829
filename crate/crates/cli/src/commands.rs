//! The four subcommands: estimate, infer, simulate, coverage.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use fewtreat::confidence::uniform_band;
use fewtreat::estimator::{control_residuals, point_estimate};
use fewtreat::hetero::{fit, normalize, HeteroSpec};
use fewtreat::montecarlo::{coverage_experiment, simulate_panel, CoverageSpec};
use fewtreat::panel::{load_panel, write_panel, ColumnMap};
use fewtreat::resample::{draw, ResampleDraws};
use fewtreat::{ConfidenceBand, EstimateVector, Error, Result};

use crate::config::{OutputFormat, ResolvedConfig, RunPlan};

/// Write `content` to the given path, or stdout.
fn emit(output: Option<&Path>, content: &str) -> Result<()> {
    match output {
        Some(path) => {
            let mut file = std::fs::File::create(path)
                .map_err(|e| Error::validation(format!("cannot write {}: {e}", path.display())))?;
            file.write_all(content.as_bytes())?;
        }
        None => {
            print!("{content}");
            std::io::stdout().flush()?;
        }
    }
    Ok(())
}

fn meta_comment(config: &ResolvedConfig, extra: &[(&str, String)]) -> String {
    let mut line = format!(
        "# fewtreat {} seed={} config_fingerprint={}",
        config.subcommand,
        config.seed,
        config.fingerprint()
    );
    for (key, value) in extra {
        line.push_str(&format!(" {key}={value}"));
    }
    line.push('\n');
    line
}

fn estimate_csv(config: &ResolvedConfig, est: &EstimateVector) -> String {
    let mut out = meta_comment(config, &[("scheme_fingerprint", est.scheme_fingerprint.clone())]);
    out.push_str("label,value\n");
    for (label, value) in est.labels.iter().zip(&est.values) {
        out.push_str(&format!("{label},{value}\n"));
    }
    out
}

fn band_csv(config: &ResolvedConfig, band: &ConfidenceBand) -> String {
    let mut out = meta_comment(
        config,
        &[
            ("level", format!("{}", band.level)),
            ("critical_value", format!("{}", band.critical_value)),
            ("normalizer", band.normalizer_kind.to_string()),
        ],
    );
    out.push_str(&band.to_csv_string());
    out
}

fn draws_csv(config: &ResolvedConfig, labels: &[String], draws: &ResampleDraws) -> String {
    let mut out = meta_comment(
        config,
        &[
            ("scheme_fingerprint", draws.scheme_fingerprint.clone()),
            ("hetero_fingerprint", draws.hetero_fingerprint.clone()),
        ],
    );
    out.push_str(&labels.join(","));
    out.push('\n');
    for r in 0..draws.n_draws() {
        let row: Vec<String> =
            (0..draws.k_target()).map(|c| format!("{}", draws.draws[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn run_estimate(plan: &RunPlan) -> Result<()> {
    let config = &plan.config;
    let panel = load_panel(config.require_input()?, &ColumnMap::default())?;
    let scheme = config.scheme_choice()?.build(&panel)?;
    let est = point_estimate(&panel, &scheme)?;
    let content = match config.format {
        OutputFormat::Csv => estimate_csv(config, &est),
        OutputFormat::Json => {
            let doc = json!({
                "seed": config.seed,
                "config_fingerprint": config.fingerprint(),
                "config": config,
                "scheme_fingerprint": est.scheme_fingerprint,
                "estimates": est.labels.iter().zip(&est.values)
                    .map(|(l, v)| json!({"label": l, "value": v}))
                    .collect::<Vec<_>>(),
            });
            format!("{}\n", serde_json::to_string_pretty(&doc)?)
        }
    };
    emit(plan.output.as_deref(), &content)
}

pub fn run_infer(plan: &RunPlan, export_draws: Option<&Option<PathBuf>>) -> Result<()> {
    let config = &plan.config;
    let panel = load_panel(config.require_input()?, &ColumnMap::default())?;
    let scheme = config.scheme_choice()?.build(&panel)?;
    let est = point_estimate(&panel, &scheme)?;
    let res = control_residuals(&panel, &scheme)?;
    let fitted = fit(
        &HeteroSpec { kind: config.hetero, sv_floor: config.sv_floor },
        &res,
        &panel,
    )?;
    let norm = normalize(&res, &fitted, &panel)?;
    let draws = draw(&norm, &fitted, &panel, config.b, config.seed)?;
    let band = uniform_band(&est, &draws, config.alpha, config.normalizer)?;

    if let Some(maybe_path) = export_draws {
        let path = match maybe_path {
            Some(p) => p.clone(),
            None => derived_path(plan.output.as_deref(), "draws.csv")?,
        };
        let content = draws_csv(config, &band.labels, &draws);
        emit(Some(&path), &content)?;
    }

    let content = match config.format {
        OutputFormat::Csv => band_csv(config, &band),
        OutputFormat::Json => {
            let doc = json!({
                "seed": config.seed,
                "config_fingerprint": config.fingerprint(),
                "config": config,
                "scheme_fingerprint": est.scheme_fingerprint,
                "hetero_fingerprint": draws.hetero_fingerprint,
                "band": band,
            });
            format!("{}\n", serde_json::to_string_pretty(&doc)?)
        }
    };
    emit(plan.output.as_deref(), &content)
}

pub fn run_simulate(plan: &RunPlan) -> Result<()> {
    let config = &plan.config;
    let mut dgp = config.require_dgp()?.clone();
    dgp.seed = config.seed;
    let (panel, _) = simulate_panel(&dgp, 0)?;
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf)?;
    let csv = String::from_utf8(buf).expect("panel csv is utf-8");
    let content = format!("{}{}", meta_comment(config, &[]), csv);
    emit(plan.output.as_deref(), &content)
}

pub fn run_coverage(plan: &RunPlan) -> Result<()> {
    let config = &plan.config;
    let mut dgp = config.require_dgp()?.clone();
    dgp.seed = config.seed;
    let spec = CoverageSpec {
        scheme: config.scheme_choice()?,
        hetero: config.hetero,
        sv_floor: config.sv_floor,
        alpha: config.alpha,
        replications: config.replications,
        draws: config.b,
        normalizer: config.normalizer,
    };
    let report = coverage_experiment(&dgp, &spec)?;
    let doc = json!({
        "seed": config.seed,
        "config_fingerprint": config.fingerprint(),
        "config": config,
        "report": report,
    });
    emit(plan.output.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;

    // Per-replication records ride alongside the report.
    let records_path = derived_path(plan.output.as_deref(), "records.csv")?;
    emit(Some(&records_path), &report.records_csv_string())
}

/// `<output>.<suffix>`, or an error when writing to stdout.
fn derived_path(output: Option<&Path>, suffix: &str) -> Result<PathBuf> {
    let base = output.ok_or_else(|| {
        Error::validation(format!(
            "writing a companion .{suffix} file requires --output <path>"
        ))
    })?;
    let mut name = base.as_os_str().to_os_string();
    name.push(format!(".{suffix}"));
    Ok(PathBuf::from(name))
}
