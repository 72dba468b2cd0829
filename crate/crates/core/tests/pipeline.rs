//! Cross-module pipeline tests: file round trips, serialized exports, and
//! whole-pipeline algebraic properties.

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;

use fewtreat::confidence::{uniform_band, NormalizerKind};
use fewtreat::design::{build_scheme_att, build_scheme_event_study, AggregationScheme};
use fewtreat::estimator::{control_residuals, point_estimate};
use fewtreat::hetero::{fit, normalize, HeteroKind, HeteroSpec};
use fewtreat::montecarlo::{
    simulate_panel, DgpConfig, FixedEffectsRule, ShockFamily, SizeRule,
};
use fewtreat::panel::{load_panel, write_panel, ColumnMap, PanelData};
use fewtreat::resample::draw;

fn sized_config(seed: u64) -> DgpConfig {
    let t = 6;
    DgpConfig {
        n_treated: 2,
        n_control: 30,
        t_periods: t,
        treat_times: vec![2, 3],
        effects: vec![
            vec![0.0, 0.0, 1.0, 1.0, 1.5, 1.5],
            vec![0.0, 0.0, 0.0, 0.5, 0.5, 1.0],
        ],
        fixed_effects: FixedEffectsRule::Normal { sd: 1.0 },
        group_cov: DMatrix::identity(t, t) * 0.2,
        idio_cov: DMatrix::identity(t, t) * 8.0,
        sizes: SizeRule::UniformInt { treated: 20, lo: 10, hi: 200 },
        shocks: ShockFamily::Normal,
        seed,
    }
}

#[test]
fn panel_csv_file_round_trip_is_identity() {
    let (panel, _) = simulate_panel(&sized_config(1), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    let file = std::fs::File::create(&path).unwrap();
    write_panel(&panel, file).unwrap();
    let reloaded = load_panel(&path, &ColumnMap::default()).unwrap();
    assert_eq!(panel, reloaded);
    assert!(reloaded.validate().is_empty());
}

#[test]
fn loader_ignores_comment_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    std::fs::write(
        &path,
        "# seed=42\n# config=abc\nunit,period,outcome,treat_time\nA,1,1.0,1\nA,2,2.0,1\nB,1,0.0,never\nB,2,0.5,never\nC,1,0.2,never\nC,2,0.6,never\n",
    )
    .unwrap();
    let panel = load_panel(&path, &ColumnMap::default()).unwrap();
    assert_eq!(panel.n_units(), 3);
}

#[test]
fn scheme_serializes_and_reloads_through_json_files() {
    let (panel, _) = simulate_panel(&sized_config(2), 0).unwrap();
    let scheme = build_scheme_event_study(&panel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scheme.json");
    std::fs::write(&path, serde_json::to_string_pretty(&scheme).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: AggregationScheme = serde_json::from_str(&text).unwrap();
    assert_eq!(back, scheme);
    let est_a = point_estimate(&panel, &scheme).unwrap();
    let est_b = point_estimate(&panel, &back).unwrap();
    assert_eq!(est_a.values, est_b.values);
}

#[test]
fn whole_pipeline_is_scale_equivariant() {
    // Multiplying every outcome by lambda scales estimates and band
    // endpoints by lambda, including through the fitted scale model.
    let lambda = 3.5;
    let (panel, _) = simulate_panel(&sized_config(3), 0).unwrap();
    let scaled = {
        let outcomes = panel.outcomes() * lambda;
        PanelData::from_parts(
            outcomes,
            panel.treat_times().to_vec(),
            panel.sizes().cloned(),
            Some(panel.unit_labels().to_vec()),
            Some(panel.period_labels().to_vec()),
        )
        .unwrap()
    };
    let run = |p: &PanelData| {
        let scheme = build_scheme_att(p).unwrap();
        let est = point_estimate(p, &scheme).unwrap();
        let res = control_residuals(p, &scheme).unwrap();
        let fitted = fit(&HeteroSpec::new(HeteroKind::PanelAgg), &res, p).unwrap();
        let norm = normalize(&res, &fitted, p).unwrap();
        let draws = draw(&norm, &fitted, p, 1500, 7).unwrap();
        uniform_band(&est, &draws, 0.05, NormalizerKind::Constant).unwrap()
    };
    let base = run(&panel);
    let scaled_band = run(&scaled);
    for s in 0..base.labels.len() {
        assert_abs_diff_eq!(
            scaled_band.lower[s],
            lambda * base.lower[s],
            epsilon = 1e-9 * (1.0 + base.lower[s].abs() * lambda)
        );
        assert_abs_diff_eq!(
            scaled_band.upper[s],
            lambda * base.upper[s],
            epsilon = 1e-9 * (1.0 + base.upper[s].abs() * lambda)
        );
    }
}

#[test]
fn identity_model_band_matches_homoskedastic_shortcut() {
    // Fitting the identity model and normalizing must leave residuals
    // untouched, so the band equals one built from raw residual draws.
    let (panel, _) = simulate_panel(&sized_config(4), 1).unwrap();
    let scheme = build_scheme_event_study(&panel).unwrap();
    let est = point_estimate(&panel, &scheme).unwrap();
    let res = control_residuals(&panel, &scheme).unwrap();
    let fitted = fit(&HeteroSpec::identity(), &res, &panel).unwrap();
    let norm = normalize(&res, &fitted, &panel).unwrap();
    for (j, rows) in norm.per_unit.iter().enumerate() {
        let coords = &norm.nondegenerate_by_unit[j];
        for (r, row) in rows.row_iter().enumerate() {
            for (c, &s) in coords.iter().enumerate() {
                assert_eq!(row[c], res.per_unit[j][(r, s)]);
            }
        }
    }
    let draws = draw(&norm, &fitted, &panel, 1000, 3).unwrap();
    let band = uniform_band(&est, &draws, 0.10, NormalizerKind::Constant).unwrap();
    assert!(band.critical_value > 0.0);
}

#[test]
fn estimate_vector_exports_as_csv_rows() {
    let (panel, _) = simulate_panel(&sized_config(5), 0).unwrap();
    let scheme = build_scheme_event_study(&panel).unwrap();
    let est = point_estimate(&panel, &scheme).unwrap();
    // label,value rows parse back to the same numbers.
    let mut csv = String::from("label,value\n");
    for (label, value) in est.labels.iter().zip(&est.values) {
        csv.push_str(&format!("{label},{value}\n"));
    }
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let parsed: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap().get(1).unwrap().parse::<f64>().unwrap())
        .collect();
    assert_eq!(parsed, est.values);
}
