use super::*;
use crate::mpct::MpcMode;

fn bundled(name: &str) -> Scenario {
    load_scenario(format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn edit(name: &str, f: impl FnOnce(&mut serde_json::Value)) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    f(&mut v);
    Scenario::from_json(&v.to_string())
}

#[test]
fn bundled_normal_scenario_has_benchmark_weights() {
    let s = bundled("ballplate_normal");
    assert_eq!((s.mpc.nc, s.mpc.np), (4, 4));
    assert_eq!(s.mpc.mode, MpcMode::Normal);
    let t = s.mpc.t.to_matrix("T").unwrap();
    assert_eq!(t, nalgebra::DMatrix::identity(2, 2) * 1e5);
    assert_eq!(
        s.mpc.r.to_matrix("R").unwrap(),
        nalgebra::DMatrix::identity(2, 2) * 10.0
    );
}

#[test]
fn every_bundled_scenario_builds() {
    for name in [
        "ballplate_normal",
        "ballplate_standard",
        "ballplate_homeo",
        "convex_standard",
    ] {
        let setup = bundled(name).build().unwrap();
        assert_eq!(setup.x0.len(), 8, "{name}");
    }
}

#[test]
fn missing_sampling_time_names_the_field() {
    let err = edit("ballplate_normal", |v| {
        v["plant"].as_object_mut().unwrap().remove("Ts");
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("plant.Ts"), "{err}");
    assert!(err.to_string().contains("plant.Ts"));
}

#[test]
fn control_horizon_beyond_prediction_is_rejected() {
    let err = edit("ballplate_normal", |v| v["mpc"]["Nc"] = 5.into()).unwrap_err();
    assert!(
        matches!(&err, HarnessError::Invalid { field, .. } if field == "mpc.Nc"),
        "{err}"
    );
}

#[test]
fn unknown_and_mistyped_fields_report_their_path() {
    let err = edit("ballplate_normal", |v| v["mpc"]["horizon"] = 3.into()).unwrap_err();
    assert!(matches!(err, HarnessError::Parse { .. }));
    let err = edit("ballplate_normal", |v| v["run"]["steps"] = "many".into()).unwrap_err();
    assert_eq!(err.field(), Some("run.steps"), "{err}");
}

#[test]
fn dimension_mismatches_are_caught() {
    let err = edit("ballplate_normal", |v| v["run"]["x0"] = serde_json::json!([0.0, 1.0])).unwrap_err();
    assert_eq!(err.field(), Some("run.x0"));
    let err = edit("ballplate_normal", |v| {
        v["mpc"]["Q"] = serde_json::json!({"diag": [1.0, 1.0]})
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("mpc.Q"));
    let err = edit("ballplate_normal", |v| {
        v["mpc"]["R"] = serde_json::json!([[1.0, 0.0], [0.0]])
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("mpc.R"));
    let err = edit("ballplate_normal", |v| {
        v["set"]["composition"] = serde_json::json!({"union": [0, 2]})
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("set.composition[1]"));
}

#[test]
fn chart_modes_need_a_chart() {
    let err = edit("ballplate_normal", |v| {
        v["set"].as_object_mut().unwrap().remove("chart");
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("set.chart"));
    let err = edit("ballplate_normal", |v| {
        v["set"]["chart"] = serde_json::json!({"kind": "identity"})
    })
    .unwrap_err();
    assert_eq!(err.field(), Some("set.chart.basis_region"));
}

#[test]
fn chart_defaults_are_resolved_and_echoed() {
    let s = edit("ballplate_normal", |v| {
        v["set"]["chart"] = serde_json::json!({"kind": "polar"})
    })
    .unwrap();
    let chart = s.set.chart.as_ref().unwrap();
    assert_eq!(chart.center, Some([0.0, 0.0]));
    assert_eq!(chart.fiber_dim, Some(1));
    let region = chart.basis_region.as_ref().unwrap();
    assert!((region[0][1] - region[0][0] - 2.0 * std::f64::consts::PI).abs() < 1e-15);
    let again = Scenario::from_json(&s.to_json()).unwrap();
    assert_eq!(again, s);
}

#[test]
fn target_at_polar_center_fails_to_build() {
    let s = edit("ballplate_normal", |v| v["run"]["y_t"] = serde_json::json!([0.0, 0.0])).unwrap();
    let err = s.build().unwrap_err();
    assert_eq!(err.field(), Some("run.y_t"), "{err}");
}

#[test]
fn exact_r_functions_need_opt_in() {
    let s = edit("ballplate_standard", |v| v["set"]["variant"] = "exact".into()).unwrap();
    assert!(s.build().is_err());
    let s = edit("ballplate_standard", |v| {
        v["set"]["variant"] = "exact".into();
        v["mpc"]["allow_nonsmooth"] = true.into();
    })
    .unwrap();
    assert!(s.build().is_ok());
}

#[test]
fn zero_steps_is_not_run() {
    let mut s = bundled("ballplate_normal");
    s.run.steps = 0;
    let log = run_closed_loop(&s).unwrap();
    assert_eq!(log.summary.status, RunStatus::NotRun);
    assert!(log.records.is_empty());
    assert_eq!(log.summary.final_offset, None);
}

#[test]
fn csv_header_matches_schema() {
    let header = csv_header(8, 2, 2).join(",");
    assert_eq!(
        header,
        "k,x1,x2,x3,x4,x5,x6,x7,x8,u1,u2,y1,y2,ys1,ys2,theta1,theta2,lambda_lo,lambda_hi,cost,kkt,solve_time_ms"
    );
}

#[test]
fn short_run_records_every_step() {
    let mut s = bundled("ballplate_normal");
    s.run.steps = 6;
    let log = run_closed_loop(&s).unwrap();
    assert_eq!(log.summary.status, RunStatus::StepLimit);
    assert_eq!(log.records.len(), 6);
    for (k, r) in log.records.iter().enumerate() {
        assert_eq!(r.k, k);
        assert_eq!((r.x.len(), r.u.len(), r.y.len()), (8, 2, 2));
        assert!(r.solve_time_ms > 0.0);
        assert!(r.theta.is_some() && r.lambda_lo.is_some());
    }
    assert_eq!(log.records[0].x, s.run.x0);
    verify_records(&log).unwrap();

    let mut buf = Vec::new();
    write_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.split(',').count() == 22));
}

#[test]
fn standard_rows_leave_chart_columns_empty() {
    let mut s = bundled("ballplate_standard");
    s.run.steps = 2;
    let log = run_closed_loop(&s).unwrap();
    let mut buf = Vec::new();
    write_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[15..19], &["", "", "", ""]);
}

#[test]
fn benchmark_pair_must_differ_only_in_mode() {
    let a = bundled("ballplate_standard");
    let b = bundled("ballplate_normal");
    check_pair(&a, &b).unwrap();
    let mut c = b.clone();
    c.run.x0[0] = 0.0;
    let err = check_pair(&a, &c).unwrap_err();
    assert!(err.to_string().contains("run.x0"), "{err}");
    let mut d = b;
    d.mpc.nc = 3;
    assert!(check_pair(&a, &d).is_err());
}

#[test]
fn statistics_helpers() {
    assert_eq!(mean_std(&[]), (0.0, 0.0));
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(round3(1.23456), 1.235);
    assert_eq!(round3(0.9994), 0.999);
}

#[test]
fn output_format_parsing() {
    assert_eq!("csv".parse::<OutputFormat>().unwrap(), OutputFormat::Csv);
    assert_eq!("json".parse::<OutputFormat>().unwrap(), OutputFormat::Json);
    assert!("xml".parse::<OutputFormat>().is_err());
}
