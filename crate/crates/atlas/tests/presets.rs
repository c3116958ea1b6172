//! Every built-in preset runs end to end on the synthetic fixture, and the
//! emitted reports carry the pieces the text tables promise.

mod common;

use atlas::pipeline::{builtin_presets, Pipeline};

#[test]
fn every_builtin_preset_runs_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 42);
    let out = dir.path().join("out-presets");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();

    let names: Vec<String> = builtin_presets().keys().cloned().collect();
    assert!(names.len() >= 20, "expected a rich preset table");
    for name in &names {
        let manifest = pipeline
            .cmd_estimate(name)
            .unwrap_or_else(|e| panic!("preset {name} failed: {e}"));
        assert!(manifest.stages.iter().any(|s| s.name.starts_with("fit")));
        let estimate = out.join(name).join("estimate.json");
        assert!(estimate.exists(), "{name} wrote no estimate.json");
        let text = std::fs::read_to_string(out.join(name).join("estimate.txt")).unwrap();
        assert!(text.contains("p<0.001"), "{name} table lacks the star legend");
    }
}

#[test]
fn ols_preset_outputs_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 7);
    let out = dir.path().join("out");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();
    pipeline.cmd_estimate("chronic-pooled").unwrap();

    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("chronic-pooled").join("estimate.json")).unwrap(),
    )
    .unwrap();
    let names: Vec<&str> = json["report"]["names"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        vec![
            "intercept",
            "median_rent_plus",
            "median_rent_minus",
            "d_pct_public_assistance",
            "d_median_hh_income",
            "period_2016-2020"
        ]
    );
    assert!(json["split_equality"]["statistic"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["report"]["n_clusters"].as_u64().unwrap(), 30);

    // Margins grid: 41 rows, symmetric around the knot.
    let margins = std::fs::read_to_string(out.join("chronic-pooled").join("margins.csv")).unwrap();
    assert_eq!(margins.lines().count(), 1 + 41);
    assert!(margins.lines().nth(1).unwrap().starts_with("-0.1,"));

    // The synthetic data are built with a strongly positive upward
    // elasticity and a flat downward one; the fit should see that.
    let report_names = &json["report"]["names"];
    let beta = json["report"]["beta"].as_array().unwrap();
    let plus_idx = report_names
        .as_array()
        .unwrap()
        .iter()
        .position(|v| v == "median_rent_plus")
        .unwrap();
    assert!(beta[plus_idx].as_f64().unwrap() > 0.5);
}

#[test]
fn qd_outcome_scale_leaves_estimate_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 19);
    let out = dir.path().join("out");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();
    pipeline.cmd_estimate("qd-chronic").unwrap();
    pipeline.cmd_estimate("qd-chronic-per10k").unwrap();
    let load = |name: &str| -> serde_json::Value {
        serde_json::from_str(
            &std::fs::read_to_string(out.join(name).join("estimate.json")).unwrap(),
        )
        .unwrap()
    };
    let base = load("qd-chronic");
    let scaled = load("qd-chronic-per10k");
    assert!(scaled["label"].as_str().unwrap().contains("outcome x 10000"));
    // The moment root and its covariance do not depend on the outcome scale.
    for j in 0..base["beta"].as_array().unwrap().len() {
        let a = base["beta"][j].as_f64().unwrap();
        let b = scaled["beta"][j].as_f64().unwrap();
        assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()), "beta[{j}]: {a} vs {b}");
        let sa = base["std_errors"][j].as_f64().unwrap();
        let sb = scaled["std_errors"][j].as_f64().unwrap();
        assert!((sa - sb).abs() < 1e-8 * (1.0 + sa.abs()));
    }
}

#[test]
fn exclusions_and_per_year_vintages_apply() {
    let dir = tempfile::tempdir().unwrap();
    common::write_stl_fixture(dir.path());
    // A 2016-only population vintage that moves all of c6's weight into the
    // eastern target region.
    std::fs::write(
        dir.path().join("blockgroups_2016.csv"),
        "geoid,x,y,population\n\
         b1,0.5,0.5,100\nb2,1.5,0.5,200\nb3,2.5,0.5,300\nb4,3.5,0.5,400\nb5,4.5,0.5,500\n\
         b6a,7.5,1.0,100\nb6b,7.6,1.0,100\nb6c,7.7,1.0,100\n\
         b7a,5.5,3.0,200\nb7b,7.5,3.0,200\nb8a,8.5,3.0,150\nb8b,10.5,3.0,50\n",
    )
    .unwrap();
    let config = dir.path().join("vintage.json");
    std::fs::write(
        &config,
        r#"{
          "geometry": {
            "source": "cocs.geojson",
            "target": "msas.geojson",
            "points": "blockgroups.csv",
            "per_year_points": {"2016": "blockgroups_2016.csv"},
            "exclusions": {"2011": ["c8"]}
          },
          "counts": "counts.csv",
          "output_dir": "out-vintage"
        }"#,
    )
    .unwrap();
    let pipeline = Pipeline::load(&config, None, None).unwrap();
    pipeline.cmd_interpolate().unwrap();

    let out = dir.path().join("out-vintage");
    let csv = std::fs::read_to_string(out.join("interpolated_counts.csv")).unwrap();
    let mut got: std::collections::BTreeMap<(String, String), f64> = Default::default();
    for line in csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        got.insert(
            (parts[0].to_string(), parts[1].to_string()),
            parts[2].parse().unwrap(),
        );
    }
    // 2011 without c8: spr loses c8's 60 (5 + 20 remain).
    assert!((got[&("spr".into(), "2011".into())] - 25.0).abs() < 1e-9);
    assert!((got[&("stl".into(), "2011".into())] - 185.0).abs() < 1e-9);
    // 2016 (doubled counts) under the alternative vintage: all of c6's 100
    // goes to spr, none excluded from c6.
    let spr_2016 = got[&("spr".into(), "2016".into())];
    assert!((spr_2016 - (100.0 + 40.0 + 120.0)).abs() < 1e-9, "spr 2016 = {spr_2016}");

    let diag: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("interpolation_diagnostics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(diag["excluded_regions"]["2011"][0], "c8");
    let notes = diag["geometry_warnings"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().contains("blockgroups_2016.csv")));
}

#[test]
fn qd_preset_reports_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 11);
    let out = dir.path().join("out");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();
    pipeline.cmd_estimate("qd-chronic").unwrap();
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("qd-chronic").join("estimate.json")).unwrap(),
    )
    .unwrap();
    assert!(json["final_moment_norm"].as_f64().unwrap() < 1e-10);
    // Full one-hot trends, no common intercept.
    let names: Vec<&str> = json["names"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(names.contains(&"trend_2011-2016"));
    assert!(names.contains(&"trend_2016-2020"));
    assert!(names.contains(&"median_rent_plus"));
    assert!(!names.contains(&"intercept"));
}

#[test]
fn iv_preset_emits_diagnostics_and_loo() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 13);
    let out = dir.path().join("out");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();
    pipeline.cmd_estimate("iv-main").unwrap();
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("iv-main").join("estimate.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["first_stages"].as_array().unwrap().len(), 3);
    assert_eq!(json["leave_one_out"].as_array().unwrap().len(), 4);
    assert_eq!(json["hansen_j"]["df"].as_u64().unwrap(), 1);
    // All diagnostics share one sample.
    let n = json["report"]["n"].as_u64().unwrap();
    for fs in json["first_stages"].as_array().unwrap() {
        assert_eq!(fs["report"]["n"].as_u64().unwrap(), n);
    }
    for loo in json["leave_one_out"].as_array().unwrap() {
        assert_eq!(loo[1]["n"].as_u64().unwrap(), n);
    }

    // The predicted-exogenous variant drops to 2 endogenous, 3 excluded.
    pipeline.cmd_estimate("iv-predicted-employment").unwrap();
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            out.join("iv-predicted-employment").join("estimate.json"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(json["first_stages"].as_array().unwrap().len(), 2);
    assert_eq!(json["leave_one_out"].as_array().unwrap().len(), 3);
    assert_eq!(json["hansen_j"]["df"].as_u64().unwrap(), 1);
    let names: Vec<&str> = json["report"]["names"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(names.contains(&"bartik"), "predicted growth as a control");
}

#[test]
fn validate_and_panel_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = common::write_full_fixture(dir.path(), 17);
    let out = dir.path().join("out");
    let pipeline = Pipeline::load(&config_path, Some(out.clone()), None).unwrap();

    pipeline.cmd_validate().unwrap();
    let text = std::fs::read_to_string(out.join("validation.txt")).unwrap();
    assert!(text.contains("2011"));
    assert!(text.contains("raw correlation"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("validation.json")).unwrap())
            .unwrap();
    // The fixture couples crowding to the same rent signal as chronic
    // homelessness, so the sanity correlation is positive in every year.
    for row in json["correlations"].as_array().unwrap() {
        assert!(row["raw_r"].as_f64().unwrap() > 0.0);
        assert_eq!(row["n"].as_u64().unwrap(), 30);
    }

    let manifest = pipeline.cmd_panel("chronic-pooled").unwrap();
    let built_stage = manifest
        .stages
        .iter()
        .find(|s| s.name == "build-panel")
        .unwrap();
    assert_eq!(built_stage.rows_in, 30 * 2);
    assert_eq!(built_stage.rows_out + built_stage.drops, built_stage.rows_in);
    let panel_csv = std::fs::read_to_string(out.join("panel_chronic-pooled.csv")).unwrap();
    assert!(panel_csv.starts_with("msa,period,outcome"));
}
