mod common;

use std::fs;

use common::*;
use hyperunmix::envi::load_envi;
use hyperunmix::{AbundanceMap, EndmemberSet};
use serde_json::json;
use tempfile::tempdir;

#[test]
fn calibrate_recovers_reflectance() {
    let dir = tempdir().unwrap();
    let fx = calibration_fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({"calibration": {"raw": fx.raw, "dark": fx.dark, "panels": fx.panels}}));
    let out = dir.path().join("out");
    run_ok(&["--config", p(&cfg), "--out", p(&out), "calibrate"]);
    let got = load_envi(out.join("reflectance.hdr")).unwrap();
    let want = fx.reflectance.data();
    for (g, w) in got.data().iter().zip(want.iter()) {
        // reflectance is stored as float32
        assert!((g - w).abs() <= 1e-6 * w.abs(), "{g} vs {w}");
    }
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(model["gain"].as_array().unwrap().len(), 12);
    assert!(out.join("manifest_calibrate.json").is_file());
}

#[test]
fn missing_panel_file_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let fx = calibration_fixture(dir.path());
    let missing = dir.path().join("nope_panels.json");
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({"calibration": {"raw": fx.raw, "dark": fx.dark, "panels": missing}}));
    let out = run(&["--config", p(&cfg), "--out", p(&dir.path().join("o")), "calibrate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope_panels.json"));
}

#[test]
fn bad_config_and_unknown_method_exit_2() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mixer": {"kernal": 3}}"#).unwrap();
    assert_eq!(run(&["--config", p(&cfg), "mix"]).status.code(), Some(2));
    let (cube, _, _) = scene(6, 6, 5, 1);
    let cube_path = write_cube(&cube, &dir.path().join("c.hdr"));
    write_json(&cfg, &json!({"unmix": {"cube": cube_path}}));
    let out = run(&["--config", p(&cfg), "--out", p(&dir.path().join("o")), "unmix", "--method", "pca"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fcls, nmf, unet"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn dataset_shape_is_enforced() {
    let dir = tempdir().unwrap();
    let (cube, _, _) = scene(6, 6, 5, 1);
    let cube_path = write_cube(&cube, &dir.path().join("samson.hdr"));
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({"dataset": {"name": "samson", "cube_path": cube_path}, "vca": {"endmembers": 3}}));
    let out = run(&["--config", p(&cfg), "--out", p(&dir.path().join("o")), "endmembers"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[95, 95, 156]"));
}

#[test]
fn pipeline_build_unmix_evaluate_render() {
    let dir = tempdir().unwrap();
    let (cube, _, _) = scene(30, 42, 16, 3);
    let cube_path = write_cube(&cube, &dir.path().join("scene.hdr"));
    let cfg = dir.path().join("cfg.json");
    write_json(
        &cfg,
        &json!({
            "vca": {"cube": cube_path, "endmembers": 3},
            "unmix": {"endmembers": 3, "nmf_iterations": 50,
                      "network": {"patch_size": 4, "levels": 2, "base_channels": 2, "spectral_channels": 4,
                                  "max_epochs": 2, "batch_size": 4}}
        }),
    );
    let out = dir.path().join("out");
    let base = ["--config", p(&cfg), "--out", p(&out), "--seed", "4"];
    let with = |extra: &[&'static str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run_with = |extra: &[&'static str]| run_ok(&with(extra).iter().map(String::as_str).collect::<Vec<_>>());
    run_with(&["build-dataset"]);
    let mixed = load_envi(out.join("mixed.hdr")).unwrap();
    assert_eq!((mixed.lines(), mixed.samples(), mixed.bands()), (10, 14, 16));
    let truth = AbundanceMap::load(out.join("abundances.hdr")).unwrap();
    assert_eq!(truth.dim(), (10, 14, 3));
    let stats = EndmemberSet::load(out.join("class_stats.json")).unwrap();
    assert!(stats.band_sigma.is_some());

    // fcls with the class means as fixed endmembers is near exact on window means
    let known = out.join("class_stats.json");
    let cfg2 = dir.path().join("cfg2.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["unmix"]["known_endmembers"] = json!(known);
    write_json(&cfg2, &v);
    run_ok(&["--config", p(&cfg2), "--out", p(&out), "unmix", "--method", "fcls"]);
    let stdout = run_ok(&["--config", p(&cfg2), "--out", p(&out), "evaluate"]).stdout;
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.starts_with("Dataset"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["mRMSE"].as_f64().unwrap() < 0.05, "{report}");
    assert!(report["mSAD"].as_f64().unwrap() < 1e-6, "{report}");
    for c in report["per_class"].as_array().unwrap() {
        assert_eq!(c["within_variance"].as_f64(), Some(1.0));
    }
    let pngs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("endmember_") && e.file_name().to_string_lossy().ends_with(".png"))
        .collect();
    assert_eq!(pngs.len(), 3);

    run_with(&["unmix", "--method", "nmf"]);
    let trace = fs::read_to_string(out.join("unmix_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);

    run_with(&["train"]);
    assert!(out.join("model.ckpt").is_file());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs_run"], 2);
    let ckpt = out.join("model.ckpt");
    let resumed = dir.path().join("resumed");
    let cfg3 = dir.path().join("cfg3.json");
    let mut v3: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v3["unmix"]["cube"] = json!(out.join("mixed.hdr"));
    write_json(&cfg3, &v3);
    run_ok(&["--config", p(&cfg3), "--out", p(&resumed), "--seed", "4", "train", "--resume", p(&ckpt), "--epochs", "3"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(resumed.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs_run"], 1);

    let mut v2 = v.clone();
    v2["unmix"]["checkpoint"] = json!(ckpt);
    v2["unmix"]["known_endmembers"] = serde_json::Value::Null;
    write_json(&cfg2, &v2);
    run_ok(&["--config", p(&cfg2), "--out", p(&out), "unmix", "--method", "unet"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("unmix_summary.json")).unwrap()).unwrap();
    assert_eq!(summary, json!({"method": "unet", "epochs": 2}));
    run_ok(&["--config", p(&cfg2), "--out", p(&out), "evaluate"]);

    run_ok(&["--out", p(&out), "render", p(&cube_path)]);
    assert!(out.join("scene.png").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest_render.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "render");
    assert_eq!(manifest["outputs"][0]["path"], "scene.png");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn evaluate_without_truth_reports_re_only() {
    let dir = tempdir().unwrap();
    let (cube, _, _) = scene(12, 14, 8, 2);
    let cube_path = write_cube(&cube, &dir.path().join("scene.hdr"));
    let cfg = dir.path().join("cfg.json");
    write_json(&cfg, &json!({"unmix": {"cube": cube_path, "endmembers": 3, "nmf_iterations": 30}}));
    let out = dir.path().join("out");
    run_ok(&["--config", p(&cfg), "--out", p(&out), "unmix", "--method", "nmf"]);
    let res = run_ok(&["--config", p(&cfg), "--out", p(&out), "evaluate"]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("RE only"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["mRMSE"].is_null());
    assert_eq!(report["epochs"], 30);
    assert!(report["RE"].as_f64().unwrap() >= 0.0);
}

#[test]
fn divergence_exits_1_with_trace_path() {
    let dir = tempdir().unwrap();
    let (cube, _, _) = scene(8, 8, 5, 2);
    let cube_path = write_cube(&cube, &dir.path().join("scene.hdr"));
    let cfg = dir.path().join("cfg.json");
    write_json(
        &cfg,
        &json!({"unmix": {"cube": cube_path, "endmembers": 2,
                "network": {"patch_size": 4, "levels": 1, "base_channels": 2, "spectral_channels": 2,
                            "max_epochs": 50, "learning_rate": 1e12, "endmember_init": "random"}}}),
    );
    let out = dir.path().join("out");
    let res = run(&["--config", p(&cfg), "--out", p(&out), "train"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("diverged") && err.contains("train_trace.csv"), "{err}");
    assert!(out.join("train_trace.csv").is_file());
}

#[test]
fn datasets_lists_registry() {
    let out = String::from_utf8(run_ok(&["datasets"]).stdout).unwrap();
    for name in ["samson", "apex", "dc-mall", "blueberry-1", "blueberry-2", "blueberry-3"] {
        assert!(out.contains(name));
    }
    assert!(out.contains("95      95   156"));
}
