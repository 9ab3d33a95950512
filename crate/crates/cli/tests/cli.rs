use std::path::Path;
use std::process::{Command, Output};

use jetfit::data::{load_pcpnet, sibling};
use jetfit::eval::{angle_error_unoriented, jet_normal_unweighted};
use jetfit::jet::{JetOrder, DEFAULT_RIDGE};
use jetfit::neighborhood::{extract_patch, NeighborIndex};

fn jetfit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jetfit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}\n{}", o.status, String::from_utf8_lossy(&o.stderr));
    o
}

fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect()
}

#[test]
fn usage_errors_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        vec!["fit", "--input", "a", "--output", "b"],
        vec!["fit", "--input", "a", "--output", "b", "--uniform-weights", "--checkpoint", "c"],
        vec!["eval", "--manifest", "m", "--out", "o", "--uniform-weights", "--checkpoint", "c"],
        vec!["synth", "--out", "x"],
        vec!["--threads", "0", "synth", "--kind", "plane", "--out", "x"],
        vec!["frobnicate"],
    ] {
        let o = jetfit(&args, d.path());
        assert!(!o.status.success(), "{args:?} succeeded");
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    let o = jetfit(&["fit", "--input", "missing", "--output", "out", "--uniform-weights"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn plane_fit_has_constant_normal_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(jetfit(&["synth", "--kind", "plane", "--count", "1500", "--seed", "3", "--out", "in/plane"], d.path()));
    ok(jetfit(&["fit", "--input", "in/plane", "--output", "out/plane", "--uniform-weights", "--k", "32"], d.path()));
    let normals = read_rows(&d.path().join("out/plane.normals"));
    assert_eq!(normals.len(), 1500);
    for n in &normals {
        assert!(n[2].abs() > 1.0 - 1e-12 && n[0].abs() < 1e-6 && n[1].abs() < 1e-6, "{n:?}");
    }
    for c in read_rows(&d.path().join("out/plane.curv")) {
        assert!(c.iter().all(|k| k.abs() < 1e-6));
    }
    let weights = read_rows(&d.path().join("out/plane.weights"));
    let total: f64 = weights.iter().map(|w| w[0]).sum();
    assert!((total - 1500.0 * 32.0).abs() < 1e-6, "{total}");
    for sub in ["in", "out"] {
        assert!(d.path().join(sub).join("run_manifest.json").is_file(), "{sub}");
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("out/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "fit");
    assert_eq!(m["inputs"].as_array().unwrap()[0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn uniform_fit_equals_classical_jet() {
    let d = tempfile::tempdir().unwrap();
    ok(jetfit(
        &["synth", "--kind", "torus", "--count", "2000", "--seed", "1", "--noise", "0.004", "--out", "t"],
        d.path(),
    ));
    ok(jetfit(&["fit", "--input", "t", "--output", "f", "--uniform-weights", "--k", "40", "--order", "2"], d.path()));
    let cloud = load_pcpnet(&d.path().join("t")).unwrap();
    let index = NeighborIndex::new(&cloud.positions);
    let got = read_rows(&sibling(&d.path().join("f"), "normals"));
    let order = JetOrder::new(2).unwrap();
    for q in (0..cloud.len()).step_by(50) {
        let patch = extract_patch(&cloud, &index, q, 40).unwrap();
        let want = jet_normal_unweighted(&patch, order, DEFAULT_RIDGE).unwrap();
        let g = nalgebra::Vector3::new(got[q][0], got[q][1], got[q][2]);
        assert!(angle_error_unoriented(&g, &want) < 1e-6, "point {q}");
    }
}

#[test]
fn synth_train_eval_denoise_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let spec = r#"{ "shapes": [
        { "name": "ball", "shape": { "kind": "sphere", "radius": 1.0, "sample_count": 800, "seed": 1 }, "noise": 0.004 },
        { "name": "edge", "shape": { "kind": "corner", "angle_deg": 90.0, "sample_count": 800, "seed": 2 },
          "outliers": { "fraction": 0.05, "offset": 0.05 } }
    ] }"#;
    std::fs::write(d.path().join("corpus.json"), spec).unwrap();
    ok(jetfit(&["synth", "--spec", "corpus.json", "--out", "data"], d.path()));
    std::fs::write(
        d.path().join("train.toml"),
        "epochs = 2\nsamples_per_epoch = 32\nbatch_size = 16\nk_neighbors = 24\nval_samples = 16\n\n[arch]\npoint = [8, 8]\nglobal = [16, 32]\nhead = [16, 8]\ntnet_conv = [8, 16]\ntnet_fc = [16, 8]\n",
    )
    .unwrap();
    ok(jetfit(&["--threads", "1", "train", "--config", "train.toml", "--manifest", "data/list.txt", "--out", "run"], d.path()));
    for f in ["last.ckpt", "best.ckpt", "metrics.csv", "config.toml", "run_manifest.json"] {
        assert!(d.path().join("run").join(f).is_file(), "{f}");
    }
    let o = ok(jetfit(
        &["eval", "--manifest", "data/list.txt", "--checkpoint", "run/best.ckpt", "--methods", "pca,jet,net", "--k", "24", "--out", "ev"],
        d.path(),
    ));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("net_k24_o3") && table.contains("pca_k24"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 3);
    assert!(d.path().join("ev/run_manifest.json").is_file());

    ok(jetfit(&["denoise", "--input", "data/edge", "--checkpoint", "run/best.ckpt", "--output", "clean/edge"], d.path()));
    let before = read_rows(&d.path().join("data/edge.xyz")).len();
    let after = read_rows(&d.path().join("clean/edge.xyz")).len();
    assert!(after < before && after > before / 2, "{before} -> {after}");
    assert!(d.path().join("clean/run_manifest.json").is_file());
}
