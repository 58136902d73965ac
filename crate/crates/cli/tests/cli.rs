use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn spectlv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectlv")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = spectlv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = hex::encode(Sha256::digest(fs::read(&p).unwrap()));
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_trees_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--out", s(&a), "phantom", "--n", "40", "--seed", "7"]);
    ok(&["--out", s(&b), "--seed", "7", "phantom", "--n", "40"]);
    let (da, db) = (tree_digest(&a), tree_digest(&b));
    assert_eq!(da.len(), 40 * (8 * 4 * 2 + 1) + 2);
    assert_eq!(da, db);
}

/// Copies the ground-truth masks into the prediction layout.
fn gt_predictions(dataset: &Path, out: &Path) {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dataset.join("manifest.json")).unwrap()).unwrap();
    for study in m["studies"].as_array().unwrap() {
        for (_, paths) in study["masks"].as_object().unwrap() {
            for rel in paths.as_array().unwrap() {
                let rel = rel.as_str().unwrap();
                for suffix in ["", ".json"] {
                    let src = dataset.join(format!("{rel}{suffix}"));
                    if src.exists() {
                        let dst = out.join(format!("{rel}{suffix}"));
                        fs::create_dir_all(dst.parent().unwrap()).unwrap();
                        fs::copy(src, dst).unwrap();
                    }
                }
            }
        }
    }
    fs::write(out.join("predictions.json"), r#"{"structures":{"endocardium":"vnet","myocardium":"vnet"}}"#).unwrap();
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, pred, ev, cl, rep) = (
        tmp.path().join("ds"),
        tmp.path().join("pred"),
        tmp.path().join("eval"),
        tmp.path().join("clinical"),
        tmp.path().join("report"),
    );
    ok(&["--out", s(&ds), "--seed", "3", "phantom", "--n", "4"]);
    gt_predictions(&ds, &pred);
    let manifest = ds.join("manifest.json");
    ok(&["--out", s(&ev), "--dataset", s(&manifest), "eval", "--predictions", s(&pred)]);
    let mut rd = csv::Reader::from_path(ev.join("metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4 * 8 * 2);
    for r in &rows {
        assert_eq!(&r[7], "1.0");
        assert_eq!(&r[8], "0.0");
    }

    ok(&["--out", s(&cl), "--dataset", s(&manifest), "clinical", "--predictions", s(&pred)]);
    let mut rd = csv::Reader::from_path(cl.join("clinical.csv")).unwrap();
    for r in rd.records().map(Result::unwrap) {
        for k in 4..10 {
            assert_eq!(r[k], r[k + 6]);
        }
    }

    fs::copy(ev.join("metrics.csv"), cl.join("metrics.csv")).unwrap();
    ok(&["--out", s(&rep), "report", "--input", s(&cl)]);
    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_headers.txt")).unwrap();
    let mut got = String::new();
    for name in ["table2", "table3", "agreement", "scatter", "bland_altman", "volume_curves"] {
        let text = fs::read_to_string(rep.join(format!("{name}.csv"))).unwrap();
        got += &format!("{name}: {}\n", text.lines().next().unwrap());
    }
    assert_eq!(got, golden);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "report");
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn prior_variants_refuse_to_train_without_priors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["--out", s(&ds), "phantom", "--n", "2"]);
    let out = spectlv(&[
        "--out",
        s(&tmp.path().join("m")),
        "--dataset",
        s(&ds.join("manifest.json")),
        "--variant",
        "dpstvnet",
        "train",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: missing_priors:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(spectlv(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(spectlv(&["--variant", "unet", "train"]).status.code(), Some(2));
    assert!(spectlv(&["--help"]).status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 10, "learning_rate": 0.1}}"#).unwrap();
    let out = spectlv(&["--config", s(&cfg), "--out", s(&tmp.path().join("o")), "phantom", "--n", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: config:") && err.contains("learning_rate"), "{err}");
}

#[test]
fn dp_model_round_trips_through_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let manifest = t.join("ds/manifest.json");
    ok(&["--out", s(&t.join("ds")), "phantom", "--n", "1"]);
    ok(&["--out", s(&t.join("pri")), "--dataset", s(&manifest), "prior"]);
    ok(&["--out", s(&t.join("m")), "--variant", "dp", "--structure", "myo", "train"]);
    ok(&[
        "--out",
        s(&t.join("pred")),
        "--dataset",
        s(&manifest),
        "--priors",
        s(&t.join("pri")),
        "predict",
        "--model",
        s(&t.join("m/model")),
    ]);
    ok(&["--out", s(&t.join("ev")), "--dataset", s(&manifest), "eval", "--predictions", s(&t.join("pred"))]);
    let mut rd = csv::Reader::from_path(t.join("ev/metrics.csv")).unwrap();
    let dsc: Vec<f64> = rd.records().map(|r| r.unwrap()[7].parse().unwrap()).collect();
    assert_eq!(dsc.len(), 8);
    assert!(dsc.iter().all(|&d| d > 0.8), "{dsc:?}");
}
