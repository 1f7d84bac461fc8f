use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

const TINY: &str = r#"{
  "network": { "temporal_widths": [2, 2, 2], "spatial_widths": [4, 8] },
  "train": { "max_epochs": 1, "precision": "f64" }
}"#;

fn ctp4d(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ctp4d"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) {
    let (code, err) = ctp4d(args);
    assert_eq!(code, 0, "ctp4d {args:?}: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Raw phantoms, a preprocessed copy and a one-epoch model, built once.
struct Fixture {
    root: PathBuf,
    raw: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let (raw, data, run) = (root.join("raw"), root.join("data"), root.join("run"));
        let cfg = root.join("tiny.json");
        std::fs::write(&cfg, TINY).unwrap();
        ok(&[
            "synth",
            "--out",
            s(&raw),
            "--mix",
            "LVO=3,Non-LVO=3,WIS=3",
            "--seed",
            "40",
        ]);
        ok(&["preprocess", "--input", s(&raw), "--out", s(&data), "--no-resample"]);
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
        Fixture {
            model: run.join("model.ctp4m"),
            root,
            raw,
            data,
        }
    })
}

#[test]
fn synth_is_deterministic_and_indexed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--count", "3", "--seed", "11"]);
    }
    let index = json(&a.join("index.json"));
    let patients = index["patients"].as_array().unwrap();
    assert_eq!(patients.len(), 3);
    for p in patients {
        for key in ["study", "mask"] {
            let name = p[key].as_str().unwrap();
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 11);
}

#[test]
fn synth_of_zero_phantoms_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--count", "0"]);
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = dir.path().join("out");
    assert_eq!(ctp4d(&["preprocess", "--input", s(&nowhere), "--out", s(&out)]).0, 2);
    assert_eq!(ctp4d(&["train", "--data", s(&nowhere), "--out", s(&out)]).0, 2);
    assert_eq!(
        ctp4d(&[
            "eval",
            "--model",
            s(&nowhere),
            "--data",
            s(&nowhere),
            "--report",
            s(&out)
        ])
        .0,
        2
    );
}

#[test]
fn train_without_a_split_names_the_missing_file() {
    let f = fixture();
    let data = f.root.join("nosplit");
    ok(&["preprocess", "--input", s(&f.raw), "--out", s(&data), "--no-resample"]);
    std::fs::remove_file(data.join("split.json")).unwrap();
    let (code, err) = ctp4d(&["train", "--data", s(&data), "--out", s(&f.root.join("nosplit_run"))]);
    assert_eq!(code, 2);
    assert!(err.contains("split.json"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let cfg = f.root.join("bad.json");
    std::fs::write(&cfg, r#"{ "train": { "learning_rat": 0.1 } }"#).unwrap();
    let (code, _) = ctp4d(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("bad")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn preprocess_records_flags_and_is_repeatable() {
    let f = fixture();
    let out = f.root.join("again");
    ok(&["preprocess", "--input", s(&f.raw), "--out", s(&out), "--no-resample"]);
    let st = &json(&out.join("manifest.json"))["settings"];
    assert_eq!(
        (st["he"].as_bool(), st["resample"].as_bool()),
        (Some(true), Some(false))
    );
    for name in [
        "index.json",
        "split.json",
        "phantom-00040.ctp4",
        "phantom-00040_mask.ctp4",
    ] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(f.data.join(name)).unwrap(),
            "{name}"
        );
    }
    let split = json(&out.join("split.json"));
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 9);
}

#[test]
fn ground_truth_scores_perfectly() {
    let f = fixture();
    let report = f.root.join("gt.csv");
    ok(&[
        "eval",
        "--model",
        "unused",
        "--data",
        s(&f.data),
        "--report",
        s(&report),
        "--subset",
        "all",
        "--use-ground-truth",
    ]);
    let mut rd = csv::Reader::from_path(&report).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().filter(|r| r[0].starts_with("phantom-")).count(), 18);
    for r in rows.iter().filter(|r| &r[0] != "sd") {
        assert_eq!((&r[3], &r[4], &r[5]), ("1.000000", "0.000000", "0.000000"), "{r:?}");
    }
    assert!(report.with_file_name("gt.csv.manifest.json").is_file());
}

#[test]
fn aggregates_match_a_recomputation() {
    let f = fixture();
    let report = f.root.join("model.csv");
    ok(&[
        "eval",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--report",
        s(&report),
        "--subset",
        "all",
    ]);
    let mut rd = csv::Reader::from_path(&report).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    for agg in rows.iter().filter(|r| &r[0] == "mean" || &r[0] == "sd") {
        for col in 3..6 {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r[0].starts_with("phantom-") && r[1] == agg[1] && r[2] == agg[2])
                .map(|r| r[col].parse().unwrap())
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let want = if &agg[0] == "mean" {
                mean
            } else {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            let got: f64 = agg[col].parse().unwrap();
            assert!((got - want).abs() <= 1e-5, "{agg:?} column {col}: {got} vs {want}");
        }
    }
}

#[test]
fn predict_writes_masks_variance_and_overlays() {
    let f = fixture();
    let study = f.data.join("phantom-00041.ctp4");
    let (a, b) = (f.root.join("pred_a.ctp4"), f.root.join("pred_b.ctp4"));
    for out in [&a, &b] {
        ok(&["predict", "--model", s(&f.model), "--study", s(&study), "--out", s(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(f.root.join("pred_a.ctp4.manifest.json").is_file());
    assert!(!f.root.join("pred_a_variance.ctp4").exists());

    let mc = f.root.join("pred_mc.ctp4");
    let overlay = f.root.join("overlay");
    ok(&[
        "predict",
        "--model",
        s(&f.model),
        "--study",
        s(&study),
        "--out",
        s(&mc),
        "--mc-samples",
        "8",
        "--seed",
        "3",
        "--overlay",
        s(&overlay),
    ]);
    assert!(f.root.join("pred_mc_variance.ctp4").is_file());
    let pngs = std::fs::read_dir(&overlay).unwrap().count();
    assert_eq!(pngs, 3);
}

#[test]
fn predict_rejects_a_missing_model() {
    let f = fixture();
    let (code, _) = ctp4d(&[
        "predict",
        "--model",
        s(&f.root.join("absent.ctp4m")),
        "--study",
        s(&f.data.join("phantom-00040.ctp4")),
        "--out",
        s(&f.root.join("x.ctp4")),
    ]);
    assert_ne!(code, 0);
}
