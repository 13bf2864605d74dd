use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duiit_core::checkpoint::Checkpoint;
use duiit_core::data::{load_dataset, Modality};
use duiit_core::nn::Precision;
use duiit_core::predictor::{Predictor, PredictorConfig};
use duiit_core::report::{MetricEntry, RunReport, SCHEMA_VERSION};
use duiit_core::translator::{GeneratorConfig, TranslatorConfig, TranslatorState};
use serde_json::Value;
use tempfile::TempDir;

fn duiit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duiit"))
        .current_dir(dir)
        .env_remove("DUIIT_RUNS_DIR")
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path) {
    ok(duiit(dir, &["synth", "--out", "data", "--n-source", "24", "--n-target", "30", "--resolution", "16", "--seed", "3"]));
}

const CONFIG: &str = r#"
method = "ours"
[data]
root = "data"
[split]
kind = "counts"
train = 20
val = 5
test = 5
[train]
total_epochs = 1
decay_start_epoch = 1
batch_size = 8
n_runs = 2
"#;

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    dir
}

fn single_experiment(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn report(exp: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(exp.join("report.json")).unwrap()).unwrap()
}

fn seed_dirs(exp: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(exp).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    v.sort();
    v
}

#[test]
fn synth_writes_both_modalities_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let manifest = |m: &str| std::fs::read(dir.path().join("data").join(m).join("labels.csv")).unwrap();
    let (src, tgt) = (manifest("source"), manifest("target"));
    let source = load_dataset(&dir.path().join("data"), &Modality::new("source")).unwrap();
    assert_eq!((source.len(), source.resolution()), (24, (16, 16)));
    synth(dir.path());
    assert_eq!(manifest("source"), src);
    assert_eq!(manifest("target"), tgt);
    let refused = duiit(dir.path(), &["synth", "--out", "data", "--n-source", "24", "--no-clobber"]);
    assert_eq!(code(&refused), 2);
}

#[test]
fn synth_rejects_empty_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = duiit(dir.path(), &["synth", "--out", "data", "--n-source", "0"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn train_writes_run_layout_under_env_root() {
    let ws = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_duiit"))
        .current_dir(ws.path())
        .env("DUIIT_RUNS_DIR", "envruns")
        .args(["--log", "warn", "train", "--config", "c.toml"])
        .output()
        .unwrap();
    ok(out);
    let exp = single_experiment(&ws.path().join("envruns"));
    let r = report(&exp);
    assert_eq!(r["schema_version"], SCHEMA_VERSION);
    assert_eq!(r["method"], "ours");
    assert_eq!(r["config_hash"].as_str().unwrap(), exp.file_name().unwrap().to_str().unwrap());
    for key in ["mse", "is_mean", "is_std", "fid"] {
        assert!(r[key]["extractor"].is_string(), "{key}");
        assert!(r[key]["n_samples"].as_u64().unwrap() > 0, "{key}");
        assert_eq!(r[key]["per_seed"].as_array().unwrap().len(), 2, "{key}");
    }
    let seeds = seed_dirs(&exp);
    assert_eq!(seeds.len(), 2);
    let listed: Vec<String> = r["runs"].as_array().unwrap().iter().map(|x| x["seed"].to_string()).collect();
    for dir in &seeds {
        assert!(listed.contains(&dir.file_name().unwrap().to_str().unwrap().to_string()));
        let losses = std::fs::read_to_string(dir.join("losses.csv")).unwrap();
        let mut lines = losses.lines();
        assert!(lines.next().unwrap().starts_with("epoch,lr_translator,lr_predictor,adv_target,adv_source,cycle"));
        assert_eq!(lines.count(), 1);
        let bytes = std::fs::read(dir.join("final.ckpt")).unwrap();
        assert!(bytes.starts_with(b"DUIIT-CKPT-1\n"));
        let ckpt = Checkpoint::load(dir.join("final.ckpt")).unwrap();
        assert!(ckpt.translator.is_some());
    }
    assert!(!ws.path().join("runs").exists());
}

#[test]
fn flags_override_config_file() {
    let ws = workspace();
    std::fs::write(ws.path().join("p.toml"), CONFIG.replace("method = \"ours\"", "method = \"pure\"")).unwrap();
    ok(duiit(ws.path(), &["train", "--config", "p.toml", "--method", "tl", "--n-runs", "1", "--runs-dir", "out"]));
    let r = report(&single_experiment(&ws.path().join("out")));
    assert_eq!(r["method"], "tl");
    assert_eq!(r["n_runs"], 1);
    assert!(r.get("fid").is_none());
}

#[test]
fn invalid_configs_exit_2_before_training() {
    let ws = workspace();
    let neg = duiit(ws.path(), &["train", "--config", "c.toml", "--lambda", "-1", "--runs-dir", "neg"]);
    assert_eq!(code(&neg), 2);
    assert!(String::from_utf8_lossy(&neg.stderr).contains("lambda"));
    assert!(!ws.path().join("neg").exists());

    std::fs::write(ws.path().join("bad.toml"), format!("{CONFIG}\nepochz = 3\n")).unwrap();
    assert_eq!(code(&duiit(ws.path(), &["train", "--config", "bad.toml", "--runs-dir", "bad"])), 2);
    std::fs::write(ws.path().join("bad2.toml"), CONFIG.replace("batch_size", "batchsize")).unwrap();
    assert_eq!(code(&duiit(ws.path(), &["train", "--config", "bad2.toml", "--runs-dir", "bad"])), 2);
    assert_eq!(code(&duiit(ws.path(), &["train", "--config", "c.toml", "--method", "nope"])), 2);
    assert_eq!(code(&duiit(ws.path(), &["train", "--config", "missing.toml"])), 2);
    assert!(!ws.path().join("bad").exists());
}

#[test]
fn no_clobber_refuses_existing_report() {
    let ws = workspace();
    let args = ["train", "--config", "c.toml", "--method", "pure", "--runs-dir", "r"];
    ok(duiit(ws.path(), &args));
    let exp = single_experiment(&ws.path().join("r"));
    let before = std::fs::read(exp.join("report.json")).unwrap();
    let refused = duiit(ws.path(), &[&args[..], &["--no-clobber"]].concat());
    assert_eq!(code(&refused), 2);
    ok(duiit(ws.path(), &args));
    let after = std::fs::read(exp.join("report.json")).unwrap();
    let strip = |b: &[u8]| {
        let mut v: Value = serde_json::from_slice(b).unwrap();
        v["wall_clock_secs"] = Value::Null;
        for run in v["runs"].as_array_mut().unwrap() {
            run["wall_clock_secs"] = Value::Null;
        }
        v
    };
    assert_eq!(strip(&before), strip(&after));
}

#[test]
fn diverging_runs_exit_3() {
    let ws = workspace();
    let out = duiit(ws.path(), &["train", "--config", "c.toml", "--method", "pure", "--lr-predictor", "1e30", "--runs-dir", "r"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn worker_processes_reproduce_in_process_results() {
    let ws = workspace();
    ok(duiit(ws.path(), &["train", "--config", "c.toml", "--method", "pure", "--n-runs", "3", "--runs-dir", "one"]));
    ok(duiit(ws.path(), &["train", "--config", "c.toml", "--method", "pure", "--n-runs", "3", "--runs-dir", "many", "--jobs", "2"]));
    let a = report(&single_experiment(&ws.path().join("one")));
    let b = report(&single_experiment(&ws.path().join("many")));
    assert_eq!(a["mse"]["per_seed"], b["mse"]["per_seed"]);
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_eq!(code(&duiit(ws.path(), &["train", "--config", "c.toml", "--jobs", "0"])), 2);
}

#[test]
fn translate_carries_labels_and_writes_grid() {
    let ws = workspace();
    ok(duiit(ws.path(), &["train", "--config", "c.toml", "--n-runs", "1", "--runs-dir", "r"]));
    let exp = single_experiment(&ws.path().join("r"));
    let ckpt = seed_dirs(&exp)[0].join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    ok(duiit(ws.path(), &["translate", "--checkpoint", ckpt, "--input", "data", "--out", "tr", "--grid", "grid.png", "--grid-rows", "3"]));
    let source = load_dataset(&ws.path().join("data"), &Modality::new("source")).unwrap();
    let out = load_dataset(&ws.path().join("tr"), &Modality::new("target")).unwrap();
    assert_eq!(out.len(), source.len());
    for (a, b) in source.images().iter().zip(out.images()) {
        assert_eq!((&a.source_id, a.label), (&b.source_id, b.label));
    }
    let grid = image::open(ws.path().join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (2 * 16 + 2, 3 * 16 + 2 * 2));

    ok(duiit(ws.path(), &["synth", "--out", "small", "--n-source", "4", "--n-target", "4", "--resolution", "12"]));
    let mismatch = duiit(ws.path(), &["translate", "--checkpoint", ckpt, "--input", "small", "--out", "tr2"]);
    assert_eq!(code(&mismatch), 2);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("resolution mismatch"));

    let eval = ok(duiit(ws.path(), &["evaluate", "--checkpoint", ckpt, "--data", "data", "--source-modality", "source"]));
    let v: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(v["mse"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["n_samples"], 30);
    assert!(v["translation"]["fid"].as_f64().unwrap() >= 0.0);
}

#[test]
fn debug_identity_generator_translates_to_tanh_of_input() {
    let ws = workspace();
    let mut cfg = TranslatorConfig::for_resolution(1, (16, 16));
    cfg.generator = GeneratorConfig::debug_identity(1, (16, 16));
    cfg.discriminator.n_layers = 1;
    cfg.discriminator.base_filters = 2;
    let translator = TranslatorState::new(&cfg, 10.0, 1, Precision::F64).unwrap();
    let predictor = Predictor::new(PredictorConfig::small(1, (16, 16)), 1, Precision::F64, "P").unwrap();
    let path = ws.path().join("id.ckpt");
    Checkpoint { method: "ours".into(), step: 0, epoch: 0, predictor, translator: Some(translator) }.save(&path).unwrap();
    ok(duiit(ws.path(), &["translate", "--checkpoint", path.to_str().unwrap(), "--input", "data", "--out", "tr"]));
    let source = load_dataset(&ws.path().join("data"), &Modality::new("source")).unwrap();
    let out = load_dataset(&ws.path().join("tr"), &Modality::new("target")).unwrap();
    let quantum = 1.0 / 32767.5;
    for (a, b) in source.images().iter().zip(out.images()) {
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((f64::from(*x).tanh() - f64::from(*y)).abs() <= quantum, "{x} -> {y}");
        }
    }
}

fn fixture(method: &str, mean: f64, std: f64) -> RunReport {
    let entry = MetricEntry {
        mean,
        std,
        n_runs: 10,
        single_run: false,
        per_seed: Vec::new(),
        extractor: "none".into(),
        n_samples: 280,
        n_reference: None,
    };
    RunReport {
        schema_version: SCHEMA_VERSION,
        method: method.into(),
        config_hash: "shared".into(),
        data_hash: None,
        n_runs: 10,
        n_aborted: 0,
        mse: entry,
        is_mean: None,
        is_std: None,
        fid: None,
        runs: Vec::new(),
        wall_clock_secs: 0.0,
    }
}

fn write_fixtures(dir: &Path, rows: &[(&str, f64, f64)]) -> Vec<String> {
    rows.iter()
        .map(|(m, mean, std)| {
            let path = dir.join(format!("{m}.json"));
            fixture(m, *mean, *std).save(&path).unwrap();
            path.to_str().unwrap().to_string()
        })
        .collect()
}

/// MRI-to-CT age regression results reported for the original medical data.
const REFERENCE: [(&str, f64, f64); 6] = [
    ("pure", 103.88, 64.27),
    ("tl", 91.52, 13.88),
    ("mtl", 99.26, 22.12),
    ("dann", 88.13, 21.86),
    ("cyclegan", 147.06, 79.89),
    ("ours", 76.91, 8.31),
];

#[test]
fn compare_orders_reference_results_by_mean() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_fixtures(dir.path(), &REFERENCE[..1].iter().chain(&REFERENCE[5..]).copied().collect::<Vec<_>>());
    let out = ok(duiit(dir.path(), &["compare", &paths[0], &paths[1]]));
    let text = String::from_utf8(out.stdout).unwrap();
    let order: Vec<&str> = text.lines().skip(1).take(2).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(order, ["ours", "pure"]);

    let paths = write_fixtures(dir.path(), &REFERENCE);
    let args: Vec<&str> = ["compare", "--csv", "table.csv"].into_iter().chain(paths.iter().map(String::as_str)).collect();
    ok(duiit(dir.path(), &args));
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let methods: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(methods, ["ours", "dann", "tl", "mtl", "pure", "cyclegan"]);
    let std_of: HashMap<&str, f64> = rows.iter().map(|r| (r[0], r[2].parse().unwrap())).collect();
    assert_eq!(std_of["ours"], 8.31);
    assert!(rows.iter().all(|r| r[4] == "shared"));
}

#[test]
fn compare_identical_reports_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_fixtures(dir.path(), &[("ours", 76.91, 8.31)]).remove(0);
    let b = dir.path().join("copy.json");
    std::fs::copy(&a, &b).unwrap();
    let out = ok(duiit(dir.path(), &["compare", &a, b.to_str().unwrap()]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], lines[2]);
}

#[test]
fn compare_rejects_mixed_schema_versions_and_single_report() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_fixtures(dir.path(), &REFERENCE[..2]);
    let mut old: Value = serde_json::from_str(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
    old["schema_version"] = (SCHEMA_VERSION + 1).into();
    std::fs::write(&paths[1], old.to_string()).unwrap();
    let out = duiit(dir.path(), &["compare", &paths[0], &paths[1]]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema version"));
    assert_eq!(code(&duiit(dir.path(), &["compare", &paths[0]])), 2);
}
