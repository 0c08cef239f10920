use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emdepart::checkpoint::{self, Dtype};
use emdepart::config_file::ConfigFile;
use emdepart::dataset::load_dataset;
use emdepart_core::data::OovPolicy;
use emdepart_core::trainer::{TrainData, Trainer};
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emdepart")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = bin(&[
        "gen-synth", "--out", s(&data), "--word-dim", "8", "--r0", "8", "--n", "3", "--m", "6",
        "--images-per-class", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

const SMOKE: &str = r#"{"model": {"r": 16, "sdm_layers": 1, "encoder_blocks": 1}, "train": {"epochs": 2}}"#;

fn smoke_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = tiny_data(dir);
    let cfg = smoke_config(dir, SMOKE);
    let ckpt = dir.join("model.ckpt");
    let out = bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, ckpt)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synth_is_loadable_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny_data(tmp.path());
    let ds = load_dataset(&a, OovPolicy::Skip).unwrap();
    assert_eq!(ds.bank.num_images(), 25 * 8);
    assert!(ds.views.is_some());

    let b = tmp.path().join("again");
    let out = bin(&[
        "gen-synth", "--out", s(&b), "--word-dim", "8", "--r0", "8", "--n", "3", "--m", "6",
        "--images-per-class", "8",
    ]);
    assert!(out.status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn one_view_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["gen-synth", "--out", s(&tmp.path().join("d")), "--views", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_flags_and_unknown_config_keys_exit_1() {
    assert_eq!(bin(&["train", "--bogus"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = smoke_config(tmp.path(), r#"{"train": {"epochz": 2}}"#);
    let out = bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(tmp.path());
    let csv = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,L_global,L_local,L_var,L_div,S_var_V,S_var_T,val_T1,val_H");
    assert_eq!(lines.len(), 3);
    let c = checkpoint::load(&ckpt).unwrap();
    assert_eq!((c.epoch, c.config.model.r), (2, 16));
}

#[test]
fn missing_data_dir_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = bin(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn ablate_flags_reach_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = smoke_config(tmp.path(), r#"{"model": {"r": 16, "sdm_layers": 1, "encoder_blocks": 1}, "train": {"epochs": 1}}"#);
    let ckpt = tmp.path().join("m.ckpt");
    let out = bin(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--ablate", "no-global", "--ablate",
        "no-partial-score",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = checkpoint::load(&ckpt).unwrap();
    assert!(c.config.model.no_global && c.config.eval.no_partial_score);
    assert!(!c.config.model.no_residual);
}

#[test]
fn resume_through_a_checkpoint_file_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tiny_data(tmp.path());
    let ds = load_dataset(&data_dir, OovPolicy::Skip).unwrap();
    let part = ds.splits.test_partition(&ds.bank);
    let data = TrainData { bank: &ds.bank, docs: &ds.docs, part: &part };
    let cfg = ConfigFile::parse(SMOKE, Path::new("smoke")).unwrap().experiment();

    let mut straight = Trainer::new(&cfg, ds.bank.r0(), ds.docs.word_dim()).unwrap();
    straight.run(data).unwrap();

    let mut first = Trainer::new(&cfg, ds.bank.r0(), ds.docs.word_dim()).unwrap();
    first.run_epoch(data).unwrap();
    let path = tmp.path().join("half.ckpt");
    checkpoint::save(&path, &first.checkpoint(), Dtype::F64).unwrap();
    let mut resumed = Trainer::from_checkpoint(&checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(data).unwrap();

    assert_eq!(resumed.metrics_csv(), straight.metrics_csv());
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
}

#[test]
fn eval_reports_for_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let zsl = json(&bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "zsl"]));
    assert!(zsl["U"].is_null() && zsl["S"].is_null() && zsl["H"].is_null());
    assert_eq!(zsl["per_class"].as_object().unwrap().len(), 5);
    let t1 = zsl["T1"].as_f64().unwrap();

    let gzsl = json(&bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--gamma-cs", "0"]));
    assert_eq!(gzsl["gamma_cs"].as_f64(), Some(0.0));
    assert_eq!(gzsl["T1"].as_f64(), Some(t1));
    let (u, sv, h) = (gzsl["U"].as_f64().unwrap(), gzsl["S"].as_f64().unwrap(), gzsl["H"].as_f64().unwrap());
    assert!((h - emdepart_core::inference::harmonic_mean(u, sv)).abs() < 1e-12);

    // A penalty above every score difference leaves only unseen predictions.
    let big = json(&bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--gamma-cs", "100"]));
    assert_eq!(big["S"].as_f64(), Some(0.0));
    assert_eq!(big["U"].as_f64(), Some(t1));

    // Without --gamma-cs the penalty is selected on the validation classes.
    let sel = json(&bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]));
    assert!(sel["gamma_cs"].as_f64().is_some());
}

#[test]
fn eval_rejects_p_above_k() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let out = bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--p", "9"]);
    assert_eq!(out.status.code(), Some(1));
    let ok = bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--p", "4", "--gamma-cs", "0"]);
    assert_eq!(json(&ok)["p"].as_u64(), Some(4));
}

#[test]
fn diagnose_dumps_have_documented_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let out_dir = tmp.path().join("diag");
    let out = bin(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let read = |name: &str| -> Value { serde_json::from_slice(&fs::read(out_dir.join(name)).unwrap()).unwrap() };
    let svar = read("svar.json");
    assert!(svar["S_var_V"].as_f64().unwrap() >= 0.0);
    let red = read("redundancy.json");
    let m = red["classes"]["0"].as_array().unwrap();
    assert_eq!((m.len(), m[0].as_array().unwrap().len()), (4, 4));

    let attn = read("attention.json");
    let (_, img) = attn["images"].as_object().unwrap().iter().next().unwrap();
    let img = img.as_array().unwrap();
    assert_eq!(img.len(), 1);
    let views = img[0].as_array().unwrap();
    assert_eq!(views.len(), 4);
    assert_eq!(views[0].as_array().unwrap().len(), 3);
    let row_sum: f64 = views[0].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((row_sum - 1.0).abs() < 1e-12);
    let doc = attn["classes"]["0"].as_array().unwrap();
    assert_eq!(doc[0].as_array().unwrap()[0].as_array().unwrap().len(), 6);

    let tsv = fs::read_to_string(out_dir.join("embeddings.tsv")).unwrap();
    let meta = fs::read_to_string(out_dir.join("embeddings_meta.tsv")).unwrap();
    assert_eq!(tsv.lines().count() + 1, meta.lines().count());
    assert!(tsv.lines().all(|l| l.split('\t').count() == 16));
}

#[test]
fn score_dumps_matrices_masks_and_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let v = json(&bin(&[
        "score", "--ckpt", s(&ckpt), "--data", s(&data), "--images", "0,7", "--classes", "0,1,2", "--p", "2",
    ]));
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 6);
    let first = &pairs[0];
    assert_eq!(first["cosine"].as_array().unwrap().len(), 4);
    for row in first["mask_visual"].as_array().unwrap() {
        assert_eq!(row.as_array().unwrap().iter().filter(|b| b.as_bool().unwrap()).count(), 2);
    }
    assert!(first["S_p"].as_f64().unwrap().is_finite());
    let bad = bin(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--p", "5"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn grad_check_exit_codes() {
    let ok = bin(&["grad-check", "--seed", "1"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(json(&ok)["passed"], Value::Bool(true));
    let fail = bin(&["grad-check", "--tol", "0"]);
    assert_eq!(fail.status.code(), Some(3));
    let v: Value = serde_json::from_slice(&fail.stdout).unwrap();
    assert!(v["terms"].as_array().unwrap().iter().any(|t| !t["worst"]["name"].is_null()));
}

#[test]
fn sweep_keeps_the_better_lambda_div() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = smoke_config(tmp.path(), SMOKE);
    let table = tmp.path().join("sweep.csv");
    let out = bin(&[
        "sweep", "--config", s(&cfg), "--data", s(&data), "--out", s(&table), "--axis", "lambda_div=0,3",
    ]);
    let best = json(&out);
    let csv = fs::read_to_string(&table).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let h: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let want = if h[1] > h[0] { 3.0 } else { 0.0 };
    assert_eq!(best["alignment"]["lambda_div"].as_f64(), Some(want));
}

#[test]
fn show_config_round_trips() {
    let out = bin(&["show-config", "--preset", "cub"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["preset"] = Value::String("cub".into());
    let parsed = ConfigFile::parse(&v.to_string(), Path::new("x")).unwrap();
    assert_eq!(parsed.experiment(), emdepart_core::config::ExperimentConfig::cub());
}
