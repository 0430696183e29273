mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcmnet::config::Config;
use pcmnet::eval::CvReport;
use pcmnet::feature_store::{Dims, SynthConfig};
use serde_json::Value;

fn pcmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcmnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, n: usize, present: f64) -> PathBuf {
    let mut cfg: Config = common::small_config();
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 4;
    cfg.synth = SynthConfig { n_samples: n, noise_std: 0.3, seed: 2, dims: common::small_dims(), visual_present_prob: present, ..SynthConfig::default() };
    let path = dir.join(format!("cfg_{n}_{present}.toml"));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn synth_data(dir: &Path, n: usize, present: f64, name: &str) -> PathBuf {
    let cfg = write_config(dir, n, present);
    let out = dir.join(name);
    let o = pcmnet(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_data(d, 8, 0.75, "data");
    assert!(data.join("manifest.json").exists());
    let cfg = write_config(d, 8, 0.75);
    let runs = d.join("runs");
    let o = pcmnet(&["train", "--config", s(&cfg), "--data", s(&data), "--fold", "1", "--k", "2", "--out", s(&runs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fold = runs.join("fold1");
    for f in ["best.pcmc", "history.csv", "test_metrics.json"] {
        assert!(fold.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(fold.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,L_cls,L_con,L_val,L_total,val_acc,val_macro_f1,stage"));
    assert_eq!(history.lines().count(), 3);

    let ckpt = fold.join("best.pcmc");
    let o = pcmnet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data.join("manifest.json"))]);
    assert_eq!(code(&o), 0);
    let m: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["macro_f1"].as_f64().unwrap() >= 0.0);

    // One sample whose visual subjects are all padding.
    let single = synth_data(d, 1, 0.0, "single");
    let out = d.join("export");
    let o = pcmnet(&["export", "--checkpoint", s(&ckpt), "--data", s(&single), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let att: Value = serde_json::from_str(&std::fs::read_to_string(out.join("attention.json")).unwrap()).unwrap();
    let branches = att[0]["branches"].as_array().unwrap();
    assert_eq!(branches[0]["branch"], "text_audio");
    assert_eq!(branches[0]["degenerate"], false);
    assert_eq!(branches[1]["branch"], "text_visual");
    assert_eq!(branches[1]["degenerate"], true);
    let routing = std::fs::read_to_string(out.join("routing.csv")).unwrap();
    let lines: Vec<&str> = routing.lines().collect();
    assert_eq!(lines[0], "id,label,pred,prob_sarcastic,a_mic,a_ctx,conflict_mode");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    let a: f64 = fields[4].parse::<f64>().unwrap() + fields[5].parse::<f64>().unwrap();
    assert!((a - 1.0).abs() < 1e-12);
    let emb: Value = serde_json::from_str(&std::fs::read_to_string(out.join("embeddings.json")).unwrap()).unwrap();
    assert_eq!(emb[0]["fused"].as_array().unwrap().len(), 16);
    assert_eq!(emb[0]["z_incon"].as_array().unwrap().len(), 8);
    for f in ["attention.json", "embeddings.json", "routing.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(!text.contains("NaN") && !text.contains("null"), "{f}");
    }
}

#[test]
fn cv_reports_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_data(d, 4, 0.75, "data");
    let cfg = write_config(d, 4, 0.75);
    let out = d.join("cv");
    let o = pcmnet(&["cv", "--config", s(&cfg), "--data", s(&data), "--k", "2", "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: CvReport = serde_json::from_str(&std::fs::read_to_string(out.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert_eq!(report.cv_seed, 3);
    let mean = report.folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / 2.0;
    assert_eq!(report.mean.macro_f1, mean);
    let sd = report.folds.iter().map(|f| (f.metrics.macro_f1 - mean).powi(2)).sum::<f64>().sqrt();
    assert_eq!(report.std.macro_f1, sd);
    assert!(out.join("fold0/history.csv").exists() && out.join("fold1/history.csv").exists());
    assert_eq!(report.folds.iter().map(|f| f.test_ids.len()).sum::<usize>(), 4);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[model]\nd_encc = 3\n").unwrap();
    let data = synth_data(d, 4, 0.75, "data");
    assert_eq!(code(&pcmnet(&["train", "--config", s(&bad), "--data", s(&data), "--fold", "0"])), 2);
    std::fs::write(&bad, "[model]\nd_enc = 10\nn_heads = 4\n").unwrap();
    assert_eq!(code(&pcmnet(&["train", "--config", s(&bad), "--data", s(&data), "--fold", "0"])), 2);
    let cfg = write_config(d, 4, 0.75);
    assert_eq!(code(&pcmnet(&["train", "--config", s(&cfg), "--data", s(&data), "--fold", "7", "--k", "2"])), 2);
    assert_eq!(code(&pcmnet(&["gradcheck", "--eps", "-1"])), 2);
    assert_eq!(code(&pcmnet(&["train", "--config", s(&d.join("absent.toml")), "--data", s(&data), "--fold", "0"])), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, 4, 0.75);
    let o = pcmnet(&["train", "--config", s(&cfg), "--data", s(&d.join("nowhere")), "--fold", "0"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing file"));
    let data = synth_data(d, 4, 0.75, "data");
    // Right magic, garbage body.
    let junk = d.join("junk.pcmc");
    std::fs::write(&junk, b"PCMCnot a checkpoint").unwrap();
    assert_eq!(code(&pcmnet(&["eval", "--checkpoint", s(&junk), "--data", s(&data)])), 3);
}

#[test]
fn gradcheck_reports_and_fails_numerically() {
    let o = pcmnet(&["gradcheck", "--scope", "fusion", "--per-group", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["groups"][0]["group"], "fusion");
    assert_eq!(r["groups"][0]["checked"], 20);
    let o = pcmnet(&["gradcheck", "--scope", "composition", "--per-group", "5", "--tolerance", "1e-300"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn mismatched_dims_between_checkpoint_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_data(d, 4, 0.75, "data");
    let cfg = write_config(d, 4, 0.75);
    let runs = d.join("runs");
    assert_eq!(code(&pcmnet(&["train", "--config", s(&cfg), "--data", s(&data), "--fold", "0", "--k", "2", "--out", s(&runs)])), 0);
    let mut other: Config = common::small_config();
    other.synth = SynthConfig { n_samples: 2, dims: Dims { d_t: 6, ..common::small_dims() }, ..SynthConfig::default() };
    let ocfg = d.join("other.toml");
    std::fs::write(&ocfg, other.to_toml()).unwrap();
    let odata = d.join("odata");
    assert_eq!(code(&pcmnet(&["synth", "--config", s(&ocfg), "--out", s(&odata)])), 0);
    let o = pcmnet(&["eval", "--checkpoint", s(&runs.join("fold0/best.pcmc")), "--data", s(&odata)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
