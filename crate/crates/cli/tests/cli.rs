//! End-to-end checks of the command-line surface: every subcommand, exit
//! codes, and the reproducibility contract of run artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

use moelora_core::backbone::{AdapterMode, BackboneConfig};
use moelora_core::checkpoint::Checkpoint;
use moelora_core::model::Model;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moelora"))
}

fn tiny_model_args() -> Vec<String> {
    [
        "layers=1",
        "model_dim=8",
        "heads=2",
        "ffn_dim=16",
        "num_experts=2",
        "top_k=2",
        "lora_rank=2",
        "head_hidden=6",
        "max_epochs=1",
        "batch_size=8",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect()
}

fn gen_tiny_data(dir: &Path) {
    let out = bin()
        .args([
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "7",
            "--train",
            "24",
            "--dev",
            "12",
            "--eval",
            "12",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn count_params_prints_table_rows() {
    let out = bin()
        .args(["count-params", "--experts", "3", "--rank", "8", "--mode", "paper"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("5.76M"), "{text}");
    let out = bin()
        .args(["count-params", "--experts", "1", "--rank", "4", "--mode", "paper"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("1.23M"), "{text}");
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(err.contains("usage"), "{err}");
}

#[test]
fn unknown_flag_exits_2() {
    let out = bin().args(["count-params", "--bogus", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_error_exits_1_with_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            dir.path().join("missing.ckpt").to_str().unwrap(),
            "--data",
            dir.path().to_str().unwrap(),
            "--split",
            "dev",
            "--scores",
            dir.path().join("s.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn gen_data_writes_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_data(dir.path());
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("clips.bin").exists());
    assert!(dir.path().join("splits.csv").exists());
    let csv = fs::read_to_string(dir.path().join("splits.csv")).unwrap();
    assert!(csv.starts_with("id,split,family,label\n"));
    // 24 + 12 + 12 + 12 clips plus header
    assert_eq!(csv.lines().count(), 1 + 60);
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen_tiny_data(&data);

    let mut args = vec![
        "train".to_string(),
        "--data".to_string(),
        data.to_str().unwrap().to_string(),
        "--out".to_string(),
        run.to_str().unwrap().to_string(),
    ];
    args.extend(tiny_model_args());
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.bin").exists());
    assert!(run.join("train_log.csv").exists());
    assert!(run.join("config_echo").exists());
    assert!(run.join("manifest.json").exists());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,dev_eer,lr\n"));

    // eval is side-effect-free on checkpoint and dataset
    let ckpt_before = fs::read(run.join("checkpoint.bin")).unwrap();
    let data_before = fs::read(data.join("clips.bin")).unwrap();
    let scores = dir.path().join("scores.csv");
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "eval_id",
            "--scores",
            scores.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("EER"), "{text}");
    assert!(text.contains("A01"), "per-family EER missing: {text}");
    let score_text = fs::read_to_string(&scores).unwrap();
    assert!(score_text.starts_with("id,score,label,family,split\n"));
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), ckpt_before);
    assert_eq!(fs::read(data.join("clips.bin")).unwrap(), data_before);

    // expert analysis on the trained checkpoint
    let svd_csv = dir.path().join("experts.csv");
    let out = bin()
        .args([
            "analyze-experts",
            "--ckpt",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--out",
            svd_csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svd = fs::read_to_string(&svd_csv).unwrap();
    assert!(svd.starts_with("site,layer,expert,sigma_max\n"));
    // 1 layer x 4 sites x 2 experts
    assert_eq!(svd.lines().count(), 1 + 8);
}

#[test]
fn eval_on_untrained_adapted_and_plain_checkpoints_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_data(&data);

    let base = BackboneConfig {
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        num_experts: 2,
        top_k: 2,
        lora_rank: 2,
        head_hidden: 6,
        ..BackboneConfig::default()
    };
    let plain_cfg = BackboneConfig {
        adapter_mode: AdapterMode::None,
        ..base.clone()
    };
    let moe = Model::build(&base, 99).unwrap();
    let plain = Model::build(&plain_cfg, 99).unwrap();
    let moe_ckpt = dir.path().join("moe.ckpt");
    let plain_ckpt = dir.path().join("plain.ckpt");
    Checkpoint::capture(&moe, 0, 0.5, 0, &[]).save(&moe_ckpt).unwrap();
    Checkpoint::capture(&plain, 0, 0.5, 0, &[]).save(&plain_ckpt).unwrap();

    let run_eval = |ckpt: &Path, out_name: &str| -> Vec<u8> {
        let scores = dir.path().join(out_name);
        let out = bin()
            .args([
                "eval",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--split",
                "dev",
                "--scores",
                scores.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(&scores).unwrap()
    };
    let a = run_eval(&moe_ckpt, "a.csv");
    let b = run_eval(&plain_ckpt, "b.csv");
    assert_eq!(a, b, "zero-init adapted scores differ from adapter-free");
}

#[test]
fn seed_study_emits_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_data(&data);
    let cfg_file = dir.path().join("run.cfg");
    fs::write(
        &cfg_file,
        format!(
            "layers = 1\nmodel_dim = 8\nheads = 2\nffn_dim = 16\nnum_experts = 2\ntop_k = 2\nlora_rank = 2\nhead_hidden = 6\nmax_epochs = 1\nbatch_size = 8\ndata_dir = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let out_csv = dir.path().join("study.csv");
    let out = bin()
        .args([
            "seed-study",
            "--config",
            cfg_file.to_str().unwrap(),
            "--seeds",
            "1,2,3",
            "--out",
            out_csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&out_csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("split,n_seeds,mean_eer,std_eer"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 2); // eval_id and eval_ood
    for line in body {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[1], "3");
        let std: f64 = parts[3].parse().unwrap();
        assert!(std.is_finite() && std >= 0.0);
    }
}

#[test]
fn grad_check_reports_small_error() {
    let out = bin().args(["grad-check"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative gradient error"), "{text}");
}

#[test]
fn train_is_reproducible_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_data(&data);
    let run_once = |name: &str| -> Vec<u8> {
        let run = dir.path().join(name);
        let mut args = vec![
            "train".to_string(),
            "--data".to_string(),
            data.to_str().unwrap().to_string(),
            "--out".to_string(),
            run.to_str().unwrap().to_string(),
        ];
        args.extend(tiny_model_args());
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(run.join("checkpoint.bin")).unwrap()
    };
    assert_eq!(run_once("r1"), run_once("r2"));
}
