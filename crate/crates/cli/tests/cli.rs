use std::path::Path;
use std::process::{Command, Output};

use csiforge::chansim::read_dataset;
use csiforge::quantizer::CsiBitstream;
use csiforge::trainer::load_checkpoint;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csiforge"))
        .args(args)
        .env_remove("CSIFORGE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn gen_data_writes_requested_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "d.bin");
    ok(&["gen-data", "--profile", "desk", "--samples", "100", "--out", &data]);
    assert_eq!(read_dataset(&data).unwrap().samples.len(), 100);
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn structured_errors_exit_nonzero() {
    let out = run(&["train", "--data", "/nonexistent/d.bin"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(
        &cfg,
        format!("samples = 7\nout = {}\nseed = 3\n", p(dir.path(), "a.bin")),
    )
    .unwrap();
    ok(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(read_dataset(dir.path().join("a.bin")).unwrap().samples.len(), 7);
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--samples", "4"]);
    assert_eq!(read_dataset(dir.path().join("a.bin")).unwrap().samples.len(), 4);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_csiforge"))
        .args(["gen-data", "--samples", "2"])
        .env("CSIFORGE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data.bin").exists());
}

#[test]
fn train_encode_decode_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "d.bin");
    let ck = p(dir.path(), "s1.ckpt");
    let log = p(dir.path(), "log.csv");
    ok(&["gen-data", "--samples", "64", "--uplink", "--seed", "5", "--out", &data]);
    ok(&[
        "train", "--data", &data, "--epochs", "1", "--out", &ck, "--log", &log, "--seed", "2",
    ]);
    let checkpoint = load_checkpoint(&ck).unwrap();
    assert!(checkpoint.meta.best_val.is_finite());
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().next().unwrap(), "epoch,rate,train_loss,val_loss");
    assert_eq!(log_text.lines().count(), 1 + 5);

    let bits = p(dir.path(), "f.csib");
    let rec = p(dir.path(), "h.bin");
    ok(&[
        "encode",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--index",
        "3",
        "--rate",
        "76",
        "--out",
        &bits,
    ]);
    ok(&["decode", "--checkpoint", &ck, "--bits", &bits, "--out", &rec]);

    let ds = read_dataset(&data).unwrap();
    let (codec, store) = checkpoint.codec().unwrap();
    let expected_bits = codec.encode(&store, &ds.samples[3].downlink, 76).unwrap();
    assert_eq!(CsiBitstream::load(&bits).unwrap(), expected_bits);
    let expected = codec.decode(&store, &expected_bits, None).unwrap().to_f32_precision();
    assert_eq!(read_dataset(&rec).unwrap().samples[0].downlink, expected);

    let csv = p(dir.path(), "sweep.csv");
    ok(&[
        "sweep",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--rates",
        "48:144:8",
        "--snrs",
        "inf,10",
        "--out",
        &csv,
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("snr_db,mode,rate"));
    assert_eq!(lines.len(), 1 + 13 * 2);
    assert!(lines
        .iter()
        .any(|l| l.contains(",csi_only,76,") || l.contains(",csi_only,72,")));
    assert!(dir.path().join("sweep_baselines.csv").exists());

    // fused mode needs a fused checkpoint
    let out = run(&[
        "sweep",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--modes",
        "fused",
        "--out",
        &csv,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusion"));
}

#[test]
fn finetune_and_fused_decode() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "d.bin");
    let s1 = p(dir.path(), "s1.ckpt");
    let s2 = p(dir.path(), "s2.ckpt");
    ok(&["gen-data", "--samples", "40", "--uplink", "--out", &data]);
    ok(&["train", "--data", &data, "--epochs", "1", "--out", &s1]);
    ok(&[
        "finetune", "--data", &data, "--stage1", &s1, "--epochs", "1", "--out", &s2,
    ]);
    let ck = load_checkpoint(&s2).unwrap();
    assert!(ck.is_frozen("encoder") && !ck.is_frozen("fusion"));
    let bits = p(dir.path(), "f.csib");
    let rec = p(dir.path(), "h.bin");
    ok(&[
        "encode",
        "--checkpoint",
        &s2,
        "--data",
        &data,
        "--index",
        "1",
        "--rate",
        "48",
        "--out",
        &bits,
    ]);
    ok(&[
        "decode",
        "--checkpoint",
        &s2,
        "--bits",
        &bits,
        "--sensor-from",
        &data,
        "--index",
        "1",
        "--out",
        &rec,
    ]);
    assert!(read_dataset(&rec).unwrap().samples[0].downlink.is_finite());
    ok(&[
        "eval",
        "--checkpoint",
        &s2,
        "--data",
        &data,
        "--rates",
        "48,144",
        "--mode",
        "fused",
    ]);
}
