use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rfsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn f32_len(path: &Path) -> u64 {
    std::fs::metadata(path).unwrap().len() / 4
}

fn write_f32(path: &Path, samples: impl IntoIterator<Item = f64>) {
    let bytes: Vec<u8> = samples.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).unwrap();
}

fn tiny_config(dir: &Path, window_len: usize) -> PathBuf {
    let path = dir.join("config.json");
    let json = format!(
        r#"{{
  "model": {{"feature_dim": 8, "encoder_layers": 1, "dual_path_stacks": 1, "heads": 2, "dropout": 0.1,
             "ffw_dim": 8, "kernel_size": 4, "stride": 2,
             "stft": {{"window_len": 64, "hop": 32, "fft_size": 64}},
             "window_len": {window_len}, "init_seed": 3}},
  "train": {{"epochs": 1, "batch_size": 2, "pairs_per_epoch": 2, "lr0": 0.001}}
}}"#
    );
    std::fs::write(&path, json).unwrap();
    path
}

fn synth(dir: &Path, kind: &str, count: usize, length: usize) -> PathBuf {
    let out = dir.join(kind);
    let o = rfsep(&["synth", "--kind", kind, "--count", &count.to_string(), "--length", &length.to_string(), "--seed", "5", "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

/// A freshly initialized tiny checkpoint with the given window length.
fn checkpoint(dir: &Path, window_len: usize) -> PathBuf {
    let lib = synth(dir, "frank", 2, window_len * 2);
    let ckpt = dir.join("model.ckpt");
    let cfg = tiny_config(dir, window_len);
    let o = rfsep(&["train", "--train-lib", s(&lib), "--config", s(&cfg), "--out-checkpoint", s(&ckpt), "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    ckpt
}

#[test]
fn synth_writes_records_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), "barker", 3, 20_000);
    for i in 0..3 {
        assert_eq!(f32_len(&out.join(format!("barker_{i:05}.f32"))), 20_000);
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["kind"], "barker");
}

#[test]
fn smoke_succeeds_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = rfsep(&["smoke", "--seed", "11", "--out-dir", s(&a)]);
    assert!(first.status.success(), "{}", stderr(&first));
    let second = rfsep(&["smoke", "--seed", "11", "--out-dir", s(&b)]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(std::fs::read(a.join("smoke.json")).unwrap(), std::fs::read(b.join("smoke.json")).unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("smoke.json")).unwrap()).unwrap();
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
}

#[test]
fn smoke_rejects_an_invalid_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, b"").unwrap();
    let o = rfsep(&["smoke", "--out-dir", s(&file.join("sub"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not a directory"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rfsep(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rfsep(&["synth", "--kind", "lfm", "--count", "1", "--out-dir", "x"]).status.code(), Some(1));
    assert_eq!(rfsep(&["eval"]).status.code(), Some(1));
    assert_eq!(rfsep(&["--help"]).status.code(), Some(0));
}

#[test]
fn separate_pads_short_input_and_truncates_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path(), 2048);
    let input = dir.path().join("short.f32");
    write_f32(&input, (0..100).map(|i| (i as f64 * 0.3).sin() * 0.5));
    let out = dir.path().join("sep");
    let o = rfsep(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--out-dir", s(&out), "--plots"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(f32_len(&out.join("source0.f32")), 100);
    assert_eq!(f32_len(&out.join("source1.f32")), 100);
    assert!(out.join("mixture.png").is_file());
}

#[test]
fn separate_single_and_stacked_windows() {
    let dir = tempfile::tempdir().unwrap();
    let w = 65_280;
    let ckpt = checkpoint(dir.path(), w);
    let tone = |f: f64, n: usize| (0..n).map(move |i| (f * i as f64).sin() * 0.3).collect::<Vec<f64>>();

    let single = dir.path().join("single.f32");
    write_f32(&single, tone(0.2, w));
    let out = dir.path().join("one");
    let o = rfsep(&["separate", "--checkpoint", s(&ckpt), "--input", s(&single), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(f32_len(&out.join("source0.f32")), w as u64);
    assert_eq!(f32_len(&out.join("source1.f32")), w as u64);

    let (a, b) = (tone(0.2, 3 * w), tone(1.1, 3 * w));
    let (ta, tb, mix) = (dir.path().join("a.f32"), dir.path().join("b.f32"), dir.path().join("mix.f32"));
    write_f32(&ta, a.iter().copied());
    write_f32(&tb, b.iter().copied());
    write_f32(&mix, a.iter().zip(&b).map(|(x, y)| x + y));
    let out = dir.path().join("three");
    let o = rfsep(&["separate", "--checkpoint", s(&ckpt), "--input", s(&mix), "--out-dir", s(&out), "--truths", s(&ta), s(&tb)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(f32_len(&out.join("source0.f32")), 3 * w as u64);
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 2 window boundaries"));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let input = dir.path().join("x.f32");
    write_f32(&input, [0.0; 16]);
    let out = dir.path().join("out");
    let o = rfsep(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
    assert!(!out.exists());

    let missing = rfsep(&["separate", "--checkpoint", s(&dir.path().join("none.ckpt")), "--input", s(&input), "--out-dir", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_then_eval_writes_history_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let train_lib = synth(dir.path(), "costas", 2, 20_000);
    let test_lib = synth(dir.path(), "p3", 2, 20_000);
    let cfg = tiny_config(dir.path(), 2048);
    let (ckpt, log) = (dir.path().join("run/model.ckpt"), dir.path().join("run/history.csv"));
    let o = rfsep(&[
        "train", "--train-lib", s(&train_lib), "--test-lib", s(&test_lib), "--config", s(&cfg),
        "--out-checkpoint", s(&ckpt), "--log", s(&log), "--epochs", "2", "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,test_loss_sim,test_loss_real");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));

    let report = dir.path().join("eval/report.json");
    let plots = dir.path().join("eval/plots");
    let o = rfsep(&[
        "eval", "--checkpoint", s(&ckpt), "--test-lib", s(&test_lib), "--report", s(&report), "--plots", s(&plots), "--windows", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["mean_sd_sdr"].as_f64().unwrap().is_finite());
    assert_eq!(r["windows"], 3);
    assert_eq!(r["model"]["window_len"], 2048);
    assert!(r["swap_rate"].as_f64().unwrap() >= 0.0);
    assert!(plots.join("sample00_mixture.png").is_file());
    assert!(plots.join("sample00_estimate1.png").is_file());
}

#[test]
fn plot_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.f32");
    write_f32(&input, (0..4096).map(|i| (i as f64 * 0.05 * (1.0 + i as f64 / 4096.0)).sin()));
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        let o = rfsep(&["plot", "--input", s(&input), "--out", s(out), "--window-len", "128", "--hop", "64"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let odd = rfsep(&["plot", "--input", s(&input), "--out", s(&a), "--window-len", "127"]);
    assert_eq!(odd.status.code(), Some(1));
}
