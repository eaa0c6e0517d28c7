use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbm_cli::pgm::Gray;

fn nbm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbm"))
        .args(args)
        .current_dir(dir)
        .env("NBM_THREADS", "1")
        .output()
        .expect("spawn nbm")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const SYNTH: &str = r#"
output_dir = "run"
model.n_h = 3
model.hidden = 6
model.dtype = "f64"
train.epochs = 2
train.batch_size = 25
train.k_steps = 4
[data]
source = "synth_gaussian"
class_means = [[0.2, -0.2, 0.0, 0.1], [-0.1, 0.1, 0.3, 0.0]]
class_variances = [[0.5, 0.5, 0.5, 0.5], [1.0, 1.0, 0.8, 0.8]]
samples_per_class = 50
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Tiny uncompressed IDX pair: `n` 3x3 images with labels `i % 2`.
fn write_idx(dir: &Path, n: usize) {
    let mut img = vec![0, 0, 8, 3];
    for d in [n as u32, 3, 3] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    for i in 0..n {
        img.extend((0..9).map(|p| if (p + i) % 2 == 0 { 250u8 } else { 5 }));
    }
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend((0..n).map(|i| (i % 2) as u8));
    fs::write(dir.join("img.idx"), img).unwrap();
    fs::write(dir.join("lab.idx"), lab).unwrap();
}

#[test]
fn train_sample_inspect_round() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "synth.toml", SYNTH);
    let out = nbm(&["train", "--config", "synth.toml", "--set", "train.seed=4"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.nbm", "metrics.csv", "config.resolved.toml"] {
        assert!(dir.join("run").join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(dir.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let resolved = fs::read_to_string(dir.join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("train.seed = 4"));

    let out = nbm(
        &["sample", "--ckpt", "run/model.nbm", "--labels", "1,0,1", "--per-label", "2", "--out", "s.pgm"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let g = Gray::decode(&fs::read(dir.join("s.pgm")).unwrap()).expect("valid PGM");
    assert_eq!((g.width, g.height), (3 * 2 + 4 * 2, 2 * 2 + 3 * 2));

    let out = nbm(&["inspect", "--ckpt", "run/model.nbm", "--out", "i.pgm"], dir);
    assert_eq!(code(&out), 0);
    let g = Gray::decode(&fs::read(dir.join("i.pgm")).unwrap()).expect("valid PGM");
    assert_eq!((g.width, g.height), (2 * 2 + 3 * 2, 4 * 2 + 5 * 2));

    let out = nbm(&["sample", "--ckpt", "run/model.nbm", "--init-mode", "mean", "--mean", "--out", "m.pgm"], dir);
    assert_eq!(code(&out), 0);

    let out = nbm(&["sample", "--ckpt", "run/model.nbm", "--labels", "5", "--out", "x.pgm"], dir);
    assert_eq!(code(&out), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "a.toml", &SYNTH.replace("\"run\"", "\"a\""));
    write_config(dir, "b.toml", &SYNTH.replace("\"run\"", "\"b\""));
    assert_eq!(code(&nbm(&["train", "--config", "a.toml"], dir)), 0);
    assert_eq!(code(&nbm(&["train", "--config", "b.toml", "--set", "train.max_steps=4"], dir)), 0);
    let out = nbm(&["train", "--config", "b.toml", "--resume", "b/model.nbm"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(dir.join("a/metrics.csv")).unwrap(), fs::read(dir.join("b/metrics.csv")).unwrap());
    assert_eq!(fs::read(dir.join("a/model.nbm")).unwrap(), fs::read(dir.join("b/model.nbm")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "a.toml", &SYNTH.replace("\"run\"", "\"a\""));
    write_config(dir, "b.toml", &SYNTH.replace("\"run\"", "\"b\""));
    assert_eq!(code(&nbm(&["train", "--config", "a.toml"], dir)), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_nbm"))
        .args(["train", "--config", "b.toml"])
        .current_dir(dir)
        .env("NBM_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(dir.join("a/metrics.csv")).unwrap(), fs::read(dir.join("b/metrics.csv")).unwrap());
}

#[test]
fn ising_training_on_idx_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_idx(dir, 40);
    write_config(
        dir,
        "ising.toml",
        "model.kind = \"ising\"\nmodel.n_h = 2\nmodel.hidden = 4\ndata.images = \"img.idx\"\n\
         data.labels = \"lab.idx\"\ndata.n_classes = 2\ntrain.epochs = 1\ntrain.batch_size = 10\n",
    );
    let out = nbm(&["train", "--config", "ising.toml"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = nbm(&["sample", "--ckpt", "run/model.nbm", "--out", "s.pgm", "--per-label", "1"], dir);
    assert_eq!(code(&out), 0);
    let g = Gray::decode(&fs::read(dir.join("s.pgm")).unwrap()).unwrap();
    assert!(g.pixels.iter().all(|&p| p == 0 || p == 255), "ising tiles are binary");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "synth.toml", SYNTH);
    assert_eq!(code(&nbm(&["train", "--config", "synth.toml", "--set", "train.bogus=1"], dir)), 2);
    assert_eq!(code(&nbm(&["train", "--config", "missing.toml"], dir)), 2);
    write_config(dir, "idx.toml", "data.images = \"none.gz\"\ndata.labels = \"none.gz\"\n");
    assert_eq!(code(&nbm(&["train", "--config", "idx.toml"], dir)), 2);
    assert!(!dir.join("run").exists(), "no outputs before validation");
}

#[test]
fn numeric_blowup_exits_3_with_partial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "synth.toml", SYNTH);
    let out = nbm(&["train", "--config", "synth.toml", "--set", "train.learning_rate=1e30"], dir);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("run/model.partial.nbm").is_file());
    assert!(!dir.join("run/model.nbm").exists());
}

#[test]
fn bad_checkpoints_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("junk.nbm"), b"NBM0 not a checkpoint").unwrap();
    assert_eq!(code(&nbm(&["inspect", "--ckpt", "junk.nbm", "--out", "o.pgm"], dir)), 4);
    assert_eq!(code(&nbm(&["inspect", "--ckpt", "absent.nbm", "--out", "o.pgm"], dir)), 4);
}

#[test]
fn check_command_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = nbm(&["check", "--fast"], tmp.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let faulty = nbm(&["check", "--fast", "--inject-fault", "logcosh-sign"], tmp.path());
    assert_eq!(code(&faulty), 1);
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL"));
}
