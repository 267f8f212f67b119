use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skiplayer::checkpoint::Checkpoint;
use skiplayer::train::{RecordEntry, Split};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skiplayer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, bytes: usize) -> PathBuf {
    let text = b"a stitch in time saves nine; ";
    let p = dir.join("corpus.txt");
    fs::write(&p, text.iter().copied().cycle().take(bytes).collect::<Vec<u8>>()).unwrap();
    p
}

fn write_config(dir: &Path, model_extra: &str, train_extra: &str) -> PathBuf {
    let text = format!(
        r#"[model]
n_layer = 2
n_head = 4
n_embd = 16
block_size = 16
vocab_size = 256
n_skip_layer = 1
n_skip_head = 2
{model_extra}

[train]
learning_rate = 3e-3
warmup_steps = 10
max_steps = 200
micro_batch = 4
eval_interval = 100
eval_iters = 3
checkpoint_every = 100
{train_extra}

[data]
train = "corpus.train.bin"
val = "corpus.val.bin"
out_dir = "out"
"#
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn prepared(bytes: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), bytes);
    let o = bin(&["prepare", "--input", s(&c), "--out", s(&dir.path().join("corpus.bin")), "--val-frac", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn records(path: &Path) -> Vec<RecordEntry> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_splits_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 1000);
    let out = dir.path().join("tok.bin");
    let o = bin(&["prepare", "--input", s(&c), "--out", s(&out), "--val-frac", "0.1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("train 900 tokens"), "{}", stdout(&o));
    assert!(stdout(&o).contains("val 100 tokens"));
    let train = dir.path().join("tok.train.bin");
    let first = fs::read(&train).unwrap();
    assert_eq!(first.len(), 20 + 2 * 900);
    bin(&["prepare", "--input", s(&c), "--out", s(&out), "--val-frac", "0.1"]);
    assert_eq!(fs::read(&train).unwrap(), first);
}

#[test]
fn prepare_rejects_bad_inputs_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 1000);
    let out = dir.path().join("x.bin");
    let o = bin(&["prepare", "--input", s(&c), "--out", s(&out), "--val-frac", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.train.bin").exists());

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, b"").unwrap();
    let o = bin(&["prepare", "--input", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));

    let o = bin(&["prepare", "--input", s(&dir.path().join("nope.txt")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.txt"));
}

#[test]
fn train_reports_missing_data_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", "");
    let o = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("corpus.train.bin"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = prepared(4000);
    let cfg = write_config(dir.path(), "n_skip_heads = 2", "");
    let o = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_skip_heads"));
}

#[test]
fn train_resume_eval_and_sample() {
    let dir = prepared(6000);
    let cfg = write_config(dir.path(), "", "");
    let out = dir.path().join("out");

    let o = bin(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = records(&out.join("record.jsonl"));
    let full_train: Vec<f64> = full.iter().filter(|e| e.split == Split::Train).map(|e| e.loss).collect();
    assert_eq!(full_train.len(), 200);

    // finished runs are left alone
    let o = bin(&["train", "--config", s(&cfg), "--resume", s(&out.join("last.slck"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("nothing to do"), "{}", stdout(&o));

    // resuming the step-100 checkpoint replays steps 101..200 exactly
    let o = bin(&["train", "--config", s(&cfg), "--resume", s(&out.join("step_000100.slck"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let all = records(&out.join("record.jsonl"));
    let resumed: Vec<f64> = all[full.len()..]
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.loss)
        .collect();
    assert_eq!(resumed, full_train[100..].to_vec());

    // eval reproduces the loss recorded when the checkpoint was written
    let best = out.join("best.slck");
    let ck = Checkpoint::load(&best).unwrap();
    let o = bin(&["eval", "--ckpt", s(&best)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let loss: f64 = text.split("val loss ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((loss - ck.val_at_save.unwrap()).abs() <= 1e-5, "{text}");

    // greedy sampling needs no seed
    let a = bin(&["sample", "--ckpt", s(&best), "--prompt", "a st", "--temperature", "1e-9", "--seed", "1"]);
    let b = bin(&["sample", "--ckpt", s(&best), "--prompt", "a st", "--temperature", "1e-9", "--seed", "2"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("a st"));

    // a changed config cannot resume the old run
    let cfg2 = write_config(dir.path(), "", "seed = 7");
    let o = bin(&["train", "--config", s(&cfg2), "--resume", s(&out.join("step_000100.slck"))]);
    assert_eq!(o.status.code(), Some(2));

    // a flipped payload bit is an integrity failure
    let mut bytes = fs::read(&best).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.slck");
    fs::write(&bad, bytes).unwrap();
    let o = bin(&["eval", "--ckpt", s(&bad)]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", "");
    let o = bin(&["gradcheck", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("h.1.attn.c_attn.weight"));
    let o = bin(&["gradcheck", "--config", s(&cfg), "--corrupt", "gelu"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn sweep_skiplayer_on_twelve_layers() {
    let dir = prepared(3000);
    let cfg_text = r#"[model]
n_layer = 12
n_head = 2
n_embd = 8
block_size = 8
vocab_size = 256

[train]
max_steps = 2
warmup_steps = 0
micro_batch = 2
eval_interval = 2
eval_iters = 1

[data]
train = "corpus.train.bin"
val = "corpus.val.bin"
out_dir = "sweep"
"#;
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, cfg_text).unwrap();
    let o = bin(&["sweep", "--config", s(&cfg), "--grid", "skiplayer"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("#SkipLayer"));
    let csv = fs::read_to_string(dir.path().join("sweep/sweep_skiplayer.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let layers: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(layers, vec!["0", "1", "3", "6", "9", "11"]);
    assert_eq!(rows[0][3], "-");
    let base: f64 = rows[0][2].parse().unwrap();
    for r in &rows[1..] {
        let loss: f64 = r[2].parse().unwrap();
        let impr: f64 = r[3].parse().unwrap();
        assert!((impr - (base - loss)).abs() <= 1e-6);
    }
}

#[test]
fn bench_requires_twenty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", "");
    let o = bin(&["bench", "--config", s(&cfg), "--steps", "10"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("need at least 20"), "{}", stderr(&o));
}

#[test]
fn bench_reports_delta_and_mac_parity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "", "");
    let o = bin(&["bench", "--config", s(&cfg), "--steps", "20", "--warmup", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("speed delta"));
    assert!(text.contains("(difference +0.0000%)"), "{text}");
}

#[test]
fn help_exits_cleanly() {
    let o = bin(&["--help"]);
    assert!(o.status.success());
    for cmd in ["prepare", "train", "sweep", "gradcheck", "bench", "sample", "eval"] {
        assert!(stdout(&o).contains(cmd));
    }
}
