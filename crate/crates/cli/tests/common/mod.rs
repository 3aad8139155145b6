#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_SPEC: &str = r#"
feature_dim = 8
samples_per_frame = 16
noise_sigma = 0.05
phonemes_per_utterance = [3, 5]
duration_frames = [2, 4]
seed = 7

[[languages]]
id = "A"
inventory = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]
speakers = 2
train_utterances = 6
heldout_utterances = 2
transcribed = true

[[languages]]
id = "B"
inventory = [4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27]
speakers = 1
train_utterances = 6
heldout_utterances = 2
transcribed = false
"#;

pub const SMALL_RUN: &str = r#"
seed = 5

[model]
speakers = 2
dec_hidden = 16
enc_channels = 8

[train]
step_count = 12
vocoder_steps = 6
batch_size = 4
vocoder_batch_size = 2
eval_every = 4

[adapt]
step_count = 8
vocoder_steps = 4
batch_size = 3
eval_every = 4

[weld]
step_count = 6
batch_size = 3
eval_every = 3

[eval]
items = 4

[grad_check]
seeds = 1
max_entries = 2
"#;

pub fn lle() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lle"));
    c.env_remove("LLE_SEED");
    c
}

/// Runs `lle args...` in `dir`.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    lle().current_dir(dir).args(args).output().expect("lle runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert_eq!(
        code(&o),
        0,
        "lle {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Writes the small spec and run config into `dir`.
pub fn setup(dir: &Path) {
    fs::write(dir.join("spec.toml"), SMALL_SPEC).unwrap();
    fs::write(dir.join("run.toml"), SMALL_RUN).unwrap();
}

/// gen-data → train → adapt → weld → tts/vc in `dir`.
pub fn pipeline(dir: &Path, threads: &str) {
    setup(dir);
    let t = ["--threads", threads];
    let with = |args: &[&'static str]| -> Vec<&str> { [&t[..], args].concat() };
    ok(dir, &with(&["gen-data", "--spec", "spec.toml", "--out", "data"]));
    ok(dir, &with(&["train", "--config", "run.toml", "--data", "data", "--out", "ck/initial.ckpt"]));
    ok(dir, &with(&["adapt", "--config", "run.toml", "--data", "data", "--in", "ck/initial.ckpt", "--out", "ck/adapted.ckpt"]));
    ok(dir, &with(&["weld", "--config", "run.toml", "--data", "data", "--in", "ck/adapted.ckpt", "--out", "ck/welded.ckpt"]));
    ok(dir, &with(&["tts", "--ckpt", "ck/welded.ckpt", "--phonemes", "data/phonemes/A00_heldout000.txt", "--out", "tts.llew", "--features", "tts.llef", "--pcm", "tts.wav", "--seed", "9"]));
    ok(dir, &with(&["vc", "--ckpt", "ck/welded.ckpt", "--source", "data/features/A01_heldout001.llef", "--out", "vc.llew", "--features", "vc.llef", "--seed", "9"]));
}

/// Relative path → bytes of every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
