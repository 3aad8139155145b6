mod common;

use std::fs;

use common::{code, lle, ok, pipeline, run, setup, tree};
use lle_core::corpus::{read_features_file, read_waveform_file};
use lle_core::eval::{read_metrics, METRICS_HEADER};
use lle_core::model::{load_checkpoint, Group, Stage};

#[test]
fn gen_data_is_reproducible_and_validates_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = ok(d, &["gen-data", "--spec", "spec.toml", "--out", "a"]);
    assert!(out.contains("wrote 24 utterances"), "{out}");
    assert!(d.join("a/manifest.jsonl").exists());
    ok(d, &["gen-data", "--spec", "spec.toml", "--out", "b"]);
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));

    let o = lle().current_dir(d).env("LLE_SEED", "99").args(["gen-data", "--spec", "spec.toml", "--out", "c"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(tree(&d.join("a")), tree(&d.join("c")));
    ok(d, &["gen-data", "--spec", "spec.toml", "--out", "e", "--seed", "99"]);
    assert_eq!(tree(&d.join("c")), tree(&d.join("e")));

    let o = run(d, &["gen-data", "--spec", "missing.toml", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
    fs::write(d.join("bad.toml"), "feature_dims = 3\n").unwrap();
    assert_eq!(code(&run(d, &["gen-data", "--spec", "bad.toml", "--out", "x"])), 1);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["train", "--bogus"])), 2);
    assert_eq!(code(&run(d, &["frobnicate"])), 2);
    assert_eq!(code(&run(d, &["tts", "--ckpt", "x"])), 2);
    assert_eq!(code(&run(d, &["show-config", "--set", "no_equals_sign"])), 2);
    assert_eq!(code(&run(d, &["--help"])), 0);
    let o = lle().current_dir(d).env("LLE_SEED", "abc").arg("show-config").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn show_config_applies_file_overrides_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = ok(d, &["show-config", "--config", "run.toml", "--set", "adapt.step_count=3"]);
    assert!(out.contains("step_count = 3"));
    assert!(out.contains("seed = 5"));
    let o = lle()
        .current_dir(d)
        .env("LLE_SEED", "41")
        .args(["show-config", "--config", "run.toml"])
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("seed = 41"), "{text}");
    fs::write(d.join("typo.toml"), "[train]\nstep_cnt = 3\n").unwrap();
    assert_eq!(code(&run(d, &["show-config", "--config", "typo.toml"])), 1);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, "1");

    let init = load_checkpoint(&d.join("ck/initial.ckpt")).unwrap();
    let adapted = load_checkpoint(&d.join("ck/adapted.ckpt")).unwrap();
    let welded = load_checkpoint(&d.join("ck/welded.ckpt")).unwrap();
    assert_eq!(adapted.stage, Stage::Adapted);
    assert_eq!(welded.stage, Stage::Welded);
    for g in [Group::Tenc, Group::Senc, Group::Tdec] {
        assert_eq!(init.params.group_bytes(g), welded.params.group_bytes(g));
    }
    let csv = fs::read_to_string(d.join("ck/initial.report.csv")).unwrap();
    assert!(csv.starts_with("step,term,value\n"));
    assert!(csv.contains("acoustic/heldout/tie_gap"));
    assert!(fs::read_to_string(d.join("ck/welded.report.json")).unwrap().contains("\"summary\""));

    let src = read_features_file(&d.join("data/features/A01_heldout001.llef")).unwrap();
    let vc = read_features_file(&d.join("vc.llef")).unwrap();
    assert_eq!(vc.frames(), src.frames());
    assert_eq!(read_waveform_file(&d.join("vc.llew")).unwrap().len(), src.frames() * 16);
    let phon = fs::read_to_string(d.join("data/phonemes/A00_heldout000.txt")).unwrap();
    let frames: usize = phon.lines().map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(read_waveform_file(&d.join("tts.llew")).unwrap().len(), frames * 16);
    let wav = fs::read(d.join("tts.wav")).unwrap();
    assert_eq!(&wav[..4], b"RIFF");
    assert_eq!(wav.len(), 44 + frames * 16 * 2);

    // same seed reproduces the bytes; another seed resamples the vocoder
    ok(d, &["tts", "--ckpt", "ck/welded.ckpt", "--phonemes", "data/phonemes/A00_heldout000.txt", "--out", "again.llew", "--seed", "9"]);
    assert_eq!(fs::read(d.join("again.llew")).unwrap(), fs::read(d.join("tts.llew")).unwrap());
    ok(d, &["tts", "--ckpt", "ck/welded.ckpt", "--phonemes", "data/phonemes/A00_heldout000.txt", "--out", "other.llew", "--seed", "10"]);
    assert_ne!(fs::read(d.join("other.llew")).unwrap(), fs::read(d.join("tts.llew")).unwrap());

    // stage errors
    let adapt_welded = run(d, &["adapt", "--config", "run.toml", "--data", "data", "--in", "ck/welded.ckpt", "--out", "x.ckpt"]);
    assert_eq!(code(&adapt_welded), 1);
    assert!(String::from_utf8_lossy(&adapt_welded.stderr).contains("stage"));
    assert_eq!(code(&run(d, &["weld", "--config", "run.toml", "--data", "data", "--in", "ck/initial.ckpt", "--out", "x.ckpt"])), 1);
    assert_eq!(code(&run(d, &["adapt", "--config", "run.toml", "--data", "data", "--out", "x.ckpt"])), 2);
    assert_eq!(code(&run(d, &["tts", "--ckpt", "ck/initial.ckpt", "--phonemes", "data/phonemes/A00_heldout000.txt", "--out", "x.llew"])), 1);
    let empty = run(d, &["adapt", "--config", "run.toml", "--data", "data", "--in", "ck/initial.ckpt", "--out", "x.ckpt", "--set", "data.target_speaker=B07"]);
    assert_eq!(code(&empty), 1);
    assert!(String::from_utf8_lossy(&empty.stderr).contains("empty target set"));
    // model config must match the checkpoint
    assert_eq!(code(&run(d, &["adapt", "--data", "data", "--in", "ck/initial.ckpt", "--out", "x.ckpt"])), 1);
    assert!(!d.join("x.ckpt").exists());

    // phoneme file without durations
    fs::write(d.join("nodur.txt"), "3\n4\n").unwrap();
    assert_eq!(code(&run(d, &["tts", "--ckpt", "ck/welded.ckpt", "--phonemes", "nodur.txt", "--out", "x.llew"])), 1);

    // eval
    let out = ok(d, &["eval", "--config", "run.toml", "--ckpt", "ck/welded.ckpt", "--baseline", "ck/initial.ckpt", "--corpus", "data", "--out", "metrics.csv"]);
    assert!(out.contains("target_similarity"));
    let text = fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    let rows = read_metrics(&d.join("metrics.csv")).unwrap();
    for m in ["target_similarity", "source_similarity", "tts_distortion", "vc_distortion", "tie_gap"] {
        assert!(rows.iter().any(|r| r.metric == m), "missing {m}");
    }
    assert!(rows.iter().any(|r| r.system == "unadapted"));
    assert_eq!(code(&run(d, &["eval", "--config", "run.toml", "--ckpt", "ck/welded.ckpt", "--corpus", "data", "--out", "m.csv", "--speaker", "C03"])), 1);
    assert_eq!(code(&run(d, &["eval", "--config", "run.toml", "--ckpt", "ck/initial.ckpt", "--corpus", "data", "--out", "m.csv"])), 1);
    ok(d, &["eval", "--config", "run.toml", "--ckpt", "ck/initial.ckpt", "--corpus", "data", "--out", "m.csv", "--speaker", "A01"]);
}

#[test]
fn interrupted_training_resumes_to_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["gen-data", "--spec", "spec.toml", "--out", "data"]);
    ok(d, &["train", "--config", "run.toml", "--data", "data", "--out", "full.ckpt"]);
    let out = ok(d, &["train", "--config", "run.toml", "--data", "data", "--out", "part.ckpt", "--stop-after", "7"]);
    assert!(out.contains("stopped at phase 0 step 7"), "{out}");
    let out = ok(d, &["train", "--config", "run.toml", "--data", "data", "--in", "part.ckpt", "--out", "part.ckpt", "--stop-after", "8"]);
    assert!(out.contains("stopped at phase 1 step 3"), "{out}");
    ok(d, &["train", "--config", "run.toml", "--data", "data", "--in", "part.ckpt", "--out", "part.ckpt"]);
    assert_eq!(fs::read(d.join("part.ckpt")).unwrap(), fs::read(d.join("full.ckpt")).unwrap());
    assert_eq!(
        fs::read(d.join("part.report.json")).unwrap(),
        fs::read(d.join("full.report.json")).unwrap()
    );
    // a finished checkpoint cannot be resumed by train
    assert_eq!(code(&run(d, &["train", "--config", "run.toml", "--data", "data", "--in", "full.ckpt", "--out", "y.ckpt"])), 1);
}

#[test]
fn grad_check_passes_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = ok(d, &["grad-check", "--config", "run.toml"]);
    assert_eq!(out.matches(" ok").count(), 10, "{out}");
    let o = run(d, &["grad-check", "--config", "run.toml", "--set", "grad_check.tolerance=1e-30"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn prefs_reports_exact_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut votes = String::from("question_id,system_a,system_b,winner\n");
    for i in 0..10 {
        votes.push_str(&format!("q{i},x,y,y\n"));
    }
    votes.push_str("q10,p,q,p\n");
    fs::write(d.join("votes.csv"), &votes).unwrap();
    let out = ok(d, &["prefs", "--votes", "votes.csv", "--out", "prefs.csv"]);
    assert!(out.contains("x vs y: 0-10"), "{out}");
    let rows = read_metrics(&d.join("prefs.csv")).unwrap();
    let p = rows
        .iter()
        .find(|r| r.system == "x_vs_y" && r.metric == "p_exact")
        .unwrap()
        .value;
    assert!((p - 2.0 / 1024.0).abs() < 1e-12);
    fs::write(d.join("bad.csv"), "question_id,system_a,system_b,winner\nq,x,y,z\n").unwrap();
    assert_eq!(code(&run(d, &["prefs", "--votes", "bad.csv", "--out", "p.csv"])), 1);
    assert_eq!(code(&run(d, &["prefs", "--votes", "nope.csv", "--out", "p.csv"])), 1);
}
