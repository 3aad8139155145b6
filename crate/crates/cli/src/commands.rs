use std::fs;
use std::path::{Path, PathBuf};

use lle_core::corpus::{
    generate_corpus, mulaw, read_corpus, read_features_file, read_phoneme_file, write_corpus, write_features_file,
    write_waveform_file, Corpus, CorpusSpec, LanguageSpec, Split, Utterance, Waveform,
};
use lle_core::eval::{
    conversion_eval, corpus_probe, export_metrics, preference_analysis, read_votes, tally_votes, tie_gap,
    MetricRecord,
};
use lle_core::losses::{all_objectives, check_gradients};
use lle_core::model::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, tts_infer, vc_infer, ModelConfig, ModelParams,
    Stage, Synthesis,
};
use lle_core::numerics::Selection;
use lle_core::protocol::{adapt, initial_train, resume, weld, RunControl, StageData, StageKind, StageOutcome};
use lle_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::{CliError, ConfigArgs, RenderArgs, StageArgs};

fn load_spec(path: Option<&Path>) -> Result<CorpusSpec, CliError> {
    let Some(path) = path else {
        return Ok(CorpusSpec::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::domain(format!("cannot read spec {}: {e}", path.display())))?;
    let spec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::domain(format!("spec {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::domain(format!("spec {}: {}", path.display(), e.message())))?
    };
    Ok(spec)
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("LLE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("LLE_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let spec = load_spec(spec)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(spec.seed),
    };
    let corpus = generate_corpus(&spec, seed)?;
    write_corpus(&corpus, out)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
    Ok(())
}

fn stage_file(kind: StageKind) -> &'static str {
    match kind {
        StageKind::Initial => "initial.ckpt",
        StageKind::Adapt => "adapted.ckpt",
        StageKind::Weld => "welded.ckpt",
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::domain(format!("cannot write {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p)
            .map_err(|e| CliError::domain(format!("cannot create {}: {e}", p.display()))),
        _ => Ok(()),
    }
}

fn split<'a>(corpus: &'a Corpus, pick: impl Fn(&Utterance) -> bool, s: Split) -> Vec<&'a Utterance> {
    corpus.utterances.iter().filter(|u| u.split == s && pick(u)).collect()
}

pub fn stage(kind: StageKind, args: &StageArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.config.as_deref(), &args.config.overrides)?;
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoints.join(stage_file(kind)));
    let corpus = read_corpus(&data_dir)?;
    let (train, heldout) = match kind {
        StageKind::Initial => {
            let lang = cfg.data.source_language.as_str();
            (
                split(&corpus, |u| u.language_id == lang, Split::Train),
                split(&corpus, |u| u.language_id == lang, Split::Heldout),
            )
        }
        StageKind::Adapt | StageKind::Weld => {
            let spk = cfg.data.target_speaker.as_str();
            (
                split(&corpus, |u| u.speaker_id == spk, Split::Train),
                split(&corpus, |u| u.speaker_id == spk, Split::Heldout),
            )
        }
    };
    if train.is_empty() {
        return Err(CliError::domain(match kind {
            StageKind::Initial => format!("no training utterances in language `{}`", cfg.data.source_language),
            _ => format!("empty target set: no training utterances of `{}`", cfg.data.target_speaker),
        }));
    }
    let data = StageData {
        train: &train,
        heldout: &heldout,
    };
    let stage_cfg = cfg.stage(kind);
    let ctl = RunControl {
        stop_after: args.stop_after,
    };
    let input = match &args.input {
        Some(p) => Some(load_checkpoint_for(p, &cfg.model)?),
        None => None,
    };
    let outcome: StageOutcome = match (kind, input) {
        (_, Some(ck)) if !ck.is_complete() && ck.stage == kind.produces() => resume(ck, data, stage_cfg, ctl)?,
        (StageKind::Initial, Some(ck)) => {
            return Err(CliError::domain(format!(
                "train --in only resumes an unfinished initial run; got a {} `{}` checkpoint",
                if ck.is_complete() { "finished" } else { "unfinished" },
                ck.stage
            )))
        }
        (StageKind::Initial, None) => initial_train(&cfg.model, data, stage_cfg, ctl)?,
        (_, None) => return Err(CliError::usage(format!("{} requires --in CHECKPOINT", kind.name()))),
        (StageKind::Adapt, Some(ck)) => adapt(&ck, data, stage_cfg, ctl)?,
        (StageKind::Weld, Some(ck)) => weld(&ck, data, stage_cfg, ctl)?,
    };
    ensure_parent(&out)?;
    save_checkpoint(&outcome.checkpoint, &out)?;
    write_text(&sibling(&out, "report.csv"), &outcome.report.to_csv())?;
    write_text(&sibling(&out, "report.json"), &outcome.report.to_json())?;
    let ck = &outcome.checkpoint;
    match &ck.progress {
        Some(p) => println!(
            "{} stopped at phase {} step {}; wrote {} (continue with --in)",
            kind.name(),
            p.phase,
            p.step,
            out.display()
        ),
        None => {
            println!("stage={} checkpoint={}", ck.stage, out.display());
            for (term, (first, last)) in outcome.report.summary() {
                if term.contains("/heldout/") {
                    println!("  {term}: {first:.6} -> {last:.6}");
                }
            }
        }
    }
    Ok(())
}

fn write_pcm(path: &Path, w: &Waveform, sample_rate: u32) -> Result<(), CliError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| CliError::domain(format!("cannot write {}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &c in w.codes() {
        let s = (mulaw::decode(c) * f64::from(i16::MAX)).round() as i16;
        writer.write_sample(s).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

fn emit(syn: &Synthesis, out: &Path, render: &RenderArgs) -> Result<(), CliError> {
    write_waveform_file(out, &syn.waveform)?;
    if let Some(p) = &render.features {
        write_features_file(p, &syn.features)?;
    }
    if let Some(p) = &render.pcm {
        write_pcm(p, &syn.waveform, render.sample_rate)?;
    }
    println!(
        "frames={} samples={} out={}",
        syn.features.frames(),
        syn.waveform.len(),
        out.display()
    );
    Ok(())
}

pub fn tts(ckpt: &Path, phonemes: &Path, out: &Path, render: &RenderArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let x = read_phoneme_file(phonemes)?;
    emit(&tts_infer(&ck, &x, render.seed)?, out, render)
}

pub fn vc(ckpt: &Path, source: &Path, out: &Path, render: &RenderArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let y = read_features_file(source)?;
    emit(&vc_infer(&ck, &y, render.seed)?, out, render)
}

/// `params` with `target` bound to the target slot if it is not a
/// training speaker.
fn knowing(params: &ModelParams, target: &str) -> Result<ModelParams, CliError> {
    let mut p = params.clone();
    if p.speaker_index(target).is_err() {
        p.bind_target(target)?;
    }
    Ok(p)
}

pub fn eval(
    ckpt: &Path,
    corpus_dir: &Path,
    out: &Path,
    baseline: Option<&Path>,
    speaker: Option<&str>,
    config: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config.config.as_deref(), &config.overrides)?;
    let ck = load_checkpoint(ckpt)?;
    if !ck.is_complete() {
        return Err(CliError::domain(format!("{} is an unfinished training checkpoint", ckpt.display())));
    }
    let corpus = read_corpus(corpus_dir)?;
    let target = match (speaker, ck.stage) {
        (Some(s), _) => s.to_string(),
        (None, Stage::Initial) => {
            return Err(CliError::domain(
                "an initial checkpoint has no adapted speaker; pass --speaker",
            ))
        }
        (None, _) => ck.target()?.to_string(),
    };
    ck.params.speaker_index(&target)?;
    if !corpus.speaker_ids().contains(&target.as_str()) {
        return Err(lle_core::Error::UnknownSpeaker(target).into());
    }
    let base = match baseline {
        Some(p) => {
            let b = load_checkpoint(p)?;
            if b.stage != Stage::Initial {
                return Err(CliError::domain(format!(
                    "baseline must be an initial checkpoint, got `{}`",
                    b.stage
                )));
            }
            Some(knowing(&b.params, &target)?)
        }
        None => None,
    };
    let probe = corpus_probe(&corpus, &cfg.eval.probe)?;
    let report = conversion_eval(&corpus, &ck.params, &target, base.as_ref(), &probe, cfg.eval.items)?;
    let system = ck.stage.name();
    let mut rows = vec![
        MetricRecord::new("conversion", system, &target, "target_similarity", report.target_similarity()),
        MetricRecord::new("conversion", system, &target, "source_similarity", report.source_similarity()),
        MetricRecord::new("conversion", system, &target, "tts_distortion", report.tts_distortion()),
        MetricRecord::new("conversion", system, &target, "vc_distortion", report.vc_distortion()),
        MetricRecord::new("conversion", system, &target, "consistency_gap", report.consistency_gap()),
    ];
    if let Some(b) = report.baseline_target_similarity() {
        rows.push(MetricRecord::new("conversion", "unadapted", &target, "target_similarity", b));
    }
    let lang = cfg.data.source_language.as_str();
    let pairs: Vec<&Utterance> = split(&corpus, |u| u.language_id == lang && u.transcribed(), Split::Heldout);
    if !pairs.is_empty() {
        rows.push(MetricRecord::new("tie_gap", system, "all", "tie_gap", tie_gap(&pairs, &ck.params)?));
    }
    ensure_parent(out)?;
    export_metrics(&rows, out)?;
    for r in &rows {
        println!("{} {} {} {} {:.6}", r.experiment, r.system, r.speaker, r.metric, r.value);
    }
    Ok(())
}

/// A one-utterance-per-speaker corpus matching `model`.
fn check_corpus(model: &ModelConfig, seed: u64) -> Result<Corpus, CliError> {
    let spec = CorpusSpec {
        feature_dim: model.feature_dim,
        samples_per_frame: model.samples_per_frame as u32,
        phonemes_per_utterance: (3, 5),
        duration_frames: (1, 3),
        languages: vec![LanguageSpec {
            id: "G".into(),
            inventory: (0..model.vocab_size as u32).collect(),
            speakers: model.speakers,
            train_utterances: 1,
            heldout_utterances: 0,
            transcribed: true,
        }],
        ..CorpusSpec::default()
    };
    Ok(generate_corpus(&spec, seed)?)
}

pub fn grad_check(config: &ConfigArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(config.config.as_deref(), &config.overrides)?;
    let gc = &cfg.grad_check;
    let base_seed = cfg.seed.unwrap_or(cfg.train.seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for s in 0..gc.seeds {
        let seed = derive_seed(base_seed, &[0x6763, s]);
        let corpus = check_corpus(&cfg.model, seed)?;
        let names: Vec<String> = corpus.speaker_ids().iter().map(|s| s.to_string()).collect();
        let model = ModelParams::init(
            &ModelConfig {
                init_seed: seed,
                ..cfg.model.clone()
            },
            &names,
        )?;
        let batch: Vec<&Utterance> = corpus.utterances.iter().take(gc.batch_size.max(1)).collect();
        let selection = if gc.max_entries == 0 {
            Selection::All
        } else {
            Selection::PerTensor {
                max_entries: gc.max_entries,
                seed,
            }
        };
        for objective in all_objectives(&cfg.train.weights) {
            let r = check_gradients(&objective, &batch, &model, seed, gc.eps, selection)?;
            let ok = r.max_rel_err <= gc.tolerance;
            println!(
                "seed {s} {:<16} max_rel_err {:.3e} at {} ({} entries) {}",
                objective.label(),
                r.max_rel_err,
                r.worst_param,
                r.checked,
                if ok { "ok" } else { "FAIL" }
            );
            worst = worst.max(r.max_rel_err);
            failures += usize::from(!ok);
        }
    }
    println!("worst relative error {worst:.3e} (tolerance {:.0e})", gc.tolerance);
    if failures > 0 {
        return Err(CliError::domain(format!("{failures} gradient checks exceeded the tolerance")));
    }
    Ok(())
}

pub fn prefs(votes: &Path, out: &Path) -> Result<(), CliError> {
    let votes = read_votes(votes)?;
    let mut rows = Vec::new();
    for t in tally_votes(&votes)? {
        let r = preference_analysis(t.wins_a, t.wins_b)?;
        let system = format!("{}_vs_{}", t.system_a, t.system_b);
        for (metric, v) in [
            ("wins_a", r.wins_a as f64),
            ("wins_b", r.wins_b as f64),
            ("share_a", r.share_a),
            ("ci95_low", r.ci_95.0),
            ("ci95_high", r.ci_95.1),
            ("p_exact", r.p_exact),
        ] {
            rows.push(MetricRecord::new("preference", &system, "all", metric, v));
        }
        println!(
            "{} vs {}: {}-{} share {:.3} ci95 [{:.3}, {:.3}] p {:.4}",
            t.system_a, t.system_b, r.wins_a, r.wins_b, r.share_a, r.ci_95.0, r.ci_95.1, r.p_exact
        );
    }
    ensure_parent(out)?;
    export_metrics(&rows, out)?;
    Ok(())
}
