use lle_core::corpus::{generate_corpus, Corpus, CorpusSpec, LanguageSpec, Split, Utterance};
use lle_core::model::{load_checkpoint, save_checkpoint, Checkpoint, Group, ModelConfig, Stage};
use lle_core::protocol::{adapt, initial_train, resume, weld, RunControl, StageConfig, StageData, StageKind};
use lle_core::Error;

fn small_corpus() -> Corpus {
    let spec = CorpusSpec {
        feature_dim: 4,
        samples_per_frame: 4,
        phonemes_per_utterance: (3, 4),
        duration_frames: (2, 3),
        languages: vec![
            LanguageSpec {
                id: "A".into(),
                inventory: (0..6).collect(),
                speakers: 2,
                train_utterances: 4,
                heldout_utterances: 2,
                transcribed: true,
            },
            LanguageSpec {
                id: "B".into(),
                inventory: (2..8).collect(),
                speakers: 1,
                train_utterances: 4,
                heldout_utterances: 2,
                transcribed: false,
            },
        ],
        ..CorpusSpec::default()
    };
    generate_corpus(&spec, 5).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        feature_dim: 4,
        samples_per_frame: 4,
        speakers: 2,
        embed_dim: 4,
        latent_dim: 3,
        enc_channels: 6,
        enc_layers: 2,
        enc_kernel: 3,
        tdec_hidden: 6,
        dec_hidden: 8,
        speaker_dim: 3,
        voc_channels: 4,
        voc_dilations: vec![1, 2],
        init_seed: 3,
    }
}

fn short(kind: StageKind) -> StageConfig {
    StageConfig {
        step_count: 6,
        vocoder_steps: 4,
        batch_size: 3,
        vocoder_batch_size: 2,
        eval_every: 2,
        ..StageConfig::default_for(kind)
    }
}

fn split<'a>(c: &'a Corpus, lang: &'a str, s: Split) -> Vec<&'a Utterance> {
    c.select(Some(lang), None, Some(s)).collect()
}

fn pipeline(c: &Corpus) -> (Checkpoint, Checkpoint, Checkpoint) {
    let (at, ah) = (split(c, "A", Split::Train), split(c, "A", Split::Heldout));
    let (bt, bh) = (split(c, "B", Split::Train), split(c, "B", Split::Heldout));
    let a = StageData { train: &at, heldout: &ah };
    let b = StageData { train: &bt, heldout: &bh };
    let init = initial_train(&small_model(), a, &short(StageKind::Initial), RunControl::default()).unwrap();
    let adapted = adapt(&init.checkpoint, b, &short(StageKind::Adapt), RunControl::default()).unwrap();
    let welded = weld(&adapted.checkpoint, b, &short(StageKind::Weld), RunControl::default()).unwrap();
    (init.checkpoint, adapted.checkpoint, welded.checkpoint)
}

#[test]
fn stages_freeze_their_groups() {
    let c = small_corpus();
    let (init, adapted, welded) = pipeline(&c);
    assert_eq!(init.stage, Stage::Initial);
    assert_eq!(adapted.stage, Stage::Adapted);
    assert_eq!(welded.stage, Stage::Welded);
    assert_eq!(adapted.target().unwrap(), "B00");
    for g in [Group::Tenc, Group::Senc, Group::Tdec] {
        assert_eq!(init.params.group_bytes(g), adapted.params.group_bytes(g), "{g} moved in adapt");
        assert_eq!(adapted.params.group_bytes(g), welded.params.group_bytes(g), "{g} moved in weld");
    }
    for g in [Group::Sdec, Group::Voc, Group::SpeakerTable] {
        assert_ne!(init.params.group_bytes(g), adapted.params.group_bytes(g), "{g} frozen in adapt");
    }
    assert_eq!(
        adapted.params.group_bytes(Group::SpeakerTable),
        welded.params.group_bytes(Group::SpeakerTable)
    );
    assert_ne!(adapted.params.group_bytes(Group::Sdec), welded.params.group_bytes(Group::Sdec));
    assert_ne!(adapted.params.group_bytes(Group::Voc), welded.params.group_bytes(Group::Voc));
}

#[test]
fn out_of_order_stages_are_rejected() {
    let c = small_corpus();
    let (init, adapted, welded) = pipeline(&c);
    let bt = split(&c, "B", Split::Train);
    let b = StageData { train: &bt, heldout: &[] };
    let is_stage = |r: Result<_, Error>| matches!(r, Err(Error::Stage(_)));
    assert!(is_stage(weld(&init, b, &short(StageKind::Weld), RunControl::default())));
    assert!(is_stage(adapt(&adapted, b, &short(StageKind::Adapt), RunControl::default())));
    assert!(is_stage(adapt(&welded, b, &short(StageKind::Adapt), RunControl::default())));
    assert!(is_stage(weld(&welded, b, &short(StageKind::Weld), RunControl::default())));
    assert!(is_stage(resume(init.clone(), b, &short(StageKind::Initial), RunControl::default())));

    let loose = StageConfig {
        freeze: vec![Group::Tenc, Group::Tdec],
        ..short(StageKind::Adapt)
    };
    assert!(matches!(
        adapt(&init, b, &loose, RunControl::default()),
        Err(Error::InvalidConfig(_))
    ));
    let at = split(&c, "A", Split::Train);
    let mixed = StageData { train: &at, heldout: &[] };
    assert!(adapt(&init, mixed, &short(StageKind::Adapt), RunControl::default()).is_err());
}

#[test]
fn initial_training_requires_transcripts() {
    let c = small_corpus();
    let all: Vec<&Utterance> = c.select(None, None, Some(Split::Train)).collect();
    let cfg = StageConfig {
        batch_size: all.len(),
        ..short(StageKind::Initial)
    };
    let model = ModelConfig {
        speakers: 3,
        ..small_model()
    };
    let r = initial_train(&model, StageData { train: &all, heldout: &[] }, &cfg, RunControl::default());
    assert!(matches!(r, Err(Error::MissingTranscript(_))), "{r:?}");
}

#[test]
fn resumed_runs_equal_uninterrupted_runs() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let (at, ah) = (split(&c, "A", Split::Train), split(&c, "A", Split::Heldout));
    let (bt, bh) = (split(&c, "B", Split::Train), split(&c, "B", Split::Heldout));
    let a = StageData { train: &at, heldout: &ah };
    let b = StageData { train: &bt, heldout: &bh };
    let cfg = short(StageKind::Initial);
    let full = initial_train(&small_model(), a, &cfg, RunControl::default()).unwrap();

    // stop inside the acoustic phase and again inside the vocoder phase
    let part = initial_train(&small_model(), a, &cfg, RunControl { stop_after: Some(3) }).unwrap();
    assert!(!part.checkpoint.is_complete());
    let path = dir.path().join("part.ckpt");
    save_checkpoint(&part.checkpoint, &path).unwrap();
    let part = resume(load_checkpoint(&path).unwrap(), a, &cfg, RunControl { stop_after: Some(5) }).unwrap();
    assert_eq!(part.checkpoint.progress.as_ref().unwrap().phase, 1);
    save_checkpoint(&part.checkpoint, &path).unwrap();
    let done = resume(load_checkpoint(&path).unwrap(), a, &cfg, RunControl::default()).unwrap();
    assert_eq!(done.checkpoint, full.checkpoint);
    assert_eq!(done.report.rows, full.report.rows);
    assert_eq!(done.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());

    let wrong = StageConfig {
        learning_rate: cfg.learning_rate * 2.0,
        ..cfg.clone()
    };
    let part = initial_train(&small_model(), a, &cfg, RunControl { stop_after: Some(1) }).unwrap();
    assert!(matches!(
        resume(part.checkpoint.clone(), a, &wrong, RunControl::default()),
        Err(Error::InvalidConfig(_))
    ));

    // an unfinished checkpoint cannot start the next stage
    let acfg = short(StageKind::Adapt);
    assert!(matches!(
        adapt(&part.checkpoint, b, &acfg, RunControl::default()),
        Err(Error::Stage(_))
    ));
    let whole = adapt(&full.checkpoint, b, &acfg, RunControl::default()).unwrap();
    let half = adapt(&full.checkpoint, b, &acfg, RunControl { stop_after: Some(4) }).unwrap();
    assert_eq!(half.checkpoint.stage, Stage::Adapted);
    let rest = resume(half.checkpoint, b, &acfg, RunControl::default()).unwrap();
    assert_eq!(rest.checkpoint, whole.checkpoint);
}

#[test]
fn training_is_deterministic_and_reports_terms() {
    let c = small_corpus();
    let (at, ah) = (split(&c, "A", Split::Train), split(&c, "A", Split::Heldout));
    let a = StageData { train: &at, heldout: &ah };
    let cfg = short(StageKind::Initial);
    let x = initial_train(&small_model(), a, &cfg, RunControl::default()).unwrap();
    let y = initial_train(&small_model(), a, &cfg, RunControl::default()).unwrap();
    assert_eq!(x.checkpoint, y.checkpoint);
    assert_eq!(x.report.to_json(), y.report.to_json());
    let gap = x.report.series("acoustic/heldout/tie_gap");
    assert_eq!(gap.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    assert!(x.report.last("vocoder/heldout/voc").is_some());
    assert!(x.report.last("acoustic/train/grad_norm").is_some());
}
