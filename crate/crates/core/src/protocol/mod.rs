//! Staged training: initial multi-speaker training, target adaptation and
//! decoder/vocoder welding, with freezing, resumable checkpoints and
//! training reports.

mod optim;
mod report;

pub use optim::{Optimizer, OptimizerKind};
pub use report::{ReportRow, TrainReport};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::losses::{evaluate, FeedOptions, LossStage, LossWeights, Objective};
use crate::model::{Checkpoint, Group, ModelConfig, ModelParams, Progress, Stage};
use crate::rng::{derive_seed, rng_from, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Initial,
    Adapt,
    Weld,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Initial => "train",
            StageKind::Adapt => "adapt",
            StageKind::Weld => "weld",
        }
    }

    /// Checkpoint stage this operation produces.
    pub fn produces(self) -> Stage {
        match self {
            StageKind::Initial => Stage::Initial,
            StageKind::Adapt => Stage::Adapted,
            StageKind::Weld => Stage::Welded,
        }
    }

    fn loss_stage(self) -> LossStage {
        match self {
            StageKind::Initial => LossStage::Train,
            StageKind::Adapt => LossStage::Adapt,
            StageKind::Weld => LossStage::Weld,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Learning rate of the acoustic phase (the joint phase when welding).
    pub learning_rate: f64,
    pub step_count: u64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Groups that never change during this stage.
    pub freeze: Vec<Group>,
    pub seed: u64,
    /// Held-out evaluation interval in steps; 0 = only at phase start
    /// and end.
    pub eval_every: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub prev_dropout: f64,
    /// Vocoder phase; ignored when welding.
    pub vocoder_learning_rate: f64,
    pub vocoder_steps: u64,
    pub vocoder_batch_size: usize,
    /// Random vocoder training window in frames; 0 = whole utterance.
    pub crop_frames: usize,
    /// Welding only: teacher-forcing probability at the last step; ramps
    /// linearly from 1.
    pub teacher_prob_end: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::initial()
    }
}

impl StageConfig {
    pub fn initial() -> Self {
        Self {
            learning_rate: 3e-3,
            step_count: 3000,
            batch_size: 16,
            weights: LossWeights::default(),
            freeze: Vec::new(),
            seed: 17,
            eval_every: 250,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            prev_dropout: 0.0,
            vocoder_learning_rate: 3e-3,
            vocoder_steps: 1000,
            vocoder_batch_size: 8,
            crop_frames: 8,
            teacher_prob_end: 1.0,
        }
    }

    pub fn adapt() -> Self {
        Self {
            learning_rate: 1e-3,
            step_count: 600,
            batch_size: 8,
            freeze: vec![Group::Tenc, Group::Senc, Group::Tdec],
            eval_every: 100,
            vocoder_learning_rate: 1e-3,
            vocoder_steps: 300,
            ..Self::initial()
        }
    }

    pub fn weld() -> Self {
        Self {
            learning_rate: 1e-4,
            step_count: 300,
            batch_size: 8,
            freeze: vec![Group::Tenc, Group::Senc, Group::Tdec, Group::SpeakerTable],
            eval_every: 100,
            vocoder_steps: 0,
            teacher_prob_end: 0.5,
            ..Self::initial()
        }
    }

    pub fn default_for(kind: StageKind) -> Self {
        match kind {
            StageKind::Initial => Self::initial(),
            StageKind::Adapt => Self::adapt(),
            StageKind::Weld => Self::weld(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.vocoder_learning_rate > 0.0 && self.vocoder_learning_rate.is_finite()) {
            return bad(format!("vocoder_learning_rate must be > 0, got {}", self.vocoder_learning_rate));
        }
        if self.step_count == 0 {
            return bad("step_count must be >= 1".into());
        }
        if self.batch_size == 0 || self.vocoder_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.teacher_prob_end) || !(0.0..=1.0).contains(&self.prev_dropout) {
            return bad("teacher_prob_end and prev_dropout must lie in [0, 1]".into());
        }
        self.weights.validate()
    }

    fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("stage config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn trainable(&self, groups: &[Group]) -> Vec<Group> {
        groups.iter().copied().filter(|g| !self.freeze.contains(g)).collect()
    }
}

/// Optional early stop, to produce resumable mid-run checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Stop after this many optimizer steps of this invocation.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    /// Finished checkpoint, or an in-progress one if stopped early.
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Data a stage trains and evaluates on.
#[derive(Clone, Copy, Debug)]
pub struct StageData<'a> {
    pub train: &'a [&'a Utterance],
    pub heldout: &'a [&'a Utterance],
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    stage_config: String,
    rows: Vec<ReportRow>,
}

struct PhasePlan {
    name: &'static str,
    objective: Objective,
    lr: f64,
    steps: u64,
    batch_size: usize,
    mask: Vec<bool>,
    feed: FeedOptions,
    /// Scheduled sampling ramp end (1 = always teacher-forced).
    teacher_prob_end: f64,
}

fn plan(kind: StageKind, cfg: &StageConfig, m: &ModelParams) -> Vec<PhasePlan> {
    let feed = FeedOptions {
        prev_dropout: cfg.prev_dropout,
        teacher_prob: 1.0,
        crop_frames: cfg.crop_frames,
    };
    let acoustic_groups: Vec<Group> = match kind {
        StageKind::Weld => Group::ALL.to_vec(),
        _ => Group::ALL.into_iter().filter(|g| *g != Group::Voc).collect(),
    };
    let mut phases = vec![PhasePlan {
        name: if kind == StageKind::Weld { "joint" } else { "acoustic" },
        objective: Objective::Composite(kind.loss_stage(), cfg.weights),
        lr: cfg.learning_rate,
        steps: cfg.step_count,
        batch_size: cfg.batch_size,
        mask: m.mask(&cfg.trainable(&acoustic_groups)),
        feed,
        teacher_prob_end: if kind == StageKind::Weld { cfg.teacher_prob_end } else { 1.0 },
    }];
    if kind != StageKind::Weld && cfg.vocoder_steps > 0 {
        phases.push(PhasePlan {
            name: "vocoder",
            objective: Objective::Vocoder,
            lr: cfg.vocoder_learning_rate,
            steps: cfg.vocoder_steps,
            batch_size: cfg.vocoder_batch_size,
            mask: m.mask(&cfg.trainable(&[Group::Voc])),
            feed,
            teacher_prob_end: 1.0,
        });
    }
    phases
}

fn teacher_prob(p: &PhasePlan, step: u64) -> f64 {
    if p.steps <= 1 {
        return p.teacher_prob_end;
    }
    1.0 + (p.teacher_prob_end - 1.0) * step as f64 / (p.steps - 1) as f64
}

fn eval_rows(
    rows: &mut Vec<ReportRow>,
    kind: StageKind,
    p: &PhasePlan,
    step: u64,
    m: &ModelParams,
    heldout: &[&Utterance],
    seed: u64,
) -> Result<()> {
    if heldout.is_empty() {
        return Ok(());
    }
    let eval_seed = derive_seed(seed, &[kind.tag(), 0xE7A1]);
    let feed = FeedOptions {
        crop_frames: 0,
        prev_dropout: 0.0,
        teacher_prob: 1.0,
    };
    let (b, _) = evaluate(&p.objective, heldout, m, eval_seed, feed, None)?;
    rows.push(ReportRow::new(step, &format!("{}/heldout/total", p.name), b.total));
    for (name, v) in &b.terms {
        rows.push(ReportRow::new(step, &format!("{}/heldout/{name}", p.name), *v));
        if name == "tie" {
            rows.push(ReportRow::new(step, &format!("{}/heldout/tie_gap", p.name), *v));
        }
    }
    log::info!(
        "{} {} step {step}: held-out total {:.5}",
        kind.name(),
        p.name,
        b.total
    );
    Ok(())
}

struct Position {
    phase: usize,
    step: u64,
    rows: Vec<ReportRow>,
    optimizer: Optimizer,
    rng: rand_chacha::ChaCha8Rng,
}

fn fresh(kind: StageKind, cfg: &StageConfig, m: &ModelParams) -> Position {
    Position {
        phase: 0,
        step: 0,
        rows: Vec::new(),
        optimizer: Optimizer::new(cfg.optimizer, m.store().len()),
        rng: rng_from(cfg.seed, &[kind.tag(), 0]),
    }
}

fn draw_batch<'a>(rng: &mut impl Rng, pool: &[&'a Utterance], k: usize) -> Vec<&'a Utterance> {
    let k = k.min(pool.len());
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Runs (or continues, from `pos`) the phases of a stage on `m`.
fn run(
    kind: StageKind,
    mut m: ModelParams,
    target: Option<String>,
    data: StageData,
    cfg: &StageConfig,
    ctl: RunControl,
    mut pos: Position,
) -> Result<StageOutcome> {
    let started = Instant::now();
    let phases = plan(kind, cfg, &m);
    let mut taken = 0u64;
    while pos.phase < phases.len() {
        let p = &phases[pos.phase];
        while pos.step < p.steps {
            if ctl.stop_after.is_some_and(|limit| taken >= limit) {
                let tensors = pos.optimizer.export(m.store());
                let state = serde_json::to_string(&SavedState {
                    stage_config: cfg.hash_hex(),
                    rows: pos.rows.clone(),
                })?;
                log::info!("{} stopped at phase {} step {}", kind.name(), p.name, pos.step);
                return Ok(StageOutcome {
                    report: TrainReport::new(kind.name(), pos.rows),
                    checkpoint: Checkpoint {
                        params: m,
                        stage: kind.produces(),
                        rng_state: RngState::capture(&pos.rng),
                        target_speaker: target,
                        progress: Some(Progress {
                            phase: pos.phase as u32,
                            step: pos.step,
                            tensors,
                            state,
                        }),
                    },
                });
            }
            let logged = pos.step == 0 || (cfg.eval_every > 0 && pos.step % cfg.eval_every == 0);
            if logged {
                eval_rows(&mut pos.rows, kind, p, pos.step, &m, data.heldout, cfg.seed)?;
            }
            let batch = draw_batch(&mut pos.rng, data.train, p.batch_size);
            let feed = FeedOptions {
                teacher_prob: teacher_prob(p, pos.step),
                ..p.feed
            };
            let step_seed = derive_seed(cfg.seed, &[kind.tag(), pos.phase as u64, pos.step]);
            let (b, grads) = evaluate(&p.objective, &batch, &m, step_seed, feed, Some(&p.mask))?;
            let mut grads = grads.expect("mask requests gradients");
            let norm = Optimizer::clip(&mut grads, cfg.clip_norm);
            if logged {
                pos.rows.push(ReportRow::new(pos.step, &format!("{}/train/total", p.name), b.total));
                pos.rows.push(ReportRow::new(pos.step, &format!("{}/train/grad_norm", p.name), norm));
            }
            pos.optimizer.step(m.store_mut(), &grads, &p.mask, p.lr)?;
            pos.step += 1;
            taken += 1;
        }
        eval_rows(&mut pos.rows, kind, p, pos.step, &m, data.heldout, cfg.seed)?;
        pos.phase += 1;
        pos.step = 0;
        pos.optimizer = Optimizer::new(cfg.optimizer, m.store().len());
        pos.rng = rng_from(cfg.seed, &[kind.tag(), pos.phase as u64]);
    }
    let secs = started.elapsed().as_secs_f64();
    log::info!("{} finished in {secs:.1}s", kind.name());
    let mut report = TrainReport::new(kind.name(), pos.rows);
    report.wall_clock_secs = secs;
    Ok(StageOutcome {
        checkpoint: Checkpoint {
            params: m,
            stage: kind.produces(),
            rng_state: RngState::capture(&pos.rng),
            target_speaker: target,
            progress: None,
        },
        report,
    })
}

fn check_data(data: &StageData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Contract("stage has no training utterances".into()));
    }
    Ok(())
}

fn check_freeze(cfg: &StageConfig, kind: StageKind) -> Result<()> {
    let required = [Group::Tenc, Group::Senc, Group::Tdec];
    if let Some(g) = required.iter().find(|g| !cfg.freeze.contains(g)) {
        return Err(Error::InvalidConfig(format!(
            "{} must keep the text side and speech encoder frozen; `{g}` is missing from freeze",
            kind.name()
        )));
    }
    Ok(())
}

/// The single speaker of `utts`.
fn single_speaker<'a>(utts: &[&'a Utterance]) -> Result<&'a str> {
    let first = &utts[0].speaker_id;
    if let Some(u) = utts.iter().find(|u| u.speaker_id != *first) {
        return Err(Error::Contract(format!(
            "target data mixes speakers `{first}` and `{}`",
            u.speaker_id
        )));
    }
    Ok(first)
}

/// Multi-speaker training of a fresh model. Speakers are bound to
/// table rows in sorted order; `config.speakers` must match their count.
pub fn initial_train(config: &ModelConfig, data: StageData, cfg: &StageConfig, ctl: RunControl) -> Result<StageOutcome> {
    cfg.validate()?;
    check_data(&data)?;
    let speakers: Vec<String> = data
        .train
        .iter()
        .map(|u| u.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let m = ModelParams::init(config, &speakers)?;
    if let Some(u) = data.heldout.iter().find(|u| m.speaker_index(&u.speaker_id).is_err()) {
        return Err(Error::UnknownSpeaker(u.speaker_id.clone()));
    }
    let pos = fresh(StageKind::Initial, cfg, &m);
    run(StageKind::Initial, m, None, data, cfg, ctl, pos)
}

/// Adapts a trained model to the single (untranscribed) speaker of
/// `data`, bound to the target slot.
pub fn adapt(ckpt: &Checkpoint, data: StageData, cfg: &StageConfig, ctl: RunControl) -> Result<StageOutcome> {
    if ckpt.stage != Stage::Initial || !ckpt.is_complete() {
        return Err(Error::Stage(format!(
            "adaptation needs a finished initial-stage checkpoint, got `{}`{}",
            ckpt.stage,
            if ckpt.is_complete() { "" } else { " (in progress)" }
        )));
    }
    cfg.validate()?;
    check_freeze(cfg, StageKind::Adapt)?;
    check_data(&data)?;
    let target = single_speaker(data.train)?.to_string();
    if data.heldout.iter().any(|u| u.speaker_id != target) {
        return Err(Error::Contract("adaptation held-out data must come from the target speaker".into()));
    }
    let transcribed = data.train.iter().filter(|u| u.transcribed()).count();
    if transcribed > 0 {
        log::warn!("ignoring transcripts of {transcribed} adaptation utterances");
    }
    let mut m = ckpt.params.clone();
    m.bind_target(&target)?;
    let pos = fresh(StageKind::Adapt, cfg, &m);
    run(StageKind::Adapt, m, Some(target), data, cfg, ctl, pos)
}

/// Jointly fine-tunes the speech decoder and vocoder on the adapted
/// target speaker.
pub fn weld(ckpt: &Checkpoint, data: StageData, cfg: &StageConfig, ctl: RunControl) -> Result<StageOutcome> {
    if ckpt.stage != Stage::Adapted || !ckpt.is_complete() {
        return Err(Error::Stage(format!(
            "welding needs a finished adapted checkpoint, got `{}`{}",
            ckpt.stage,
            if ckpt.is_complete() { "" } else { " (in progress)" }
        )));
    }
    cfg.validate()?;
    check_freeze(cfg, StageKind::Weld)?;
    check_data(&data)?;
    let target = ckpt.target()?.to_string();
    if let Some(u) = data.train.iter().chain(data.heldout).find(|u| u.speaker_id != target) {
        return Err(Error::Contract(format!(
            "welding data must come from the adapted speaker `{target}`, found `{}`",
            u.speaker_id
        )));
    }
    let m = ckpt.params.clone();
    let pos = fresh(StageKind::Weld, cfg, &m);
    run(StageKind::Weld, m, Some(target), data, cfg, ctl, pos)
}

/// Continues an in-progress checkpoint. `cfg` and `data` must be the ones
/// the stage was started with; the result equals an uninterrupted run.
pub fn resume(ckpt: Checkpoint, data: StageData, cfg: &StageConfig, ctl: RunControl) -> Result<StageOutcome> {
    let Some(progress) = ckpt.progress else {
        return Err(Error::Stage("checkpoint has no unfinished stage to resume".into()));
    };
    cfg.validate()?;
    check_data(&data)?;
    let kind = match ckpt.stage {
        Stage::Initial => StageKind::Initial,
        Stage::Adapted => StageKind::Adapt,
        Stage::Welded => StageKind::Weld,
    };
    let saved: SavedState = serde_json::from_str(&progress.state)
        .map_err(|e| Error::format("checkpoint progress", e.to_string()))?;
    if saved.stage_config != cfg.hash_hex() {
        return Err(Error::InvalidConfig(
            "resume requires the stage config the run was started with".into(),
        ));
    }
    let m = ckpt.params;
    let phases = plan(kind, cfg, &m);
    let phase = progress.phase as usize;
    if phase >= phases.len() || progress.step >= phases[phase].steps {
        return Err(Error::format("checkpoint progress", "position outside the stage plan"));
    }
    let pos = Position {
        phase,
        step: progress.step,
        rows: saved.rows,
        optimizer: Optimizer::import(cfg.optimizer, progress.step, m.store(), &progress.tensors)?,
        rng: ckpt.rng_state.restore(),
    };
    run(kind, m, ckpt.target_speaker, data, cfg, ctl, pos)
}
