//! Training objectives: the four encoder/decoder chains, the tied-layer
//! and cycle divergences, the vocoder cross-entropy and the per-stage
//! composites.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mulaw, PhonemeSequence, Utterance};
use crate::error::{ensure_dim, Error, Result};
use crate::model::nets::{self, LleVars};
use crate::model::{decode_speech_free, ModelParams};
use crate::numerics::{grad_check, GradReport, Gradients, Selection, Tape, Tensor, Var};
use crate::rng::{NoiseKey, NoiseSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chain {
    Tts,
    Sts,
    Stt,
    Ttt,
}

impl Chain {
    pub const ALL: [Chain; 4] = [Chain::Tts, Chain::Sts, Chain::Stt, Chain::Ttt];

    pub fn name(self) -> &'static str {
        match self {
            Chain::Tts => "tts",
            Chain::Sts => "sts",
            Chain::Stt => "stt",
            Chain::Ttt => "ttt",
        }
    }

    fn needs_transcript(self) -> bool {
        self != Chain::Sts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossStage {
    Train,
    Adapt,
    Weld,
}

impl LossStage {
    pub fn name(self) -> &'static str {
        match self {
            LossStage::Train => "train",
            LossStage::Adapt => "adapt",
            LossStage::Weld => "weld",
        }
    }
}

impl fmt::Display for LossStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_sts: f64,
    pub alpha_stt: f64,
    pub alpha_ttt: f64,
    pub beta_tie: f64,
    pub beta_cycle: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_sts: 1.0,
            alpha_stt: 1.0,
            alpha_ttt: 0.0,
            beta_tie: 1.0,
            beta_cycle: 0.25,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_sts", self.alpha_sts),
            ("alpha_stt", self.alpha_stt),
            ("alpha_ttt", self.alpha_ttt),
            ("beta_tie", self.beta_tie),
            ("beta_cycle", self.beta_cycle),
            ("gamma", self.gamma),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `(term, weight)` pairs of a stage's composite, in report order.
    pub fn terms(&self, stage: LossStage) -> Vec<(&'static str, f64)> {
        match stage {
            LossStage::Train => vec![
                ("tts", 1.0),
                ("sts", self.alpha_sts),
                ("stt", self.alpha_stt),
                ("ttt", self.alpha_ttt),
                ("tie", self.beta_tie),
            ],
            LossStage::Adapt => vec![("sts", 1.0), ("cycle", self.beta_cycle)],
            LossStage::Weld => vec![("sts", 1.0), ("voc", self.gamma)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// How decoders and the vocoder are fed during a loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedOptions {
    /// Probability of zeroing the previous-frame input of a decoder step.
    pub prev_dropout: f64,
    /// Probability that a decoder step sees the ground-truth previous
    /// frame rather than the decoder's own free-running prediction.
    pub teacher_prob: f64,
    /// Vocoder terms use a random window of this many frames; 0 = whole
    /// utterance.
    pub crop_frames: usize,
}

impl Default for FeedOptions {
    fn default() -> Self {
        Self {
            prev_dropout: 0.0,
            teacher_prob: 1.0,
            crop_frames: 0,
        }
    }
}

impl FeedOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prev_dropout) || !(0.0..=1.0).contains(&self.teacher_prob) {
            return Err(Error::InvalidConfig(
                "prev_dropout and teacher_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn is_plain(&self) -> bool {
        self.prev_dropout == 0.0 && self.teacher_prob == 1.0
    }
}

/// Previous-frame inputs for a teacher-forced decoder pass over `y`.
/// `free` supplies the decoder's own predictions when scheduled sampling
/// is active.
fn decoder_prev(y: &Tensor, free: Option<&Tensor>, feed: &FeedOptions, noise: &NoiseSource) -> Tensor {
    let mut prev = nets::shift_frames(y);
    if feed.is_plain() {
        return prev;
    }
    let mut rng = noise.rng(NoiseKey::ScheduledSampling);
    for t in 1..y.rows() {
        let (u_tf, u_drop): (f64, f64) = (rng.random(), rng.random());
        if u_tf >= feed.teacher_prob {
            if let Some(f) = free {
                prev.row_mut(t).copy_from_slice(f.row(t - 1));
            }
        }
        if u_drop < feed.prev_dropout {
            prev.row_mut(t).fill(0.0);
        }
    }
    prev
}

fn sample(tape: &mut Tape, lle: LleVars, noise: &NoiseSource, key: NoiseKey) -> Var {
    let (rows, cols) = tape.value(lle.mean).shape();
    let eps = noise.gaussian(key, rows, cols);
    tape.reparam(lle.mean, lle.log_var, eps)
}

/// Per-item graph builder. Encoder outputs and latent samples are built
/// at most once, so composite terms share them exactly.
struct Item<'t, 'a> {
    tape: &'t mut Tape<'a>,
    m: &'a ModelParams,
    utt: &'a Utterance,
    noise: NoiseSource,
    feed: FeedOptions,
    y: Tensor,
    yv: Option<Var>,
    text: Option<LleVars>,
    speech: Option<LleVars>,
    z_text: Option<Var>,
    z_speech: Option<Var>,
    y_hat: Option<Var>,
}

impl<'t, 'a> Item<'t, 'a> {
    fn new(tape: &'t mut Tape<'a>, m: &'a ModelParams, utt: &'a Utterance, noise: NoiseSource, feed: FeedOptions) -> Self {
        Self {
            tape,
            m,
            utt,
            noise,
            feed,
            y: utt.features.to_tensor(),
            yv: None,
            text: None,
            speech: None,
            z_text: None,
            z_speech: None,
            y_hat: None,
        }
    }

    fn phonemes(&self) -> Result<&'a PhonemeSequence> {
        self.utt.phonemes()
    }

    fn speaker(&self) -> Result<usize> {
        self.m.speaker_index(&self.utt.speaker_id)
    }

    fn y_var(&mut self) -> Var {
        if self.yv.is_none() {
            self.yv = Some(self.tape.constant(self.y.clone()));
        }
        self.yv.unwrap()
    }

    fn text(&mut self) -> Result<LleVars> {
        if self.text.is_none() {
            let x = self.phonemes()?;
            ensure_dim("transcript frames", self.y.rows(), x.total_frames())?;
            self.text = Some(nets::text_encoder(self.tape, self.m, x)?);
        }
        Ok(self.text.unwrap())
    }

    fn speech(&mut self) -> Result<LleVars> {
        if self.speech.is_none() {
            let yv = self.y_var();
            self.speech = Some(nets::speech_encoder(self.tape, self.m, yv)?);
        }
        Ok(self.speech.unwrap())
    }

    fn z_text(&mut self) -> Result<Var> {
        if self.z_text.is_none() {
            let lle = self.text()?;
            self.z_text = Some(sample(self.tape, lle, &self.noise, NoiseKey::TextLatent));
        }
        Ok(self.z_text.unwrap())
    }

    fn z_speech(&mut self) -> Result<Var> {
        if self.z_speech.is_none() {
            let lle = self.speech()?;
            self.z_speech = Some(sample(self.tape, lle, &self.noise, NoiseKey::SpeechLatent));
        }
        Ok(self.z_speech.unwrap())
    }

    fn decode(&mut self, z: Var) -> Result<Var> {
        let speaker = self.speaker()?;
        let free = (self.feed.teacher_prob < 1.0)
            .then(|| decode_speech_free(self.m, self.tape.value(z), speaker));
        let prev = decoder_prev(&self.y, free.as_ref(), &self.feed, &self.noise);
        Ok(nets::speech_decoder(self.tape, self.m, z, prev, speaker))
    }

    /// `ŷ = SDec(sample(SEnc(y)))`, shared by sts, cycle and weld.
    fn y_hat(&mut self) -> Result<Var> {
        if self.y_hat.is_none() {
            let z = self.z_speech()?;
            self.y_hat = Some(self.decode(z)?);
        }
        Ok(self.y_hat.unwrap())
    }

    fn chain(&mut self, chain: Chain) -> Result<Var> {
        if chain.needs_transcript() {
            self.phonemes()?;
        }
        match chain {
            Chain::Tts => {
                let z = self.z_text()?;
                let out = self.decode(z)?;
                Ok(self.tape.mse(out, &self.y))
            }
            Chain::Sts => {
                let out = self.y_hat()?;
                Ok(self.tape.mse(out, &self.y))
            }
            Chain::Stt | Chain::Ttt => {
                let z = if chain == Chain::Stt { self.z_speech()? } else { self.z_text()? };
                let targets = nets::frame_ids(self.m, self.phonemes()?)?;
                ensure_dim("transcript frames", self.y.rows(), targets.len())?;
                let logits = nets::text_decoder(self.tape, self.m, z);
                Ok(self.tape.softmax_xent(logits, targets))
            }
        }
    }

    fn tie(&mut self) -> Result<Var> {
        let t = self.text()?;
        let s = self.speech()?;
        Ok(self.tape.sym_kld(t.mean, t.log_var, s.mean, s.log_var))
    }

    fn cycle(&mut self) -> Result<Var> {
        let s = self.speech()?;
        let y_hat = self.y_hat()?;
        let c = nets::speech_encoder(self.tape, self.m, y_hat)?;
        Ok(self.tape.sym_kld(s.mean, s.log_var, c.mean, c.log_var))
    }

    /// Crop window `[start, start + len)` in frames.
    fn crop(&self) -> (usize, usize) {
        let t = self.y.rows();
        let len = if self.feed.crop_frames == 0 { t } else { self.feed.crop_frames.min(t) };
        if len == t {
            return (0, t);
        }
        let start = self.noise.rng(NoiseKey::Crop).random_range(0..=t - len);
        (start, len)
    }

    /// Vocoder cross-entropy conditioned on `cond` (natural features when
    /// `None`).
    fn vocoder(&mut self, cond: Option<Var>) -> Result<Var> {
        let speaker = self.speaker()?;
        let spf = self.m.config().samples_per_frame as usize;
        let codes = self.utt.waveform.codes();
        ensure_dim("waveform length", self.y.rows() * spf, codes.len())?;
        let (start, len) = self.crop();
        let cond = match cond {
            Some(c) => c,
            None => self.y_var(),
        };
        let cond = if len == self.y.rows() {
            cond
        } else {
            self.tape.slice_rows(cond, start, start + len)
        };
        let window = &codes[start * spf..(start + len) * spf];
        let first_prev = if start == 0 { mulaw::MID_CODE } else { codes[start * spf - 1] };
        let logits = nets::vocoder(self.tape, self.m, cond, nets::vocoder_inputs(window, first_prev), speaker)?;
        let targets = window.iter().map(|&c| c as usize).collect();
        Ok(self.tape.softmax_xent(logits, targets))
    }

    fn term(&mut self, name: &str) -> Result<Var> {
        match name {
            "tts" => self.chain(Chain::Tts),
            "sts" => self.chain(Chain::Sts),
            "stt" => self.chain(Chain::Stt),
            "ttt" => self.chain(Chain::Ttt),
            "tie" => self.tie(),
            "cycle" => self.cycle(),
            "voc" => {
                let y_hat = self.y_hat()?;
                self.vocoder(Some(y_hat))
            }
            "voc_natural" => self.vocoder(None),
            other => Err(Error::Contract(format!("unknown loss term `{other}`"))),
        }
    }
}

/// A scalar objective over a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Chain(Chain),
    Tie,
    Cycle,
    /// Vocoder cross-entropy conditioned on natural features.
    Vocoder,
    Composite(LossStage, LossWeights),
}

impl Objective {
    fn terms(&self) -> Vec<(&'static str, f64)> {
        match self {
            Objective::Chain(c) => vec![(c.name(), 1.0)],
            Objective::Tie => vec![("tie", 1.0)],
            Objective::Cycle => vec![("cycle", 1.0)],
            Objective::Vocoder => vec![("voc_natural", 1.0)],
            Objective::Composite(stage, w) => w.terms(*stage),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Chain(c) => format!("chain_{}", c.name()),
            Objective::Tie => "tie".into(),
            Objective::Cycle => "cycle".into(),
            Objective::Vocoder => "vocoder".into(),
            Objective::Composite(s, _) => format!("composite_{}", s.name()),
        }
    }
}

/// Evaluates `objective` on one utterance and, if `mask` is given,
/// returns gradients of `scale · total` for the unmasked parameters.
fn item_eval(
    objective: &Objective,
    m: &ModelParams,
    utt: &Utterance,
    noise: NoiseSource,
    feed: FeedOptions,
    mask: Option<&[bool]>,
    scale: f64,
) -> Result<(Vec<f64>, Option<Gradients>)> {
    let frozen;
    let mask = match mask {
        Some(mk) => mk,
        None => {
            frozen = vec![false; m.store().len()];
            &frozen
        }
    };
    let mut tape = Tape::new(m.store(), mask);
    let terms = objective.terms();
    let (vars, weighted) = {
        let mut item = Item::new(&mut tape, m, utt, noise, feed);
        let mut vars = Vec::with_capacity(terms.len());
        for (name, _) in &terms {
            vars.push(item.term(name)?);
        }
        let weighted: Vec<(Var, f64)> = vars.iter().zip(&terms).map(|(&v, &(_, w))| (v, w * scale)).collect();
        (vars, weighted)
    };
    let values = vars.iter().map(|&v| tape.value(v).item()).collect::<Vec<_>>();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term value {v} on utterance `{}`", utt.id)));
    }
    let grads = if mask.iter().any(|&b| b) {
        let root = tape.weighted_sum(&weighted);
        Some(tape.backward(root))
    } else {
        None
    };
    Ok((values, grads))
}

/// Mean of `objective` over `batch` with per-item noise
/// `NoiseSource::for_item(seed, i)`. With `mask`, also the gradient of
/// the mean total for the unmasked parameters, reduced in batch order.
pub fn evaluate(
    objective: &Objective,
    batch: &[&Utterance],
    m: &ModelParams,
    seed: u64,
    feed: FeedOptions,
    mask: Option<&[bool]>,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::Contract("loss batch is empty".into()));
    }
    feed.validate()?;
    if let Objective::Composite(stage, w) = objective {
        w.validate()?;
        if *stage == LossStage::Train {
            if let Some(u) = batch.iter().find(|u| !u.transcribed()) {
                return Err(Error::MissingTranscript(u.id.clone()));
            }
        }
    }
    let n = batch.len() as f64;
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, utt)| item_eval(objective, m, utt, NoiseSource::for_item(seed, i), feed, mask, 1.0 / n))
        .collect::<Result<Vec<_>>>()?;

    let terms = objective.terms();
    let mut sums = vec![0.0; terms.len()];
    let mut grads = mask.map(|_| Gradients::empty(m.store().len()));
    for (values, g) in &results {
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.accumulate(g, 1.0);
        }
    }
    let mut breakdown = LossBreakdown {
        total: 0.0,
        terms: BTreeMap::new(),
    };
    for ((name, w), s) in terms.iter().zip(sums) {
        let mean = s / n;
        breakdown.total += w * mean;
        let name = if *name == "voc_natural" { "voc" } else { name };
        breakdown.terms.insert(name.to_string(), mean);
    }
    Ok((breakdown, grads))
}

fn scalar(objective: Objective, utt: &Utterance, m: &ModelParams, noise: NoiseSource) -> Result<f64> {
    let (values, _) = item_eval(&objective, m, utt, noise, FeedOptions::default(), None, 1.0)?;
    Ok(values[0])
}

/// One chain loss on one utterance, decoders teacher-forced.
pub fn chain_loss(chain: Chain, utt: &Utterance, m: &ModelParams, noise: NoiseSource) -> Result<f64> {
    scalar(Objective::Chain(chain), utt, m, noise)
}

/// Frame-averaged symmetrized KLD between `TEnc(x)` and `SEnc(y)`.
pub fn tie_loss(x: &PhonemeSequence, y: &Tensor, m: &ModelParams) -> Result<f64> {
    ensure_dim("tie frames", y.rows(), x.total_frames())?;
    let mask = vec![false; m.store().len()];
    let mut tape = Tape::new(m.store(), &mask);
    let t = nets::text_encoder(&mut tape, m, x)?;
    let yv = tape.constant(y.clone());
    let s = nets::speech_encoder(&mut tape, m, yv)?;
    let v = tape.sym_kld(t.mean, t.log_var, s.mean, s.log_var);
    Ok(tape.value(v).item())
}

/// Symmetrized KLD between `SEnc(y)` and `SEnc(ŷ)` for the utterance's
/// own speaker.
pub fn cycle_loss(utt: &Utterance, m: &ModelParams, noise: NoiseSource) -> Result<f64> {
    scalar(Objective::Cycle, utt, m, noise)
}

/// Teacher-forced next-code cross-entropy over the whole utterance.
pub fn vocoder_loss(utt: &Utterance, m: &ModelParams) -> Result<f64> {
    scalar(Objective::Vocoder, utt, m, NoiseSource::new(0))
}

pub fn composite_loss(
    stage: LossStage,
    batch: &[&Utterance],
    m: &ModelParams,
    w: &LossWeights,
    seed: u64,
) -> Result<LossBreakdown> {
    Ok(evaluate(&Objective::Composite(stage, *w), batch, m, seed, FeedOptions::default(), None)?.0)
}

/// Every objective that gradient checks cover.
pub fn all_objectives(w: &LossWeights) -> Vec<Objective> {
    let mut out: Vec<Objective> = Chain::ALL.into_iter().map(Objective::Chain).collect();
    out.extend([Objective::Tie, Objective::Cycle, Objective::Vocoder]);
    for stage in [LossStage::Train, LossStage::Adapt, LossStage::Weld] {
        out.push(Objective::Composite(stage, *w));
    }
    out
}

/// Finite-difference check of `objective`'s gradient with respect to
/// every parameter, on `batch` with noise seed `seed`.
pub fn check_gradients(
    objective: &Objective,
    batch: &[&Utterance],
    m: &ModelParams,
    seed: u64,
    eps: f64,
    selection: Selection,
) -> Result<GradReport> {
    let mask = vec![true; m.store().len()];
    grad_check(m.store(), eps, selection, |store| {
        let mm = m.with_store(store.clone());
        let (b, g) = evaluate(objective, batch, &mm, seed, FeedOptions::default(), Some(&mask))?;
        Ok((b.total, g.expect("mask requests gradients")))
    })
}
