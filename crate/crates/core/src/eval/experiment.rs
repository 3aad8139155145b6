use serde::{Deserialize, Serialize};

use super::{mel_distortion, ProbeConfig, SpeakerProbe};
use crate::corpus::{render_features, Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::model::{decode_speech, encode_speech, encode_text, lle_means, Checkpoint, DecodeMode, ModelParams};
use crate::numerics::Tensor;

/// Per-item scores of one held-out conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualItem {
    pub utterance_id: String,
    pub source_speaker: String,
    /// Probe similarity of the VC output to the target and to the source.
    pub target_similarity: f64,
    pub source_similarity: f64,
    /// Target similarity of the same conversion through the baseline model.
    pub baseline_target_similarity: Option<f64>,
    /// Distortion to the noise-free target rendering of the same content.
    pub tts_distortion: f64,
    pub vc_distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualReport {
    pub target_speaker: String,
    pub items: Vec<CrossLingualItem>,
}

impl CrossLingualReport {
    fn mean(&self, f: impl Fn(&CrossLingualItem) -> f64) -> f64 {
        self.items.iter().map(f).sum::<f64>() / self.items.len() as f64
    }

    pub fn target_similarity(&self) -> f64 {
        self.mean(|i| i.target_similarity)
    }

    pub fn source_similarity(&self) -> f64 {
        self.mean(|i| i.source_similarity)
    }

    pub fn baseline_target_similarity(&self) -> Option<f64> {
        let all: Option<Vec<f64>> = self.items.iter().map(|i| i.baseline_target_similarity).collect();
        all.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn tts_distortion(&self) -> f64 {
        self.mean(|i| i.tts_distortion)
    }

    pub fn vc_distortion(&self) -> f64 {
        self.mean(|i| i.vc_distortion)
    }

    /// `|tts − vc| / min(tts, vc)`.
    pub fn consistency_gap(&self) -> f64 {
        let (t, v) = (self.tts_distortion(), self.vc_distortion());
        (t - v).abs() / t.min(v)
    }
}

/// Held-out transcribed utterances of non-target speakers, taken
/// round-robin over speakers so every source speaker is represented.
pub fn heldout_sources<'a>(corpus: &'a Corpus, target: &str, n: usize) -> Vec<&'a Utterance> {
    let mut per_speaker: Vec<Vec<&Utterance>> = Vec::new();
    for spk in corpus.speaker_ids() {
        if spk == target {
            continue;
        }
        let utts: Vec<&Utterance> = corpus
            .select(None, Some(spk), Some(Split::Heldout))
            .filter(|u| u.transcribed())
            .collect();
        if !utts.is_empty() {
            per_speaker.push(utts);
        }
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n && per_speaker.iter().any(|u| round < u.len()) {
        for utts in &per_speaker {
            if out.len() < n && round < utts.len() {
                out.push(utts[round]);
            }
        }
        round += 1;
    }
    out
}

/// Probe over every speaker's training features.
pub fn corpus_probe(corpus: &Corpus, cfg: &ProbeConfig) -> Result<SpeakerProbe> {
    let train: Vec<&Utterance> = corpus.select(None, None, Some(Split::Train)).collect();
    SpeakerProbe::train(&train, cfg)
}

fn vc_features(m: &ModelParams, y: &Tensor, speaker: &str) -> Result<Tensor> {
    let z = lle_means(&encode_speech(m, y)?);
    decode_speech(m, &z, speaker, DecodeMode::FreeRunning)
}

/// Scores VC and TTS into `target` by `m` on `n_items` held-out
/// utterances of the other speakers, against noise-free renderings of
/// the same content in the target's voice. `baseline`, if given, must
/// also know `target`.
pub fn conversion_eval(
    corpus: &Corpus,
    m: &ModelParams,
    target: &str,
    baseline: Option<&ModelParams>,
    probe: &SpeakerProbe,
    n_items: usize,
) -> Result<CrossLingualReport> {
    m.speaker_index(target)?;
    probe.speaker_index(target)?;
    let profile = corpus.speakers.profile(target)?;
    let sources = heldout_sources(corpus, target, n_items);
    if sources.is_empty() {
        return Err(Error::Contract("no held-out source utterances to evaluate".into()));
    }
    let mut items = Vec::with_capacity(sources.len());
    for u in sources {
        let x = u.phonemes()?;
        let y = u.features.to_tensor();
        let oracle = render_features(profile, x, &corpus.speakers.prototypes, 0.0, 0)?.to_tensor();
        let vc = vc_features(m, &y, target)?;
        let tts = decode_speech(m, &lle_means(&encode_text(m, x)?), target, DecodeMode::FreeRunning)?;
        let post = probe.mean_posterior(&vc)?;
        let baseline_target_similarity = match baseline {
            Some(b) => Some(probe.similarity(&vc_features(b, &y, target)?, target)?),
            None => None,
        };
        items.push(CrossLingualItem {
            utterance_id: u.id.clone(),
            source_speaker: u.speaker_id.clone(),
            target_similarity: post[probe.speaker_index(target)?],
            source_similarity: post[probe.speaker_index(&u.speaker_id)?],
            baseline_target_similarity,
            tts_distortion: mel_distortion(&tts, &oracle)?,
            vc_distortion: mel_distortion(&vc, &oracle)?,
        });
    }
    Ok(CrossLingualReport {
        target_speaker: target.to_string(),
        items,
    })
}

/// [`conversion_eval`] into the adapted target of `adapted`, with the
/// initial checkpoint `initial` (target slot bound untrained) as baseline.
pub fn cross_lingual_eval(
    corpus: &Corpus,
    adapted: &Checkpoint,
    initial: &Checkpoint,
    probe: &SpeakerProbe,
    n_items: usize,
) -> Result<CrossLingualReport> {
    let target = adapted.target()?;
    let mut base = initial.params.clone();
    base.bind_target(target)?;
    conversion_eval(corpus, &adapted.params, target, Some(&base), probe, n_items)
}
