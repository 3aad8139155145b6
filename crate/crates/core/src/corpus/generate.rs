use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{generate_profile, render_features, render_waveform, PrototypeBank};
use super::types::{PhonemeSequence, SpeakerProfile, Split, SymbolId, Utterance};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    /// Global symbol ids spoken in this language.
    pub inventory: Vec<SymbolId>,
    pub speakers: usize,
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    /// Untranscribed languages ship features and waveforms only.
    pub transcribed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub feature_dim: usize,
    pub samples_per_frame: u32,
    pub noise_sigma: f64,
    /// Inclusive bounds on phonemes per utterance.
    pub phonemes_per_utterance: (usize, usize),
    /// Inclusive bounds on frames per phoneme.
    pub duration_frames: (u32, u32),
    pub seed: u64,
    pub languages: Vec<LanguageSpec>,
}

impl Default for CorpusSpec {
    /// Language A: 20 symbols, 8 transcribed speakers. Language B: 24
    /// symbols (8 absent from A), one untranscribed target with 70
    /// adaptation utterances.
    fn default() -> Self {
        Self {
            feature_dim: 8,
            samples_per_frame: 16,
            noise_sigma: 0.05,
            phonemes_per_utterance: (5, 9),
            duration_frames: (2, 6),
            seed: 2020,
            languages: vec![
                LanguageSpec {
                    id: "A".into(),
                    inventory: (0..20).collect(),
                    speakers: 8,
                    train_utterances: 50,
                    heldout_utterances: 6,
                    transcribed: true,
                },
                LanguageSpec {
                    id: "B".into(),
                    inventory: (4..28).collect(),
                    speakers: 1,
                    train_utterances: 70,
                    heldout_utterances: 10,
                    transcribed: false,
                },
            ],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.samples_per_frame == 0 {
            return bad("samples_per_frame must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let (pmin, pmax) = self.phonemes_per_utterance;
        if pmin == 0 || pmin > pmax {
            return bad(format!("phonemes_per_utterance bounds ({pmin}, {pmax}) invalid"));
        }
        let (dmin, dmax) = self.duration_frames;
        if dmin == 0 || dmin > dmax {
            return bad(format!("duration_frames bounds ({dmin}, {dmax}) invalid"));
        }
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        let mut ids = BTreeSet::new();
        for lang in &self.languages {
            if !ids.insert(lang.id.as_str()) {
                return bad(format!("duplicate language id `{}`", lang.id));
            }
            if lang.id.is_empty() || !lang.id.chars().all(|c| c.is_ascii_alphanumeric()) {
                return bad(format!("language id `{}` must be ascii alphanumeric", lang.id));
            }
            if lang.inventory.is_empty() {
                return bad(format!("language `{}` has an empty inventory", lang.id));
            }
            let uniq: BTreeSet<_> = lang.inventory.iter().collect();
            if uniq.len() != lang.inventory.len() {
                return bad(format!("language `{}` inventory has duplicates", lang.id));
            }
            if lang.speakers == 0 {
                return bad(format!("language `{}` needs at least one speaker", lang.id));
            }
            if lang.train_utterances + lang.heldout_utterances == 0 {
                return bad(format!("language `{}` has no utterances", lang.id));
            }
        }
        Ok(())
    }

    /// Size of the union inventory: one past the largest symbol id.
    pub fn vocab_size(&self) -> usize {
        self.languages
            .iter()
            .flat_map(|l| l.inventory.iter())
            .map(|&s| s as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn language(&self, id: &str) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.id == id)
    }
}

/// Oracle tables stored alongside a corpus for evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub prototypes: PrototypeBank,
    pub profiles: Vec<SpeakerProfile>,
}

impl SpeakerTable {
    pub fn profile(&self, speaker_id: &str) -> Result<&SpeakerProfile> {
        self.profiles
            .iter()
            .find(|p| p.speaker_id == speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(speaker_id.into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub speakers: SpeakerTable,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size()
    }

    pub fn speaker_ids(&self) -> Vec<&str> {
        self.speakers.profiles.iter().map(|p| p.speaker_id.as_str()).collect()
    }

    pub fn speakers_of(&self, language_id: &str) -> Vec<&str> {
        self.speakers
            .profiles
            .iter()
            .filter(|p| p.language_id == language_id)
            .map(|p| p.speaker_id.as_str())
            .collect()
    }

    pub fn find(&self, utterance_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == utterance_id)
    }

    pub fn select<'a>(
        &'a self,
        language_id: Option<&'a str>,
        speaker_id: Option<&'a str>,
        split: Option<Split>,
    ) -> impl Iterator<Item = &'a Utterance> + 'a {
        self.utterances.iter().filter(move |u| {
            language_id.is_none_or(|l| u.language_id == l)
                && speaker_id.is_none_or(|s| u.speaker_id == s)
                && split.is_none_or(|s| u.split == s)
        })
    }
}

pub fn speaker_name(language_id: &str, index: usize) -> String {
    format!("{language_id}{index:02}")
}

fn sample_phonemes(spec: &CorpusSpec, inventory: &[SymbolId], rng: &mut impl Rng) -> PhonemeSequence {
    let (pmin, pmax) = spec.phonemes_per_utterance;
    let (dmin, dmax) = spec.duration_frames;
    let n = rng.random_range(pmin..=pmax);
    let mut symbols: Vec<SymbolId> = Vec::with_capacity(n);
    while symbols.len() < n {
        let s = inventory[rng.random_range(0..inventory.len())];
        if inventory.len() == 1 || symbols.last() != Some(&s) {
            symbols.push(s);
        }
    }
    let durations = (0..n).map(|_| rng.random_range(dmin..=dmax)).collect();
    PhonemeSequence::new(symbols, durations).expect("sampled sequence is valid")
}

/// Deterministic function of `(spec, seed)`; `spec.seed` is ignored in
/// favor of the explicit argument.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let prototypes = PrototypeBank::generate(spec.vocab_size(), dim, seed);

    let mut profiles = Vec::new();
    // (language index, speaker profile index, split, utterance index within split)
    let mut jobs = Vec::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        for k in 0..lang.speakers {
            let name = speaker_name(&lang.id, k);
            let profile = generate_profile(&name, &lang.id, dim, derive_seed(seed, &[1, li as u64, k as u64]));
            let pi = profiles.len();
            profiles.push(profile);
            for i in 0..lang.train_utterances {
                jobs.push((li, pi, Split::Train, i));
            }
            for i in 0..lang.heldout_utterances {
                jobs.push((li, pi, Split::Heldout, i));
            }
        }
    }

    let utterances = jobs
        .par_iter()
        .map(|&(li, pi, split, i)| {
            let lang = &spec.languages[li];
            let profile = &profiles[pi];
            let split_tag = match split {
                Split::Train => 0,
                Split::Heldout => 1,
            };
            let utt_seed = derive_seed(seed, &[2, pi as u64, split_tag, i as u64]);
            let mut rng = rng_from(utt_seed, &[]);
            let phonemes = sample_phonemes(spec, &lang.inventory, &mut rng);
            let features = render_features(profile, &phonemes, &prototypes, spec.noise_sigma, utt_seed)?;
            let waveform = render_waveform(&features, profile, spec.samples_per_frame)?;
            let tag = match split {
                Split::Train => "train",
                Split::Heldout => "heldout",
            };
            Utterance::new(
                format!("{}_{tag}{i:03}", profile.speaker_id),
                profile.speaker_id.clone(),
                lang.id.clone(),
                split,
                lang.transcribed.then_some(phonemes),
                features,
                waveform,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        spec: spec.clone(),
        seed,
        speakers: SpeakerTable {
            prototypes,
            profiles,
        },
        utterances,
    })
}
