//! Synthetic speech oracle: speaker profiles, feature rendering and
//! waveform rendering.
//!
//! A frame inside phoneme `p` at relative position `τ` is
//! `A·(proto(p)·env(τ)) + b + σ·ε`. The last prototype component is zero
//! and generated speakers put their `f0` in the last bias component, so
//! that channel carries pitch. Waveforms are a sum of sinusoids at
//! harmonics of `f0`, amplitude-driven by the first feature channels.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mulaw;
use super::types::{AcousticFeatures, PhonemeSequence, SpeakerProfile, Waveform};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const MAX_CONDITION_NUMBER: f64 = 10.0;
pub const F0_RANGE: (f64, f64) = (0.5, 2.0);
/// Feature channels that drive waveform harmonics.
pub const HARMONICS: usize = 3;
const HARMONIC_GAIN: f64 = 0.35;

/// One prototype vector per symbol id (union over languages).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub vectors: Vec<Vec<f64>>,
}

impl PrototypeBank {
    pub fn generate(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x5052_4f54]);
        let vectors = (0..vocab)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                v[dim - 1] = 0.0;
                v
            })
            .collect();
        Self { vectors }
    }

    pub fn get(&self, symbol: u32) -> Result<&[f64]> {
        self.vectors
            .get(symbol as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownSymbol(symbol))
    }

    pub fn vocab(&self) -> usize {
        self.vectors.len()
    }
}

/// Within-phoneme envelope at relative position `τ ∈ (0, 1)`.
pub fn envelope(tau: f64) -> f64 {
    0.5 + 0.5 * (PI * tau).sin()
}

pub fn condition_number(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Random well-conditioned speaker: `A = I + 0.3·G/√D`, `b ~ N(0, 1.5²)`,
/// `f0 ~ U[0.5, 2]` stored in the last bias component.
pub fn generate_profile(speaker_id: &str, language_id: &str, dim: usize, seed: u64) -> SpeakerProfile {
    let mut rng = rng_from(seed, &[0x5350_4b52]);
    let scale = 0.3 / (dim as f64).sqrt();
    let transform = loop {
        let a: Vec<Vec<f64>> = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        let g: f64 = rng.sample(StandardNormal);
                        if i == j { 1.0 + scale * g } else { scale * g }
                    })
                    .collect()
            })
            .collect();
        if condition_number(&a) < MAX_CONDITION_NUMBER / 2.0 {
            break a;
        }
    };
    let f0 = rng.random_range(F0_RANGE.0..=F0_RANGE.1);
    let mut bias: Vec<f64> = (0..dim).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    bias[dim - 1] = f0;
    SpeakerProfile {
        speaker_id: speaker_id.into(),
        language_id: language_id.into(),
        transform,
        bias,
        f0,
    }
}

/// Renders acoustic frames for `phonemes` spoken by `speaker`. Noise is
/// drawn from `noise_seed`; with `sigma = 0` the output is noise-free.
pub fn render_features(
    speaker: &SpeakerProfile,
    phonemes: &PhonemeSequence,
    prototypes: &PrototypeBank,
    sigma: f64,
    noise_seed: u64,
) -> Result<AcousticFeatures> {
    let dim = speaker.dim();
    let mut rng = rng_from(noise_seed, &[0x4e4f_4953]);
    let mut data = Vec::with_capacity(phonemes.total_frames() * dim);
    let mut clean = vec![0.0; dim];
    for (&sym, &dur) in phonemes.symbols().iter().zip(phonemes.durations()) {
        let proto = prototypes.get(sym)?;
        if proto.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "prototype dimension",
                expected: dim,
                found: proto.len(),
            });
        }
        for i in 0..dur {
            let env = envelope((f64::from(i) + 0.5) / f64::from(dur));
            for (c, x) in clean.iter_mut().zip(proto) {
                *c = x * env;
            }
            for r in 0..dim {
                let mut v = speaker.bias[r];
                for (a, c) in speaker.transform[r].iter().zip(&clean) {
                    v += a * c;
                }
                if sigma > 0.0 {
                    v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                data.push(v as f32);
            }
        }
    }
    AcousticFeatures::new(phonemes.total_frames(), dim, data)
}

/// Sum-of-sinusoids waveform at harmonics of the speaker's `f0`, μ-law coded.
pub fn render_waveform(
    features: &AcousticFeatures,
    speaker: &SpeakerProfile,
    samples_per_frame: u32,
) -> Result<Waveform> {
    if samples_per_frame == 0 {
        return Err(Error::Contract("samples_per_frame must be positive".into()));
    }
    let spf = samples_per_frame as usize;
    let harmonics = HARMONICS.min(features.dim());
    let mut codes = Vec::with_capacity(features.frames() * spf);
    for t in 0..features.frames() {
        let frame = features.frame(t);
        for n in 0..spf {
            let m = (t * spf + n) as f64;
            let mut x = 0.0;
            for (k, &amp) in frame.iter().take(harmonics).enumerate() {
                let phase = 2.0 * PI * (k as f64 + 1.0) * speaker.f0 * m / spf as f64;
                x += HARMONIC_GAIN * f64::from(amp) * phase.sin();
            }
            codes.push(mulaw::encode(x.tanh()));
        }
    }
    Waveform::new(codes, samples_per_frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> PhonemeSequence {
        PhonemeSequence::new(vec![0, 3, 1], vec![2, 4, 3]).unwrap()
    }

    #[test]
    fn identity_speaker_reproduces_prototype_envelope() {
        let bank = PrototypeBank::generate(5, 4, 9);
        let spk = SpeakerProfile::identity("s", "A", 4, 1.0);
        let f = render_features(&spk, &seq(), &bank, 0.0, 1).unwrap();
        assert_eq!(f.frames(), 9);
        let mut t = 0;
        for (&sym, &dur) in seq().symbols().iter().zip(seq().durations()) {
            for i in 0..dur {
                let env = envelope((f64::from(i) + 0.5) / f64::from(dur));
                let expected: Vec<f32> = bank.vectors[sym as usize].iter().map(|v| (v * env) as f32).collect();
                assert_eq!(f.frame(t), expected.as_slice());
                t += 1;
            }
        }
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let bank = PrototypeBank::generate(2, 4, 9);
        let spk = SpeakerProfile::identity("s", "A", 4, 1.0);
        let p = PhonemeSequence::new(vec![5], vec![1]).unwrap();
        assert!(matches!(render_features(&spk, &p, &bank, 0.0, 1), Err(Error::UnknownSymbol(5))));
    }

    #[test]
    fn generated_profiles_are_well_conditioned() {
        for k in 0..20 {
            let p = generate_profile("s", "A", 8, k);
            assert!(condition_number(&p.transform) < MAX_CONDITION_NUMBER);
            assert!((F0_RANGE.0..=F0_RANGE.1).contains(&p.f0));
            assert_eq!(p.bias[7], p.f0);
        }
    }

    #[test]
    fn zero_features_give_constant_mid_code() {
        let f = AcousticFeatures::new(3, 4, vec![0.0; 12]).unwrap();
        let spk = SpeakerProfile::identity("s", "A", 4, 1.3);
        let w = render_waveform(&f, &spk, 16).unwrap();
        assert_eq!(w.len(), 48);
        assert!(w.codes().iter().all(|&c| c == mulaw::MID_CODE));
    }

    #[test]
    fn waveform_length_contract() {
        let bank = PrototypeBank::generate(5, 8, 2);
        let spk = generate_profile("s", "A", 8, 3);
        let f = render_features(&spk, &seq(), &bank, 0.05, 4).unwrap();
        let w = render_waveform(&f, &spk, 16).unwrap();
        assert_eq!(w.len(), f.frames() * 16);
        assert!(w.codes().iter().any(|&c| c != mulaw::MID_CODE));
    }
}
