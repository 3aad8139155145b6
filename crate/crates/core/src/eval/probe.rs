use serde::{Deserialize, Serialize};

use crate::corpus::{AcousticFeatures, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Frame-level linear speaker classifier over standardized features.
/// Bias-free, so the logits of a frame at the training mean are all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProbe {
    speakers: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `D × N`.
    weights: Tensor,
}

impl SpeakerProbe {
    /// Trains on every frame of `utterances` by full-batch gradient
    /// descent on L2-regularized softmax cross-entropy. Speakers are
    /// ordered by first appearance.
    pub fn train(utterances: &[&Utterance], cfg: &ProbeConfig) -> Result<Self> {
        let first = utterances
            .first()
            .ok_or_else(|| Error::Contract("speaker probe needs training utterances".into()))?;
        let dim = first.features.dim();
        let mut speakers: Vec<String> = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for u in utterances {
            if u.features.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "probe feature dim",
                    expected: dim,
                    found: u.features.dim(),
                });
            }
            let k = match speakers.iter().position(|s| *s == u.speaker_id) {
                Some(k) => k,
                None => {
                    speakers.push(u.speaker_id.clone());
                    speakers.len() - 1
                }
            };
            for t in 0..u.frames() {
                rows.extend(u.features.frame(t).iter().map(|&v| f64::from(v)));
                labels.push(k);
            }
        }
        let n = labels.len();
        let mut x = Tensor::from_vec(n, dim, rows);
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in scale.iter_mut() {
            *s = s.sqrt().max(1e-8);
        }
        for r in 0..n {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) / s;
            }
        }

        let classes = speakers.len();
        let mut w = Tensor::zeros(dim, classes);
        for _ in 0..cfg.iterations {
            let mut probs = x.matmul(&w);
            for r in 0..n {
                let row = probs.row_mut(r);
                softmax_in_place(row);
                row[labels[r]] -= 1.0;
            }
            let mut grad = Tensor::zeros(dim, classes);
            x.matmul_tn_into(&probs, &mut grad);
            grad.scale_in_place(1.0 / n as f64);
            grad.add_scaled(&w, 2.0 * cfg.l2);
            w.add_scaled(&grad, -cfg.learning_rate);
        }
        Ok(Self {
            speakers,
            mean,
            scale,
            weights: w,
        })
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(speaker_id.into()))
    }

    pub fn feature_mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn feature_scale(&self) -> &[f64] {
        &self.scale
    }

    /// `T × N` per-frame speaker posteriors.
    pub fn posteriors(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "probe feature dim",
                expected: self.mean.len(),
                found: features.cols(),
            });
        }
        let mut x = features.clone();
        for r in 0..x.rows() {
            for ((v, m), s) in x.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        let mut p = x.matmul(&self.weights);
        for r in 0..p.rows() {
            softmax_in_place(p.row_mut(r));
        }
        Ok(p)
    }

    /// Mean posterior per speaker over all frames.
    pub fn mean_posterior(&self, features: &Tensor) -> Result<Vec<f64>> {
        let p = self.posteriors(features)?;
        let mut out = vec![0.0; self.speakers.len()];
        for r in 0..p.rows() {
            for (o, v) in out.iter_mut().zip(p.row(r)) {
                *o += v / p.rows() as f64;
            }
        }
        Ok(out)
    }

    /// Mean posterior probability of `speaker_id` over frames.
    pub fn similarity(&self, features: &Tensor, speaker_id: &str) -> Result<f64> {
        let k = self.speaker_index(speaker_id)?;
        Ok(self.mean_posterior(features)?[k])
    }

    /// Speaker with the largest mean posterior.
    pub fn classify(&self, features: &Tensor) -> Result<&str> {
        let p = self.mean_posterior(features)?;
        let best = p
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
        Ok(&self.speakers[best])
    }
}

pub fn train_speaker_probe(utterances: &[&Utterance]) -> Result<SpeakerProbe> {
    SpeakerProbe::train(utterances, &ProbeConfig::default())
}

pub fn speaker_similarity(features: &AcousticFeatures, probe: &SpeakerProbe, speaker_id: &str) -> Result<f64> {
    probe.similarity(&features.to_tensor(), speaker_id)
}
