use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::Tensor;

pub type SymbolId = u32;

/// Phoneme symbols with per-symbol frame durations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    symbols: Vec<SymbolId>,
    durations: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(symbols: Vec<SymbolId>, durations: Vec<u32>) -> Result<Self> {
        ensure_dim("phoneme durations", symbols.len(), durations.len())?;
        if symbols.is_empty() {
            return Err(Error::Contract("phoneme sequence must be non-empty".into()));
        }
        if durations.iter().any(|&d| d == 0) {
            return Err(Error::Contract("phoneme durations must be >= 1".into()));
        }
        Ok(Self { symbols, durations })
    }

    pub fn symbols(&self) -> &[SymbolId] {
        &self.symbols
    }

    pub fn durations(&self) -> &[u32] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Σ durations.
    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    /// Symbol id of every frame.
    pub fn frame_symbols(&self) -> Vec<SymbolId> {
        let mut out = Vec::with_capacity(self.total_frames());
        for (&s, &d) in self.symbols.iter().zip(&self.durations) {
            out.extend(std::iter::repeat_n(s, d as usize));
        }
        out
    }

    /// `[start, end)` frame span of each phoneme.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.durations
            .iter()
            .map(|&d| {
                let span = (start, start + d as usize);
                start += d as usize;
                span
            })
            .collect()
    }

    /// Parses lines of `symbol_id duration`; blank lines and `#` comments
    /// are skipped. A missing duration column is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut durations = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let bad = |detail: &str| Error::format("phoneme file", format!("line {}: {detail}", n + 1));
            let sym = fields
                .next()
                .ok_or_else(|| bad("empty"))?
                .parse::<SymbolId>()
                .map_err(|_| bad("symbol id is not an integer"))?;
            let dur = fields
                .next()
                .ok_or_else(|| bad("missing duration column"))?
                .parse::<u32>()
                .map_err(|_| bad("duration is not an integer"))?;
            if fields.next().is_some() {
                return Err(bad("expected exactly two columns"));
            }
            symbols.push(sym);
            durations.push(dur);
        }
        Self::new(symbols, durations)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (sym, dur) in self.symbols.iter().zip(&self.durations) {
            s.push_str(&format!("{sym} {dur}\n"));
        }
        s
    }
}

/// `T × D` acoustic frames, stored at the on-disk precision (f32).
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl AcousticFeatures {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Contract("acoustic features need T >= 1 and D >= 1".into()));
        }
        ensure_dim("acoustic feature data", frames * dim, data.len())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("acoustic features".into()));
        }
        Ok(Self { frames, dim, data })
    }

    /// Rounds to f32.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.frames,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// μ-law coded samples, `samples_per_frame` per acoustic frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Waveform {
    codes: Vec<u8>,
    samples_per_frame: u32,
}

impl Waveform {
    pub fn new(codes: Vec<u8>, samples_per_frame: u32) -> Result<Self> {
        if samples_per_frame == 0 {
            return Err(Error::Contract("samples_per_frame must be positive".into()));
        }
        if codes.len() % samples_per_frame as usize != 0 {
            return Err(Error::Contract(format!(
                "waveform length {} is not a multiple of samples_per_frame {samples_per_frame}",
                codes.len()
            )));
        }
        Ok(Self {
            codes,
            samples_per_frame,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn samples_per_frame(&self) -> u32 {
        self.samples_per_frame
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.codes.len() / self.samples_per_frame as usize
    }

    /// 16-bit PCM rendering of the decoded μ-law samples.
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.codes
            .iter()
            .map(|&c| (super::mulaw::decode(c) * f64::from(i16::MAX)).round() as i16)
            .collect()
    }
}

/// Oracle identity of one synthetic speaker. Models never read these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub language_id: String,
    /// `D × D`, row-major rows.
    pub transform: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub f0: f64,
}

impl SpeakerProfile {
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Identity transform and zero bias.
    pub fn identity(speaker_id: &str, language_id: &str, dim: usize, f0: f64) -> Self {
        let transform = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            speaker_id: speaker_id.into(),
            language_id: language_id.into(),
            transform,
            bias: vec![0.0; dim],
            f0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub split: Split,
    phonemes: Option<PhonemeSequence>,
    pub features: AcousticFeatures,
    pub waveform: Waveform,
}

impl Utterance {
    /// A transcript, if given, must cover exactly the feature frames.
    pub fn new(
        id: String,
        speaker_id: String,
        language_id: String,
        split: Split,
        phonemes: Option<PhonemeSequence>,
        features: AcousticFeatures,
        waveform: Waveform,
    ) -> Result<Self> {
        if let Some(p) = &phonemes {
            ensure_dim("transcript frames", features.frames(), p.total_frames())?;
        }
        ensure_dim(
            "waveform length",
            features.frames() * waveform.samples_per_frame() as usize,
            waveform.len(),
        )?;
        Ok(Self {
            id,
            speaker_id,
            language_id,
            split,
            phonemes,
            features,
            waveform,
        })
    }

    pub fn transcribed(&self) -> bool {
        self.phonemes.is_some()
    }

    /// Fails for untranscribed speech.
    pub fn phonemes(&self) -> Result<&PhonemeSequence> {
        self.phonemes
            .as_ref()
            .ok_or_else(|| Error::MissingTranscript(self.id.clone()))
    }

    pub fn without_transcript(mut self) -> Self {
        self.phonemes = None;
        self
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }
}
