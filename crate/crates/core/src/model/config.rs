use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Everything that shapes a parameter
/// tensor lives here, so the SHA-256 of this struct identifies which
/// checkpoints are interchangeable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Union phoneme inventory size `V`.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub samples_per_frame: u32,
    /// Training speakers; the speaker table gets one extra row for the
    /// adaptation target.
    pub speakers: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub enc_channels: usize,
    pub enc_layers: usize,
    pub enc_kernel: usize,
    pub tdec_hidden: usize,
    pub dec_hidden: usize,
    pub speaker_dim: usize,
    pub voc_channels: usize,
    pub voc_dilations: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 28,
            feature_dim: 8,
            samples_per_frame: 16,
            speakers: 8,
            embed_dim: 16,
            latent_dim: 16,
            enc_channels: 32,
            enc_layers: 3,
            enc_kernel: 5,
            tdec_hidden: 32,
            dec_hidden: 64,
            speaker_dim: 8,
            voc_channels: 32,
            voc_dilations: vec![1, 2, 4, 8],
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("samples_per_frame", self.samples_per_frame as usize),
            ("speakers", self.speakers),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("enc_channels", self.enc_channels),
            ("enc_layers", self.enc_layers),
            ("tdec_hidden", self.tdec_hidden),
            ("dec_hidden", self.dec_hidden),
            ("speaker_dim", self.speaker_dim),
            ("voc_channels", self.voc_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
            }
        }
        if self.enc_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "model.enc_kernel must be odd, got {}",
                self.enc_kernel
            )));
        }
        if self.voc_dilations.contains(&0) {
            return Err(Error::InvalidConfig("model.voc_dilations must be positive".into()));
        }
        Ok(())
    }

    /// Frames on each side of a position that can influence an encoder
    /// output at that position.
    pub fn encoder_receptive_radius(&self) -> usize {
        self.enc_layers * (self.enc_kernel / 2)
    }

    /// Past samples (including the immediately preceding one) visible to
    /// the vocoder's sample stack.
    pub fn vocoder_receptive_field(&self) -> usize {
        2 + self.voc_dilations.iter().sum::<usize>()
    }

    /// Rows of the speaker table: training speakers plus the target slot.
    pub fn speaker_rows(&self) -> usize {
        self.speakers + 1
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model config serializes");
        Sha256::digest(&json).into()
    }
}

/// Parameter groups; every parameter belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Tenc,
    Senc,
    Tdec,
    Sdec,
    Voc,
    SpeakerTable,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Tenc,
        Group::Senc,
        Group::Tdec,
        Group::Sdec,
        Group::Voc,
        Group::SpeakerTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Tenc => "tenc",
            Group::Senc => "senc",
            Group::Tdec => "tdec",
            Group::Sdec => "sdec",
            Group::Voc => "voc",
            Group::SpeakerTable => "speaker_table",
        }
    }

    /// Group owning the parameter called `name`.
    pub fn of_param(name: &str) -> Option<Group> {
        let prefix = name.split('.').next().unwrap_or(name);
        Group::ALL.into_iter().find(|g| g.name() == prefix)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter group `{s}`")))
    }
}
