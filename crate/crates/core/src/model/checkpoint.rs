//! Binary checkpoint format.
//!
//! ```text
//! "LLEC" | version u32 | stage u8 | config_hash [32]
//! n_tensors u32 | tensors...                      model parameters
//! rng state (56 bytes)
//! config_len u32 | model config JSON
//! n_speakers u32 | (len u32, utf-8)...            speaker-table row names
//! has_target u8 | (len u32, utf-8)?
//! has_progress u8 | progress?
//! ```
//!
//! A tensor is `name_len u32 | name | ndims u8 | dims u32... | dtype u8 |
//! payload`, dtype 1 = f32, 2 = f64, little-endian. Progress records an
//! unfinished stage: `phase u32 | step u64 | n u32 | tensors... |
//! state_len u32 | state JSON`.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LLEC";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initial = 0,
    Adapted = 1,
    Welded = 2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Adapted => "adapted",
            Stage::Welded => "welded",
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Stage::Initial),
            1 => Ok(Stage::Adapted),
            2 => Ok(Stage::Welded),
            _ => Err(Error::format("checkpoint", format!("unknown stage byte {b}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Resumable position inside a stage that has not finished. `tensors`
/// and `state` are owned by the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub phase: u32,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub state: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Stage the parameters belong to; with `progress` set, the stage
    /// being produced.
    pub stage: Stage,
    pub rng_state: RngState,
    pub target_speaker: Option<String>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.params.config().hash()
    }

    pub fn is_complete(&self) -> bool {
        self.progress.is_none()
    }

    /// Target speaker, required for cross-lingual inference.
    pub fn target(&self) -> Result<&str> {
        match (&self.target_speaker, self.stage) {
            (Some(t), Stage::Adapted | Stage::Welded) => Ok(t),
            _ => Err(Error::Stage(format!(
                "checkpoint at stage `{}` has no adapted target speaker",
                self.stage
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        let slot = &self.params.speakers()[self.params.target_slot()];
        match (self.stage, &self.target_speaker) {
            (Stage::Initial, None) if slot.is_empty() => Ok(()),
            (Stage::Adapted | Stage::Welded, Some(t)) if t == slot => Ok(()),
            _ => Err(Error::Stage(format!(
                "checkpoint stage `{}` is inconsistent with its target speaker binding",
                self.stage
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        w.push(self.stage as u8);
        w.extend_from_slice(&self.config_hash());
        let entries = self.params.store().entries();
        put_u32(&mut w, entries.len() as u32);
        for e in entries {
            put_tensor(&mut w, &e.name, &e.value);
        }
        w.extend_from_slice(&self.rng_state.to_bytes());
        let json = serde_json::to_vec(self.params.config())?;
        put_bytes(&mut w, &json);
        put_u32(&mut w, self.params.speakers().len() as u32);
        for s in self.params.speakers() {
            put_bytes(&mut w, s.as_bytes());
        }
        match &self.target_speaker {
            Some(t) => {
                w.push(1);
                put_bytes(&mut w, t.as_bytes());
            }
            None => w.push(0),
        }
        match &self.progress {
            Some(p) => {
                w.push(1);
                put_u32(&mut w, p.phase);
                w.extend_from_slice(&p.step.to_le_bytes());
                put_u32(&mut w, p.tensors.len() as u32);
                for (name, t) in &p.tensors {
                    put_tensor(&mut w, name, t);
                }
                put_bytes(&mut w, p.state.as_bytes());
            }
            None => w.push(0),
        }
        Ok(w)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let stage = Stage::from_byte(r.u8()?)?;
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if store.id(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate tensor `{name}`")));
            }
            store.add(name, t);
        }
        let rng_state = RngState::from_bytes(r.take(RngState::BYTES)?.try_into().unwrap());
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::format("checkpoint", format!("model config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::ConfigHashMismatch);
        }
        let ns = r.u32()? as usize;
        let speakers = (0..ns).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let target_speaker = match r.u8()? {
            0 => None,
            1 => Some(r.string()?),
            b => return Err(Error::format("checkpoint", format!("bad target flag {b}"))),
        };
        let progress = match r.u8()? {
            0 => None,
            1 => {
                let phase = r.u32()?;
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let nt = r.u32()? as usize;
                let tensors = (0..nt).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let state = r.string()?;
                Some(Progress {
                    phase,
                    step,
                    tensors,
                    state,
                })
            }
            b => return Err(Error::format("checkpoint", format!("bad progress flag {b}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let ckpt = Checkpoint {
            params: ModelParams::from_parts(config, store, speakers)?,
            stage,
            rng_state,
            target_speaker,
            progress,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf)
}

/// Loads and additionally requires the checkpoint to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash() != expected.hash() {
        return Err(Error::ConfigHashMismatch);
    }
    Ok(ckpt)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len() as u32);
    w.extend_from_slice(b);
}

fn put_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(w, name.as_bytes());
    w.push(2);
    put_u32(w, t.rows() as u32);
    put_u32(w, t.cols() as u32);
    w.push(DTYPE_F64);
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format("checkpoint", "truncated")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid utf-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let ndims = self.u8()? as usize;
        let dims = (0..ndims).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::format("checkpoint", format!("tensor `{name}` has {ndims} dims"))),
        };
        let len = rows * cols;
        let data: Vec<f64> = match self.u8()? {
            DTYPE_F32 => self
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            DTYPE_F64 => self
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            d => return Err(Error::format("checkpoint", format!("tensor `{name}` has dtype {d}"))),
        };
        Ok((name, Tensor::from_vec(rows, cols, data)))
    }
}
