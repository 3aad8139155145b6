//! On-disk corpus layout.
//!
//! ```text
//! <dir>/corpus.json        spec + seed
//! <dir>/speakers.json      oracle prototypes and speaker profiles
//! <dir>/manifest.jsonl     one record per utterance
//! <dir>/features/<id>.llef
//! <dir>/waveforms/<id>.llew
//! <dir>/phonemes/<id>.txt  transcribed utterances only
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{Corpus, CorpusSpec, SpeakerTable};
use super::types::{AcousticFeatures, PhonemeSequence, Split, Utterance, Waveform};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"LLEF";
pub const WAVEFORM_MAGIC: &[u8; 4] = b"LLEW";
pub const BLOB_VERSION: u32 = 1;
pub const CORPUS_FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEAKERS_FILE: &str = "speakers.json";
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub split: Split,
    pub transcribed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_file: Option<String>,
    pub feature_file: String,
    pub waveform_file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format_version: u32,
    seed: u64,
    spec: CorpusSpec,
}

fn read_u32(buf: &[u8], at: usize) -> Option<u32> {
    buf.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn encode_features(f: &AcousticFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(buf: &[u8], what: &str) -> Result<AcousticFeatures> {
    if buf.get(..4) != Some(FEATURE_MAGIC) {
        return Err(Error::format(what, "bad feature magic"));
    }
    let version = read_u32(buf, 4).ok_or_else(|| Error::format(what, "truncated header"))?;
    if version != BLOB_VERSION {
        return Err(Error::Version {
            what: "feature blob",
            found: version,
            supported: BLOB_VERSION,
        });
    }
    let (t, d) = match (read_u32(buf, 8), read_u32(buf, 12)) {
        (Some(t), Some(d)) => (t as usize, d as usize),
        _ => return Err(Error::format(what, "truncated header")),
    };
    let payload = &buf[16..];
    if payload.len() != t * d * 4 {
        return Err(Error::format(
            what,
            format!("truncated blob: expected {} payload bytes, found {}", t * d * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AcousticFeatures::new(t, d, data)
}

pub fn encode_waveform(w: &Waveform) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + w.len());
    out.extend_from_slice(WAVEFORM_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.samples_per_frame().to_le_bytes());
    out.extend_from_slice(w.codes());
    out
}

pub fn decode_waveform(buf: &[u8], what: &str) -> Result<Waveform> {
    if buf.get(..4) != Some(WAVEFORM_MAGIC) {
        return Err(Error::format(what, "bad waveform magic"));
    }
    let version = read_u32(buf, 4).ok_or_else(|| Error::format(what, "truncated header"))?;
    if version != BLOB_VERSION {
        return Err(Error::Version {
            what: "waveform blob",
            found: version,
            supported: BLOB_VERSION,
        });
    }
    let (len, spf) = match (read_u32(buf, 8), read_u32(buf, 12)) {
        (Some(l), Some(s)) => (l as usize, s),
        _ => return Err(Error::format(what, "truncated header")),
    };
    let payload = &buf[16..];
    if payload.len() != len {
        return Err(Error::format(
            what,
            format!("truncated blob: expected {len} codes, found {}", payload.len()),
        ));
    }
    Waveform::new(payload.to_vec(), spf)
}

pub fn read_features_file(path: &Path) -> Result<AcousticFeatures> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&buf, &path.display().to_string())
}

pub fn write_features_file(path: &Path, f: &AcousticFeatures) -> Result<()> {
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_waveform_file(path: &Path) -> Result<Waveform> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_waveform(&buf, &path.display().to_string())
}

pub fn write_waveform_file(path: &Path, w: &Waveform) -> Result<()> {
    fs::write(path, encode_waveform(w)).map_err(|e| Error::io(path, e))
}

pub fn read_phoneme_file(path: &Path) -> Result<PhonemeSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PhonemeSequence::parse(&text)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes every file of the corpus under `dir`, creating it if needed.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for sub in ["features", "waveforms", "phonemes"] {
        create_dir(&dir.join(sub))?;
    }
    write_json(
        &dir.join(CORPUS_FILE),
        &CorpusHeader {
            format_version: CORPUS_FORMAT_VERSION,
            seed: corpus.seed,
            spec: corpus.spec.clone(),
        },
    )?;
    write_json(&dir.join(SPEAKERS_FILE), &corpus.speakers)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for u in &corpus.utterances {
        let feature_file = format!("features/{}.llef", u.id);
        let waveform_file = format!("waveforms/{}.llew", u.id);
        write_features_file(&dir.join(&feature_file), &u.features)?;
        write_waveform_file(&dir.join(&waveform_file), &u.waveform)?;
        let phoneme_file = match u.phonemes() {
            Ok(p) => {
                let name = format!("phonemes/{}.txt", u.id);
                let path = dir.join(&name);
                fs::write(&path, p.to_text()).map_err(|e| Error::io(&path, e))?;
                Some(name)
            }
            Err(_) => None,
        };
        let rec = ManifestRecord {
            utterance_id: u.id.clone(),
            speaker_id: u.speaker_id.clone(),
            language_id: u.language_id.clone(),
            split: u.split,
            transcribed: u.transcribed(),
            phoneme_file,
            feature_file,
            waveform_file,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(MANIFEST_FILE, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

fn utterance_file(dir: &Path, rel: &str, what: &'static str, id: &str) -> Result<PathBuf> {
    let path = dir.join(rel);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile {
            what,
            utterance: id.into(),
            path,
        })
    }
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let header: CorpusHeader = read_json(&dir.join(CORPUS_FILE))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Version {
            what: "corpus",
            found: header.format_version,
            supported: CORPUS_FORMAT_VERSION,
        });
    }
    let speakers: SpeakerTable = read_json(&dir.join(SPEAKERS_FILE))?;
    let mut utterances = Vec::new();
    for rec in read_manifest(dir)? {
        let id = rec.utterance_id.as_str();
        let fpath = utterance_file(dir, &rec.feature_file, "feature blob", id)?;
        let wpath = utterance_file(dir, &rec.waveform_file, "waveform blob", id)?;
        let features = read_features_file(&fpath)?;
        let waveform = read_waveform_file(&wpath)?;
        let phonemes = match (&rec.phoneme_file, rec.transcribed) {
            (Some(p), true) => Some(read_phoneme_file(&utterance_file(dir, p, "phoneme file", id)?)?),
            (None, false) => None,
            _ => {
                return Err(Error::format(
                    MANIFEST_FILE,
                    format!("utterance `{id}`: transcribed flag disagrees with phoneme_file"),
                ))
            }
        };
        utterances.push(Utterance::new(
            rec.utterance_id,
            rec.speaker_id,
            rec.language_id,
            rec.split,
            phonemes,
            features,
            waveform,
        )?);
    }
    Ok(Corpus {
        spec: header.spec,
        seed: header.seed,
        speakers,
        utterances,
    })
}
