//! Synthetic bilingual corpus: generation, oracle rendering and file I/O.

mod generate;
mod io;
pub mod mulaw;
mod synth;
mod types;

pub use generate::{generate_corpus, speaker_name, Corpus, CorpusSpec, LanguageSpec, SpeakerTable};
pub use io::{
    decode_features, decode_waveform, encode_features, encode_waveform, read_corpus, read_features_file,
    read_manifest, read_phoneme_file, read_waveform_file, write_corpus, write_features_file,
    write_waveform_file, ManifestRecord,
};
pub use synth::{
    condition_number, envelope, generate_profile, render_features, render_waveform, PrototypeBank, F0_RANGE,
    HARMONICS, MAX_CONDITION_NUMBER,
};
pub use types::{AcousticFeatures, PhonemeSequence, SpeakerProfile, Split, SymbolId, Utterance, Waveform};
