//! Inference: encoders, decoders and the vocoder without gradients, plus
//! the free-running autoregressive samplers.

use rand::Rng;

use super::nets::{self, vocoder_inputs};
use super::params::ModelParams;
use crate::corpus::{mulaw, AcousticFeatures, PhonemeSequence, Waveform};
use crate::error::{ensure_dim, Result};
use crate::numerics::{softmax_in_place, softmax_rows, DiagGaussianSeq, Tape, Tensor};
use crate::rng::rng_from;

/// Latent linguistic embedding: one diagonal Gaussian per frame.
pub type Lle = DiagGaussianSeq;

fn frozen(m: &ModelParams) -> Vec<bool> {
    vec![false; m.store().len()]
}

fn to_seq(tape: &Tape, vars: nets::LleVars, dim: usize) -> Result<Lle> {
    DiagGaussianSeq::from_rows(tape.value(vars.mean).data(), tape.value(vars.log_var).data(), dim)
}

pub fn encode_text(m: &ModelParams, x: &PhonemeSequence) -> Result<Lle> {
    let mask = frozen(m);
    let mut tape = Tape::new(m.store(), &mask);
    let out = nets::text_encoder(&mut tape, m, x)?;
    to_seq(&tape, out, m.config().latent_dim)
}

pub fn encode_speech(m: &ModelParams, y: &Tensor) -> Result<Lle> {
    ensure_dim("speech encoder input dim", m.config().feature_dim, y.cols())?;
    let mask = frozen(m);
    let mut tape = Tape::new(m.store(), &mask);
    let yv = tape.constant(y.clone());
    let out = nets::speech_encoder(&mut tape, m, yv)?;
    to_seq(&tape, out, m.config().latent_dim)
}

/// `T × L` matrix of per-frame means.
pub fn lle_means(lle: &Lle) -> Tensor {
    Tensor::from_rows(&lle.means())
}

/// `T × V` row-stochastic posterior over symbols.
pub fn decode_text(m: &ModelParams, z: &Tensor) -> Result<Tensor> {
    ensure_dim("text decoder latent dim", m.config().latent_dim, z.cols())?;
    let mask = frozen(m);
    let mut tape = Tape::new(m.store(), &mask);
    let zv = tape.constant(z.clone());
    let logits = nets::text_decoder(&mut tape, m, zv);
    Ok(softmax_rows(tape.value(logits)))
}

#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Previous frames taken from the given ground truth (`T × D`).
    TeacherForced(&'a Tensor),
    FreeRunning,
}

pub fn decode_speech(m: &ModelParams, z: &Tensor, speaker_id: &str, mode: DecodeMode) -> Result<Tensor> {
    let speaker = m.speaker_index(speaker_id)?;
    ensure_dim("speech decoder latent dim", m.config().latent_dim, z.cols())?;
    match mode {
        DecodeMode::TeacherForced(y) => {
            ensure_dim("teacher frames", z.rows(), y.rows())?;
            ensure_dim("teacher feature dim", m.config().feature_dim, y.cols())?;
            let mask = frozen(m);
            let mut tape = Tape::new(m.store(), &mask);
            let zv = tape.constant(z.clone());
            let out = nets::speech_decoder(&mut tape, m, zv, nets::shift_frames(y), speaker);
            Ok(tape.value(out).clone())
        }
        DecodeMode::FreeRunning => Ok(decode_speech_free(m, z, speaker)),
    }
}

fn add_row_times(out: &mut [f64], x: &[f64], w: &Tensor) {
    debug_assert_eq!(x.len(), w.rows());
    for (xi, wr) in x.iter().zip(w.data().chunks_exact(w.cols())) {
        if *xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
}

/// Free-running speech decoder from a zero initial frame; `speaker` is a
/// table row index.
pub(crate) fn decode_speech_free(m: &ModelParams, z: &Tensor, speaker: usize) -> Tensor {
    let (s, l) = (m.store(), m.layout());
    let mut zc = z.matmul(s.get(l.sdec_z.w));
    let table = s.get(l.speaker_table);
    let mut bias = s.get(l.sdec_z.b).row(0).to_vec();
    add_row_times(&mut bias, table.row(speaker), s.get(l.sdec_spk));
    for t in 0..zc.rows() {
        for (v, b) in zc.row_mut(t).iter_mut().zip(&bias) {
            *v += b;
        }
    }
    let (wp, wo, bo) = (s.get(l.sdec_prev), s.get(l.sdec_out.w), s.get(l.sdec_out.b));
    let dim = wo.cols();
    let mut out = Tensor::zeros(z.rows(), dim);
    let mut prev = vec![0.0; dim];
    let mut h = vec![0.0; wp.cols()];
    for t in 0..z.rows() {
        h.copy_from_slice(zc.row(t));
        add_row_times(&mut h, &prev, wp);
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let mut y = bo.row(0).to_vec();
        add_row_times(&mut y, &h, wo);
        out.row_mut(t).copy_from_slice(&y);
        prev = y;
    }
    out
}

/// Teacher-forced vocoder logits `(T·spf) × 256` for ground-truth codes.
pub fn vocoder_logits(m: &ModelParams, features: &Tensor, speaker_id: &str, codes: &[u8]) -> Result<Tensor> {
    let speaker = m.speaker_index(speaker_id)?;
    let mask = frozen(m);
    let mut tape = Tape::new(m.store(), &mask);
    let f = tape.constant(features.clone());
    let logits = nets::vocoder(&mut tape, m, f, vocoder_inputs(codes, mulaw::MID_CODE), speaker)?;
    Ok(tape.value(logits).clone())
}

/// Samples a waveform one code at a time. Deterministic in `seed`.
pub fn vocode_free_running(m: &ModelParams, features: &Tensor, speaker_id: &str, seed: u64) -> Result<Waveform> {
    let speaker = m.speaker_index(speaker_id)?;
    ensure_dim("vocoder conditioning dim", m.config().feature_dim, features.cols())?;
    let (codes, _) = vocode_free(m, features, speaker, seed, false);
    Waveform::new(codes, m.config().samples_per_frame)
}

/// Incremental sampler. With `keep_logits`, also returns the logits that
/// each code was drawn from.
pub(crate) fn vocode_free(
    m: &ModelParams,
    features: &Tensor,
    speaker: usize,
    seed: u64,
    keep_logits: bool,
) -> (Vec<u8>, Option<Tensor>) {
    let cfg = m.config();
    let (s, l) = (m.store(), m.layout());
    let spf = cfg.samples_per_frame as usize;
    let ch = cfg.voc_channels;
    let n = features.rows() * spf;

    let mut cond = features.matmul(s.get(l.voc_cond.w));
    let mut bias = s.get(l.voc_cond.b).row(0).to_vec();
    add_row_times(&mut bias, s.get(l.speaker_table).row(speaker), s.get(l.voc_spk));
    for t in 0..cond.rows() {
        for (v, b) in cond.row_mut(t).iter_mut().zip(&bias) {
            *v += b;
        }
    }

    let layers = cfg.voc_dilations.len();
    let mut hist: Vec<Tensor> = (0..=layers).map(|_| Tensor::zeros(n, ch)).collect();
    let win = s.get(l.voc_in.w);
    let bin = s.get(l.voc_in.b);
    let mut rng = rng_from(seed, &[0x564f_43]);
    let mut codes = Vec::with_capacity(n);
    let mut all_logits = keep_logits.then(|| Tensor::zeros(n, mulaw::NUM_CODES));
    let mut x_prev = 0.0;
    let mut prev_code = mulaw::MID_CODE;
    let mut a = vec![0.0; ch];
    let mut p = vec![0.0; ch];
    for i in 0..n {
        let x = mulaw::decode(prev_code);
        {
            let h0 = hist[0].row_mut(i);
            for c in 0..ch {
                h0[c] = bin.get(0, c) + win.get(0, c) * x_prev + win.get(1, c) * x;
            }
        }
        let crow = cond.row(i / spf);
        for (li, &dil) in cfg.voc_dilations.iter().enumerate() {
            let d = l.voc_layers[li];
            let w = s.get(d.w);
            a.copy_from_slice(s.get(d.b).row(0));
            if i >= dil {
                let past = hist[li].row(i - dil);
                for (xi, wr) in past.iter().zip(w.data()[..ch * ch].chunks_exact(ch)) {
                    for (o, wv) in a.iter_mut().zip(wr) {
                        *o += xi * wv;
                    }
                }
            }
            let cur = hist[li].row(i).to_vec();
            for (xi, wr) in cur.iter().zip(w.data()[ch * ch..].chunks_exact(ch)) {
                for (o, wv) in a.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
            let next = hist[li + 1].row_mut(i);
            for c in 0..ch {
                next[c] = cur[c] + (a[c] + crow[c]).tanh();
            }
        }
        p.copy_from_slice(s.get(l.voc_post.b).row(0));
        add_row_times(&mut p, hist[layers].row(i), s.get(l.voc_post.w));
        for v in p.iter_mut() {
            *v = v.tanh();
        }
        let mut logits = s.get(l.voc_out.b).row(0).to_vec();
        add_row_times(&mut logits, &p, s.get(l.voc_out.w));
        if let Some(t) = all_logits.as_mut() {
            t.row_mut(i).copy_from_slice(&logits);
        }
        softmax_in_place(&mut logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut code = (mulaw::NUM_CODES - 1) as u8;
        for (k, pk) in logits.iter().enumerate() {
            acc += pk;
            if u < acc {
                code = k as u8;
                break;
            }
        }
        codes.push(code);
        x_prev = x;
        prev_code = code;
    }
    (codes, all_logits)
}

/// Output of a TTS or VC call.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub features: AcousticFeatures,
    pub waveform: Waveform,
}

/// Text-to-speech for `speaker_id`: text-encoder means, free-running
/// decoder, free-running vocoder.
pub fn synthesize_tts(m: &ModelParams, x: &PhonemeSequence, speaker_id: &str, seed: u64) -> Result<Synthesis> {
    let speaker = m.speaker_index(speaker_id)?;
    let z = lle_means(&encode_text(m, x)?);
    finish(m, &z, speaker, seed)
}

/// Voice conversion into `speaker_id`: speech-encoder means, then as TTS.
pub fn synthesize_vc(m: &ModelParams, y_src: &Tensor, speaker_id: &str, seed: u64) -> Result<Synthesis> {
    let speaker = m.speaker_index(speaker_id)?;
    let z = lle_means(&encode_speech(m, y_src)?);
    finish(m, &z, speaker, seed)
}

fn finish(m: &ModelParams, z: &Tensor, speaker: usize, seed: u64) -> Result<Synthesis> {
    let y = decode_speech_free(m, z, speaker);
    let (codes, _) = vocode_free(m, &y, speaker, seed, false);
    Ok(Synthesis {
        features: AcousticFeatures::from_tensor(&y)?,
        waveform: Waveform::new(codes, m.config().samples_per_frame)?,
    })
}
