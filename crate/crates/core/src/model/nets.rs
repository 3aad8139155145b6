//! Differentiable forward passes recorded on a [`Tape`].

use super::params::{Dense, ModelParams};
use crate::corpus::mulaw;
use crate::corpus::PhonemeSequence;
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{ConvSpec, Tape, Tensor, Var, LOG_VAR_MAX, LOG_VAR_MIN};

/// Per-frame Gaussian parameters on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LleVars {
    pub mean: Var,
    pub log_var: Var,
}

fn dense(tape: &mut Tape, d: Dense, x: Var) -> Var {
    let w = tape.param(d.w);
    let b = tape.param(d.b);
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn encoder_stack(tape: &mut Tape, m: &ModelParams, convs: &[Dense], mut h: Var) -> LleVars {
    let c = m.config();
    let spec = ConvSpec::same(c.enc_kernel, 1);
    for (l, d) in convs.iter().enumerate() {
        let w = tape.param(d.w);
        let b = tape.param(d.b);
        h = tape.conv1d(h, w, b, spec);
        if l + 1 < convs.len() {
            h = tape.tanh(h);
        }
    }
    let mean = tape.slice_cols(h, 0, c.latent_dim);
    let raw = tape.slice_cols(h, c.latent_dim, 2 * c.latent_dim);
    let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
    LleVars { mean, log_var }
}

/// Frame-level symbol ids of `x`, validated against the vocabulary.
pub fn frame_ids(m: &ModelParams, x: &PhonemeSequence) -> Result<Vec<usize>> {
    let vocab = m.config().vocab_size;
    if let Some(&bad) = x.symbols().iter().find(|&&s| s as usize >= vocab) {
        return Err(Error::UnknownSymbol(bad));
    }
    Ok(x.frame_symbols().into_iter().map(|s| s as usize).collect())
}

pub fn text_encoder(tape: &mut Tape, m: &ModelParams, x: &PhonemeSequence) -> Result<LleVars> {
    let ids = frame_ids(m, x)?;
    let table = tape.param(m.layout().tenc_embed);
    let h = tape.gather(table, ids);
    Ok(encoder_stack(tape, m, &m.layout().tenc_convs, h))
}

pub fn speech_encoder(tape: &mut Tape, m: &ModelParams, y: Var) -> Result<LleVars> {
    ensure_dim("speech encoder input dim", m.config().feature_dim, tape.value(y).cols())?;
    let t = tape.value(y).rows();
    let mut center = Tensor::from_vec(t, t, vec![-1.0 / t as f64; t * t]);
    for i in 0..t {
        center.set(i, i, 1.0 - 1.0 / t as f64);
    }
    let c = tape.constant(center);
    let y = tape.matmul(c, y);
    Ok(encoder_stack(tape, m, &m.layout().senc_convs, y))
}

/// Unnormalized per-frame symbol scores.
pub fn text_decoder(tape: &mut Tape, m: &ModelParams, z: Var) -> Var {
    let l = m.layout();
    let h = dense(tape, l.tdec_hidden, z);
    let h = tape.tanh(h);
    dense(tape, l.tdec_out, h)
}

fn speaker_row(tape: &mut Tape, m: &ModelParams, speaker: usize) -> Var {
    let table = tape.param(m.layout().speaker_table);
    tape.gather(table, vec![speaker])
}

/// Previous-frame matrix for teacher forcing: row `t` holds `y[t-1]`,
/// row 0 is the zero frame.
pub fn shift_frames(y: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for t in 1..y.rows() {
        out.row_mut(t).copy_from_slice(y.row(t - 1));
    }
    out
}

/// `out_t = W_o·tanh(W_z·z_t + W_p·prev_t + W_s·e + b) + b_o`.
pub fn speech_decoder(tape: &mut Tape, m: &ModelParams, z: Var, prev: Tensor, speaker: usize) -> Var {
    let l = m.layout();
    let zc = dense(tape, l.sdec_z, z);
    let e = speaker_row(tape, m, speaker);
    let ws = tape.param(l.sdec_spk);
    let es = tape.matmul(e, ws);
    let pre = tape.add_bias(zc, es);
    let prev = tape.constant(prev);
    let wp = tape.param(l.sdec_prev);
    let pp = tape.matmul(prev, wp);
    let pre = tape.add(pre, pp);
    let h = tape.tanh(pre);
    dense(tape, l.sdec_out, h)
}

/// Vocoder input sequence: decoded previous code at every position,
/// starting from `first_prev`.
pub fn vocoder_inputs(codes: &[u8], first_prev: u8) -> Tensor {
    let mut data = Vec::with_capacity(codes.len());
    let mut prev = first_prev;
    for &c in codes {
        data.push(mulaw::decode(prev));
        prev = c;
    }
    Tensor::from_vec(codes.len(), 1, data)
}

/// Frame-rate conditioning `W_c·y_t + b_c + W_s·e`, `T × C`.
pub fn vocoder_conditioning(tape: &mut Tape, m: &ModelParams, features: Var, speaker: usize) -> Var {
    let l = m.layout();
    let c = dense(tape, l.voc_cond, features);
    let e = speaker_row(tape, m, speaker);
    let ws = tape.param(l.voc_spk);
    let es = tape.matmul(e, ws);
    tape.add_bias(c, es)
}

/// Teacher-forced next-code logits, `(T·spf) × 256`. `inputs` comes from
/// [`vocoder_inputs`] and must have `T·spf` rows.
pub fn vocoder(tape: &mut Tape, m: &ModelParams, features: Var, inputs: Tensor, speaker: usize) -> Result<Var> {
    let cfg = m.config();
    let spf = cfg.samples_per_frame as usize;
    ensure_dim("vocoder conditioning dim", cfg.feature_dim, tape.value(features).cols())?;
    ensure_dim("vocoder input length", tape.value(features).rows() * spf, inputs.rows())?;
    let l = m.layout();
    let cond = vocoder_conditioning(tape, m, features, speaker);
    let cond = tape.repeat_rows(cond, spf);
    let x = tape.constant(inputs);
    let (w, b) = (tape.param(l.voc_in.w), tape.param(l.voc_in.b));
    let mut h = tape.conv1d(x, w, b, ConvSpec::causal(2, 1));
    for (d, &dil) in l.voc_layers.iter().zip(&cfg.voc_dilations) {
        let (w, b) = (tape.param(d.w), tape.param(d.b));
        let a = tape.conv1d(h, w, b, ConvSpec::causal(2, dil));
        let a = tape.add(a, cond);
        let s = tape.tanh(a);
        h = tape.add(h, s);
    }
    let p = dense(tape, l.voc_post, h);
    let p = tape.tanh(p);
    Ok(dense(tape, l.voc_out, p))
}
