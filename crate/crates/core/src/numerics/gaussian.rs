//! Diagonal Gaussians and their closed-form divergences.

use crate::error::{ensure_dim, Error, Result};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// A Gaussian with diagonal covariance, parameterized by log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Log-variances are clamped into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        ensure_dim("diagonal gaussian", mean.len(), log_var.len())?;
        if mean.is_empty() {
            return Err(Error::Contract("gaussian must have at least one dimension".into()));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }
}

/// Non-empty sequence of equal-dimension diagonal Gaussians, one per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianSeq {
    frames: Vec<DiagGaussian>,
}

impl DiagGaussianSeq {
    pub fn new(frames: Vec<DiagGaussian>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("gaussian sequence must be non-empty".into()))?;
        let dim = first.dim();
        for f in &frames {
            ensure_dim("gaussian sequence", dim, f.dim())?;
        }
        Ok(Self { frames })
    }

    /// Builds a sequence from row-aligned mean and log-variance matrices
    /// stored as flat row-major buffers of `dim` columns.
    pub fn from_rows(mean: &[f64], log_var: &[f64], dim: usize) -> Result<Self> {
        ensure_dim("gaussian rows", mean.len(), log_var.len())?;
        if dim == 0 || mean.len() % dim != 0 {
            return Err(Error::Contract("gaussian rows not divisible by dimension".into()));
        }
        let frames = mean
            .chunks(dim)
            .zip(log_var.chunks(dim))
            .map(|(m, v)| DiagGaussian::new(m.to_vec(), v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    pub fn frames(&self) -> &[DiagGaussian] {
        &self.frames
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.mean.clone()).collect()
    }
}

/// `KL(N(mp, e^lp) ‖ N(mq, e^lq))` for one dimension.
#[inline]
pub(crate) fn kl_1d(mp: f64, lp: f64, mq: f64, lq: f64) -> f64 {
    let d = mp - mq;
    0.5 * (lq - lp + (lp.exp() + d * d) * (-lq).exp() - 1.0)
}

/// Summed over dimensions. Slices must have equal length.
#[inline]
pub(crate) fn kl_slices(mp: &[f64], lp: &[f64], mq: &[f64], lq: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mp.len() {
        acc += kl_1d(mp[i], lp[i], mq[i], lq[i]);
    }
    acc
}

/// `½·KL(p‖q) + ½·KL(q‖p)`; symmetric bit-for-bit since IEEE addition commutes.
#[inline]
pub(crate) fn sym_kl_slices(mp: &[f64], lp: &[f64], mq: &[f64], lq: &[f64]) -> f64 {
    0.5 * kl_slices(mp, lp, mq, lq) + 0.5 * kl_slices(mq, lq, mp, lp)
}

/// Closed-form `KL(p ‖ q)` summed over dimensions.
pub fn gaussian_kld(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    ensure_dim("gaussian_kld", p.dim(), q.dim())?;
    Ok(kl_slices(&p.mean, &p.log_var, &q.mean, &q.log_var))
}

pub fn symmetrized_kld(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    ensure_dim("symmetrized_kld", p.dim(), q.dim())?;
    Ok(sym_kl_slices(&p.mean, &p.log_var, &q.mean, &q.log_var))
}

/// Frame-averaged symmetrized KL between two equal-length sequences.
pub fn sequence_symmetrized_kld(p: &DiagGaussianSeq, q: &DiagGaussianSeq) -> Result<f64> {
    ensure_dim("sequence length", p.len(), q.len())?;
    let mut acc = 0.0;
    for (a, b) in p.frames.iter().zip(&q.frames) {
        acc += symmetrized_kld(a, b)?;
    }
    Ok(acc / p.len() as f64)
}

/// `mean + exp(½·log_var) ⊙ noise`.
pub fn reparam_sample(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("reparam_sample", g.dim(), noise.len())?;
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}
