//! 8-bit μ-law companding.

pub const MU: f64 = 255.0;
pub const NUM_CODES: usize = 256;
/// Code of the zero amplitude; also the initial vocoder input.
pub const MID_CODE: u8 = 128;

pub fn encode(x: f64) -> u8 {
    let x = x.clamp(-1.0, 1.0);
    let f = x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln();
    let code = ((f + 1.0) / 2.0 * MU).round();
    code.clamp(0.0, MU) as u8
}

pub fn decode(code: u8) -> f64 {
    let y = 2.0 * f64::from(code) / MU - 1.0;
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}
