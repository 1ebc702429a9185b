//! Equalization and soft demapping at the UE.
//!
//! LLR sign convention: `ℓ = log p(b=0|z) − log p(b=1|z)`; a negative LLR
//! hardens to bit 1.

use ndarray::Array2;

use crate::constellation::Constellation;
use crate::neural::Mlp;
use crate::numerics::C64;
use crate::Result;

/// Range of the demapper's noise side input.
pub const SIDE_INPUT_CLIP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equalized {
    pub symbol: C64,
    pub snr_post: f64,
}

/// `x̂ = conj(γ) z / (|γ|² + σ²)`.
pub fn mmse_equalize(received: C64, csi: C64, noise_var: f64) -> Equalized {
    let g2 = csi.norm_sqr();
    Equalized {
        symbol: csi.conj() * received / (g2 + noise_var),
        snr_post: g2 / noise_var,
    }
}

/// Side input `log10(1 / snr_post)`: the log noise variance after
/// equalization, clipped to a bounded range.
pub fn demapper_side_input(snr_post: f64) -> f64 {
    if snr_post <= 0.0 {
        return SIDE_INPUT_CLIP;
    }
    (-snr_post.log10()).clamp(-SIDE_INPUT_CLIP, SIDE_INPUT_CLIP)
}

/// Network input rows `(Re x̂, Im x̂, side)`.
pub fn demapper_inputs(eq: &[Equalized]) -> Array2<f64> {
    Array2::from_shape_fn((eq.len(), 3), |(i, j)| match j {
        0 => eq[i].symbol.re,
        1 => eq[i].symbol.im,
        _ => demapper_side_input(eq[i].snr_post),
    })
}

/// LLRs from the trained demapper; one row of `log2 M` values per symbol.
pub fn demap_nn_batch(net: &Mlp, eq: &[Equalized]) -> Result<Array2<f64>> {
    net.infer(&demapper_inputs(eq))
}

pub fn demap_nn(net: &Mlp, eq: Equalized) -> Result<Vec<f64>> {
    Ok(demap_nn_batch(net, &[eq])?.row(0).to_vec())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact per-bit LLRs for a known alphabet and perfect CSI.
pub fn demap_mld(c: &Constellation, received: C64, csi: C64, noise_var: f64) -> Vec<f64> {
    debug_assert!(noise_var > 0.0);
    let metric: Vec<f64> = c
        .points()
        .iter()
        .map(|&x| -(received - csi * x).norm_sqr() / noise_var)
        .collect();
    (0..c.bits_per_symbol())
        .map(|i| {
            let zero = (0..c.order()).filter(|&m| c.bit(m, i) == 0).map(|m| metric[m]);
            let one = (0..c.order()).filter(|&m| c.bit(m, i) == 1).map(|m| metric[m]);
            log_sum_exp(zero) - log_sum_exp(one)
        })
        .collect()
}

/// Hard decision: 1 iff the LLR is negative; ties go to 0.
pub fn harden(llr: f64) -> u8 {
    u8::from(llr < 0.0)
}
