//! Classical references: energy detector, ESPRIT and the Cramér–Rao bound.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{chi2_quantile, dot_h, hermitian_eig, CMat, C64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDecision {
    pub statistic: f64,
    pub threshold: f64,
    pub detected: bool,
}

/// Chi-squared threshold for the energy detector at `K·N` complex samples.
pub fn np_threshold(antennas: usize, window: usize, false_alarm: f64) -> Result<f64> {
    chi2_quantile(2 * antennas * window, 1.0 - false_alarm)
}

/// Neyman–Pearson power detector: `(2/σ²) Σ|z|²` against the χ² quantile.
pub fn np_detector(echo: &CMat, noise_var: f64, false_alarm: f64) -> Result<EnergyDecision> {
    if !(noise_var > 0.0) {
        return invalid(format!("noise variance must be > 0, got {noise_var}"));
    }
    let threshold = np_threshold(echo.rows(), echo.cols(), false_alarm)?;
    Ok(np_decide(echo, noise_var, threshold))
}

/// Same as [`np_detector`] with a precomputed threshold.
pub fn np_decide(echo: &CMat, noise_var: f64, threshold: f64) -> EnergyDecision {
    let statistic = 2.0 / noise_var * echo.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>();
    EnergyDecision {
        statistic,
        threshold,
        detected: statistic > threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EspritEstimate {
    pub angle: f64,
    /// Signal subspace not separated from noise, or rotation out of range.
    pub degenerate: bool,
}

/// Single-source ESPRIT with unit subarray shift and least-squares rotation.
pub fn esprit_aoa(corr: &CMat) -> Result<EspritEstimate> {
    let k = corr.rows();
    if k < 2 {
        return invalid("ESPRIT needs at least two antennas");
    }
    let eig = hermitian_eig(corr)?;
    let u = eig.vectors.col(0);
    let (first, second) = (&u[..k - 1], &u[1..]);
    let denom = dot_h(first, first);
    let rotation: C64 = dot_h(first, second) / denom;
    let ratio = rotation.arg() / PI;
    let gap = eig.values[0] - eig.values[1];
    let mut degenerate = !(gap > 1e-9 * eig.values[0].abs().max(f64::MIN_POSITIVE)) || denom.re == 0.0;
    if !ratio.is_finite() || ratio.abs() > 1.0 {
        degenerate = true;
    }
    let ratio = if ratio.is_finite() { ratio.clamp(-1.0, 1.0) } else { 0.0 };
    Ok(EspritEstimate {
        angle: ratio.asin(),
        degenerate,
    })
}

/// Quantities entering the angle bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbParams {
    pub antennas: usize,
    pub window: usize,
    pub noise_var: f64,
    /// Beamforming gain toward the target.
    pub beam_gain: f64,
    pub target_var: f64,
    pub angle: f64,
}

impl CrbParams {
    /// Bound setup at an effective SNR `β σ_s² / σ_n²` given in dB with unit noise.
    pub fn at_effective_snr(antennas: usize, window: usize, snr_db: f64, angle: f64) -> Self {
        CrbParams {
            antennas,
            window,
            noise_var: 1.0,
            beam_gain: 1.0,
            target_var: 10f64.powf(snr_db / 10.0),
            angle,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return invalid("bound needs at least two antennas");
        }
        if self.window == 0 {
            return invalid("bound needs at least one snapshot");
        }
        if !(self.noise_var > 0.0 && self.beam_gain > 0.0 && self.target_var > 0.0) {
            return invalid("variances and beam gain must be > 0");
        }
        if !(self.angle.abs() < PI / 2.0) || self.angle.cos() <= 1e-12 {
            return invalid("angle bound is singular at ±90°");
        }
        Ok(())
    }

    fn signal_power(&self) -> f64 {
        self.beam_gain * self.target_var
    }
}

/// Cramér–Rao bound on the AoA variance (rad²).
pub fn crb_full(p: &CrbParams) -> Result<f64> {
    p.validate()?;
    let k = p.antennas as f64;
    let s = p.signal_power();
    let geometry = (k.powi(3) - k) / 12.0;
    let array_snr = k * s / (p.noise_var + k * s);
    let spatial = 1.0 / (PI * PI * p.angle.cos().powi(2));
    Ok(spatial * p.noise_var / (2.0 * p.window as f64) / (s * array_snr * geometry))
}

/// High-SNR approximation of [`crb_full`].
pub fn crb_simplified(p: &CrbParams) -> Result<f64> {
    p.validate()?;
    let k = p.antennas as f64;
    let spatial = 1.0 / (PI * PI * p.angle.cos().powi(2));
    Ok(spatial * p.noise_var / p.window as f64 / p.signal_power() * 6.0 / (k.powi(3) - k))
}

/// Curvature of the log-likelihood in the electrical angle: `ȧ^H (I − P_a) ȧ`,
/// with `ȧ` from central differences of the array response in the electrical angle.
pub fn projected_curvature(antennas: usize, h: f64) -> f64 {
    let response = |g: f64| -> Vec<C64> { (0..antennas).map(|k| C64::from_polar(1.0, -(k as f64) * g)).collect() };
    let g0 = 0.0;
    let a = response(g0);
    let plus = response(g0 + h);
    let minus = response(g0 - h);
    let da: Vec<C64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
    let aa = dot_h(&a, &a).re;
    let proj = dot_h(&a, &da) / aa;
    let resid: Vec<C64> = da.iter().zip(&a).map(|(d, ak)| d - ak * proj).collect();
    dot_h(&da, &resid).re
}

/// Independent assembly of the bound from numerically evaluated pieces:
/// the projected curvature, the array gain `a^H a`, and the chain rule from
/// electrical angle `π sinθ` to physical angle.
pub fn fisher_info_oracle(p: &CrbParams, h: f64) -> Result<f64> {
    p.validate()?;
    let curvature = projected_curvature(p.antennas, h);
    let a: Vec<C64> = (0..p.antennas).map(|k| C64::from_polar(1.0, PI * k as f64 * p.angle.sin())).collect();
    let gain = dot_h(&a, &a).re;
    let s = p.signal_power();
    let fisher_electrical = 2.0 * p.window as f64 / p.noise_var * s * (gain * s / (p.noise_var + gain * s)) * curvature;
    let step = 1e-6;
    let dgamma = PI * ((p.angle + step).sin() - (p.angle - step).sin()) / (2.0 * step);
    Ok(1.0 / (fisher_electrical * dgamma * dgamma))
}
