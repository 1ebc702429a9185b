//! Correlation preprocessing, neural detection/AoA readout and CFAR threshold calibration.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::neural::{scaled_tanh, sigmoid_offset, Mlp};
use crate::numerics::{CMat, C64};

/// Window lengths are fed to the networks divided by this.
pub const WINDOW_SCALE: f64 = 15.0;

/// Short-term spatial autocorrelation `Z Z^H / N`, exactly Hermitian.
pub fn correlate(echo: &CMat) -> CMat {
    let (k, n) = (echo.rows(), echo.cols());
    assert!(n >= 1, "correlation needs at least one snapshot");
    let mut out = CMat::zeros(k, k);
    let inv = 1.0 / n as f64;
    for i in 0..k {
        let ri = echo.row(i);
        for j in i..k {
            let rj = echo.row(j);
            let s: C64 = ri.iter().zip(rj).map(|(a, b)| a * b.conj()).sum::<C64>() * inv;
            if i == j {
                out[(i, i)] = C64::new(s.re, 0.0);
            } else {
                out[(i, j)] = s;
                out[(j, i)] = s.conj();
            }
        }
    }
    out
}

/// Gradient of a real loss with respect to the echo, given the
/// (Wirtinger) gradient `G` with respect to the correlation matrix:
/// `(G + G^H) Z / N`.
pub fn correlate_backward(echo: &CMat, corr_grad: &CMat) -> CMat {
    let n = echo.cols() as f64;
    corr_grad.add(&corr_grad.adjoint()).matmul(echo).scale(1.0 / n)
}

/// Which side information fills the noise slot of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSlot {
    /// `log10 σ²`.
    LogVariance,
    /// Constant zero: the score depends on the normalized statistic only,
    /// so noise-only scores share one distribution across SNRs.
    Blank,
}

/// `[Re(R/σ²), Im(R/σ²)]` row-major, then `(N/15, noise slot)`.
pub fn sensing_features(corr: &CMat, window: usize, noise_var: f64, slot: NoiseSlot) -> Result<Vec<f64>> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return invalid(format!("noise variance must be > 0, got {noise_var}"));
    }
    let k = corr.rows();
    let inv = 1.0 / noise_var;
    let mut out = Vec::with_capacity(2 * k * k + 2);
    out.extend(corr.as_slice().iter().map(|z| z.re * inv));
    out.extend(corr.as_slice().iter().map(|z| z.im * inv));
    out.push(window as f64 / WINDOW_SCALE);
    out.push(match slot {
        NoiseSlot::LogVariance => noise_var.log10(),
        NoiseSlot::Blank => 0.0,
    });
    Ok(out)
}

/// Maps a gradient on the feature vector back to a Wirtinger gradient on the correlation matrix.
pub fn sensing_features_backward(feature_grad: &[f64], antennas: usize, noise_var: f64) -> CMat {
    let kk = antennas * antennas;
    let inv = 1.0 / noise_var;
    let data = (0..kk)
        .map(|i| C64::new(feature_grad[i], feature_grad[kk + i]) * inv)
        .collect();
    CMat::from_vec(antennas, antennas, data).expect("finite feature gradient")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionResult {
    pub score: f64,
    pub probability: f64,
    pub detected: bool,
}

impl DetectionResult {
    pub fn from_score(score: f64, offset: f64) -> Self {
        let probability = sigmoid_offset(score, offset);
        DetectionResult {
            score,
            probability,
            // σ(x) > 1/2 exactly when x > 0; comparing the argument avoids rounding at the boundary
            detected: score + offset > 0.0,
        }
    }
}

/// Raw detection scores for a batch of feature rows.
pub fn detection_scores(net: &Mlp, features: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(net.infer(features)?.column(0).to_vec())
}

pub fn detect(net: &Mlp, features: &[f64], offset: f64) -> Result<DetectionResult> {
    let row = Array2::from_shape_vec((1, features.len()), features.to_vec()).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    Ok(DetectionResult::from_score(detection_scores(net, &row)?[0], offset))
}

/// Angle estimates in `[−π/2, π/2]` for a batch of feature rows.
pub fn estimate_aoa_batch(net: &Mlp, features: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(net.infer(features)?.column(0).iter().map(|&s| scaled_tanh(s)).collect())
}

pub fn estimate_aoa(net: &Mlp, features: &[f64]) -> Result<f64> {
    let row = Array2::from_shape_vec((1, features.len()), features.to_vec()).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    Ok(estimate_aoa_batch(net, &row)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub offset: f64,
    /// All scores were identical.
    pub degenerate: bool,
    /// Fewer than `1/P_f` scores were available.
    pub undersampled: bool,
}

/// Offset `τ = −q` with `q` the order statistic at rank `⌈(1 − P_f)·n⌉`.
pub fn calibrate_threshold(noise_scores: &[f64], false_alarm: f64) -> Result<Calibration> {
    if noise_scores.is_empty() {
        return invalid("calibration needs at least one noise-only score");
    }
    if !(false_alarm > 0.0 && false_alarm < 1.0) {
        return invalid(format!("false-alarm rate must lie in (0, 1), got {false_alarm}"));
    }
    if noise_scores.iter().any(|s| !s.is_finite()) {
        return invalid("scores must be finite");
    }
    let mut s = noise_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let rank = ((1.0 - false_alarm) * n as f64).ceil().max(1.0) as usize;
    let q = s[rank.min(n) - 1];
    let undersampled = (n as f64) < 1.0 / false_alarm;
    if undersampled {
        log::warn!("threshold calibrated on {n} scores; at least {:.0} recommended", 1.0 / false_alarm);
    }
    Ok(Calibration {
        offset: -q,
        degenerate: s[0] == s[n - 1],
        undersampled,
    })
}

/// Per-window detection offsets, indexed by window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    offsets: Vec<Option<f64>>,
}

impl ThresholdTable {
    pub fn new(max_window: usize) -> Self {
        ThresholdTable {
            offsets: vec![None; max_window],
        }
    }

    pub fn max_window(&self) -> usize {
        self.offsets.len()
    }

    pub fn set(&mut self, window: usize, offset: f64) {
        self.offsets[window - 1] = Some(offset);
    }

    /// Calibrated offset, or `(0, false)` before calibration.
    pub fn offset(&self, window: usize) -> (f64, bool) {
        match self.offsets.get(window.wrapping_sub(1)).copied().flatten() {
            Some(t) => (t, true),
            None => (0.0, false),
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.offsets.iter().all(Option::is_some)
    }

    pub fn entries(&self) -> &[Option<f64>] {
        &self.offsets
    }
}

/// Exact sufficient statistic `Z y^H / √N` given the known transmit block.
pub fn sufficient_statistic(echo: &CMat, tx: &CMat) -> Result<CMat> {
    if (echo.rows(), echo.cols()) != (tx.rows(), tx.cols()) {
        return invalid("echo and transmit block shapes differ");
    }
    Ok(echo.matmul(&tx.adjoint()).scale(1.0 / (echo.cols() as f64).sqrt()))
}

/// The correlation matrix used in place of the exact statistic.
pub fn sufficient_statistic_approx(echo: &CMat) -> CMat {
    correlate(echo)
}
