//! Transmit chain, the two propagation channels and beam-pattern evaluation.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{CMat, RngStream, C64};

/// Closed angular interval in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub min: f64,
    pub max: f64,
}

impl Sector {
    pub fn new(min: f64, max: f64) -> Self {
        Sector { min, max }
    }

    pub fn from_degrees(min: f64, max: f64) -> Self {
        Sector::new(min.to_radians(), max.to_radians())
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.min && theta <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min <= self.max) {
            return invalid(format!("{name}: empty interval [{}, {}]", self.min, self.max));
        }
        if self.min <= -FRAC_PI_2 || self.max >= FRAC_PI_2 {
            return invalid(format!("{name}: interval must lie inside (-90°, 90°)"));
        }
        Ok(())
    }
}

/// Link geometry, fading statistics and the SNR ranges scenarios are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub antennas: usize,
    pub order: usize,
    pub comm_area: Sector,
    pub sensing_area: Sector,
    /// Variance of the communication channel tap.
    pub comm_gain_var: f64,
    /// Variance of the target reflection coefficient.
    pub sensing_gain_var: f64,
    /// Communication SNR range in dB (noise variance relative to `comm_gain_var`).
    pub snr_c_db: (f64, f64),
    /// Sensing SNR range in dB.
    pub snr_s_db: (f64, f64),
    pub max_window: usize,
    pub target_prior: f64,
    pub false_alarm: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            antennas: 16,
            order: 16,
            comm_area: Sector::from_degrees(30.0, 50.0),
            sensing_area: Sector::from_degrees(-20.0, 20.0),
            comm_gain_var: 1.0,
            sensing_gain_var: 1.0,
            snr_c_db: (5.0, 30.0),
            snr_s_db: (-10.0, 10.0),
            max_window: 15,
            target_prior: 0.5,
            false_alarm: 0.01,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return invalid("antennas must be >= 2");
        }
        if self.order < 2 || !self.order.is_power_of_two() {
            return invalid("order must be a power of two >= 2");
        }
        self.comm_area.validate("comm_area")?;
        self.sensing_area.validate("sensing_area")?;
        if !(self.comm_gain_var > 0.0 && self.sensing_gain_var > 0.0) {
            return invalid("channel gain variances must be > 0");
        }
        if self.snr_c_db.0 > self.snr_c_db.1 || self.snr_s_db.0 > self.snr_s_db.1 {
            return invalid("SNR ranges must be ordered (low, high)");
        }
        if self.max_window == 0 {
            return invalid("max_window must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.target_prior) {
            return invalid("target_prior must lie in [0, 1]");
        }
        if !(self.false_alarm > 0.0 && self.false_alarm < 1.0) {
            return invalid("false_alarm must lie in (0, 1)");
        }
        Ok(())
    }

    /// Noise variance at the sensing receiver for a given sensing SNR.
    pub fn sensing_noise_var(&self, snr_db: f64) -> f64 {
        self.sensing_gain_var * db_to_lin(-snr_db)
    }

    pub fn comm_noise_var(&self, snr_db: f64) -> f64 {
        self.comm_gain_var * db_to_lin(-snr_db)
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Half-wavelength ULA response `a_k = exp(jπk sinθ)`.
pub fn steering_vector(theta: f64, antennas: usize) -> Vec<C64> {
    let phase = PI * theta.sin();
    (0..antennas).map(|k| C64::from_polar(1.0, phase * k as f64)).collect()
}

/// Derivative of the steering vector with respect to `theta`.
pub fn steering_vector_derivative(theta: f64, antennas: usize) -> Vec<C64> {
    let phase = PI * theta.sin();
    let dphase = PI * theta.cos();
    (0..antennas)
        .map(|k| C64::new(0.0, dphase * k as f64) * C64::from_polar(1.0, phase * k as f64))
        .collect()
}

/// `u^T v` without conjugation.
pub fn bilinear(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Single-stream transmit block `Y[k][n] = v_k x_n`.
pub fn transmit(symbols: &[C64], precoder: &[C64]) -> CMat {
    CMat::outer(precoder, symbols)
}

/// Received communication samples and the perfect CSI handed to the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct CommObservation {
    pub received: Vec<C64>,
    pub csi: Vec<C64>,
}

/// Single-tap Rayleigh channel toward a UE at `phi`.
///
/// `noise` is added as given; callers scale it to the wanted variance.
pub fn comm_channel(precoder: &[C64], symbols: &[C64], phi: f64, taps: &[C64], noise: &[C64]) -> CommObservation {
    assert_eq!(symbols.len(), taps.len());
    assert_eq!(symbols.len(), noise.len());
    let gain = bilinear(precoder, &steering_vector(phi, precoder.len()));
    let csi: Vec<C64> = taps.iter().map(|t| gain * t).collect();
    let received = csi.iter().zip(symbols).zip(noise).map(|((g, x), n)| g * x + n).collect();
    CommObservation { received, csi }
}

/// Monostatic echo `T·a(θ) a(θ)^T Y diag(α) + N`.
pub fn sensing_channel(tx: &CMat, theta: f64, target: bool, taps: &[C64], noise: &CMat) -> CMat {
    let (k, n) = (tx.rows(), tx.cols());
    assert_eq!(taps.len(), n);
    assert_eq!((noise.rows(), noise.cols()), (k, n));
    if !target {
        return noise.clone();
    }
    let a = steering_vector(theta, k);
    let mut out = noise.clone();
    for col in 0..n {
        let illum: C64 = (0..k).map(|r| a[r] * tx[(r, col)]).sum::<C64>() * taps[col];
        for r in 0..k {
            out[(r, col)] += a[r] * illum;
        }
    }
    out
}

/// Radiated power `|v^T a(θ)|²` on each grid angle.
pub fn beam_pattern(precoder: &[C64], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&t| bilinear(precoder, &steering_vector(t, precoder.len())).norm_sqr())
        .collect()
}

/// Midpoints of a uniform grid with spacing `step` over `[lo, hi]`.
pub fn sector_grid(sector: Sector, step: f64) -> Vec<f64> {
    if sector.width() <= 0.0 {
        return vec![sector.min];
    }
    let n = (sector.width() / step).round().max(1.0) as usize;
    let h = sector.width() / n as f64;
    (0..n).map(|i| sector.min + (i as f64 + 0.5) * h).collect()
}

/// Uniform angle grid over the whole half-space (−90°, 90°).
pub fn full_grid(step: f64) -> Vec<f64> {
    sector_grid(Sector::new(-FRAC_PI_2, FRAC_PI_2), step)
}

/// Default grid spacing for pattern integration: 0.25°.
pub fn default_grid_step() -> f64 {
    0.25f64.to_radians()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaFractions {
    pub sensing: f64,
    pub comm: f64,
    pub outside: f64,
}

/// Share of radiated power falling into the sensing area, the communication
/// area and elsewhere, on a uniform angle grid.
pub fn area_power_fractions(precoder: &[C64], cfg: &ScenarioConfig, step: f64) -> Result<AreaFractions> {
    if !(step > 0.0) {
        return invalid("grid step must be > 0");
    }
    let grid = full_grid(step);
    let pattern = beam_pattern(precoder, &grid);
    let (mut s, mut c, mut o) = (0.0, 0.0, 0.0);
    for (t, p) in grid.iter().zip(&pattern) {
        if cfg.sensing_area.contains(*t) {
            s += p;
        } else if cfg.comm_area.contains(*t) {
            c += p;
        } else {
            o += p;
        }
    }
    let total = s + c + o;
    if !(total > 0.0) {
        return invalid("precoder radiates no power");
    }
    Ok(AreaFractions {
        sensing: s / total,
        comm: c / total,
        outside: o / total,
    })
}

/// Mean beamforming gain over an area.
pub fn avg_beam_gain(precoder: &[C64], area: Sector, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return invalid("grid step must be > 0");
    }
    if area.width() < 0.0 {
        return invalid("empty area");
    }
    let pattern = beam_pattern(precoder, &sector_grid(area, step));
    Ok(pattern.iter().sum::<f64>() / pattern.len() as f64)
}

/// One Monte-Carlo window: everything random about a single scenario.
///
/// Noise is stored at unit variance and scaled by the receivers, so the same
/// draw can be replayed at different SNRs.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub symbols: Vec<usize>,
    pub ue_angle: f64,
    pub target_angle: f64,
    pub target: bool,
    pub comm_taps: Vec<C64>,
    pub sensing_taps: Vec<C64>,
    pub comm_noise: Vec<C64>,
    pub sensing_noise: CMat,
    pub comm_noise_var: f64,
    pub sensing_noise_var: f64,
}

impl Frame {
    pub fn window(&self) -> usize {
        self.symbols.len()
    }

    pub fn scaled_comm_noise(&self) -> Vec<C64> {
        let s = self.comm_noise_var.sqrt();
        self.comm_noise.iter().map(|z| z * s).collect()
    }

    pub fn scaled_sensing_noise(&self) -> CMat {
        self.sensing_noise.scale(self.sensing_noise_var.sqrt())
    }
}

/// Per-draw overrides; `None` samples from the scenario ranges.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameOverrides {
    pub window: Option<usize>,
    pub snr_s_db: Option<f64>,
    pub snr_c_db: Option<f64>,
    pub target: Option<bool>,
    pub target_angle: Option<f64>,
}

/// Draws one window. SNRs are log-uniform (uniform in dB) over the configured ranges.
pub fn sample_frame(cfg: &ScenarioConfig, ov: FrameOverrides, rng: &mut RngStream) -> Frame {
    let window = ov.window.unwrap_or_else(|| 1 + rng.index(cfg.max_window));
    let snr_s = ov.snr_s_db.unwrap_or_else(|| rng.uniform_in(cfg.snr_s_db.0, cfg.snr_s_db.1));
    let snr_c = ov.snr_c_db.unwrap_or_else(|| rng.uniform_in(cfg.snr_c_db.0, cfg.snr_c_db.1));
    let target = ov.target.unwrap_or_else(|| rng.bernoulli(cfg.target_prior));
    let target_angle = ov
        .target_angle
        .unwrap_or_else(|| rng.uniform_in(cfg.sensing_area.min, cfg.sensing_area.max));
    let ue_angle = rng.uniform_in(cfg.comm_area.min, cfg.comm_area.max);
    let symbols = (0..window).map(|_| rng.index(cfg.order)).collect();
    let sc = cfg.comm_gain_var.sqrt();
    let ss = cfg.sensing_gain_var.sqrt();
    let comm_taps = (0..window).map(|_| rng.cnormal() * sc).collect();
    let sensing_taps = (0..window).map(|_| rng.cnormal() * ss).collect();
    let comm_noise = (0..window).map(|_| rng.cnormal()).collect();
    let sensing_noise = CMat::from_fn(cfg.antennas, window, |_, _| rng.cnormal());
    Frame {
        symbols,
        ue_angle,
        target_angle,
        target,
        comm_taps,
        sensing_taps,
        comm_noise,
        sensing_noise,
        comm_noise_var: cfg.comm_noise_var(snr_c),
        sensing_noise_var: cfg.sensing_noise_var(snr_s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm, svd};
    use proptest::prelude::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn steering_special_angles() {
        assert!(steering_vector(0.0, 5).iter().all(|z| close(*z, C64::new(1.0, 0.0), 1e-15)));
        let a = steering_vector(FRAC_PI_2, 4);
        for (k, z) in a.iter().enumerate() {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert!(close(*z, C64::new(s, 0.0), 1e-12));
        }
        let a = steering_vector(30f64.to_radians(), 4);
        for (k, z) in a.iter().enumerate() {
            assert!(close(*z, C64::from_polar(1.0, k as f64 * PI / 2.0), 1e-12));
        }
    }

    #[test]
    fn steering_derivative_matches_differences() {
        let h = 1e-6;
        let t = 0.3;
        let d = steering_vector_derivative(t, 8);
        let p = steering_vector(t + h, 8);
        let m = steering_vector(t - h, 8);
        for k in 0..8 {
            assert!(close(d[k], (p[k] - m[k]) / (2.0 * h), 1e-7));
        }
    }

    #[test]
    fn transmit_special_cases() {
        let x = vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.3), C64::new(0.0, -1.0)];
        let mut e1 = vec![C64::new(0.0, 0.0); 4];
        e1[0] = C64::new(1.0, 0.0);
        let y = transmit(&x, &e1);
        assert_eq!(y.row(0), &x[..]);
        for r in 1..4 {
            assert!(y.row(r).iter().all(|z| *z == C64::new(0.0, 0.0)));
        }
        let v = vec![C64::new(0.2, 0.1), C64::new(-0.3, 0.4)];
        let y = transmit(&[C64::new(1.0, 0.0); 3], &v);
        for c in 0..3 {
            assert_eq!(y.col(c), v);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn transmit_is_rank_one(seed in any::<u64>(), k in 2usize..17, n in 2usize..16) {
            let mut rng = RngStream::new(seed, 0);
            let v: Vec<C64> = (0..k).map(|_| rng.cnormal()).collect();
            let x: Vec<C64> = (0..n).map(|_| rng.cnormal()).collect();
            let s = svd(&transmit(&x, &v)).s;
            prop_assert!(s[1] < 1e-10 * s[0]);
        }
    }

    #[test]
    fn matched_beam_gives_root_k_gain() {
        let k = 16;
        let phi = 0.6;
        let a = steering_vector(phi, k);
        let v: Vec<C64> = a.iter().map(|z| z.conj() / (k as f64).sqrt()).collect();
        let x = vec![C64::new(0.3, -0.7), C64::new(1.0, 0.0)];
        let ones = vec![C64::new(1.0, 0.0); 2];
        let zeros = vec![C64::new(0.0, 0.0); 2];
        let obs = comm_channel(&v, &x, phi, &ones, &zeros);
        for (z, s) in obs.received.iter().zip(&x) {
            assert!(((z / s).norm() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_beam_is_silent() {
        // a(0) is all ones; a beam with alternating signs is orthogonal to it for even K
        let v: Vec<C64> = (0..4).map(|k| C64::new(if k % 2 == 0 { 0.5 } else { -0.5 }, 0.0)).collect();
        let obs = comm_channel(&v, &[C64::new(1.0, 0.0)], 0.0, &[C64::new(1.0, 0.0)], &[C64::new(0.0, 0.0)]);
        assert!(obs.received[0].norm() < 1e-15);
    }

    #[test]
    fn comm_noise_power_monte_carlo() {
        let mut rng = RngStream::new(3, 3);
        let k = 8;
        let v: Vec<C64> = (0..k).map(|_| rng.cnormal()).collect();
        let n = 100_000;
        let x: Vec<C64> = (0..n).map(|_| rng.cnormal()).collect();
        let taps: Vec<C64> = (0..n).map(|_| rng.cnormal()).collect();
        let var: f64 = 0.3;
        let noise: Vec<C64> = (0..n).map(|_| rng.cnormal() * var.sqrt()).collect();
        let obs = comm_channel(&v, &x, 0.5, &taps, &noise);
        let err: f64 = (0..n).map(|i| (obs.received[i] - obs.csi[i] * x[i]).norm_sqr()).sum::<f64>() / n as f64;
        assert!((err / var - 1.0).abs() < 0.02);
    }

    #[test]
    fn comm_snr_scales_with_beam_gain() {
        let mut rng = RngStream::new(17, 1);
        let k = 16;
        let v: Vec<C64> = (0..k).map(|_| rng.cnormal()).collect();
        let nv = norm(&v);
        let v: Vec<C64> = v.iter().map(|z| z / nv).collect();
        let phi = 0.7;
        let beta = beam_pattern(&v, &[phi])[0];
        let n = 100_000;
        let x: Vec<C64> = (0..n).map(|_| rng.cnormal()).collect();
        let taps: Vec<C64> = (0..n).map(|_| rng.cnormal()).collect();
        let zeros = vec![C64::new(0.0, 0.0); n];
        let obs = comm_channel(&v, &x, phi, &taps, &zeros);
        let p = obs.received.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        // E|x|² = E|α|² = 1 and unit noise, so SNR equals β
        assert!((p / beta - 1.0).abs() < 0.03, "{p} vs {beta}");
    }

    #[test]
    fn sensing_without_target_is_noise() {
        let mut rng = RngStream::new(2, 2);
        let y = CMat::from_fn(4, 3, |_, _| rng.cnormal());
        let noise = CMat::from_fn(4, 3, |_, _| rng.cnormal());
        let taps = vec![C64::new(1.0, 0.0); 3];
        assert_eq!(sensing_channel(&y, 0.2, false, &taps, &noise), noise);
    }

    #[test]
    fn sensing_noiseless_matches_expansion() {
        let mut rng = RngStream::new(12, 0);
        let k = 6;
        let theta = -0.25;
        let v: Vec<C64> = (0..k).map(|_| rng.cnormal()).collect();
        let x: Vec<C64> = (0..4).map(|_| rng.cnormal()).collect();
        let taps: Vec<C64> = (0..4).map(|_| rng.cnormal()).collect();
        let z = sensing_channel(&transmit(&x, &v), theta, true, &taps, &CMat::zeros(k, 4));
        let a = steering_vector(theta, k);
        let gain = bilinear(&a, &v);
        for n in 0..4 {
            for r in 0..k {
                assert!(close(z[(r, n)], gain * taps[n] * x[n] * a[r], 1e-12));
            }
        }
        let s = svd(&z).s;
        assert!(s[1] < 1e-10 * s[0]);
    }

    #[test]
    fn matched_pattern_peaks_at_k() {
        let k = 16;
        let t0 = 0.2;
        let v: Vec<C64> = steering_vector(t0, k).iter().map(|z| z.conj() / (k as f64).sqrt()).collect();
        let p = beam_pattern(&v, &[t0])[0];
        assert!((p - k as f64).abs() < 1e-10);
        let grid = full_grid(default_grid_step());
        assert!(beam_pattern(&v, &grid).iter().all(|&q| q <= k as f64 + 1e-9));
    }

    #[test]
    fn single_antenna_is_isotropic() {
        let mut e1 = vec![C64::new(0.0, 0.0); 16];
        e1[0] = C64::new(1.0, 0.0);
        let grid = full_grid(default_grid_step());
        assert!(beam_pattern(&e1, &grid).iter().all(|&p| (p - 1.0).abs() < 1e-14));
        let cfg = ScenarioConfig::default();
        let f = area_power_fractions(&e1, &cfg, default_grid_step()).unwrap();
        assert!((f.sensing - 40.0 / 180.0).abs() < 1e-12);
        assert!((f.comm - 20.0 / 180.0).abs() < 2e-3);
        assert!((avg_beam_gain(&e1, cfg.comm_area, default_grid_step()).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn matched_beam_into_point_area() {
        let k = 16;
        let t0 = 0.1;
        let v: Vec<C64> = steering_vector(t0, k).iter().map(|z| z.conj() / (k as f64).sqrt()).collect();
        let g = avg_beam_gain(&v, Sector::new(t0, t0), default_grid_step()).unwrap();
        assert!((g - k as f64).abs() < 1e-10);
    }

    fn matched(theta_deg: f64) -> Vec<C64> {
        steering_vector(theta_deg.to_radians(), 16)
            .iter()
            .map(|z| z.conj() / 4.0)
            .collect()
    }

    #[test]
    fn centered_beam_concentrates_power() {
        let f = area_power_fractions(&matched(0.0), &ScenarioConfig::default(), default_grid_step()).unwrap();
        assert!(f.sensing > 0.5, "{f:?}");
    }

    #[test]
    fn edge_beam_splits_main_lobe() {
        // half the main lobe leaves the area when steered at its boundary
        let f = area_power_fractions(&matched(20.0), &ScenarioConfig::default(), default_grid_step()).unwrap();
        assert!((f.sensing - 0.47526).abs() < 1e-4, "{f:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fractions_partition_unity(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, 9);
            let v: Vec<C64> = (0..16).map(|_| rng.cnormal()).collect();
            let f = area_power_fractions(&v, &ScenarioConfig::default(), default_grid_step()).unwrap();
            prop_assert!(f.sensing >= 0.0 && f.comm >= 0.0 && f.outside >= 0.0);
            prop_assert!((f.sensing + f.comm + f.outside - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sine_spaced_mean_equals_norm(seed in any::<u64>(), k in 2usize..17) {
            // in u = sinθ the pattern is a trigonometric polynomial of degree K−1,
            // so a uniform mean over 2K points in u is exact
            let mut rng = RngStream::new(seed, 4);
            let v: Vec<C64> = (0..k).map(|_| rng.cnormal()).collect();
            let n = 2 * k;
            let grid: Vec<f64> = (0..n).map(|i| (-1.0 + (2 * i + 1) as f64 / n as f64).asin()).collect();
            let mean = beam_pattern(&v, &grid).iter().sum::<f64>() / n as f64;
            let nv: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((mean - nv).abs() < 1e-9 * nv);
        }
    }

    #[test]
    fn sampler_honors_ranges() {
        let cfg = ScenarioConfig::default();
        let mut rng = RngStream::new(1, 1);
        let mut counts = vec![0usize; cfg.max_window];
        let draws = 20_000;
        for _ in 0..draws {
            let f = sample_frame(&cfg, FrameOverrides::default(), &mut rng);
            assert!(cfg.sensing_area.contains(f.target_angle));
            assert!(cfg.comm_area.contains(f.ue_angle));
            assert!(f.symbols.iter().all(|&m| m < cfg.order));
            counts[f.window() - 1] += 1;
        }
        let expect = draws as f64 / cfg.max_window as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let crit = crate::numerics::chi2_quantile(cfg.max_window - 1, 0.999).unwrap();
        assert!(chi2 < crit, "chi2 {chi2} vs {crit}");
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig::default().validate().is_ok());
        let mut c = ScenarioConfig::default();
        c.sensing_area = Sector::from_degrees(10.0, -10.0);
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.comm_area = Sector::from_degrees(30.0, 95.0);
        assert!(c.validate().is_err());
    }
}
