//! Monte-Carlo evaluation of a trained system against the classical
//! baselines on identical draws.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use jcas_core::airlink::{avg_beam_gain, bilinear, default_grid_step, sample_frame, steering_vector, transmit, Frame, FrameOverrides};
use jcas_core::baselines::{crb_full, esprit_aoa, np_decide, np_threshold, CrbParams};
use jcas_core::comm_rx::{demap_mld, demap_nn_batch, mmse_equalize};
use jcas_core::constellation::Constellation;
use jcas_core::numerics::{RngStream, C64};
use jcas_core::objectives::{metric_ber, metric_bmi};
use jcas_core::sensing_rx::{estimate_aoa_batch, detection_scores, DetectionResult};

use crate::echo::observe;
use crate::error::{Result, TrainError};
use crate::system::{stack_rows, SingleUserSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SnrC,
    SnrS,
    Window,
    /// One checkpoint per grid value; see [`tradeoff`].
    SensingWeight,
}

impl FromStr for Axis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr_c" => Ok(Axis::SnrC),
            "snr_s" => Ok(Axis::SnrS),
            "n_win" => Ok(Axis::Window),
            "w_s" => Ok(Axis::SensingWeight),
            other => Err(TrainError::Invalid(format!(
                "unknown sweep axis `{other}` (expected snr_c, snr_s, n_win or w_s)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SnrC => "snr_c",
            Axis::SnrS => "snr_s",
            Axis::Window => "n_win",
            Axis::SensingWeight => "w_s",
        }
    }
}

/// Fixed parts of an evaluation draw; `None` samples from the scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub snr_c_db: Option<f64>,
    pub snr_s_db: Option<f64>,
    pub window: Option<usize>,
    pub target: Option<bool>,
}

impl EvalPoint {
    pub fn with(self, axis: Axis, value: f64) -> Result<Self> {
        Ok(match axis {
            Axis::SnrC => EvalPoint {
                snr_c_db: Some(value),
                ..self
            },
            Axis::SnrS => EvalPoint {
                snr_s_db: Some(value),
                ..self
            },
            Axis::Window => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(TrainError::Invalid(format!("window length must be a positive integer, got {value}")));
                }
                EvalPoint {
                    window: Some(value as usize),
                    ..self
                }
            }
            Axis::SensingWeight => {
                return Err(TrainError::Invalid("w_s is swept over checkpoints, not draws".into()));
            }
        })
    }

    fn overrides(&self) -> FrameOverrides {
        FrameOverrides {
            window: self.window,
            snr_s_db: self.snr_s_db,
            snr_c_db: self.snr_c_db,
            target: self.target,
            target_angle: None,
        }
    }
}

/// One row of an evaluation table. Rates without samples are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub value: f64,
    pub windows: usize,
    pub p_d: f64,
    pub p_d_ci: f64,
    pub p_f: f64,
    pub p_f_ci: f64,
    pub p_d_np: f64,
    pub p_f_np: f64,
    pub rmse_nn: f64,
    pub bias_nn: f64,
    pub rmse_esprit: f64,
    pub crb_rmse: f64,
    pub ber_nn: f64,
    pub ber_mld: f64,
    pub bmi_nn: f64,
    pub bmi_mld: f64,
    pub gain_sensing: f64,
    pub gain_comm: f64,
}

fn rate(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = hits as f64 / n as f64;
    (p, 1.96 * (p * (1.0 - p) / n as f64).sqrt())
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-window outcomes collected before aggregation.
#[derive(Default)]
struct Tally {
    targets: usize,
    hits: usize,
    hits_np: usize,
    empties: usize,
    alarms: usize,
    alarms_np: usize,
    err_nn: Vec<f64>,
    err_esprit: Vec<f64>,
    crb: Vec<f64>,
    llr_nn: Vec<f64>,
    llr_mld: Vec<f64>,
    bits: Vec<u8>,
}

/// Everything a receiver needs to process frames from one system.
pub(crate) struct Receivers<'a> {
    pub sys: &'a SingleUserSystem,
    pub precoder: Vec<C64>,
    pub constellation: Constellation,
    /// Average gain over the sensing area; the bound is evaluated at this gain.
    pub sensing_gain: f64,
}

impl<'a> Receivers<'a> {
    pub fn new(sys: &'a SingleUserSystem) -> Result<Self> {
        let precoder = sys.precoder()?;
        Ok(Receivers {
            sys,
            sensing_gain: avg_beam_gain(&precoder, sys.scenario.sensing_area, default_grid_step())?,
            precoder,
            constellation: sys.constellation()?,
        })
    }

    fn run(&self, frames: &[Frame], tally: &mut Tally, np_cache: &mut HashMap<usize, f64>) -> Result<()> {
        let sys = self.sys;
        let k = sys.scenario.antennas;
        let v = &self.precoder;
        let c = &self.constellation;
        let mut det_rows = Vec::with_capacity(frames.len());
        let mut est_rows = Vec::new();
        let mut eqs = Vec::new();
        for f in frames {
            let x: Vec<C64> = f.symbols.iter().map(|&s| c.point(s)).collect();
            let w = observe(&transmit(&x, v), f)?;
            let thr = match np_cache.get(&f.window()) {
                Some(&t) => t,
                None => {
                    let t = np_threshold(k, f.window(), sys.scenario.false_alarm)?;
                    np_cache.insert(f.window(), t);
                    t
                }
            };
            let np = np_decide(&w.echo, f.sensing_noise_var, thr);
            if f.target {
                tally.targets += 1;
                tally.hits_np += usize::from(np.detected);
                tally.err_esprit.push(esprit_aoa(&w.corr)?.angle - f.target_angle);
                tally.crb.push(crb_full(&CrbParams {
                    antennas: k,
                    window: f.window(),
                    noise_var: f.sensing_noise_var,
                    beam_gain: self.sensing_gain.max(1e-300),
                    target_var: sys.scenario.sensing_gain_var,
                    angle: f.target_angle,
                })?);
                est_rows.push(w.estimator_features.clone());
            } else {
                tally.empties += 1;
                tally.alarms_np += usize::from(np.detected);
            }
            det_rows.push(w.detector_features);

            let gain = bilinear(v, &steering_vector(f.ue_angle, k));
            let noise = f.scaled_comm_noise();
            for (n, &s) in f.symbols.iter().enumerate() {
                let csi = gain * f.comm_taps[n];
                let z = csi * c.point(s) + noise[n];
                eqs.push(mmse_equalize(z, csi, f.comm_noise_var));
                tally.llr_mld.extend(demap_mld(c, z, csi, f.comm_noise_var));
                tally.bits.extend(c.bits(s));
            }
        }
        let refs: Vec<&[f64]> = det_rows.iter().map(|r| r.as_slice()).collect();
        let scores = detection_scores(&sys.nets.detector, &stack_rows(&refs))?;
        for (f, s) in frames.iter().zip(scores) {
            let (offset, calibrated) = sys.thresholds.offset(f.window());
            if !calibrated {
                log::warn!("no calibrated threshold for window {}; using 0", f.window());
            }
            let d = DetectionResult::from_score(s, offset).detected;
            if f.target {
                tally.hits += usize::from(d);
            } else {
                tally.alarms += usize::from(d);
            }
        }
        if !est_rows.is_empty() {
            let refs: Vec<&[f64]> = est_rows.iter().map(|r| r.as_slice()).collect();
            let est = estimate_aoa_batch(&sys.nets.estimator, &stack_rows(&refs))?;
            let truth = frames.iter().filter(|f| f.target).map(|f| f.target_angle);
            tally.err_nn.extend(est.iter().zip(truth).map(|(e, t)| e - t));
        }
        let llr = demap_nn_batch(&sys.nets.demapper, &eqs)?;
        tally.llr_nn.extend(llr.iter().copied());
        Ok(())
    }
}

/// Frames for one evaluation point; the same seed gives the same draws.
pub fn eval_frames(sys: &SingleUserSystem, point: EvalPoint, count: usize, seed: u64) -> Vec<Frame> {
    let mut rng = RngStream::new(seed, 0xE_0000);
    (0..count).map(|_| sample_frame(&sys.scenario, point.overrides(), &mut rng)).collect()
}

/// Evaluates `windows` draws at one point.
pub fn evaluate(sys: &SingleUserSystem, point: EvalPoint, windows: usize, seed: u64) -> Result<EvalRow> {
    if windows == 0 {
        return Err(TrainError::Invalid("need at least one evaluation window".into()));
    }
    let rx = Receivers::new(sys)?;
    let mut tally = Tally::default();
    let mut cache = HashMap::new();
    let frames = eval_frames(sys, point, windows, seed);
    for chunk in frames.chunks(1024) {
        rx.run(chunk, &mut tally, &mut cache)?;
    }
    let (p_d, p_d_ci) = rate(tally.hits, tally.targets);
    let (p_f, p_f_ci) = rate(tally.alarms, tally.empties);
    let order = sys.scenario.order;
    Ok(EvalRow {
        value: f64::NAN,
        windows,
        p_d,
        p_d_ci,
        p_f,
        p_f_ci,
        p_d_np: rate(tally.hits_np, tally.targets).0,
        p_f_np: rate(tally.alarms_np, tally.empties).0,
        rmse_nn: rms(&tally.err_nn),
        bias_nn: mean(&tally.err_nn),
        rmse_esprit: rms(&tally.err_esprit),
        crb_rmse: mean(&tally.crb).sqrt(),
        ber_nn: metric_ber(&tally.llr_nn, &tally.bits),
        ber_mld: metric_ber(&tally.llr_mld, &tally.bits),
        bmi_nn: metric_bmi(&tally.llr_nn, &tally.bits, order),
        bmi_mld: metric_bmi(&tally.llr_mld, &tally.bits, order),
        gain_sensing: rx.sensing_gain,
        gain_comm: avg_beam_gain(&rx.precoder, sys.scenario.comm_area, default_grid_step())?,
    })
}

/// Evaluates every grid value of one axis. Each grid value reuses the same
/// seed; an empty grid or zero windows gives no rows.
pub fn sweep(sys: &SingleUserSystem, axis: Axis, grid: &[f64], base: EvalPoint, windows: usize, seed: u64) -> Result<Vec<EvalRow>> {
    if windows == 0 {
        return Ok(Vec::new());
    }
    grid.iter()
        .map(|&g| {
            let mut row = evaluate(sys, base.with(axis, g)?, windows, seed)?;
            row.value = g;
            Ok(row)
        })
        .collect()
}

/// One row per trained system, tagged with its sensing weight.
pub fn tradeoff(systems: &[(f64, &SingleUserSystem)], point: EvalPoint, windows: usize, seed: u64) -> Result<Vec<EvalRow>> {
    systems
        .iter()
        .map(|&(w, sys)| {
            let mut row = evaluate(sys, point, windows, seed)?;
            row.value = w;
            Ok(row)
        })
        .collect()
}

/// SNR at which a BER curve crosses `level`, interpolating `log10 BER`
/// linearly in dB. `None` if the curve never brackets the level.
pub fn crossing_snr(snr_db: &[f64], ber: &[f64], level: f64) -> Option<f64> {
    let lv = level.log10();
    for i in 1..snr_db.len() {
        let (b0, b1) = (ber[i - 1], ber[i]);
        if !(b0 > 0.0 && b1 > 0.0) {
            if b0 >= level && b1 == 0.0 {
                return Some(snr_db[i]);
            }
            continue;
        }
        let (l0, l1) = (b0.log10(), b1.log10());
        if (l0 - lv) * (l1 - lv) <= 0.0 && l0 != l1 {
            let t = (lv - l0) / (l1 - l0);
            return Some(snr_db[i - 1] + t * (snr_db[i] - snr_db[i - 1]));
        }
    }
    None
}
