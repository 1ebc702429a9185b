//! Sensing-side forward pieces and their reverse mode, shared by the
//! single-user and multi-user systems.
//!
//! The echo only depends on the transmit block through the per-snapshot
//! illumination `q_n = a(θ)^T Y[:, n]`, so both systems hand their own
//! illumination chain a gradient on `q`.

use ndarray::Array2;

use jcas_core::airlink::{sensing_channel, steering_vector, Frame};
use jcas_core::neural::{scaled_tanh, scaled_tanh_slope, Grads, Mlp};
use jcas_core::numerics::{CMat, C64};
use jcas_core::objectives::{loss_angle_crb_normalized, loss_angle_unmodified, loss_detect_bce, AngleLabel};
use jcas_core::sensing_rx::{correlate, correlate_backward, sensing_features, sensing_features_backward, NoiseSlot};
use jcas_core::Result;

use crate::system::{column, stack_rows, AngleLoss};

/// Slot used by the detection network. Keeping it blank makes noise-only
/// scores independent of the noise level, so one offset per window length
/// holds the false-alarm rate at every SNR.
pub const DETECTOR_SLOT: NoiseSlot = NoiseSlot::Blank;
pub const ESTIMATOR_SLOT: NoiseSlot = NoiseSlot::LogVariance;

/// One received window and its preprocessed views.
pub struct EchoWindow {
    pub echo: CMat,
    pub corr: CMat,
    pub detector_features: Vec<f64>,
    pub estimator_features: Vec<f64>,
}

pub fn observe(tx: &CMat, frame: &Frame) -> Result<EchoWindow> {
    let echo = sensing_channel(tx, frame.target_angle, frame.target, &frame.sensing_taps, &frame.scaled_sensing_noise());
    preprocess(echo, frame.sensing_noise_var)
}

pub fn preprocess(echo: CMat, noise_var: f64) -> Result<EchoWindow> {
    let corr = correlate(&echo);
    let n = echo.cols();
    Ok(EchoWindow {
        detector_features: sensing_features(&corr, n, noise_var, DETECTOR_SLOT)?,
        estimator_features: sensing_features(&corr, n, noise_var, ESTIMATOR_SLOT)?,
        echo,
        corr,
    })
}

/// Gradient on the illumination of each snapshot, given feature gradients
/// from the detector and (for present targets) the estimator.
///
/// Returns `None` for noise-only windows, where the echo does not depend on
/// the transmit block.
pub fn illumination_grad(
    window: &EchoWindow,
    frame: &Frame,
    detector_grad: &[f64],
    estimator_grad: Option<&[f64]>,
) -> Option<Vec<C64>> {
    if !frame.target {
        return None;
    }
    let k = window.echo.rows();
    let mut g = sensing_features_backward(detector_grad, k, frame.sensing_noise_var);
    if let Some(e) = estimator_grad {
        g = g.add(&sensing_features_backward(e, k, frame.sensing_noise_var));
    }
    let g_echo = correlate_backward(&window.echo, &g);
    let a = steering_vector(frame.target_angle, k);
    Some(
        (0..window.echo.cols())
            .map(|n| {
                let s: C64 = (0..k).map(|r| a[r].conj() * g_echo[(r, n)]).sum();
                s * frame.sensing_taps[n].conj()
            })
            .collect(),
    )
}

/// Losses and gradients of both sensing heads over a batch of windows.
pub struct SensingPass {
    pub detect: f64,
    pub angle: f64,
    /// Already scaled by the branch weights.
    pub detector: Grads,
    pub estimator: Grads,
    /// Gradient on the illumination per frame; `None` without a target or
    /// when not requested.
    pub illumination: Vec<Option<Vec<C64>>>,
}

#[allow(clippy::too_many_arguments)]
pub fn sensing_pass(
    detector: &Mlp,
    estimator: &Mlp,
    angle_loss: AngleLoss,
    windows: &[EchoWindow],
    frames: &[Frame],
    detect_weight: f64,
    angle_weight: f64,
    with_illumination: bool,
) -> Result<SensingPass> {
    let det_rows: Vec<&[f64]> = windows.iter().map(|w| w.detector_features.as_slice()).collect();
    let (scores, dtape) = detector.forward(&stack_rows(&det_rows))?;
    let targets: Vec<bool> = frames.iter().map(|f| f.target).collect();
    let (detect, gd) = loss_detect_bce(&scores.column(0).to_vec(), &targets);
    let (dgr, d_in) = detector.backward(&dtape, &column(gd.into_iter().map(|g| g * detect_weight).collect()))?;

    let present: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].target).collect();
    let mut e_in: Option<Array2<f64>> = None;
    let (angle, egr) = if present.is_empty() {
        (0.0, Grads::zeros_like(estimator))
    } else {
        let est_rows: Vec<&[f64]> = present.iter().map(|&i| windows[i].estimator_features.as_slice()).collect();
        let (raw, etape) = estimator.forward(&stack_rows(&est_rows))?;
        let mut estimates = vec![0.0; frames.len()];
        for (j, &i) in present.iter().enumerate() {
            estimates[i] = scaled_tanh(raw[[j, 0]]);
        }
        let labels: Vec<AngleLabel> = frames
            .iter()
            .map(|f| AngleLabel {
                target: f.target,
                angle: f.target_angle,
                window: f.window(),
                noise_var: f.sensing_noise_var,
            })
            .collect();
        let (la, ga) = match angle_loss {
            AngleLoss::CrbNormalized => loss_angle_crb_normalized(&estimates, &labels),
            AngleLoss::Unmodified => loss_angle_unmodified(&estimates, &labels),
        };
        let graw: Vec<f64> = present
            .iter()
            .enumerate()
            .map(|(j, &i)| ga[i] * scaled_tanh_slope(raw[[j, 0]]) * angle_weight)
            .collect();
        let (egr, ein) = estimator.backward(&etape, &column(graw))?;
        e_in = Some(ein);
        (la, egr)
    };

    let mut illumination = vec![None; frames.len()];
    if with_illumination {
        let mut slot = 0;
        for (i, f) in frames.iter().enumerate() {
            let est_grad = if f.target {
                slot += 1;
                e_in.as_ref().map(|e| e.row(slot - 1).to_vec())
            } else {
                None
            };
            illumination[i] = illumination_grad(&windows[i], f, &d_in.row(i).to_vec(), est_grad.as_deref());
        }
    }
    Ok(SensingPass {
        detect,
        angle,
        detector: dgr,
        estimator: egr,
        illumination,
    })
}
