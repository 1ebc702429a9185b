//! The single-user link as one differentiable system.
//!
//! [`SingleUserSystem::step`] runs a batch of frames through transmitter,
//! both channels and both receivers, and returns the loss parts together
//! with parameter gradients for the networks selected by [`Trainable`].
//! Complex quantities are differentiated in the `∂L/∂Re + j ∂L/∂Im`
//! convention used throughout the core crate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use jcas_core::airlink::{bilinear, steering_vector, transmit, Frame, ScenarioConfig};
use jcas_core::comm_rx::{demapper_inputs, demapper_side_input, mmse_equalize, SIDE_INPUT_CLIP};
use jcas_core::constellation::{make_apsk, make_psk, make_qam, ApskSpec, Constellation};
use jcas_core::neural::{
    angle_sizes, beamformer_backward, beamformer_head, beamformer_sizes, demapper_sizes, detector_sizes, mlp_init,
    modulator_backward, modulator_head, modulator_sizes, AlphabetPass, Grads, HeadKind, Mlp,
};
use jcas_core::numerics::{RngStream, C64};
use jcas_core::objectives::{loss_comm_bce, LossParts};
use jcas_core::sensing_rx::ThresholdTable;

use crate::echo::{observe, sensing_pass, EchoWindow};
use crate::error::{Result, TrainError};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Alphabet used by the transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulation {
    Qam,
    Psk,
    Apsk { inner_radius: f64 },
    /// Learned by the modulator network, natural labels.
    Trained,
}

impl Modulation {
    /// The fixed constellation, or `None` for a learned alphabet.
    pub fn fixed(&self, order: usize) -> Result<Option<Constellation>> {
        Ok(match *self {
            Modulation::Qam => Some(make_qam(order)?),
            Modulation::Psk => Some(make_psk(order)?),
            Modulation::Apsk { inner_radius } => {
                if order != 16 {
                    return Err(TrainError::Invalid(format!("APSK is defined for 16 points, got {order}")));
                }
                Some(make_apsk(ApskSpec::new(inner_radius))?)
            }
            Modulation::Trained => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleLoss {
    CrbNormalized,
    Unmodified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nets {
    pub beamformer: Mlp,
    pub modulator: Option<Mlp>,
    pub demapper: Mlp,
    pub detector: Mlp,
    pub estimator: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleUserSystem {
    pub scenario: ScenarioConfig,
    pub modulation: Modulation,
    pub angle_loss: AngleLoss,
    pub nets: Nets,
    pub thresholds: ThresholdTable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub beamformer: bool,
    pub modulator: bool,
    pub demapper: bool,
    pub detector: bool,
    pub estimator: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Trainable {
            beamformer: true,
            modulator: true,
            demapper: true,
            detector: true,
            estimator: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSpec {
    /// Multipliers of the three loss parts; a zero skips that branch.
    pub weights: LossParts,
    pub trainable: Trainable,
    /// Transmit QAM regardless of the configured modulation.
    pub force_qam: bool,
}

#[derive(Debug, Clone, Default)]
pub struct NetGrads {
    pub beamformer: Option<Grads>,
    pub modulator: Option<Grads>,
    pub demapper: Option<Grads>,
    pub detector: Option<Grads>,
    pub estimator: Option<Grads>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Unweighted parts; a branch that was skipped reports NaN.
    pub parts: LossParts,
    pub total: f64,
    pub grads: NetGrads,
}

/// Transmit alphabet for one step.
pub enum Alphabet {
    Fixed(Constellation),
    Learned(AlphabetPass),
}

impl Alphabet {
    pub fn points(&self) -> &[C64] {
        match self {
            Alphabet::Fixed(c) => c.points(),
            Alphabet::Learned(p) => &p.points,
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.points().len().trailing_zeros() as usize
    }

    /// Bit `i` (MSB first) of the label of symbol `m`.
    pub fn bit(&self, m: usize, i: usize) -> u8 {
        match self {
            Alphabet::Fixed(c) => c.bit(m, i),
            Alphabet::Learned(_) => ((m >> (self.bits_per_symbol() - 1 - i)) & 1) as u8,
        }
    }
}

/// Reverse mode of `x̂ = conj(γ) z / d` for a real denominator `d`.
pub(crate) struct EqualizerGrad {
    /// Through the numerator's `conj(γ)` only.
    pub csi: C64,
    pub received: C64,
    /// `∂L/∂d`.
    pub denom: f64,
}

pub(crate) fn equalizer_backward(csi: C64, received: C64, estimate: C64, denom: f64, grad: C64) -> EqualizerGrad {
    let gp = grad / denom;
    EqualizerGrad {
        csi: gp.conj() * received,
        received: gp * csi,
        denom: -(grad.conj() * estimate).re / denom,
    }
}

/// Derivative of the demapper side input with respect to `snr_post`; zero where clipped.
pub(crate) fn side_input_slope(snr_post: f64) -> f64 {
    let side = demapper_side_input(snr_post);
    if snr_post <= 0.0 || side.abs() >= SIDE_INPUT_CLIP {
        0.0
    } else {
        -1.0 / (snr_post * std::f64::consts::LN_10)
    }
}

pub(crate) fn grads_or_none(flag: bool, g: Grads) -> Option<Grads> {
    flag.then_some(g)
}

pub(crate) fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

pub(crate) fn stack_rows(rows: &[&[f64]]) -> Array2<f64> {
    let w = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), w), |(i, j)| rows[i][j])
}

/// Stream ids used for network initialization.
const INIT_STREAM: u64 = 0x1_0000;

impl SingleUserSystem {
    pub fn new(scenario: ScenarioConfig, modulation: Modulation, angle_loss: AngleLoss, seed: u64) -> Result<Self> {
        scenario.validate()?;
        modulation.fixed(scenario.order)?;
        let (k, m) = (scenario.antennas, scenario.order);
        let rng = |i| RngStream::new(seed, INIT_STREAM + i);
        let nets = Nets {
            beamformer: mlp_init(&beamformer_sizes(k), HeadKind::UnitNormVector, &mut rng(0))?,
            modulator: match modulation {
                Modulation::Trained => Some(mlp_init(&modulator_sizes(m), HeadKind::UnitPowerAlphabet, &mut rng(1))?),
                _ => None,
            },
            demapper: mlp_init(&demapper_sizes(m), HeadKind::Linear, &mut rng(2))?,
            detector: mlp_init(&detector_sizes(k), HeadKind::SigmoidOffset, &mut rng(3))?,
            estimator: mlp_init(&angle_sizes(k), HeadKind::ScaledTanh, &mut rng(4))?,
        };
        let thresholds = ThresholdTable::new(scenario.max_window);
        Ok(SingleUserSystem {
            scenario,
            modulation,
            angle_loss,
            nets,
            thresholds,
        })
    }

    /// Beamformer input: communication then sensing sector bounds.
    pub fn area_input(&self) -> [f64; 4] {
        let s = &self.scenario;
        [s.comm_area.min, s.comm_area.max, s.sensing_area.min, s.sensing_area.max]
    }

    pub fn precoder(&self) -> Result<Vec<C64>> {
        Ok(beamformer_head(&self.nets.beamformer, &self.area_input())?.weights)
    }

    pub fn alphabet(&self, force_qam: bool) -> Result<Alphabet> {
        if force_qam {
            return Ok(Alphabet::Fixed(make_qam(self.scenario.order)?));
        }
        match (&self.nets.modulator, self.modulation.fixed(self.scenario.order)?) {
            (_, Some(c)) => Ok(Alphabet::Fixed(c)),
            (Some(net), None) => Ok(Alphabet::Learned(modulator_head(net)?)),
            (None, None) => Err(TrainError::Invalid("learned modulation without a modulator network".into())),
        }
    }

    /// The transmit constellation with its labels.
    pub fn constellation(&self) -> Result<Constellation> {
        match self.alphabet(false)? {
            Alphabet::Fixed(c) => Ok(c),
            Alphabet::Learned(p) => Ok(Constellation::with_natural_labels(p.points)?),
        }
    }

    pub fn step(&self, frames: &[Frame], spec: &StepSpec) -> Result<StepOutput> {
        if frames.is_empty() {
            return Err(TrainError::Invalid("empty batch".into()));
        }
        let k = self.scenario.antennas;
        let (w, t) = (spec.weights, spec.trainable);
        let need_tx_grads = t.beamformer || t.modulator;
        let bf = beamformer_head(&self.nets.beamformer, &self.area_input())?;
        let v = &bf.weights;
        let alphabet = self.alphabet(spec.force_qam)?;
        let points = alphabet.points();
        let mut g_v = vec![ZERO; k];
        let mut g_pts = vec![ZERO; points.len()];
        let mut parts = LossParts {
            comm: f64::NAN,
            detect: f64::NAN,
            angle: f64::NAN,
        };
        let mut grads = NetGrads::default();

        if w.comm > 0.0 {
            let bps = alphabet.bits_per_symbol();
            let mut samples = Vec::new();
            let mut eqs = Vec::new();
            let mut bits = Vec::new();
            for f in frames {
                let gain = bilinear(v, &steering_vector(f.ue_angle, k));
                let noise = f.scaled_comm_noise();
                for (n, &s) in f.symbols.iter().enumerate() {
                    let x = points[s];
                    let csi = gain * f.comm_taps[n];
                    let z = csi * x + noise[n];
                    eqs.push(mmse_equalize(z, csi, f.comm_noise_var));
                    samples.push((x, csi, z));
                    bits.extend((0..bps).map(|i| alphabet.bit(s, i)));
                }
            }
            let (llr, tape) = self.nets.demapper.forward(&demapper_inputs(&eqs))?;
            let flat: Vec<f64> = llr.iter().copied().collect();
            let (loss, g) = loss_comm_bce(&flat, &bits);
            parts.comm = loss;
            let g = Array2::from_shape_vec(llr.raw_dim(), g.into_iter().map(|x| x * w.comm).collect()).expect("llr shape");
            let (dg, din) = self.nets.demapper.backward(&tape, &g)?;
            grads.demapper = grads_or_none(t.demapper, dg);
            if need_tx_grads {
                let mut idx = 0;
                for f in frames {
                    let a = steering_vector(f.ue_angle, k);
                    let mut g_gain = ZERO;
                    for (n, &s) in f.symbols.iter().enumerate() {
                        let (x, csi, z) = samples[idx];
                        let ge = C64::new(din[[idx, 0]], din[[idx, 1]]);
                        let denom = csi.norm_sqr() + f.comm_noise_var;
                        let e = equalizer_backward(csi, z, eqs[idx].symbol, denom, ge);
                        let g_side = din[[idx, 2]] * side_input_slope(eqs[idx].snr_post);
                        let g_csi = e.csi + csi * (2.0 * (e.denom + g_side / f.comm_noise_var)) + e.received * x.conj();
                        g_pts[s] += e.received * csi.conj();
                        g_gain += g_csi * f.comm_taps[n].conj();
                        idx += 1;
                    }
                    for (gv, ak) in g_v.iter_mut().zip(&a) {
                        *gv += g_gain * ak.conj();
                    }
                }
            }
        }

        if w.detect > 0.0 || w.angle > 0.0 {
            let windows: Vec<EchoWindow> = frames
                .iter()
                .map(|f| {
                    let x: Vec<C64> = f.symbols.iter().map(|&s| points[s]).collect();
                    observe(&transmit(&x, v), f)
                })
                .collect::<std::result::Result<_, _>>()?;
            let pass = sensing_pass(
                &self.nets.detector,
                &self.nets.estimator,
                self.angle_loss,
                &windows,
                frames,
                w.detect,
                w.angle,
                need_tx_grads,
            )?;
            parts.detect = pass.detect;
            parts.angle = pass.angle;
            grads.detector = grads_or_none(t.detector, pass.detector);
            grads.estimator = grads_or_none(t.estimator, pass.estimator);
            for (f, gq) in frames.iter().zip(&pass.illumination) {
                let Some(gq) = gq else { continue };
                let a = steering_vector(f.target_angle, k);
                let q = bilinear(&a, v);
                let mut g_q = ZERO;
                for (n, &s) in f.symbols.iter().enumerate() {
                    g_q += gq[n] * points[s].conj();
                    g_pts[s] += gq[n] * q.conj();
                }
                for (gv, ak) in g_v.iter_mut().zip(&a) {
                    *gv += g_q * ak.conj();
                }
            }
        }

        if t.beamformer {
            grads.beamformer = Some(beamformer_backward(&self.nets.beamformer, &bf, &g_v)?);
        }
        if t.modulator {
            if let (Alphabet::Learned(pass), Some(net)) = (&alphabet, &self.nets.modulator) {
                grads.modulator = Some(modulator_backward(net, pass, &g_pts)?);
            }
        }
        let total = [(w.comm, parts.comm), (w.detect, parts.detect), (w.angle, parts.angle)]
            .iter()
            .filter(|(wt, _)| *wt > 0.0)
            .map(|(wt, p)| wt * p)
            .sum();
        Ok(StepOutput { parts, total, grads })
    }
}
