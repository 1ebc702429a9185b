//! Multi-user downlink: one precoder column and one demapper per UE, an
//! α-fair rate objective, and the single-user sensing receiver unchanged.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use jcas_core::airlink::{beam_pattern, bilinear, sample_frame, steering_vector, Frame, FrameOverrides, ScenarioConfig};
use jcas_core::comm_rx::{demap_mld, demap_nn_batch, demapper_inputs, Equalized};
use jcas_core::constellation::{make_qam, Constellation};
use jcas_core::neural::{
    angle_sizes, beamformer_backward, beamformer_head, demapper_sizes, detector_sizes, mlp_init, Grads, HeadKind,
    LayerSizes, Mlp,
};
use jcas_core::numerics::{CMat, RngStream, C64};
use jcas_core::objectives::{bit_cross_entropy, loss_alpha_fair, loss_comm_bce, loss_weights, metric_ber, user_rate, LossParts};
use jcas_core::sensing_rx::{Calibration, ThresholdTable};

use crate::echo::{observe, sensing_pass, EchoWindow};
use crate::error::{Result, TrainError};
use crate::system::{equalizer_backward, grads_or_none, side_input_slope, AngleLoss};
use crate::trainer::{calibrate_table, Optimizer, Phase, TraceRow, TrainPlan, TrainReport};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoScenario {
    /// Array size, sensing area and SNR, window lengths and false-alarm
    /// rate. The communication fields other than `comm_gain_var` are unused.
    pub base: ScenarioConfig,
    /// Departure angle of each UE's dominant path, radians.
    pub ue_angles: Vec<f64>,
    /// Communication SNR range per UE, dB.
    pub ue_snr_c_db: Vec<(f64, f64)>,
    pub order: usize,
}

impl Default for MimoScenario {
    fn default() -> Self {
        let base = ScenarioConfig::default();
        MimoScenario {
            ue_snr_c_db: vec![base.snr_c_db; 2],
            ue_angles: vec![50f64.to_radians(), 70f64.to_radians()],
            order: 4,
            base,
        }
    }
}

impl MimoScenario {
    pub fn users(&self) -> usize {
        self.ue_angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.ue_angles.is_empty() {
            return Err(TrainError::Invalid("at least one UE is required".into()));
        }
        if self.ue_snr_c_db.len() != self.ue_angles.len() {
            return Err(TrainError::Invalid(format!(
                "{} UE angles but {} SNR ranges",
                self.ue_angles.len(),
                self.ue_snr_c_db.len()
            )));
        }
        if self.ue_angles.iter().any(|a| !(a.abs() < std::f64::consts::FRAC_PI_2)) {
            return Err(TrainError::Invalid("UE angles must lie inside (-90°, 90°)".into()));
        }
        if self.ue_snr_c_db.iter().any(|r| !(r.0 <= r.1)) {
            return Err(TrainError::Invalid("UE SNR ranges must be ordered (low, high)".into()));
        }
        make_qam(self.order)?;
        Ok(())
    }
}

/// Draws of one UE over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct UeDraw {
    pub symbols: Vec<usize>,
    pub taps: Vec<C64>,
    /// Unit variance; scaled by `noise_var` at the receiver.
    pub noise: Vec<C64>,
    pub noise_var: f64,
}

impl UeDraw {
    pub fn scaled_noise(&self) -> Vec<C64> {
        let s = self.noise_var.sqrt();
        self.noise.iter().map(|z| z * s).collect()
    }
}

/// One window of the multi-user link. Only the sensing fields of `sensing`
/// are used.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoFrame {
    pub sensing: Frame,
    pub users: Vec<UeDraw>,
}

impl MimoFrame {
    pub fn window(&self) -> usize {
        self.sensing.window()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MimoOverrides {
    pub window: Option<usize>,
    pub snr_s_db: Option<f64>,
    /// Same SNR for every UE.
    pub snr_c_db: Option<f64>,
    pub target: Option<bool>,
}

pub fn sample_mimo_frame(sc: &MimoScenario, ov: MimoOverrides, rng: &mut RngStream) -> MimoFrame {
    let sensing = sample_frame(
        &sc.base,
        FrameOverrides {
            window: ov.window,
            snr_s_db: ov.snr_s_db,
            snr_c_db: Some(0.0),
            target: ov.target,
            target_angle: None,
        },
        rng,
    );
    let n = sensing.window();
    let amp = sc.base.comm_gain_var.sqrt();
    let users = sc
        .ue_snr_c_db
        .iter()
        .map(|&(lo, hi)| {
            let snr = ov.snr_c_db.unwrap_or_else(|| rng.uniform_in(lo, hi));
            UeDraw {
                symbols: (0..n).map(|_| rng.index(sc.order)).collect(),
                taps: (0..n).map(|_| rng.cnormal() * amp).collect(),
                noise: (0..n).map(|_| rng.cnormal()).collect(),
                noise_var: sc.base.comm_noise_var(snr),
            }
        })
        .collect();
    MimoFrame { sensing, users }
}

pub fn draw_mimo_batch(sc: &MimoScenario, snapshots: usize, rng: &mut RngStream) -> Vec<MimoFrame> {
    let mut out = Vec::new();
    let mut n = 0;
    while n < snapshots {
        let f = sample_mimo_frame(sc, MimoOverrides::default(), rng);
        n += f.window();
        out.push(f);
    }
    out
}

/// `Y = V X`. Each entry starts from the first UE's term, so a single
/// column gives exactly the single-user outer product.
pub fn mimo_transmit(precoder: &CMat, symbols: &CMat) -> CMat {
    let users = precoder.cols();
    assert_eq!(symbols.rows(), users, "one symbol row per precoder column");
    CMat::from_fn(precoder.rows(), symbols.cols(), |r, n| {
        let mut acc = precoder[(r, 0)] * symbols[(0, n)];
        for o in 1..users {
            acc += precoder[(r, o)] * symbols[(o, n)];
        }
        acc
    })
}

/// What one UE receives over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoObservation {
    pub received: Vec<C64>,
    /// `a(θ_ue)^T V`. The CSI of stream `o` at snapshot `n` is `effective[o] · taps[n]`.
    pub effective: Vec<C64>,
}

impl MimoObservation {
    pub fn csi(&self, tap: C64) -> Vec<C64> {
        self.effective.iter().map(|e| e * tap).collect()
    }
}

pub fn mimo_comm_channel(precoder: &CMat, tx: &CMat, theta_ue: f64, taps: &[C64], noise: &[C64]) -> MimoObservation {
    let k = tx.rows();
    let a = steering_vector(theta_ue, k);
    let received = (0..tx.cols())
        .map(|n| {
            let s: C64 = (0..k).map(|r| a[r] * tx[(r, n)]).sum();
            s * taps[n] + noise[n]
        })
        .collect();
    let effective = (0..precoder.cols()).map(|o| bilinear(&a, &precoder.col(o))).collect();
    MimoObservation { received, effective }
}

/// MMSE estimate of stream `user`, other streams counted as noise.
pub fn mimo_equalize(received: C64, csi: &[C64], user: usize, noise_var: f64) -> Equalized {
    let own = csi[user].norm_sqr();
    let total = csi.iter().map(|c| c.norm_sqr()).sum::<f64>() + noise_var;
    Equalized {
        symbol: csi[user].conj() * received / total,
        snr_post: own / (total - own),
    }
}

/// Post-equalizer SINR a UE sees on average over fading.
pub fn analytic_sinr(effective: &[C64], user: usize, gain_var: f64, noise_var: f64) -> f64 {
    let own = effective[user].norm_sqr() * gain_var;
    let other: f64 = effective
        .iter()
        .enumerate()
        .filter(|&(o, _)| o != user)
        .map(|(_, e)| e.norm_sqr() * gain_var)
        .sum();
    own / (other + noise_var)
}

/// Hidden widths follow the single-user beamformer with `K·N_ue` in place of `K`.
pub fn precoder_sizes(antennas: usize, users: usize) -> LayerSizes {
    let w = antennas * users;
    LayerSizes::new(2 + users, &[w, w, 2 * w], 2 * w)
}

/// Column-major view of the flat precoder output.
fn to_matrix(flat: &[C64], antennas: usize) -> CMat {
    CMat::from_fn(antennas, flat.len() / antennas, |r, o| flat[o * antennas + r])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoSystem {
    pub scenario: MimoScenario,
    /// Fairness exponent of the rate utility.
    pub alpha: f64,
    pub precoder: Mlp,
    pub demappers: Vec<Mlp>,
    pub detector: Mlp,
    pub estimator: Mlp,
    pub thresholds: ThresholdTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommObjective {
    /// Negative α-fair utility of the per-UE rates.
    Fair,
    /// Sum of per-UE mean BCE, a sum-rate surrogate that stays informative
    /// while rates are near zero.
    Bitwise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimoStepSpec {
    pub weights: LossParts,
    pub objective: CommObjective,
    pub precoder: bool,
    pub demappers: bool,
    pub detector: bool,
    pub estimator: bool,
}

#[derive(Debug, Clone, Default)]
pub struct MimoGrads {
    pub precoder: Option<Grads>,
    pub demappers: Vec<Option<Grads>>,
    pub detector: Option<Grads>,
    pub estimator: Option<Grads>,
}

#[derive(Debug, Clone)]
pub struct MimoStepOutput {
    /// NaN for skipped branches.
    pub parts: LossParts,
    pub total: f64,
    /// Rate proxy per UE; empty when the comm branch is skipped.
    pub rates: Vec<f64>,
    pub grads: MimoGrads,
}

const INIT_STREAM: u64 = 0x2_0000;
const TRAIN_STREAM: u64 = 1 << 48;

struct UeSample {
    csi: Vec<C64>,
    received: C64,
    eq: Equalized,
    /// Frame and snapshot.
    at: (usize, usize),
}

impl MimoSystem {
    pub fn new(scenario: MimoScenario, alpha: f64, seed: u64) -> Result<Self> {
        scenario.validate()?;
        if !(alpha >= 0.0) {
            return Err(TrainError::Invalid(format!("fairness exponent must be >= 0, got {alpha}")));
        }
        let k = scenario.base.antennas;
        let rng = |i| RngStream::new(seed, INIT_STREAM + i);
        let demappers = (0..scenario.users() as u64)
            .map(|u| mlp_init(&demapper_sizes(scenario.order), HeadKind::Linear, &mut rng(16 + u)))
            .collect::<jcas_core::Result<Vec<_>>>()?;
        Ok(MimoSystem {
            precoder: mlp_init(&precoder_sizes(k, scenario.users()), HeadKind::UnitNormVector, &mut rng(0))?,
            demappers,
            detector: mlp_init(&detector_sizes(k), HeadKind::SigmoidOffset, &mut rng(1))?,
            estimator: mlp_init(&angle_sizes(k), HeadKind::ScaledTanh, &mut rng(2))?,
            thresholds: ThresholdTable::new(scenario.base.max_window),
            alpha,
            scenario,
        })
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Ok(make_qam(self.scenario.order)?)
    }

    /// Sensing area bounds followed by the UE angles.
    pub fn precoder_input(&self) -> Vec<f64> {
        let s = &self.scenario.base.sensing_area;
        let mut v = vec![s.min, s.max];
        v.extend(&self.scenario.ue_angles);
        v
    }

    /// `K × N_ue` precoding matrix of unit Frobenius norm.
    pub fn precoder_matrix(&self) -> Result<CMat> {
        let w = beamformer_head(&self.precoder, &self.precoder_input())?.weights;
        Ok(to_matrix(&w, self.scenario.base.antennas))
    }

    fn symbol_block(c: &Constellation, f: &MimoFrame) -> CMat {
        CMat::from_fn(f.users.len(), f.window(), |u, n| c.point(f.users[u].symbols[n]))
    }

    pub fn step(&self, frames: &[MimoFrame], spec: &MimoStepSpec) -> Result<MimoStepOutput> {
        if frames.is_empty() {
            return Err(TrainError::Invalid("empty batch".into()));
        }
        let sc = &self.scenario;
        let (k, users) = (sc.base.antennas, sc.users());
        let c = self.constellation()?;
        let bps = c.bits_per_symbol();
        let w = spec.weights;
        let head = beamformer_head(&self.precoder, &self.precoder_input())?;
        let v = to_matrix(&head.weights, k);
        let blocks: Vec<CMat> = frames.iter().map(|f| Self::symbol_block(&c, f)).collect();
        let txs: Vec<CMat> = blocks.iter().map(|x| mimo_transmit(&v, x)).collect();
        // gradient on V, laid out like the flat precoder output
        let mut g_v = vec![ZERO; k * users];
        let mut parts = LossParts {
            comm: f64::NAN,
            detect: f64::NAN,
            angle: f64::NAN,
        };
        let mut grads = MimoGrads {
            demappers: vec![None; users],
            ..Default::default()
        };
        let mut rates = Vec::new();

        if w.comm > 0.0 {
            let mut total_comm = 0.0;
            let mut fair_grads = None;
            let mut passes = Vec::with_capacity(users);
            for u in 0..users {
                let mut samples = Vec::new();
                let mut bits = Vec::new();
                for (i, f) in frames.iter().enumerate() {
                    let ue = &f.users[u];
                    let obs = mimo_comm_channel(&v, &txs[i], sc.ue_angles[u], &ue.taps, &ue.scaled_noise());
                    for n in 0..f.window() {
                        let csi = obs.csi(ue.taps[n]);
                        let eq = mimo_equalize(obs.received[n], &csi, u, ue.noise_var);
                        samples.push(UeSample {
                            csi,
                            received: obs.received[n],
                            eq,
                            at: (i, n),
                        });
                        bits.extend(c.bits(ue.symbols[n]));
                    }
                }
                let eqs: Vec<Equalized> = samples.iter().map(|s| s.eq).collect();
                let (llr, tape) = self.demappers[u].forward(&demapper_inputs(&eqs))?;
                let flat: Vec<f64> = llr.iter().copied().collect();
                rates.push(user_rate(&flat, &bits, bps));
                passes.push((samples, bits, llr, flat, tape));
            }
            if spec.objective == CommObjective::Fair {
                let (loss, dr) = loss_alpha_fair(&rates, self.alpha)?;
                total_comm = loss;
                fair_grads = Some(dr);
            }
            for (u, (samples, bits, llr, flat, tape)) in passes.iter().enumerate() {
                let g: Vec<f64> = match &fair_grads {
                    // rate = Σ_i (1 − mean BCE_i), so each LLR enters through its own position's mean
                    Some(dr) => {
                        let n = samples.len() as f64;
                        flat.iter().zip(bits).map(|(&l, &b)| -dr[u] * bit_cross_entropy(l, b).1 / n).collect()
                    }
                    None => {
                        let (l, g) = loss_comm_bce(flat, bits);
                        total_comm += l;
                        g
                    }
                };
                let g = Array2::from_shape_vec(llr.raw_dim(), g.into_iter().map(|x| x * w.comm).collect()).expect("llr shape");
                let (dg, din) = self.demappers[u].backward(tape, &g)?;
                grads.demappers[u] = grads_or_none(spec.demappers, dg);
                if !spec.precoder {
                    continue;
                }
                let a = steering_vector(sc.ue_angles[u], k);
                let mut g_eff = vec![ZERO; users];
                for (j, s) in samples.iter().enumerate() {
                    let (i, n) = s.at;
                    let ue = &frames[i].users[u];
                    let own = s.csi[u];
                    let denom = s.csi.iter().map(|c| c.norm_sqr()).sum::<f64>() + ue.noise_var;
                    let interference = denom - own.norm_sqr();
                    let ge = C64::new(din[[j, 0]], din[[j, 1]]);
                    let e = equalizer_backward(own, s.received, s.eq.symbol, denom, ge);
                    let g_snr = din[[j, 2]] * side_input_slope(s.eq.snr_post);
                    for o in 0..users {
                        let co = s.csi[o];
                        let mut g = co * (2.0 * e.denom) + e.received * blocks[i][(o, n)].conj();
                        if o == u {
                            g += e.csi + co * (2.0 * g_snr / interference);
                        } else {
                            g -= co * (2.0 * g_snr * s.eq.snr_post / interference);
                        }
                        g_eff[o] += g * ue.taps[n].conj();
                    }
                }
                for (o, ge) in g_eff.iter().enumerate() {
                    for (r, ar) in a.iter().enumerate() {
                        g_v[o * k + r] += ge * ar.conj();
                    }
                }
            }
            parts.comm = total_comm;
        }

        if w.detect > 0.0 || w.angle > 0.0 {
            let sensing: Vec<Frame> = frames.iter().map(|f| f.sensing.clone()).collect();
            let windows: Vec<EchoWindow> = txs
                .iter()
                .zip(&sensing)
                .map(|(tx, f)| observe(tx, f))
                .collect::<std::result::Result<_, _>>()?;
            let pass = sensing_pass(
                &self.detector,
                &self.estimator,
                AngleLoss::CrbNormalized,
                &windows,
                &sensing,
                w.detect,
                w.angle,
                spec.precoder,
            )?;
            parts.detect = pass.detect;
            parts.angle = pass.angle;
            grads.detector = grads_or_none(spec.detector, pass.detector);
            grads.estimator = grads_or_none(spec.estimator, pass.estimator);
            for (i, gq) in pass.illumination.iter().enumerate() {
                let Some(gq) = gq else { continue };
                let a = steering_vector(sensing[i].target_angle, k);
                for o in 0..users {
                    let g_q: C64 = (0..gq.len()).map(|n| gq[n] * blocks[i][(o, n)].conj()).sum();
                    for (r, ar) in a.iter().enumerate() {
                        g_v[o * k + r] += g_q * ar.conj();
                    }
                }
            }
        }

        if spec.precoder {
            grads.precoder = Some(beamformer_backward(&self.precoder, &head, &g_v)?);
        }
        let total = [(w.comm, parts.comm), (w.detect, parts.detect), (w.angle, parts.angle)]
            .iter()
            .filter(|(wt, _)| *wt > 0.0)
            .map(|(wt, p)| wt * p)
            .sum();
        Ok(MimoStepOutput {
            parts,
            total,
            rates,
            grads,
        })
    }
}

fn run_mimo_phase(sys: &mut MimoSystem, plan: &TrainPlan, phase: Phase, budget: u64, spec: MimoStepSpec) -> Result<Vec<TraceRow>> {
    let mut flags = vec![(&sys.precoder, spec.precoder)];
    flags.extend(sys.demappers.iter().map(|d| (d, spec.demappers)));
    flags.extend([(&sys.detector, spec.detector), (&sys.estimator, spec.estimator)]);
    let mut opt = Optimizer::new(&flags, plan.learning_rate);
    let mut trace = Vec::new();
    let mut done = 0u64;
    let mut step = 0usize;
    let report_every = (budget / plan.batch_symbols.max(1) as u64 / 10).max(1) as usize;
    while done < budget {
        let mut rng = RngStream::new(plan.seed, TRAIN_STREAM | phase.stream(step as u64));
        let frames = draw_mimo_batch(&sys.scenario, plan.batch_symbols, &mut rng);
        done += frames.iter().map(|f| f.window() as u64).sum::<u64>();
        let out = sys.step(&frames, &spec)?;
        if !out.total.is_finite() {
            return Err(TrainError::Invalid(format!("{phase:?} step {step}: loss is not finite")));
        }
        let g = &out.grads;
        let mut nets: Vec<&mut Mlp> = vec![&mut sys.precoder];
        nets.extend(sys.demappers.iter_mut());
        nets.extend([&mut sys.detector, &mut sys.estimator]);
        let mut gl = vec![g.precoder.as_ref()];
        gl.extend(g.demappers.iter().map(|d| d.as_ref()));
        gl.extend([g.detector.as_ref(), g.estimator.as_ref()]);
        opt.apply(nets, gl)?;
        trace.push(TraceRow {
            phase,
            step,
            symbols: done,
            comm: out.parts.comm,
            detect: out.parts.detect,
            angle: out.parts.angle,
            total: out.total,
        });
        if step % report_every == 0 {
            log::info!("mimo {phase:?} step {step}: {done}/{budget} snapshots, loss {:.4}", out.total);
        }
        step += 1;
    }
    Ok(trace)
}

fn phase_spec(plan: &TrainPlan, objective: CommObjective) -> MimoStepSpec {
    MimoStepSpec {
        weights: loss_weights(plan.sensing_weight),
        objective,
        precoder: true,
        demappers: true,
        detector: true,
        estimator: true,
    }
}

/// First phase. The α-fair gradient vanishes while rates sit at the floor,
/// so the communication part uses plain BCE here.
pub fn mimo_pretrain(sys: &mut MimoSystem, plan: &TrainPlan) -> Result<Vec<TraceRow>> {
    plan.validate()?;
    run_mimo_phase(sys, plan, Phase::Pretrain, plan.pretrain_symbols, phase_spec(plan, CommObjective::Bitwise))
}

pub fn mimo_finetune(sys: &mut MimoSystem, plan: &TrainPlan) -> Result<Vec<TraceRow>> {
    plan.validate()?;
    run_mimo_phase(sys, plan, Phase::Finetune, plan.finetune_symbols, phase_spec(plan, CommObjective::Fair))
}

pub fn mimo_limit(sys: &mut MimoSystem, plan: &TrainPlan) -> Result<Vec<Calibration>> {
    let (table, cals) = calibrate_table(&sys.detector, &sys.scenario.base, plan.limit_windows, plan.seed)?;
    sys.thresholds = table;
    Ok(cals)
}

/// Budgets count snapshots: every snapshot carries one symbol per UE.
pub fn mimo_train(sys: &mut MimoSystem, plan: &TrainPlan) -> Result<TrainReport> {
    let mut seconds = [0.0; 3];
    let t0 = Instant::now();
    let mut trace = mimo_pretrain(sys, plan)?;
    seconds[0] = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    trace.extend(mimo_finetune(sys, plan)?);
    seconds[1] = t1.elapsed().as_secs_f64();
    let t2 = Instant::now();
    let calibrations = mimo_limit(sys, plan)?;
    seconds[2] = t2.elapsed().as_secs_f64();
    Ok(TrainReport {
        trace,
        calibrations,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MimoBerRow {
    pub snr_c_db: f64,
    /// Trained demapper, one entry per UE.
    pub ber_nn: Vec<f64>,
    /// Max-log ML with interference treated as Gaussian noise.
    pub ber_mld: Vec<f64>,
}

const EVAL_STREAM: u64 = 0xE_1000;

/// Per-UE bit error rates at a common SNR, over `windows` fresh windows per point.
pub fn mimo_ber_sweep(sys: &MimoSystem, snr_c_db: &[f64], windows: usize, seed: u64) -> Result<Vec<MimoBerRow>> {
    snr_c_db
        .iter()
        .enumerate()
        .map(|(p, &snr)| {
            let ov = MimoOverrides {
                snr_c_db: Some(snr),
                ..Default::default()
            };
            let (ber_nn, ber_mld) = ber_point(sys, ov, windows, &mut RngStream::new(seed, EVAL_STREAM + p as u64))?;
            Ok(MimoBerRow { snr_c_db: snr, ber_nn, ber_mld })
        })
        .collect()
}

/// Per-UE bit error rates with each UE's SNR drawn from its own range.
/// `snr_c_db` of the row is NaN.
pub fn mimo_ber_operating(sys: &MimoSystem, windows: usize, seed: u64) -> Result<MimoBerRow> {
    let mut rng = RngStream::new(seed, EVAL_STREAM - 1);
    let (ber_nn, ber_mld) = ber_point(sys, MimoOverrides::default(), windows, &mut rng)?;
    Ok(MimoBerRow {
        snr_c_db: f64::NAN,
        ber_nn,
        ber_mld,
    })
}

fn ber_point(sys: &MimoSystem, ov: MimoOverrides, windows: usize, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    let sc = &sys.scenario;
    let c = sys.constellation()?;
    let v = sys.precoder_matrix()?;
    let users = sc.users();
    let mut eqs = vec![Vec::new(); users];
    let mut mld = vec![Vec::new(); users];
    let mut bits = vec![Vec::new(); users];
    for _ in 0..windows {
        let f = sample_mimo_frame(sc, ov, rng);
        let tx = mimo_transmit(&v, &MimoSystem::symbol_block(&c, &f));
        for (u, ue) in f.users.iter().enumerate() {
            let obs = mimo_comm_channel(&v, &tx, sc.ue_angles[u], &ue.taps, &ue.scaled_noise());
            for n in 0..f.window() {
                let csi = obs.csi(ue.taps[n]);
                let others: f64 = csi.iter().map(|c| c.norm_sqr()).sum::<f64>() - csi[u].norm_sqr();
                eqs[u].push(mimo_equalize(obs.received[n], &csi, u, ue.noise_var));
                mld[u].extend(demap_mld(&c, obs.received[n], csi[u], others + ue.noise_var));
                bits[u].extend(c.bits(ue.symbols[n]));
            }
        }
    }
    let mut ber_nn = Vec::with_capacity(users);
    let mut ber_mld = Vec::with_capacity(users);
    for u in 0..users {
        let llr: Vec<f64> = demap_nn_batch(&sys.demappers[u], &eqs[u])?.iter().copied().collect();
        ber_nn.push(metric_ber(&llr, &bits[u]));
        ber_mld.push(metric_ber(&mld[u], &bits[u]));
    }
    Ok((ber_nn, ber_mld))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MimoBeamRow {
    pub angle_deg: f64,
    pub per_ue: Vec<f64>,
    pub sum: f64,
}

/// `|a(θ)^T v_u|²` per precoder column on each grid angle.
pub fn mimo_beam_patterns(sys: &MimoSystem, grid: &[f64]) -> Result<Vec<MimoBeamRow>> {
    let v = sys.precoder_matrix()?;
    let per: Vec<Vec<f64>> = (0..v.cols()).map(|o| beam_pattern(&v.col(o), grid)).collect();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let per_ue: Vec<f64> = per.iter().map(|p| p[i]).collect();
            MimoBeamRow {
                angle_deg: t.to_degrees(),
                sum: per_ue.iter().sum(),
                per_ue,
            }
        })
        .collect())
}

/// Share of the summed pattern that falls inside the sensing area.
pub fn sensing_share(rows: &[MimoBeamRow], sc: &MimoScenario) -> f64 {
    let total: f64 = rows.iter().map(|r| r.sum).sum();
    let inside: f64 = rows
        .iter()
        .filter(|r| sc.base.sensing_area.contains(r.angle_deg.to_radians()))
        .map(|r| r.sum)
        .sum();
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}
