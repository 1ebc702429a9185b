//! Dense ELU networks with hand-written reverse mode and Adam.
//!
//! A network maps a batch (one sample per row) to raw linear outputs; the
//! output heads are separate functions so that losses can work on logits
//! and power normalizations can see the whole batch.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{RngStream, C64};

/// How the raw outputs of a network are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// `σ(s + τ)` with a calibrated offset `τ`.
    SigmoidOffset,
    /// `(π/2)·tanh(s)`.
    ScaledTanh,
    /// Output pairs read as complex weights scaled to unit vector norm.
    UnitNormVector,
    /// Output pairs over the whole batch scaled to unit mean power.
    UnitPowerAlphabet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl LayerSizes {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        LayerSizes {
            input,
            hidden: hidden.to_vec(),
            output,
        }
    }

    fn chain(&self) -> Vec<usize> {
        let mut v = vec![self.input];
        v.extend(&self.hidden);
        v.push(self.output);
        v
    }
}

pub fn beamformer_sizes(antennas: usize) -> LayerSizes {
    let k = antennas;
    LayerSizes::new(4, &[k, k, 2 * k], 2 * k)
}

pub fn demapper_sizes(order: usize) -> LayerSizes {
    let bits = order.trailing_zeros() as usize;
    LayerSizes::new(3, &[10 * order; 4], bits)
}

pub fn sensing_input_len(antennas: usize) -> usize {
    2 * antennas * antennas + 2
}

pub fn angle_sizes(antennas: usize) -> LayerSizes {
    let k = antennas;
    LayerSizes::new(sensing_input_len(k), &[8 * k, 4 * k, 4 * k, k], 1)
}

pub fn detector_sizes(antennas: usize) -> LayerSizes {
    let k = antennas;
    LayerSizes::new(sensing_input_len(k), &[2 * k, 2 * k, k], 1)
}

pub fn modulator_sizes(order: usize) -> LayerSizes {
    LayerSizes::new(order, &[8 * order; 3], 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: HeadKind,
    /// Bumped on every parameter update; tapes from older generations are rejected.
    #[serde(skip)]
    generation: u64,
}

/// Parameters and head only; the generation counter is bookkeeping.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head && self.layers == other.layers
    }
}

/// Forward intermediates of one batch.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Hidden-layer pre-activations.
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Fan-in scaled uniform initialization; biases start at zero.
pub fn mlp_init(sizes: &LayerSizes, head: HeadKind, rng: &mut RngStream) -> Result<Mlp> {
    if sizes.hidden.is_empty() {
        return invalid("network needs at least one hidden layer");
    }
    let chain = sizes.chain();
    if chain.iter().any(|&n| n == 0) {
        return invalid("layer widths must be >= 1");
    }
    let n_layers = chain.len() - 1;
    let layers = chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            // ELU hidden layers get the rectifier gain; the output layer stays variance-preserving
            let gain = if i + 1 < n_layers { 6.0 } else { 3.0 };
            let limit = (gain / fan_in as f64).sqrt();
            let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_in(-limit, limit));
            Dense {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(Mlp {
        layers,
        head,
        generation: 0,
    })
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>, head: HeadKind) -> Result<Mlp> {
        if layers.len() < 2 {
            return invalid("network needs at least one hidden layer");
        }
        for w in layers.windows(2) {
            if w[0].weights.ncols() != w[1].weights.nrows() {
                return invalid("layer dimensions do not chain");
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.ncols() {
                return invalid("bias length does not match layer width");
            }
            if l.weights.iter().chain(l.bias.iter()).any(|x| !x.is_finite()) {
                return invalid("parameters must be finite");
            }
        }
        Ok(Mlp {
            layers,
            head,
            generation: 0,
        })
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> LayerSizes {
        let input = self.layers[0].weights.nrows();
        let hidden = self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.ncols()).collect();
        let output = self.layers.last().unwrap().weights.ncols();
        LayerSizes { input, hidden, output }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters flattened (weights row-major, then bias, layer by layer).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ContractViolation(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Raw outputs of the final linear layer plus the tape for [`Mlp::backward`].
    pub fn forward(&self, batch: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        if batch.ncols() != self.input_len() {
            return invalid(format!(
                "batch width {} does not match network input {}",
                batch.ncols(),
                self.input_len()
            ));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = batch.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weights) + &l.bias;
            inputs.push(h);
            if i == last {
                return Ok((
                    z,
                    Tape {
                        generation: self.generation,
                        inputs,
                        pre,
                    },
                ));
            }
            h = z.mapv(elu);
            pre.push(z);
        }
        unreachable!()
    }

    /// Forward without keeping intermediates.
    pub fn infer(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.input_len() {
            return invalid(format!(
                "batch width {} does not match network input {}",
                batch.ncols(),
                self.input_len()
            ));
        }
        let mut h = batch.dot(&self.layers[0].weights) + &self.layers[0].bias;
        for l in &self.layers[1..] {
            h.mapv_inplace(elu);
            h = h.dot(&l.weights) + &l.bias;
        }
        Ok(h)
    }

    /// Parameter gradients and the gradient with respect to the batch.
    pub fn backward(&self, tape: &Tape, output_grads: &Array2<f64>) -> Result<(Grads, Array2<f64>)> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::ContractViolation("tape does not belong to the current parameters".into()));
        }
        let n = tape.inputs[0].nrows();
        if output_grads.dim() != (n, self.output_len()) {
            return Err(Error::ContractViolation(format!(
                "output gradient shape {:?} does not match ({n}, {})",
                output_grads.dim(),
                self.output_len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut dz = output_grads.clone();
        for i in (0..self.layers.len()).rev() {
            let h = &tape.inputs[i];
            let dw = h.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let dh = dz.dot(&self.layers[i].weights.t());
            layers.push((dw, db));
            if i == 0 {
                layers.reverse();
                return Ok((Grads { layers }, dh));
            }
            let z = &tape.pre[i - 1];
            dz = dh;
            dz.zip_mut_with(z, |g, &zv| *g *= elu_slope(zv));
        }
        unreachable!()
    }
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Grads {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Grads,
    second: Grads,
    step: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: Grads::zeros_like(net),
            second: Grads::zeros_like(net),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(net: &mut Mlp, grads: &Grads, state: &mut AdamState) -> Result<()> {
    let shapes_match = grads.layers.len() == net.layers.len()
        && state.first.layers.len() == net.layers.len()
        && net.layers.iter().zip(&grads.layers).zip(&state.first.layers).all(|((l, g), m)| {
            l.weights.dim() == g.0.dim() && l.bias.len() == g.1.len() && m.0.dim() == g.0.dim()
        });
    if !shapes_match {
        return Err(Error::ContractViolation("gradient shapes do not match the network".into()));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= learning_rate * mh / (vh.sqrt() + epsilon);
    };
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[i];
        let (mw, mb) = &mut state.first.layers[i];
        let (vw, vb) = &mut state.second.layers[i];
        for (((p, g), m), v) in layer.weights.iter_mut().zip(gw.iter()).zip(mw.iter_mut()).zip(vw.iter_mut()) {
            update(p, *g, m, v);
        }
        for (((p, g), m), v) in layer.bias.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut()) {
            update(p, *g, m, v);
        }
    }
    net.generation += 1;
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(score + offset)`.
pub fn sigmoid_offset(score: f64, offset: f64) -> f64 {
    sigmoid(score + offset)
}

pub fn scaled_tanh(x: f64) -> f64 {
    FRAC_PI_2 * x.tanh()
}

pub fn scaled_tanh_slope(x: f64) -> f64 {
    let t = x.tanh();
    FRAC_PI_2 * (1.0 - t * t)
}

/// Reads `2K` raw outputs as `K` complex weights and scales them to unit norm.
///
/// Returns the weights and the raw norm needed by [`unit_norm_backward`]. An
/// all-zero output falls back to the uniform vector.
pub fn unit_norm_vector(raw: &[f64]) -> (Vec<C64>, f64) {
    let u: Vec<C64> = raw.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
    let nrm = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if nrm < 1e-300 {
        let k = u.len() as f64;
        return (vec![C64::new(1.0 / k.sqrt(), 0.0); u.len()], 0.0);
    }
    (u.iter().map(|z| z / nrm).collect(), nrm)
}

/// Gradient on the raw outputs given `∂L/∂Re v + j ∂L/∂Im v` per weight.
pub fn unit_norm_backward(v: &[C64], raw_norm: f64, grad: &[C64]) -> Vec<f64> {
    if raw_norm == 0.0 {
        return vec![0.0; 2 * v.len()];
    }
    let proj: f64 = v.iter().zip(grad).map(|(a, g)| (a.conj() * g).re).sum();
    v.iter()
        .zip(grad)
        .flat_map(|(a, g)| {
            let d = (g - a * proj) / raw_norm;
            [d.re, d.im]
        })
        .collect()
}

/// Scales an alphabet (one `(re, im)` row per symbol) to unit mean power.
pub fn unit_power_alphabet(raw: &Array2<f64>) -> (Vec<C64>, f64) {
    let pts: Vec<C64> = raw.rows().into_iter().map(|r| C64::new(r[0], r[1])).collect();
    let scale = (pts.iter().map(|z| z.norm_sqr()).sum::<f64>() / pts.len() as f64).sqrt();
    if scale < 1e-300 {
        return (pts, 0.0);
    }
    (pts.iter().map(|z| z / scale).collect(), scale)
}

pub fn unit_power_backward(points: &[C64], scale: f64, grad: &[C64]) -> Array2<f64> {
    let m = points.len();
    if scale == 0.0 {
        return Array2::zeros((m, 2));
    }
    let proj: f64 = points.iter().zip(grad).map(|(a, g)| (a.conj() * g).re).sum::<f64>() / m as f64;
    Array2::from_shape_fn((m, 2), |(i, j)| {
        let d = (grad[i] - points[i] * proj) / scale;
        if j == 0 {
            d.re
        } else {
            d.im
        }
    })
}

/// Forward pass of a modulator over all `M` one-hot inputs.
pub struct AlphabetPass {
    pub points: Vec<C64>,
    pub scale: f64,
    pub tape: Tape,
}

pub fn modulator_head(net: &Mlp) -> Result<AlphabetPass> {
    let m = net.input_len();
    let eye = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let (raw, tape) = net.forward(&eye)?;
    let (points, scale) = unit_power_alphabet(&raw);
    Ok(AlphabetPass { points, scale, tape })
}

pub fn modulator_backward(net: &Mlp, pass: &AlphabetPass, grad: &[C64]) -> Result<Grads> {
    let g = unit_power_backward(&pass.points, pass.scale, grad);
    Ok(net.backward(&pass.tape, &g)?.0)
}

/// Beamformer output for the four area bounds `(comm_min, comm_max, sens_min, sens_max)`.
pub struct PrecoderPass {
    pub weights: Vec<C64>,
    pub raw_norm: f64,
    pub tape: Tape,
}

pub fn beamformer_head(net: &Mlp, areas: &[f64]) -> Result<PrecoderPass> {
    let input = Array2::from_shape_vec((1, areas.len()), areas.to_vec())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (raw, tape) = net.forward(&input)?;
    let (weights, raw_norm) = unit_norm_vector(raw.row(0).as_slice().unwrap());
    Ok(PrecoderPass {
        weights,
        raw_norm,
        tape,
    })
}

pub fn beamformer_backward(net: &Mlp, pass: &PrecoderPass, grad: &[C64]) -> Result<Grads> {
    let g = unit_norm_backward(&pass.weights, pass.raw_norm, grad);
    let g = Array2::from_shape_vec((1, g.len()), g).unwrap();
    Ok(net.backward(&pass.tape, &g)?.0)
}
