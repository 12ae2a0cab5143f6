//! Uniform affine quantizers.
//!
//! Weights use symmetric per-output-channel quantization with learnable
//! AdaRound rounding variables; activations use per-tensor asymmetric
//! quantization with a learnable scale (straight-through for the rounding,
//! learned-step gradient for the scale). A bit-width of 32 is a pass-through.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Rectified-sigmoid stretch parameters.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// Smallest scale handed out by calibration.
pub const SCALE_FLOOR: f64 = 1e-8;

const GRID_POINTS: usize = 100;
const GRID_LO: f64 = 0.5;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `h(v) = clamp(sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0, 1)`.
pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

pub fn rectified_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let raw = s * (ZETA - GAMMA) + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) * (ZETA - GAMMA)
    }
}

/// Logit `v` with `h(v) = target` for `target` in `[0, 1)`.
fn rectified_sigmoid_inverse(target: f64) -> f64 {
    let s = ((target - GAMMA) / (ZETA - GAMMA)).clamp(1e-12, 1.0 - 1e-12);
    (s / (1.0 - s)).ln()
}

/// Fake-quantizes one activation value: `s * (clamp(round(x/s) + zp, 0, qmax) - zp)`.
/// Same result as `f64::round`, computed through an integer conversion
/// (the libm call is slow on baseline x86-64).
#[inline]
pub(crate) fn round(x: f64) -> f64 {
    if x.abs() < 4.0e15 {
        let t = x as i64 as f64;
        let f = x - t;
        if f >= 0.5 {
            t + 1.0
        } else if f <= -0.5 {
            t - 1.0
        } else {
            t
        }
    } else {
        x
    }
}

/// Same result as `f64::floor`.
#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    if x.abs() < 4.0e15 {
        let t = x as i64 as f64;
        if x < t {
            t - 1.0
        } else {
            t
        }
    } else {
        x
    }
}

pub fn act_quant_scalar(x: f64, scale: f64, zero_point: f64, qmax: f64) -> f64 {
    scale * ((round(x / scale) + zero_point).clamp(0.0, qmax) - zero_point)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    WeightSymmetricPerChannel,
    ActivationAffinePerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
    /// Output-channel axis of a 2-D `[in, out]` weight.
    #[serde(default = "default_channel_axis")]
    pub channel_axis: usize,
}

fn default_channel_axis() -> usize {
    1
}

impl QuantSpec {
    pub fn weight(bits: u32) -> Self {
        Self {
            bits,
            mode: QuantMode::WeightSymmetricPerChannel,
            channel_axis: 1,
        }
    }

    pub fn activation(bits: u32) -> Self {
        Self {
            bits,
            mode: QuantMode::ActivationAffinePerTensor,
            channel_axis: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) && self.bits != 32 {
            return Err(Error::invalid(format!(
                "bit-width {} not in 2..=8 or 32",
                self.bits
            )));
        }
        if self.channel_axis > 1 {
            return Err(Error::invalid("channel_axis must be 0 or 1"));
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 32
    }

    /// Integer range `(qmin, qmax)`.
    pub fn int_range(&self) -> (f64, f64) {
        match self.mode {
            QuantMode::WeightSymmetricPerChannel => {
                let q = ((1u64 << (self.bits - 1)) - 1) as f64;
                (-q, q)
            }
            QuantMode::ActivationAffinePerTensor => (0.0, ((1u64 << self.bits) - 1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuantState {
    pub scales: Vec<f64>,
    /// AdaRound logits, same shape as the weight.
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantState {
    pub scale: f64,
    pub zero_point: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMethod {
    /// Full range, clipping ratio 1.
    MinMax,
    /// Best of 100 clipping ratios in `[0.5, 1]` by quantization MSE.
    #[default]
    MseGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationReport {
    /// Chosen clipping ratio per channel (one entry for activations).
    pub clip_ratios: Vec<f64>,
    /// Channels (or the tensor) whose samples were all zero and got
    /// [`SCALE_FLOOR`].
    pub degenerate: usize,
}

fn grid() -> impl Iterator<Item = f64> {
    // descending, so ties keep the wider range
    (0..GRID_POINTS)
        .rev()
        .map(|i| GRID_LO + (1.0 - GRID_LO) * i as f64 / (GRID_POINTS - 1) as f64)
}

fn channel_of(spec: &QuantSpec, shape: &[usize], i: usize) -> usize {
    let cols = *shape.last().unwrap();
    if shape.len() == 2 && spec.channel_axis == 0 {
        i / cols
    } else {
        i % cols
    }
}

fn channel_count(spec: &QuantSpec, shape: &[usize]) -> usize {
    if shape.len() == 2 && spec.channel_axis == 0 {
        shape[0]
    } else {
        *shape.last().unwrap()
    }
}

fn channel_values(spec: &QuantSpec, w: &Tensor) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); channel_count(spec, w.shape())];
    for (i, &x) in w.data().iter().enumerate() {
        out[channel_of(spec, w.shape(), i)].push(x);
    }
    out
}

fn rtn_sym_mse(values: &[f64], scale: f64, qmax: f64) -> f64 {
    values
        .iter()
        .map(|&x| {
            let q = scale * round(x / scale).clamp(-qmax, qmax);
            (x - q) * (x - q)
        })
        .sum()
}

/// Per-channel symmetric weight calibration. AdaRound logits start so that
/// `h(v)` equals the fractional part of `w / s`, i.e. round-down plus the
/// fractional remainder; the hardened result is round-to-nearest.
pub fn calibrate_weight(
    spec: &QuantSpec,
    w: &Tensor,
    method: CalibMethod,
) -> Result<(WeightQuantState, CalibrationReport)> {
    spec.validate()?;
    if spec.mode != QuantMode::WeightSymmetricPerChannel {
        return Err(Error::invalid("calibrate_weight needs a weight spec"));
    }
    if w.is_empty() || !w.is_finite() {
        return Err(Error::NonFinite("weight calibration samples".into()));
    }
    let mut report = CalibrationReport::default();
    if spec.is_passthrough() {
        let c = channel_count(spec, w.shape());
        return Ok((
            WeightQuantState {
                scales: vec![1.0; c],
                v: Tensor::zeros(w.shape()),
            },
            report,
        ));
    }
    let (_, qmax) = spec.int_range();
    let mut scales = Vec::new();
    for vals in channel_values(spec, w) {
        let max_abs = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_abs == 0.0 {
            report.degenerate += 1;
            report.clip_ratios.push(1.0);
            scales.push(SCALE_FLOOR);
            continue;
        }
        let (ratio, scale) = match method {
            CalibMethod::MinMax => (1.0, max_abs / qmax),
            CalibMethod::MseGrid => {
                let mut best = (1.0, max_abs / qmax, f64::INFINITY);
                for r in grid() {
                    let s = (r * max_abs / qmax).max(SCALE_FLOOR);
                    let err = rtn_sym_mse(&vals, s, qmax);
                    if err < best.2 {
                        best = (r, s, err);
                    }
                }
                (best.0, best.1)
            }
        };
        report.clip_ratios.push(ratio);
        scales.push(scale.max(SCALE_FLOOR));
    }
    let mut v = Tensor::zeros(w.shape());
    for (i, (&x, vi)) in w.data().iter().zip(v.data_mut()).enumerate() {
        let s = scales[channel_of(spec, w.shape(), i)];
        let r = x / s;
        *vi = rectified_sigmoid_inverse(r - floor(r));
    }
    Ok((WeightQuantState { scales, v }, report))
}

fn affine_params(lo: f64, hi: f64, qmax: f64) -> ActQuantState {
    let scale = ((hi - lo) / qmax).max(SCALE_FLOOR);
    let zero_point = (-lo / scale).round().clamp(0.0, qmax) as i64;
    ActQuantState { scale, zero_point }
}

/// Per-tensor asymmetric activation calibration over the observed range.
pub fn calibrate_activation(
    spec: &QuantSpec,
    samples: &[f64],
    method: CalibMethod,
) -> Result<(ActQuantState, CalibrationReport)> {
    spec.validate()?;
    if spec.mode != QuantMode::ActivationAffinePerTensor {
        return Err(Error::invalid("calibrate_activation needs an activation spec"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no activation samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation calibration samples".into()));
    }
    let mut report = CalibrationReport::default();
    if spec.is_passthrough() {
        report.clip_ratios.push(1.0);
        return Ok((
            ActQuantState {
                scale: 1.0,
                zero_point: 0,
            },
            report,
        ));
    }
    let (_, qmax) = spec.int_range();
    let lo = samples.iter().cloned().fold(0.0_f64, f64::min);
    let hi = samples.iter().cloned().fold(0.0_f64, f64::max);
    if hi - lo == 0.0 {
        report.degenerate = 1;
        report.clip_ratios.push(1.0);
        return Ok((
            ActQuantState {
                scale: SCALE_FLOOR,
                zero_point: 0,
            },
            report,
        ));
    }
    let (ratio, state) = match method {
        CalibMethod::MinMax => (1.0, affine_params(lo, hi, qmax)),
        CalibMethod::MseGrid => {
            let mut best = (1.0, affine_params(lo, hi, qmax), f64::INFINITY);
            for r in grid() {
                let st = affine_params(lo * r, hi * r, qmax);
                let zp = st.zero_point as f64;
                let err: f64 = samples
                    .iter()
                    .map(|&x| {
                        let d = x - act_quant_scalar(x, st.scale, zp, qmax);
                        d * d
                    })
                    .sum();
                if err < best.2 {
                    best = (r, st, err);
                }
            }
            (best.0, best.1)
        }
    };
    report.clip_ratios.push(ratio);
    Ok((state, report))
}

/// Per-element floor of `w / s` and the per-element channel scale.
pub(crate) fn weight_grid(
    w: &Tensor,
    state: &WeightQuantState,
    spec: &QuantSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.v.shape() != w.shape() {
        return Err(Error::shape(format!(
            "rounding logits {:?} vs weight {:?}",
            state.v.shape(),
            w.shape()
        )));
    }
    if state.scales.len() != channel_count(spec, w.shape()) {
        return Err(Error::shape(format!(
            "{} scales for {} channels",
            state.scales.len(),
            channel_count(spec, w.shape())
        )));
    }
    let mut floor = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(w.len());
    for (i, &x) in w.data().iter().enumerate() {
        let s = state.scales[channel_of(spec, w.shape(), i)];
        floor.push(self::floor(x / s));
        scales.push(s);
    }
    Ok((floor, scales))
}

/// `s * clamp(floor(w/s) + h(v), qmin, qmax)`; `soft = false` hardens
/// `h(v)` to `{0, 1}` at 0.5.
pub fn quantize_weight(
    w: &Tensor,
    state: &WeightQuantState,
    spec: &QuantSpec,
    soft: bool,
) -> Result<Tensor> {
    if spec.is_passthrough() {
        return Ok(w.clone());
    }
    let (floor, scales) = weight_grid(w, state, spec)?;
    let (qmin, qmax) = spec.int_range();
    let data = state
        .v
        .data()
        .iter()
        .zip(floor.iter().zip(&scales))
        .map(|(&v, (&f, &s))| {
            let h = if soft {
                rectified_sigmoid(v)
            } else if rectified_sigmoid(v) >= 0.5 {
                1.0
            } else {
                0.0
            };
            s * (f + h).clamp(qmin, qmax)
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Records the soft AdaRound weight on `tape`, differentiable w.r.t. the
/// logits leaf `v`.
pub fn quantize_weight_on_tape(
    tape: &mut Tape,
    w: &Tensor,
    state: &WeightQuantState,
    spec: &QuantSpec,
    v: TensorId,
) -> Result<TensorId> {
    let (floor, scales) = weight_grid(w, state, spec)?;
    let (qmin, qmax) = spec.int_range();
    tape.adaround(v, floor, scales, qmin, qmax)
}

pub fn quantize_activation(x: &Tensor, state: &ActQuantState, spec: &QuantSpec) -> Tensor {
    if spec.is_passthrough() {
        return x.clone();
    }
    let (_, qmax) = spec.int_range();
    let zp = state.zero_point as f64;
    x.map(|v| act_quant_scalar(v, state.scale, zp, qmax))
}

/// Records activation fake-quantization with the scale as tape input `scale`.
pub fn quantize_activation_on_tape(
    tape: &mut Tape,
    x: TensorId,
    scale: TensorId,
    state: &ActQuantState,
    spec: &QuantSpec,
) -> Result<TensorId> {
    if spec.is_passthrough() {
        return Ok(x);
    }
    let (_, qmax) = spec.int_range();
    tape.act_quant(x, scale, state.zero_point as f64, qmax)
}

/// Elementwise mask: `true` keeps the full-precision value.
pub fn qdrop_mask(len: usize, p_drop: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < p_drop).collect()
}

/// Mixes full-precision and quantized values elementwise: full precision
/// with probability `p_drop`, quantized otherwise.
pub fn qdrop_mix(x_fp: &Tensor, x_q: &Tensor, p_drop: f64, rng: &mut impl Rng) -> Result<Tensor> {
    x_fp.expect_same_shape(x_q, "qdrop_mix")?;
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("p_drop {p_drop} not in [0, 1]")));
    }
    let mask = qdrop_mask(x_fp.len(), p_drop, rng);
    let data = mask
        .iter()
        .zip(x_fp.data().iter().zip(x_q.data()))
        .map(|(&m, (&a, &b))| if m { a } else { b })
        .collect();
    Tensor::new(x_fp.shape().to_vec(), data)
}

/// Rounding regularizer `sum(1 - |2h(v) - 1|^beta)` and its gradient in `v`.
pub fn rounding_regularizer(v: &Tensor, beta: f64) -> (f64, Tensor) {
    let mut total = 0.0;
    let mut grad = Tensor::zeros(v.shape());
    for (&vi, g) in v.data().iter().zip(grad.data_mut()) {
        let d = 2.0 * rectified_sigmoid(vi) - 1.0;
        total += 1.0 - d.abs().powf(beta);
        if d != 0.0 {
            *g = -beta * d.abs().powf(beta - 1.0) * d.signum() * 2.0 * rectified_sigmoid_grad(vi);
        }
    }
    (total, grad)
}

/// Annealing schedule for the rounding regularizer's exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    /// Fraction of iterations with the regularizer switched off.
    pub warmup: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 20.0,
            end: 2.0,
            warmup: 0.2,
        }
    }
}

impl BetaSchedule {
    /// `None` during warm-up, otherwise the cosine-annealed exponent.
    pub fn beta(&self, iter: usize, max_iter: usize) -> Option<f64> {
        let warm = (self.warmup * max_iter as f64) as usize;
        if iter < warm {
            return None;
        }
        let span = (max_iter - warm).max(1) as f64;
        let t = ((iter - warm) as f64 / span).min(1.0);
        Some(self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
