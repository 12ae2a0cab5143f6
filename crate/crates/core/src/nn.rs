//! Pre-norm transformer block (LN → attention → residual, LN → MLP →
//! residual) and the KL-divergence head.

use crate::autodiff::{log_softmax_row, Tape, TensorId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub layer: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::invalid(format!("degenerate block spec {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::invalid(format!("bad mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Flattened block-output length `T * D`.
    pub fn output_len(&self) -> usize {
        self.tokens * self.embed_dim
    }
}

/// The four weight matrices of a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Linear {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl Linear {
    pub const ALL: [Linear; 4] = [Linear::Qkv, Linear::Proj, Linear::Fc1, Linear::Fc2];
}

/// Points inside a block where activations are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActSite {
    QkvIn,
    Query,
    Key,
    Value,
    AttnProbs,
    ProjIn,
    Fc1In,
    Fc2In,
}

impl ActSite {
    pub const ALL: [ActSite; 8] = [
        ActSite::QkvIn,
        ActSite::Query,
        ActSite::Key,
        ActSite::Value,
        ActSite::AttnProbs,
        ActSite::ProjIn,
        ActSite::Fc1In,
        ActSite::Fc2In,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Intercepts activations at each [`ActSite`].
pub trait ActHook {
    fn apply(&mut self, tape: &mut Tape, site: ActSite, x: TensorId) -> Result<TensorId>;
}

/// Leaves every activation untouched.
pub struct FullPrecision;

impl ActHook for FullPrecision {
    fn apply(&mut self, _: &mut Tape, _: ActSite, x: TensorId) -> Result<TensorId> {
        Ok(x)
    }
}

/// Weights are stored `[in, out]`; a layer computes `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

pub(crate) const BLOCK_PARAM_NAMES: [&str; 12] = [
    "ln1_gain", "ln1_bias", "qkv_w", "qkv_b", "proj_w", "proj_b", "ln2_gain", "ln2_bias",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

impl BlockParams {
    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        let (d, h) = (spec.embed_dim, spec.hidden_dim());
        let w = |rows: usize, cols: usize, rng: &mut _| {
            Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
        };
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            qkv_w: w(d, 3 * d, rng),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: w(d, d, rng),
            proj_b: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1_w: w(d, h, rng),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: w(h, d, rng),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn weight(&self, layer: Linear) -> &Tensor {
        match layer {
            Linear::Qkv => &self.qkv_w,
            Linear::Proj => &self.proj_w,
            Linear::Fc1 => &self.fc1_w,
            Linear::Fc2 => &self.fc2_w,
        }
    }

    pub fn check(&self, spec: &BlockSpec) -> Result<()> {
        let (d, h) = (spec.embed_dim, spec.hidden_dim());
        let expect: [&[usize]; 12] = [
            &[d],
            &[d],
            &[d, 3 * d],
            &[3 * d],
            &[d, d],
            &[d],
            &[d],
            &[d],
            &[d, h],
            &[h],
            &[h, d],
            &[d],
        ];
        for ((t, e), name) in self.tensors().iter().zip(expect).zip(BLOCK_PARAM_NAMES) {
            if t.shape() != e {
                return Err(Error::shape(format!(
                    "block {} parameter {name}: expected {e:?}, got {:?}",
                    spec.layer,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BlockVars {
            ln1_gain: put(&self.ln1_gain),
            ln1_bias: put(&self.ln1_bias),
            qkv_w: put(&self.qkv_w),
            qkv_b: put(&self.qkv_b),
            proj_w: put(&self.proj_w),
            proj_b: put(&self.proj_b),
            ln2_gain: put(&self.ln2_gain),
            ln2_bias: put(&self.ln2_bias),
            fc1_w: put(&self.fc1_w),
            fc1_b: put(&self.fc1_b),
            fc2_w: put(&self.fc2_w),
            fc2_b: put(&self.fc2_b),
        }
    }
}

/// Tape handles for a block's parameters. Weight handles may point at
/// quantized weights derived from other leaves.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub qkv_w: TensorId,
    pub qkv_b: TensorId,
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub fc1_w: TensorId,
    pub fc1_b: TensorId,
    pub fc2_w: TensorId,
    pub fc2_b: TensorId,
}

impl BlockVars {
    pub fn ids(&self) -> [TensorId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.ln2_gain,
            self.ln2_bias,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }

    pub fn weight_mut(&mut self, layer: Linear) -> &mut TensorId {
        match layer {
            Linear::Qkv => &mut self.qkv_w,
            Linear::Proj => &mut self.proj_w,
            Linear::Fc1 => &mut self.fc1_w,
            Linear::Fc2 => &mut self.fc2_w,
        }
    }
}

fn linear(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// Full-precision block forward with freshly registered trainable weights.
pub fn forward_block(
    spec: &BlockSpec,
    params: &BlockParams,
    input: TensorId,
    tape: &mut Tape,
) -> Result<(TensorId, BlockVars)> {
    params.check(spec)?;
    let vars = params.register(tape, true);
    let out = forward_block_with(spec, &vars, input, tape, &mut FullPrecision)?;
    Ok((out, vars))
}

/// Block forward over `input` of shape `[N, T, D]` (or `[T, D]`), with
/// activations routed through `acts`.
pub fn forward_block_with(
    spec: &BlockSpec,
    vars: &BlockVars,
    input: TensorId,
    tape: &mut Tape,
    acts: &mut dyn ActHook,
) -> Result<TensorId> {
    spec.validate()?;
    let (t, d, heads, dh) = (spec.tokens, spec.embed_dim, spec.heads, spec.head_dim());
    let in_shape = tape.shape(input).to_vec();
    let n = match in_shape.as_slice() {
        [tt, dd] if *tt == t && *dd == d => 1,
        [nn, tt, dd] if *tt == t && *dd == d => *nn,
        _ => {
            return Err(Error::shape(format!(
                "block {} input: expected [N, {t}, {d}], got {in_shape:?}",
                spec.layer
            )))
        }
    };
    let x = tape.reshape(input, &[n, t, d])?;

    // attention
    let h = tape.layer_norm(x, vars.ln1_gain, vars.ln1_bias, LAYER_NORM_EPS)?;
    let h = acts.apply(tape, ActSite::QkvIn, h)?;
    let qkv = linear(tape, h, vars.qkv_w, vars.qkv_b)?;
    let split = |part: usize| -> Vec<usize> {
        let mut map = Vec::with_capacity(n * t * d);
        for s in 0..n {
            for hh in 0..heads {
                for tok in 0..t {
                    for e in 0..dh {
                        map.push((s * t + tok) * 3 * d + part * d + hh * dh + e);
                    }
                }
            }
        }
        map
    };
    let head_shape = [n * heads, t, dh];
    let q = tape.gather(qkv, split(0), &head_shape)?;
    let k = tape.gather(qkv, split(1), &head_shape)?;
    let v = tape.gather(qkv, split(2), &head_shape)?;
    let q = acts.apply(tape, ActSite::Query, q)?;
    let k = acts.apply(tape, ActSite::Key, k)?;
    let v = acts.apply(tape, ActSite::Value, v)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scores);
    let probs = acts.apply(tape, ActSite::AttnProbs, probs)?;
    let o = tape.bmm(probs, v, false)?;
    let mut merge = Vec::with_capacity(n * t * d);
    for s in 0..n {
        for tok in 0..t {
            for hh in 0..heads {
                for e in 0..dh {
                    merge.push(((s * heads + hh) * t + tok) * dh + e);
                }
            }
        }
    }
    let o = tape.gather(o, merge, &[n, t, d])?;
    let o = acts.apply(tape, ActSite::ProjIn, o)?;
    let a = linear(tape, o, vars.proj_w, vars.proj_b)?;
    let x1 = tape.add(x, a)?;

    // mlp
    let h2 = tape.layer_norm(x1, vars.ln2_gain, vars.ln2_bias, LAYER_NORM_EPS)?;
    let h2 = acts.apply(tape, ActSite::Fc1In, h2)?;
    let f = linear(tape, h2, vars.fc1_w, vars.fc1_b)?;
    let f = tape.gelu(f);
    let f = acts.apply(tape, ActSite::Fc2In, f)?;
    let f = linear(tape, f, vars.fc2_w, vars.fc2_b)?;
    let out = tape.add(x1, f)?;
    tape.reshape(out, &in_shape)
}

/// `KL(softmax(p) || softmax(q))`, evaluated in log space.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::shape(format!(
            "kl_divergence: {} vs {} logits",
            p_logits.len(),
            q_logits.len()
        )));
    }
    if p_logits.len() < 2 {
        return Err(Error::invalid("kl_divergence needs at least 2 classes"));
    }
    if p_logits.iter().chain(q_logits).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kl_divergence logits".into()));
    }
    let c = p_logits.len();
    let (mut lp, mut lq) = (vec![0.0; c], vec![0.0; c]);
    log_softmax_row(p_logits, &mut lp);
    log_softmax_row(q_logits, &mut lq);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum();
    Ok(kl.max(0.0))
}

/// Softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    crate::autodiff::softmax_row(logits, &mut out);
    out
}
