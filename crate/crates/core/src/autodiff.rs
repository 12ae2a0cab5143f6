//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the [`Tape`]; nodes are therefore
//! stored in topological order and [`Tape::backward`] walks them in exact
//! reverse. A tape supports a single backward pass.

use crate::error::{Error, Result};
use crate::quant::{act_quant_scalar, rectified_sigmoid, rectified_sigmoid_grad};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(TensorId, TensorId),
    Bmm {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(TensorId),
    Softmax(TensorId),
    Gather {
        x: TensorId,
        map: Vec<usize>,
    },
    Concat(Vec<TensorId>),
    Reshape(TensorId),
    SumAll(TensorId),
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlRows {
        p: TensorId,
        q: TensorId,
        p_prob: Vec<f64>,
        q_prob: Vec<f64>,
        log_ratio: Vec<f64>,
    },
    Select {
        mask: Vec<bool>,
        on_true: TensorId,
        on_false: TensorId,
    },
    AdaRound {
        v: TensorId,
        floor: Vec<f64>,
        scales: Vec<f64>,
        qmin: f64,
        qmax: f64,
    },
    ActQuant {
        x: TensorId,
        scale: TensorId,
        zero_point: f64,
        qmax: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<TensorId>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros for constants and for tensors
    /// that do not influence the differentiated output.
    pub fn wrt(&self, id: TensorId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Nodes whose backward rule ran, in visiting order.
    pub fn visited(&self) -> &[TensorId] {
        &self.visited
    }
}

fn check_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(format!(
            "{what}: expected {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[TensorId]) -> TensorId {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, &[])
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Constant, &[])
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul `[g,m,k] x [g,k,n]`, or `[g,m,k] x [g,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(Error::shape(format!(
                "bmm inner dims: {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm(ab, bb, ob, m, k, n);
            }
        }
        let out = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_broadcast: {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            for (o, &x) in chunk.iter_mut().zip(&bv) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let d = self.value(x).last_dim();
        check_shape(self.value(gain), &[d], "layer_norm gain")?;
        check_shape(self.value(bias), &[d], "layer_norm bias")?;
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = Tensor::zeros(xv.shape());
        for (src, dst) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            softmax_row(src, dst);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `out[i] = x[map[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: TensorId, map: Vec<usize>, shape: &[usize]) -> Result<TensorId> {
        let xv = self.value(x).data();
        if let Some(&bad) = map.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range ({})",
                xv.len()
            )));
        }
        let out = Tensor::new(shape.to_vec(), map.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(out, Op::Gather { x, map }, &[x]))
    }

    /// Flat concatenation of the parts' data, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[TensorId], shape: &[usize]) -> Result<TensorId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rows() != labels.len() || labels.iter().any(|&y| y >= c) {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut logp = vec![0.0; c];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            log_softmax_row(lv.row(r), &mut logp);
            loss -= logp[y];
            softmax_row(lv.row(r), &mut probs[r * c..(r + 1) * c]);
        }
        let n = labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row-wise `KL(softmax(p) || softmax(q))`, one value per row.
    pub fn kl_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let (pv, qv) = (self.value(p), self.value(q));
        pv.expect_same_shape(qv, "kl_rows")?;
        let c = pv.last_dim();
        if c < 2 {
            return Err(Error::invalid("kl_rows needs at least 2 classes"));
        }
        let rows = pv.rows();
        let mut p_prob = vec![0.0; pv.len()];
        let mut q_prob = vec![0.0; pv.len()];
        let mut log_ratio = vec![0.0; pv.len()];
        let (mut lp, mut lq) = (vec![0.0; c], vec![0.0; c]);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            log_softmax_row(pv.row(r), &mut lp);
            log_softmax_row(qv.row(r), &mut lq);
            let mut kl = 0.0;
            for j in 0..c {
                let i = r * c + j;
                p_prob[i] = lp[j].exp();
                q_prob[i] = lq[j].exp();
                log_ratio[i] = lp[j] - lq[j];
                kl += p_prob[i] * log_ratio[i];
            }
            out[r] = kl.max(0.0);
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::KlRows {
                p,
                q,
                p_prob,
                q_prob,
                log_ratio,
            },
            &[p, q],
        ))
    }

    /// Elementwise `mask ? on_true : on_false`.
    pub fn select(
        &mut self,
        mask: Vec<bool>,
        on_true: TensorId,
        on_false: TensorId,
    ) -> Result<TensorId> {
        let (a, b) = (self.value(on_true), self.value(on_false));
        a.expect_same_shape(b, "select")?;
        if mask.len() != a.len() {
            return Err(Error::shape("select: mask length differs from operands"));
        }
        let data = mask
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Select {
                mask,
                on_true,
                on_false,
            },
            &[on_true, on_false],
        ))
    }

    /// Soft AdaRound weight `s * clamp(floor + h(v), qmin, qmax)`; `scales`
    /// holds the per-element channel scale.
    pub(crate) fn adaround(
        &mut self,
        v: TensorId,
        floor: Vec<f64>,
        scales: Vec<f64>,
        qmin: f64,
        qmax: f64,
    ) -> Result<TensorId> {
        let vv = self.value(v);
        if floor.len() != vv.len() || scales.len() != vv.len() {
            return Err(Error::shape("adaround: floor/scale length mismatch"));
        }
        let data = vv
            .data()
            .iter()
            .zip(floor.iter().zip(&scales))
            .map(|(&vi, (&f, &s))| s * (f + rectified_sigmoid(vi)).clamp(qmin, qmax))
            .collect();
        let out = Tensor::new(vv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::AdaRound {
                v,
                floor,
                scales,
                qmin,
                qmax,
            },
            &[v],
        ))
    }

    /// Fake-quantized activation with a learnable scalar scale.
    pub(crate) fn act_quant(
        &mut self,
        x: TensorId,
        scale: TensorId,
        zero_point: f64,
        qmax: f64,
    ) -> Result<TensorId> {
        check_shape(self.value(scale), &[1], "act_quant scale")?;
        let s = self.value(scale).data()[0];
        let out = self
            .value(x)
            .map(|v| act_quant_scalar(v, s, zero_point, qmax));
        Ok(self.push(
            out,
            Op::ActQuant {
                x,
                scale,
                zero_point,
                qmax,
            },
            &[x, scale],
        ))
    }

    /// Reverse pass from `output` seeded with `output_grad`.
    pub fn backward(&mut self, output: TensorId, output_grad: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        check_shape(output_grad, self.shape(output), "backward output_grad")?;
        self.consumed = true;

        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(output_grad.clone());
        let mut visited = Vec::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            visited.push(TensorId(i));
            self.backward_node(i, &g, &mut grads)?;
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // drop intermediate gradients, keep leaves
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |id: TensorId| self.nodes[id.0].needs_grad;
        let acc = |id: TensorId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, nn) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, nn, k);
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * nn];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, nn);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let nn = g.shape()[2];
                if needs(*a) {
                    let mut da = vec![0.0; gs * m * k];
                    for t in 0..gs {
                        let gb = &g.data()[t * m * nn..(t + 1) * m * nn];
                        let bb = &bv.data()[t * k * nn..(t + 1) * k * nn];
                        let ob = &mut da[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B [n,k]: dA = dC B
                            gemm(gb, bb, ob, m, nn, k);
                        } else {
                            // dA = dC B^T, B [k,n]
                            gemm_nt(gb, bb, ob, m, nn, k);
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if needs(*b) {
                    let mut db = vec![0.0; gs * k * nn];
                    for t in 0..gs {
                        let gb = &g.data()[t * m * nn..(t + 1) * m * nn];
                        let ab = &av.data()[t * m * k..(t + 1) * m * k];
                        let ob = &mut db[t * k * nn..(t + 1) * k * nn];
                        if *trans_b {
                            // dB = dC^T A  -> [n,k]
                            gemm_tn(gb, ab, ob, nn, m, k);
                        } else {
                            // dB = A^T dC -> [k,n]
                            gemm_tn(ab, gb, ob, k, m, nn);
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if needs(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if needs(*b) {
                    acc(*b, g.scale(-1.0), grads);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?, grads);
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?, grads);
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if needs(*b) {
                    let bv = self.value(*b);
                    let mut db = vec![0.0; bv.len()];
                    for chunk in g.data().chunks(bv.len()) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(*a, g.scale(*c), grads);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (i, (&gi, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * h;
                    }
                    acc(*gain, Tensor::vector(dg), grads);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d];
                    for (i, &gi) in g.data().iter().enumerate() {
                        db[i % d] += gi;
                    }
                    acc(*bias, Tensor::vector(db), grads);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?, grads);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    acc(*x, g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad(xi))?, grads);
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?, grads);
                }
            }
            Op::Gather { x, map } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    for (&src, &gi) in map.iter().zip(g.data()) {
                        dx[src] += gi;
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, grads);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if needs(p) {
                        let slice = g.data()[off..off + pv.len()].to_vec();
                        acc(p, Tensor::new(pv.shape().to_vec(), slice)?, grads);
                    }
                    off += pv.len();
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    acc(*x, g.reshape(self.shape(*x))?, grads);
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    acc(*x, Tensor::full(self.shape(*x), g.data()[0]), grads);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let c = self.value(*logits).last_dim();
                    let n = labels.len() as f64;
                    let scale = g.data()[0] / n;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d[r * c + y] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    acc(
                        *logits,
                        Tensor::new(self.shape(*logits).to_vec(), d)?,
                        grads,
                    );
                }
            }
            Op::KlRows {
                p,
                q,
                p_prob,
                q_prob,
                log_ratio,
            } => {
                let c = self.value(*p).last_dim();
                let kl = node.value.data();
                if needs(*p) {
                    let mut dp = vec![0.0; p_prob.len()];
                    for (i, d) in dp.iter_mut().enumerate() {
                        let r = i / c;
                        *d = g.data()[r] * p_prob[i] * (log_ratio[i] - kl[r]);
                    }
                    acc(*p, Tensor::new(self.shape(*p).to_vec(), dp)?, grads);
                }
                if needs(*q) {
                    let mut dq = vec![0.0; q_prob.len()];
                    for (i, d) in dq.iter_mut().enumerate() {
                        *d = g.data()[i / c] * (q_prob[i] - p_prob[i]);
                    }
                    acc(*q, Tensor::new(self.shape(*q).to_vec(), dq)?, grads);
                }
            }
            Op::Select {
                mask,
                on_true,
                on_false,
            } => {
                let shape = g.shape().to_vec();
                if needs(*on_true) {
                    let d = mask
                        .iter()
                        .zip(g.data())
                        .map(|(&m, &x)| if m { x } else { 0.0 })
                        .collect();
                    acc(*on_true, Tensor::new(shape.clone(), d)?, grads);
                }
                if needs(*on_false) {
                    let d = mask
                        .iter()
                        .zip(g.data())
                        .map(|(&m, &x)| if m { 0.0 } else { x })
                        .collect();
                    acc(*on_false, Tensor::new(shape, d)?, grads);
                }
            }
            Op::AdaRound {
                v,
                floor,
                scales,
                qmin,
                qmax,
            } => {
                if needs(*v) {
                    let vv = self.value(*v);
                    let d = vv
                        .data()
                        .iter()
                        .zip(g.data())
                        .enumerate()
                        .map(|(i, (&vi, &gi))| {
                            let q = floor[i] + rectified_sigmoid(vi);
                            if q < *qmin || q > *qmax {
                                0.0
                            } else {
                                gi * scales[i] * rectified_sigmoid_grad(vi)
                            }
                        })
                        .collect();
                    acc(*v, Tensor::new(vv.shape().to_vec(), d)?, grads);
                }
            }
            Op::ActQuant {
                x,
                scale,
                zero_point,
                qmax,
            } => {
                let s = self.value(*scale).data()[0];
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                let mut ds = 0.0;
                for (i, (&xi, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
                    let r = crate::quant::round(xi / s);
                    let q = r + zero_point;
                    if q < 0.0 {
                        ds += gi * (-zero_point);
                    } else if q > *qmax {
                        ds += gi * (qmax - zero_point);
                    } else {
                        dx[i] = gi;
                        ds += gi * (r - xi / s);
                    }
                }
                if needs(*x) {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, grads);
                }
                if needs(*scale) {
                    acc(*scale, Tensor::scalar(ds), grads);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn close(analytic: &Tensor, numeric: &Tensor) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let tol = 1e-6_f64.max(1e-4 * n.abs());
            assert!((a - n).abs() <= tol, "analytic {a} vs numeric {n}");
        }
    }

    /// Checks the gradient of `sum(w ⊙ f(x))` for a fixed random `w`.
    fn check_unary(seed: u64, shape: &[usize], f: impl Fn(&mut Tape, TensorId) -> TensorId) {
        let mut r = rng(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut r);
        let mut probe = Tape::new();
        let pid = probe.constant(x0.clone());
        let out_id = f(&mut probe, pid);
        let out_shape = probe.shape(out_id).to_vec();
        let w = Tensor::randn(&out_shape, 1.0, &mut r);

        let scalar = |x: &Tensor| {
            let mut t = Tape::new();
            let id = t.constant(x.clone());
            let y = f(&mut t, id);
            t.value(y).dot(&w)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let grads = tape.backward(y, &w).unwrap();
        close(&grads.wrt(x), &central_gradient(&scalar, &x0, 1e-5).unwrap());
    }

    #[test]
    fn linear_op_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.scale(x, 2.0);
        let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn constants_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![5.0, 7.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(c).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(x).data(), &[5.0, 7.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = t.scale(x, 2.0);
        t.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            t.backward(y, &Tensor::scalar(1.0)),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn output_grad_shape_is_checked() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(x, 2.0);
        assert!(matches!(
            t.backward(y, &Tensor::scalar(1.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -0.2]));
        let a = t.gelu(x);
        let b = t.softmax(a);
        let c = t.scale(b, 3.0);
        let s = t.sum(c);
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.visited(), &[s, c, b, a]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..20 {
            check_unary(seed, &[3, 4], |t, x| t.gelu(x));
            check_unary(seed, &[3, 4], |t, x| t.softmax(x));
            check_unary(seed, &[3, 4], |t, x| t.scale(x, -1.7));
            check_unary(seed, &[2, 3, 4], |t, x| {
                let g = t.constant(Tensor::from_fn(&[4], |i| 0.5 + i as f64));
                let b = t.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
                t.layer_norm(x, g, b, 1e-5).unwrap()
            });
            check_unary(seed, &[2, 3], |t, x| {
                let w = t.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin()));
                t.matmul(x, w).unwrap()
            });
            check_unary(seed, &[3, 5], |t, w| {
                let x = t.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.71).cos()));
                t.matmul(x, w).unwrap()
            });
            check_unary(seed, &[2, 3, 4], |t, a| {
                let b = t.constant(Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.3).sin()));
                t.bmm(a, b, false).unwrap()
            });
            check_unary(seed, &[2, 4, 3], |t, b| {
                let a = t.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.3).cos()));
                t.bmm(a, b, false).unwrap()
            });
            check_unary(seed, &[2, 3, 4], |t, a| {
                let b = t.constant(Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.2).sin()));
                t.bmm(a, b, true).unwrap()
            });
            check_unary(seed, &[2, 5, 4], |t, b| {
                let a = t.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.2).cos()));
                t.bmm(a, b, true).unwrap()
            });
            check_unary(seed, &[4], |t, b| {
                let a = t.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
                t.add_broadcast(a, b).unwrap()
            });
            check_unary(seed, &[2, 3], |t, x| t.gather(x, vec![5, 0, 0, 2], &[4]).unwrap());
            check_unary(seed, &[2, 3], |t, x| {
                let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
                let y = t.mul(x, x).unwrap();
                t.concat(&[c, y], &[8]).unwrap()
            });
            check_unary(seed, &[3, 4], |t, x| t.cross_entropy(x, &[0, 3, 1]).unwrap());
            check_unary(seed, &[3, 4], |t, q| {
                let p = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
                t.kl_rows(p, q).unwrap()
            });
            check_unary(seed, &[3, 4], |t, p| {
                let q = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.5).cos()));
                t.kl_rows(p, q).unwrap()
            });
            check_unary(seed, &[2, 2], |t, a| {
                let b = t.constant(Tensor::full(&[2, 2], 9.0));
                t.select(vec![true, false, false, true], a, b).unwrap()
            });
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[5, 7], 4.0, &mut r));
        let y = t.softmax(x);
        for row in 0..5 {
            let s: f64 = t.value(y).row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut r = rng(4);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[6, 16], 3.0, &mut r));
        let g = t.constant(Tensor::full(&[16], 1.0));
        let b = t.constant(Tensor::zeros(&[16]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / 16.0;
            (mean, v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0)
        };
        for row in 0..6 {
            let (_, in_var) = stats(t.value(x).row(row));
            let (mean, var) = stats(t.value(y).row(row));
            assert!(mean.abs() <= 1e-10);
            assert!((var - in_var / (in_var + 1e-5)).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = || {
            let mut r = rng(11);
            let mut t = Tape::new();
            let x = t.leaf(Tensor::randn(&[4, 6], 1.0, &mut r));
            let y = t.softmax(x);
            let z = t.gelu(y);
            let s = t.sum(z);
            t.backward(s, &Tensor::scalar(1.0)).unwrap().wrt(x)
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
