//! Block-wise reconstruction: capture a block's calibration inputs and
//! targets, probe the KL curvature through the frozen full-precision tail,
//! and optimize rounding logits plus activation scales under a chosen loss.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::fim::{
    collect_perturbation, estimate_diag, rank1_factor, AppendOutcome, FimEstimate, LogitModel,
    LossKind, Perturbation, PerturbationBank,
};
use crate::nn::{forward_block_with, ActHook, ActSite, BlockParams, BlockSpec, FullPrecision, Linear};
use crate::optim::Adam;
use crate::quant::{
    calibrate_activation, calibrate_weight, qdrop_mix, quantize_activation_on_tape,
    quantize_weight, quantize_weight_on_tape, rounding_regularizer, ActQuantState, BetaSchedule,
    CalibMethod, QuantSpec, WeightQuantState, SCALE_FLOOR,
};
use crate::tensor::Tensor;
use crate::zoo::{BlockHooks, Classifier, ToyViT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub loss_kind: LossKind,
    /// Target bank rank for the low-rank losses.
    pub rank: usize,
    /// Iterations between bank-append attempts.
    pub interval: usize,
    pub max_iter: usize,
    pub batch_size: usize,
    /// Probability of keeping a full-precision input element.
    pub p_drop: f64,
    pub lr_v: f64,
    pub lr_scale: f64,
    /// Low-rank weight in the DPLR mix.
    pub alpha: f64,
    /// Weight of the rounding regularizer.
    pub reg_weight: f64,
    pub beta: BetaSchedule,
    /// Calibration samples used by curvature probes; `None` uses all.
    pub fim_samples: Option<usize>,
    /// Rescale curvature losses so their initial value matches the MSE.
    pub normalize_fim: bool,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Dplr,
            rank: 15,
            interval: 20,
            max_iter: 500,
            batch_size: 32,
            p_drop: 0.5,
            lr_v: 1e-3,
            lr_scale: 1e-4,
            alpha: 0.5,
            reg_weight: 0.01,
            beta: BetaSchedule::default(),
            fim_samples: None,
            normalize_fim: true,
            seed: 0,
        }
    }
}

impl ReconConfig {
    /// `max_iter = 0` is accepted and makes reconstruction a no-op.
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.rank < 1 {
            return Err(Error::config("recon.rank", "must be at least 1"));
        }
        if self.interval < 1 {
            return Err(Error::config("recon.interval", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("recon.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::config("recon.p_drop", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("recon.alpha", "must lie in [0, 1]"));
        }
        if !positive(self.lr_v) {
            return Err(Error::config("recon.lr_v", "must be positive"));
        }
        if !positive(self.lr_scale) {
            return Err(Error::config("recon.lr_scale", "must be positive"));
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(Error::config("recon.reg_weight", "must be non-negative"));
        }
        if self.fim_samples == Some(0) {
            return Err(Error::config("recon.fim_samples", "must be at least 1"));
        }
        let b = &self.beta;
        if !(0.0..=1.0).contains(&b.warmup) || !positive(b.start) || !positive(b.end) {
            return Err(Error::config(
                "recon.beta",
                "needs positive start/end and warmup in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Rank the bank reaches when every append is accepted.
    pub fn scheduled_rank(&self) -> usize {
        if self.max_iter == 0 {
            return 0;
        }
        self.rank.min(1 + (self.max_iter - 1) / self.interval)
    }
}

/// Quantizer state for one block: weight rounding per [`Linear`] and
/// activation quantizers per [`ActSite`], both in their `ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuant {
    pub w_spec: QuantSpec,
    pub a_spec: QuantSpec,
    pub weights: Vec<WeightQuantState>,
    pub acts: Vec<ActQuantState>,
}

impl BlockQuant {
    /// Block parameters with every linear weight hard-quantized.
    pub fn hard_params(&self, params: &BlockParams) -> Result<BlockParams> {
        let mut out = params.clone();
        for (l, st) in Linear::ALL.into_iter().zip(&self.weights) {
            let q = quantize_weight(params.weight(l), st, &self.w_spec, false)?;
            *weight_slot(&mut out, l) = q;
        }
        Ok(out)
    }

    pub fn hook<'a>(&'a self, scales: Option<&'a [TensorId]>) -> ActQuantHook<'a> {
        ActQuantHook {
            spec: self.a_spec,
            states: &self.acts,
            scales,
        }
    }
}

fn weight_slot(p: &mut BlockParams, l: Linear) -> &mut Tensor {
    match l {
        Linear::Qkv => &mut p.qkv_w,
        Linear::Proj => &mut p.proj_w,
        Linear::Fc1 => &mut p.fc1_w,
        Linear::Fc2 => &mut p.fc2_w,
    }
}

/// Fake-quantizes activations; scales come from tape handles when given
/// (learnable) and from the stored states otherwise.
pub struct ActQuantHook<'a> {
    spec: QuantSpec,
    states: &'a [ActQuantState],
    scales: Option<&'a [TensorId]>,
}

impl ActHook for ActQuantHook<'_> {
    fn apply(&mut self, tape: &mut Tape, site: ActSite, x: TensorId) -> Result<TensorId> {
        if self.spec.is_passthrough() {
            return Ok(x);
        }
        let st = &self.states[site.index()];
        let s = match self.scales {
            Some(ids) => ids[site.index()],
            None => tape.constant(Tensor::scalar(st.scale)),
        };
        quantize_activation_on_tape(tape, x, s, st, &self.spec)
    }
}

/// Calibrates each site on first sight, then quantizes with the result, so
/// later sites see already-quantized upstream activations.
struct CalibratingHook {
    spec: QuantSpec,
    method: CalibMethod,
    states: Vec<Option<ActQuantState>>,
}

impl ActHook for CalibratingHook {
    fn apply(&mut self, tape: &mut Tape, site: ActSite, x: TensorId) -> Result<TensorId> {
        if self.spec.is_passthrough() {
            self.states[site.index()] = Some(ActQuantState {
                scale: 1.0,
                zero_point: 0,
            });
            return Ok(x);
        }
        let st = match self.states[site.index()] {
            Some(st) => st,
            None => {
                let (st, _) = calibrate_activation(&self.spec, tape.value(x).data(), self.method)?;
                self.states[site.index()] = Some(st);
                st
            }
        };
        let s = tape.constant(Tensor::scalar(st.scale));
        quantize_activation_on_tape(tape, x, s, &st, &self.spec)
    }
}

/// A model whose blocks carry (possibly partial) quantizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub fp: ToyViT,
    pub w_spec: QuantSpec,
    pub a_spec: QuantSpec,
    /// Weight quantizer used for the patch stem and the head.
    pub stem_head_spec: QuantSpec,
    pub blocks: Vec<Option<BlockQuant>>,
    deployed: ToyViT,
}

impl QuantizedModel {
    /// Round-to-nearest stem and head weights at
    /// `max(stem_head_bits, w_bits)`; blocks start unquantized.
    pub fn new(fp: &ToyViT, w_bits: u32, a_bits: u32, stem_head_bits: u32) -> Result<Self> {
        let w_spec = QuantSpec::weight(w_bits);
        let a_spec = QuantSpec::activation(a_bits);
        let stem_head_spec = QuantSpec::weight(stem_head_bits.max(w_bits));
        for (field, s) in [
            ("quant.w_bits", &w_spec),
            ("quant.a_bits", &a_spec),
            ("quant.stem_head_bits", &stem_head_spec),
        ] {
            s.validate().map_err(|e| Error::config(field, e.to_string()))?;
        }
        let mut deployed = fp.clone();
        for w in [&mut deployed.stem_w, &mut deployed.head_w] {
            let (st, _) = calibrate_weight(&stem_head_spec, w, CalibMethod::MseGrid)?;
            *w = quantize_weight(w, &st, &stem_head_spec, false)?;
        }
        Ok(Self {
            fp: fp.clone(),
            w_spec,
            a_spec,
            stem_head_spec,
            blocks: vec![None; fp.config.blocks],
            deployed,
        })
    }

    /// Installs a finished block and refreshes its deployed weights.
    pub fn set_block(&mut self, block: usize, quant: BlockQuant) -> Result<()> {
        if block >= self.blocks.len() {
            return Err(Error::invalid(format!("block {block} out of range")));
        }
        self.deployed.blocks[block] = quant.hard_params(&self.fp.blocks[block])?;
        self.blocks[block] = Some(quant);
        Ok(())
    }

    /// Model with every quantized weight substituted.
    pub fn deployed(&self) -> &ToyViT {
        &self.deployed
    }

    /// Input to `block` in the quantized model: `[N, T, D]`.
    pub fn block_input(&self, inputs: &Tensor, block: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.deployed.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let x = self.deployed.embed(&mut tape, &vars, x)?;
        let x = self
            .deployed
            .run_blocks(&mut tape, &vars, x, 0..block, &mut self.hooks())?;
        Ok(tape.value(x).clone())
    }

    fn hooks(&self) -> QuantHooks<'_> {
        QuantHooks {
            hooks: self
                .blocks
                .iter()
                .map(|b| -> Box<dyn ActHook + '_> {
                    match b {
                        Some(q) => Box::new(q.hook(None)),
                        None => Box::new(FullPrecision),
                    }
                })
                .collect(),
        }
    }
}

struct QuantHooks<'a> {
    hooks: Vec<Box<dyn ActHook + 'a>>,
}

impl BlockHooks for QuantHooks<'_> {
    fn hook(&mut self, block: usize) -> &mut dyn ActHook {
        self.hooks[block].as_mut()
    }
}

impl Classifier for QuantizedModel {
    fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let m = &self.deployed;
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let x = m.embed(&mut tape, &vars, x)?;
        let z = m.run_blocks(&mut tape, &vars, x, 0..m.config.blocks, &mut self.hooks())?;
        let y = m.head(&mut tape, &vars, z)?;
        Ok(tape.value(y).clone())
    }
}

/// One bank-append attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEvent {
    pub iteration: usize,
    pub outcome: String,
    pub rank: usize,
}

/// Everything reconstruction needs for one block.
#[derive(Debug, Clone)]
pub struct BlockReconState {
    pub block: usize,
    pub spec: BlockSpec,
    pub params: BlockParams,
    /// Block input from the full-precision model.
    pub x_raw: Tensor,
    /// Block input from the partially quantized model.
    pub x_quant: Tensor,
    /// Full-precision block output on `x_raw`.
    pub z_target: Tensor,
    pub quant: BlockQuant,
    pub estimate: Option<FimEstimate>,
    pub iteration: usize,
    pub trace: Vec<f64>,
    pub rank_events: Vec<RankEvent>,
    pub clamp_fraction: f64,
    /// Multiplier applied to curvature losses.
    pub loss_scale: f64,
    pub hardened: bool,
    /// Whether the curvature estimate has been built.
    pub prepared: bool,
    pub notes: Vec<String>,
}

impl BlockReconState {
    pub fn samples(&self) -> usize {
        self.x_raw.shape()[0]
    }

    /// Flattened output length `T * D`.
    pub fn output_len(&self) -> usize {
        self.spec.output_len()
    }

    pub fn rank(&self) -> usize {
        match &self.estimate {
            Some(FimEstimate::RankK(b)) | Some(FimEstimate::Dplr { bank: b, .. }) => b.rank(),
            _ => 0,
        }
    }

    pub fn bank(&self) -> Option<&PerturbationBank> {
        match &self.estimate {
            Some(FimEstimate::RankK(b)) | Some(FimEstimate::Dplr { bank: b, .. }) => Some(b),
            _ => None,
        }
    }

    fn bank_mut(&mut self) -> Option<&mut PerturbationBank> {
        match &mut self.estimate {
            Some(FimEstimate::RankK(b)) | Some(FimEstimate::Dplr { bank: b, .. }) => Some(b),
            _ => None,
        }
    }

    /// Block output with hard rounding and the current activation scales.
    pub fn hard_output(&self, input: &Tensor) -> Result<Tensor> {
        let params = self.quant.hard_params(&self.params)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = forward_block_with(&self.spec, &vars, x, &mut tape, &mut self.quant.hook(None))?;
        Ok(tape.value(out).clone())
    }
}

fn fp_forward(model: &ToyViT, inputs: &Tensor, blocks: std::ops::Range<usize>, embed: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let mut x = tape.constant(inputs.clone());
    if embed {
        x = model.embed(&mut tape, &vars, x)?;
    }
    let x = model.run_blocks(
        &mut tape,
        &vars,
        x,
        blocks,
        &mut crate::zoo::AllFullPrecision::default(),
    )?;
    Ok(tape.value(x).clone())
}

/// Caches `X_raw`, `X_quant` and the target `z` for `block`, and calibrates
/// the block's quantizers: weights per output channel, then activations on
/// `X_quant` with round-to-nearest weights.
pub fn capture_block_io(
    qmodel: &QuantizedModel,
    block: usize,
    calib: &Tensor,
    method: CalibMethod,
) -> Result<BlockReconState> {
    let model = &qmodel.fp;
    if block >= model.config.blocks {
        return Err(Error::invalid(format!(
            "block {block} out of range for a {}-block model",
            model.config.blocks
        )));
    }
    if calib.is_empty() || calib.shape()[0] == 0 {
        return Err(Error::invalid("calibration set is empty"));
    }
    if let Some(i) = (0..block).find(|&i| qmodel.blocks[i].is_none()) {
        return Err(Error::invalid(format!(
            "block {i} must be reconstructed before block {block}"
        )));
    }
    let spec = model.config.block_spec(block);
    let params = model.blocks[block].clone();
    let x_raw = fp_forward(model, calib, 0..block, true)?;
    let x_quant = qmodel.block_input(calib, block)?;
    let z_target = fp_forward(model, &x_raw, block..block + 1, false)?;

    let mut weights = Vec::with_capacity(4);
    for l in Linear::ALL {
        weights.push(calibrate_weight(&qmodel.w_spec, params.weight(l), method)?.0);
    }
    let mut quant = BlockQuant {
        w_spec: qmodel.w_spec,
        a_spec: qmodel.a_spec,
        weights,
        acts: Vec::new(),
    };
    let rtn = quant.hard_params(&params)?;
    let mut hook = CalibratingHook {
        spec: qmodel.a_spec,
        method,
        states: vec![None; ActSite::ALL.len()],
    };
    let mut tape = Tape::new();
    let vars = rtn.register(&mut tape, false);
    let x = tape.constant(x_quant.clone());
    forward_block_with(&spec, &vars, x, &mut tape, &mut hook)?;
    quant.acts = hook
        .states
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::invalid("activation site never visited")))
        .collect::<Result<_>>()?;

    Ok(BlockReconState {
        block,
        spec,
        params,
        x_raw,
        x_quant,
        z_target,
        quant,
        estimate: None,
        iteration: 0,
        trace: Vec::new(),
        rank_events: Vec::new(),
        clamp_fraction: 0.0,
        loss_scale: 1.0,
        hardened: false,
        prepared: false,
        notes: Vec::new(),
    })
}

/// Perturbation of the hard-rounded block on `X_raw` and the KL gradient
/// through `tail`, over the first `samples` calibration inputs. `None`
/// when the perturbation vanishes.
pub fn fim_probe(
    state: &BlockReconState,
    tail: &dyn LogitModel,
    samples: Option<usize>,
) -> Result<Option<Perturbation>> {
    let n = samples.unwrap_or(usize::MAX).min(state.samples());
    let idx: Vec<usize> = (0..n).collect();
    let a = state.output_len();
    let x = state.x_raw.select_leading(&idx)?;
    let z = state.z_target.select_leading(&idx)?.reshape(&[n, a])?;
    let zq = state.hard_output(&x)?.reshape(&[n, a])?;
    let dz = zq.sub(&z)?;
    let p = collect_perturbation(tail, &z, &dz)?;
    Ok(if p.is_zero() { None } else { Some(p) })
}

fn build_estimate(
    state: &mut BlockReconState,
    cfg: &ReconConfig,
    probe: Option<Perturbation>,
) -> Result<()> {
    let a = state.output_len();
    let Some(p) = probe else {
        state.notes.push("initial probe: zero perturbation".into());
        state.estimate = match cfg.loss_kind {
            LossKind::Mse => None,
            LossKind::Rankk => Some(FimEstimate::RankK(PerturbationBank::new(a, cfg.rank)?)),
            LossKind::Dplr => Some(FimEstimate::dplr(
                PerturbationBank::new(a, cfg.rank)?,
                vec![0.0; a],
                cfg.alpha,
            )?),
            _ => Some(FimEstimate::Diag(vec![0.0; a])),
        };
        return Ok(());
    };
    let diag = || -> Result<Vec<f64>> { Ok(estimate_diag(&p.avg_dz, &p.avg_grad)?.diag) };
    let bank = |state: &mut BlockReconState| -> Result<PerturbationBank> {
        let mut b = PerturbationBank::new(a, cfg.rank)?;
        let out = b.append(&p.avg_dz, &p.avg_grad)?;
        state.rank_events.push(RankEvent {
            iteration: 0,
            outcome: outcome_name(&out),
            rank: b.rank(),
        });
        Ok(b)
    };
    state.estimate = match cfg.loss_kind {
        LossKind::Mse => None,
        LossKind::Brecq => {
            let n = p.grads.rows();
            let mut d = vec![0.0; a];
            for r in 0..n {
                for (o, g) in d.iter_mut().zip(p.grads.row(r)) {
                    *o += g * g / n as f64;
                }
            }
            Some(FimEstimate::BrecqDiag(d))
        }
        LossKind::Diag => {
            let e = estimate_diag(&p.avg_dz, &p.avg_grad)?;
            state.clamp_fraction = e.clamp_fraction;
            Some(FimEstimate::Diag(e.diag))
        }
        LossKind::Rank1 => match rank1_factor(&p.avg_dz, &p.avg_grad) {
            Ok(u) => Some(FimEstimate::Rank1(u)),
            Err(Error::RankOneFallback { inner }) => {
                state
                    .notes
                    .push(format!("rank-one inner product {inner:e}; using diag"));
                Some(FimEstimate::Diag(diag()?))
            }
            Err(e) => return Err(e),
        },
        LossKind::Rankk => Some(FimEstimate::RankK(bank(state)?)),
        LossKind::Dplr => {
            let e = estimate_diag(&p.avg_dz, &p.avg_grad)?;
            state.clamp_fraction = e.clamp_fraction;
            let b = bank(state)?;
            Some(FimEstimate::dplr(b, e.diag, cfg.alpha)?)
        }
    };
    Ok(())
}

fn outcome_name(o: &AppendOutcome) -> String {
    match o {
        AppendOutcome::Accepted { .. } => "accepted".into(),
        AppendOutcome::Rejected(r) => format!("rejected:{r:?}"),
    }
}

/// Per-sample objective summed over features, averaged over the batch;
/// returns the value and its gradient in `dz`.
fn objective(
    kind: LossKind,
    estimate: Option<&FimEstimate>,
    scale: f64,
    dz: &Tensor,
) -> (f64, Tensor) {
    let n = dz.rows();
    let mut grad = Tensor::zeros(dz.shape());
    let mut total = 0.0;
    let a = dz.last_dim();
    for r in 0..n {
        let row = dz.row(r);
        let g = &mut grad.data_mut()[r * a..(r + 1) * a];
        match (kind, estimate) {
            (LossKind::Mse, _) | (_, None) => {
                for (o, d) in g.iter_mut().zip(row) {
                    total += d * d;
                    *o = 2.0 * d / n as f64;
                }
            }
            (_, Some(e)) => {
                total += scale * e.quadratic(row);
                for (o, q) in g.iter_mut().zip(e.quadratic_grad(row)) {
                    *o = scale * q / n as f64;
                }
            }
        }
    }
    (total / n as f64, grad)
}

/// Objective of the hard-rounded block on `X_quant` over all samples,
/// split into `(mse, unscaled curvature loss)`.
pub fn evaluate_objective(state: &BlockReconState) -> Result<(f64, Option<f64>)> {
    let n = state.samples();
    let a = state.output_len();
    let out = state.hard_output(&state.x_quant)?.reshape(&[n, a])?;
    let dz = out.sub(&state.z_target.reshape(&[n, a])?)?;
    let (mse, _) = objective(LossKind::Mse, None, 1.0, &dz);
    let fim = state.estimate.as_ref().map(|e| {
        (0..n).map(|r| e.quadratic(dz.row(r))).sum::<f64>() / n as f64
    });
    Ok((mse, fim))
}

fn reported_loss(state: &BlockReconState, kind: LossKind) -> Result<f64> {
    let (mse, fim) = evaluate_objective(state)?;
    Ok(match (kind, fim) {
        (LossKind::Mse, _) | (_, None) => mse,
        (_, Some(f)) => state.loss_scale * f,
    })
}

/// Gradients of one reconstruction step.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub loss: f64,
    /// Per [`Linear`]; `None` when weights are not quantized.
    pub v: Vec<Option<Tensor>>,
    /// Per [`ActSite`]; empty when activations are not quantized.
    pub scales: Vec<f64>,
}

/// Forward/backward of the soft-rounded block on `input` against the
/// targets `target`, without the rounding regularizer.
pub fn step_gradients(
    state: &BlockReconState,
    kind: LossKind,
    input: &Tensor,
    target: &Tensor,
) -> Result<StepGradients> {
    let q = &state.quant;
    let mut tape = Tape::new();
    let mut vars = state.params.register(&mut tape, false);
    let mut v_ids = Vec::with_capacity(4);
    for (l, st) in Linear::ALL.into_iter().zip(&q.weights) {
        if q.w_spec.is_passthrough() {
            v_ids.push(None);
            continue;
        }
        let v = tape.leaf(st.v.clone());
        *vars.weight_mut(l) =
            quantize_weight_on_tape(&mut tape, state.params.weight(l), st, &q.w_spec, v)?;
        v_ids.push(Some(v));
    }
    let scale_ids: Vec<TensorId> = if q.a_spec.is_passthrough() {
        Vec::new()
    } else {
        q.acts
            .iter()
            .map(|st| tape.leaf(Tensor::scalar(st.scale)))
            .collect()
    };
    let x = tape.constant(input.clone());
    let hook_scales = (!scale_ids.is_empty()).then_some(scale_ids.as_slice());
    let out = forward_block_with(&state.spec, &vars, x, &mut tape, &mut q.hook(hook_scales))?;
    let n = input.shape()[0];
    let a = state.output_len();
    let t = tape.constant(target.clone());
    let dz = tape.sub(out, t)?;
    let dz_flat = tape.value(dz).reshape(&[n, a])?;
    let (loss, g) = objective(kind, state.estimate.as_ref(), state.loss_scale, &dz_flat);
    let grads = tape.backward(dz, &g.reshape(tape.shape(dz))?)?;
    Ok(StepGradients {
        loss,
        v: v_ids.iter().map(|id| id.map(|i| grads.wrt(i))).collect(),
        scales: scale_ids.iter().map(|&i| grads.wrt(i).data()[0]).collect(),
    })
}

fn snapshot(state: &BlockReconState, iteration: usize, what: &str) -> Error {
    let mut msg = format!("block {} iteration {iteration}: {what}", state.block);
    for (l, st) in Linear::ALL.iter().zip(&state.quant.weights) {
        let d = st.v.data();
        let finite = d.iter().filter(|v| v.is_finite()).count();
        let (lo, hi) = d
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        msg.push_str(&format!(
            "; {l:?} v: min {lo:.3e} max {hi:.3e} finite {finite}/{}",
            d.len()
        ));
    }
    let scales: Vec<String> = state
        .quant
        .acts
        .iter()
        .map(|s| format!("{:.3e}", s.scale))
        .collect();
    msg.push_str(&format!("; act scales [{}]", scales.join(", ")));
    Error::Diverged(msg)
}

/// Initial probe, curvature estimate and loss normalization. Called by
/// [`reconstruct_block`] when not done already.
pub fn prepare_estimate(
    state: &mut BlockReconState,
    tail: &dyn LogitModel,
    cfg: &ReconConfig,
) -> Result<()> {
    state.prepared = true;
    if !cfg.loss_kind.needs_probe() {
        return Ok(());
    }
    let p = fim_probe(state, tail, cfg.fim_samples)?;
    build_estimate(state, cfg, p)?;
    if cfg.normalize_fim {
        if let (mse, Some(f)) = evaluate_objective(state)? {
            if mse > 0.0 && f.abs() > 1e-300 {
                state.loss_scale = mse / f.abs();
            }
        }
    }
    Ok(())
}

/// Runs `max_iter` iterations of Adam on the rounding logits and the
/// activation scales, then hardens the rounding. Deterministic per seed.
pub fn reconstruct_block(
    state: &mut BlockReconState,
    tail: &dyn LogitModel,
    cfg: &ReconConfig,
) -> Result<()> {
    cfg.validate()?;
    if cfg.max_iter == 0 {
        return Ok(());
    }
    if state.hardened {
        return Err(Error::invalid(format!(
            "block {} is already hardened",
            state.block
        )));
    }
    if !state.prepared {
        prepare_estimate(state, tail, cfg)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(state.block as u64),
    );
    let n = state.samples();
    let mut opt = Adam::new();
    let w_quant = !state.quant.w_spec.is_passthrough();
    for i in 0..cfg.max_iter {
        if cfg.loss_kind.uses_bank() && i > 0 && i % cfg.interval == 0 && state.rank() < cfg.rank {
            let probe = fim_probe(state, tail, cfg.fim_samples)?;
            let (outcome, rank) = match probe {
                None => ("skipped:zero_perturbation".to_string(), state.rank()),
                Some(p) => {
                    let bank = state.bank_mut().expect("bank losses keep a bank");
                    let out = bank.append(&p.avg_dz, &p.avg_grad)?;
                    (outcome_name(&out), bank.rank())
                }
            };
            state.rank_events.push(RankEvent {
                iteration: i,
                outcome,
                rank,
            });
        }

        let idx: Vec<usize> = if cfg.batch_size >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.batch_size).into_vec()
        };
        let x_raw = state.x_raw.select_leading(&idx)?;
        let x_quant = state.x_quant.select_leading(&idx)?;
        let input = qdrop_mix(&x_raw, &x_quant, cfg.p_drop, &mut rng)?;
        let target = state.z_target.select_leading(&idx)?;
        let step = step_gradients(state, cfg.loss_kind, &input, &target)?;
        if !step.loss.is_finite() {
            return Err(snapshot(state, i, &format!("loss {}", step.loss)));
        }
        state.trace.push(step.loss);

        let beta = cfg.beta.beta(i, cfg.max_iter);
        opt.tick();
        for (slot, g) in step.v.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            let v = &mut state.quant.weights[slot].v;
            if let (Some(b), true) = (beta, cfg.reg_weight > 0.0) {
                let (_, rg) = rounding_regularizer(v, b);
                for (o, r) in g.data_mut().iter_mut().zip(rg.data()) {
                    *o += cfg.reg_weight * r;
                }
            }
            if !g.is_finite() {
                return Err(snapshot(state, i, &format!("{:?} rounding gradient", Linear::ALL[slot])));
            }
            opt.update(slot, cfg.lr_v, v, &g);
        }
        for (site, g) in step.scales.into_iter().enumerate() {
            if !g.is_finite() {
                return Err(snapshot(state, i, &format!("{:?} scale gradient", ActSite::ALL[site])));
            }
            let st = &mut state.quant.acts[site];
            let mut s = [st.scale];
            opt.update_slice(4 + site, cfg.lr_scale, &mut s, &[g]);
            st.scale = s[0].max(SCALE_FLOOR);
        }
        state.iteration += 1;
    }
    // hardening: quantize_weight(.., soft = false) is used from here on
    state.hardened = w_quant || !state.quant.a_spec.is_passthrough();
    Ok(())
}

/// Per-block summary, written as one JSON line per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub loss_kind: String,
    pub init_loss: f64,
    pub final_loss: f64,
    pub rank_reached: usize,
    pub clamp_fraction: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub w_bits: u32,
    pub a_bits: u32,
    /// Minimum bit-width for the patch stem and the head weights.
    pub stem_head_bits: u32,
    pub calib_method: CalibMethod,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            w_bits: 4,
            a_bits: 4,
            stem_head_bits: 8,
            calib_method: CalibMethod::MseGrid,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub model: QuantizedModel,
    pub reports: Vec<BlockReport>,
    /// Per block: the loss trace and the bank-append log.
    pub traces: Vec<Vec<f64>>,
    pub rank_events: Vec<Vec<RankEvent>>,
    pub notes: Vec<String>,
}

/// Reconstructs every block in order; stem and head are calibrated only.
pub fn quantize_model(
    model: &ToyViT,
    calib: &Tensor,
    qcfg: &QuantizeConfig,
    cfg: &ReconConfig,
) -> Result<QuantizeOutcome> {
    cfg.validate()?;
    let mut q = QuantizedModel::new(model, qcfg.w_bits, qcfg.a_bits, qcfg.stem_head_bits)?;
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    let mut rank_events = Vec::new();
    let mut notes = Vec::new();
    for b in 0..model.config.blocks {
        let start = Instant::now();
        let mut state = capture_block_io(&q, b, calib, qcfg.calib_method)?;
        let tail = model.tail(b);
        let kind = cfg.loss_kind;
        if cfg.max_iter > 0 {
            prepare_estimate(&mut state, &tail, cfg)?;
        }
        let init_loss = reported_loss(&state, kind)?;
        reconstruct_block(&mut state, &tail, cfg)?;
        let final_loss = reported_loss(&state, kind)?;
        reports.push(BlockReport {
            block: b,
            loss_kind: kind.name().into(),
            init_loss,
            final_loss,
            rank_reached: state.rank(),
            clamp_fraction: state.clamp_fraction,
            seconds: start.elapsed().as_secs_f64(),
        });
        notes.extend(state.notes.iter().map(|n| format!("block {b}: {n}")));
        traces.push(std::mem::take(&mut state.trace));
        rank_events.push(std::mem::take(&mut state.rank_events));
        q.set_block(b, state.quant)?;
    }
    Ok(QuantizeOutcome {
        model: q,
        reports,
        traces,
        rank_events,
        notes,
    })
}
