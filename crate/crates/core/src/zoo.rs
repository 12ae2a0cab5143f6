//! Toy vision-transformer classifier, synthetic data, pretraining and
//! evaluation.

use crate::autodiff::{Tape, TensorId};
use crate::container;
use crate::error::{Error, Result};
use crate::fim::LogitModel;
use crate::nn::{forward_block_with, ActHook, BlockParams, BlockSpec, BlockVars, FullPrecision,
    LAYER_NORM_EPS, BLOCK_PARAM_NAMES};
use crate::optim::Adam;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyViTConfig {
    pub blocks: usize,
    /// Token count including the class token.
    pub tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    /// Length of each synthetic patch vector.
    pub patch_dim: usize,
}

impl Default for ToyViTConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            tokens: 9,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 10,
            patch_dim: 16,
        }
    }
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::config("model.blocks", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "must be at least 2"));
        }
        if self.tokens < 2 {
            return Err(Error::config(
                "model.tokens",
                "needs the class token plus at least one patch token",
            ));
        }
        if self.patch_dim == 0 {
            return Err(Error::config("model.patch_dim", "must be positive"));
        }
        self.block_spec(0)
            .validate()
            .map_err(|e| Error::config("model.heads", e.to_string()))
    }

    pub fn patches(&self) -> usize {
        self.tokens - 1
    }

    pub fn block_spec(&self, layer: usize) -> BlockSpec {
        BlockSpec {
            tokens: self.tokens,
            embed_dim: self.embed_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layer,
        }
    }

    /// Flattened block-output length `T * D`.
    pub fn block_output_len(&self) -> usize {
        self.tokens * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyViT {
    pub config: ToyViTConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub stem_w: TensorId,
    pub stem_b: TensorId,
    pub cls: TensorId,
    pub pos: TensorId,
    pub blocks: Vec<BlockVars>,
    pub norm_gain: TensorId,
    pub norm_bias: TensorId,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl ModelVars {
    pub fn ids(&self) -> Vec<TensorId> {
        let mut v = vec![self.stem_w, self.stem_b, self.cls, self.pos];
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend([self.norm_gain, self.norm_bias, self.head_w, self.head_b]);
        v
    }
}

/// Supplies the activation hook used inside each block.
pub trait BlockHooks {
    fn hook(&mut self, block: usize) -> &mut dyn ActHook;
}

pub struct AllFullPrecision(FullPrecision);

impl Default for AllFullPrecision {
    fn default() -> Self {
        Self(FullPrecision)
    }
}

impl BlockHooks for AllFullPrecision {
    fn hook(&mut self, _: usize) -> &mut dyn ActHook {
        &mut self.0
    }
}

impl ToyViT {
    pub fn init(config: ToyViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, t) = (config.embed_dim, config.tokens);
        let stem_w = Tensor::randn(
            &[config.patch_dim, d],
            (1.0 / config.patch_dim as f64).sqrt(),
            &mut rng,
        );
        let cls = Tensor::randn(&[d], 0.02, &mut rng);
        let pos = Tensor::randn(&[t, d], 0.02, &mut rng);
        let blocks = (0..config.blocks)
            .map(|l| BlockParams::init(&config.block_spec(l), &mut rng))
            .collect();
        let head_w = Tensor::randn(&[d, config.classes], (1.0 / d as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            stem_w,
            stem_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[config.classes]),
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("stem_w".into(), &self.stem_w),
            ("stem_b".into(), &self.stem_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors()) {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        v.extend([
            ("norm_gain".into(), &self.norm_gain),
            ("norm_bias".into(), &self.norm_bias),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem_w, &mut self.stem_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let stem_w = put(&self.stem_w);
        let stem_b = put(&self.stem_b);
        let cls = put(&self.cls);
        let pos = put(&self.pos);
        let norm_gain = put(&self.norm_gain);
        let norm_bias = put(&self.norm_bias);
        let head_w = put(&self.head_w);
        let head_b = put(&self.head_b);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.register(tape, trainable))
            .collect();
        ModelVars {
            stem_w,
            stem_b,
            cls,
            pos,
            blocks,
            norm_gain,
            norm_bias,
            head_w,
            head_b,
        }
    }

    /// Patch embedding: `[N, P, patch_dim] -> [N, T, D]` with the class
    /// token prepended and positions added.
    pub fn embed(&self, tape: &mut Tape, vars: &ModelVars, patches: TensorId) -> Result<TensorId> {
        let c = &self.config;
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[1] != c.patches() || shape[2] != c.patch_dim {
            return Err(Error::shape(format!(
                "patches: expected [N, {}, {}], got {shape:?}",
                c.patches(),
                c.patch_dim
            )));
        }
        let n = shape[0];
        let (d, t) = (c.embed_dim, c.tokens);
        let e = tape.matmul(patches, vars.stem_w)?;
        let e = tape.add_broadcast(e, vars.stem_b)?;
        let cat = tape.concat(&[vars.cls, e], &[d + n * (t - 1) * d])?;
        let mut map = Vec::with_capacity(n * t * d);
        for s in 0..n {
            map.extend(0..d);
            for tok in 1..t {
                let base = d + (s * (t - 1) + tok - 1) * d;
                map.extend(base..base + d);
            }
        }
        let x = tape.gather(cat, map, &[n, t, d])?;
        tape.add_broadcast(x, vars.pos)
    }

    /// Runs blocks `range` over `x`.
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        mut x: TensorId,
        range: std::ops::Range<usize>,
        hooks: &mut dyn BlockHooks,
    ) -> Result<TensorId> {
        for l in range {
            x = forward_block_with(
                &self.config.block_spec(l),
                &vars.blocks[l],
                x,
                tape,
                hooks.hook(l),
            )?;
        }
        Ok(x)
    }

    /// Final layer norm, class-token pooling and linear head.
    pub fn head(&self, tape: &mut Tape, vars: &ModelVars, z: TensorId) -> Result<TensorId> {
        let shape = tape.shape(z).to_vec();
        let (t, d) = (self.config.tokens, self.config.embed_dim);
        let n = shape[0];
        let h = tape.layer_norm(z, vars.norm_gain, vars.norm_bias, LAYER_NORM_EPS)?;
        let map: Vec<usize> = (0..n).flat_map(|s| (s * t * d)..(s * t * d + d)).collect();
        let pooled = tape.gather(h, map, &[n, d])?;
        let y = tape.matmul(pooled, vars.head_w)?;
        tape.add_broadcast(y, vars.head_b)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, patches: TensorId) -> Result<TensorId> {
        let x = self.embed(tape, vars, patches)?;
        let z = self.run_blocks(tape, vars, x, 0..self.config.blocks, &mut AllFullPrecision::default())?;
        self.head(tape, vars, z)
    }

    /// Full-precision output of `block` for raw inputs, `[N, T, D]`.
    pub fn block_output(&self, inputs: &Tensor, block: usize) -> Result<Tensor> {
        if block >= self.config.blocks {
            return Err(Error::invalid(format!("block {block} out of range")));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let x = self.embed(&mut tape, &vars, x)?;
        let z = self.run_blocks(&mut tape, &vars, x, 0..block + 1, &mut AllFullPrecision::default())?;
        Ok(tape.value(z).clone())
    }

    /// Tail from the output of `block` to the logits.
    pub fn tail(&self, block: usize) -> ViTTail<'_> {
        ViTTail { model: self, block }
    }

    pub fn save(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "config": self.config,
            "training": meta,
        });
        container::write(file, header, &self.named_params())
    }

    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (meta, tensors) = container::read(file)?;
        let config: ToyViTConfig = serde_json::from_value(meta["config"].clone())?;
        let training: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        let mut model = Self::init(config, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((want, slot), (got, t)) in names.iter().zip(model.params_mut()).zip(tensors) {
            if *want != got || slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {got} {:?} where {want} {:?} was expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok((model, training))
    }
}

/// Network from a block output to the logits, with the full-precision
/// weights frozen.
#[derive(Clone, Copy)]
pub struct ViTTail<'a> {
    model: &'a ToyViT,
    block: usize,
}

impl ViTTail<'_> {
    fn run(&self, tape: &mut Tape, z: TensorId) -> Result<TensorId> {
        let c = &self.model.config;
        let n = tape.value(z).rows();
        let x = tape.reshape(z, &[n, c.tokens, c.embed_dim])?;
        let vars = self.model.register(tape, false);
        let x = self.model.run_blocks(
            tape,
            &vars,
            x,
            (self.block + 1)..c.blocks,
            &mut AllFullPrecision::default(),
        )?;
        self.model.head(tape, &vars, x)
    }
}

impl LogitModel for ViTTail<'_> {
    fn input_len(&self) -> usize {
        self.model.config.block_output_len()
    }

    fn num_classes(&self) -> usize {
        self.model.config.classes
    }

    fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zi = tape.constant(z.reshape(&[z.len() / self.input_len(), self.input_len()])?);
        let out = self.run(&mut tape, zi)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(&self, z: &Tensor, logit_grad: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zi = tape.leaf(z.reshape(&[z.len() / self.input_len(), self.input_len()])?);
        let out = self.run(&mut tape, zi)?;
        let g = tape.backward(out, logit_grad)?;
        Ok(g.wrt(zi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataSpec {
    pub classes: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub train: usize,
    pub val: usize,
    pub calib: usize,
    /// Pairwise distance between class means.
    pub gap: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDataSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            patches: 8,
            patch_dim: 16,
            train: 2000,
            val: 1000,
            calib: 128,
            gap: 12.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if self.classes > self.patches * self.patch_dim {
            return Err(Error::config(
                "data.classes",
                "cannot exceed the input dimension",
            ));
        }
        if self.train == 0 || self.val == 0 || self.calib == 0 {
            return Err(Error::config("data", "every split needs at least one sample"));
        }
        if !(self.gap >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::config("data.gap", "gap and noise must be non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.patches * self.patch_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, patches, patch_dim]`
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            inputs: self.inputs.select_leading(idx)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Split> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDataSpec,
    pub centers: Tensor,
    pub train: Split,
    pub val: Split,
    /// Unlabeled calibration split.
    pub calib: Split,
}

/// Orthogonal class means scaled so every pair is exactly `gap` apart, with
/// isotropic Gaussian noise. Labels cycle through the classes so each split
/// is balanced; one sample stream is cut into consecutive splits.
pub fn gen_dataset(spec: &SyntheticDataSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Gram-Schmidt on random directions
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while basis.len() < spec.classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let radius = spec.gap / std::f64::consts::SQRT_2;
    let centers = Tensor::from_fn(&[spec.classes, dim], |i| radius * basis[i / dim][i % dim]);

    let mut draw = |count: usize| -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
        let mut data = Vec::with_capacity(count * dim);
        for &y in &labels {
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(centers.get2(y, j) + spec.noise * e);
            }
        }
        Ok((
            Tensor::new(vec![count, spec.patches, spec.patch_dim], data)?,
            labels,
        ))
    };
    let (train_x, train_y) = draw(spec.train)?;
    let (val_x, val_y) = draw(spec.val)?;
    let (calib_x, _) = draw(spec.calib)?;
    Ok(Dataset {
        spec: *spec,
        centers,
        train: Split {
            inputs: train_x,
            labels: Some(train_y),
        },
        val: Split {
            inputs: val_x,
            labels: Some(val_y),
        },
        calib: Split {
            inputs: calib_x,
            labels: None,
        },
    })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let lab = |s: &Split| Tensor::vector(s.labels.as_ref().unwrap().iter().map(|&y| y as f64).collect());
        let (tl, vl) = (lab(&self.train), lab(&self.val));
        container::write(
            file,
            serde_json::json!({ "spec": self.spec }),
            &[
                ("centers".into(), &self.centers),
                ("train.inputs".into(), &self.train.inputs),
                ("train.labels".into(), &tl),
                ("val.inputs".into(), &self.val.inputs),
                ("val.labels".into(), &vl),
                ("calib.inputs".into(), &self.calib.inputs),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (meta, mut t) = container::read(file)?;
        if t.len() != 6 {
            return Err(Error::Format("dataset container needs 6 tensors".into()));
        }
        let spec: SyntheticDataSpec = serde_json::from_value(meta["spec"].clone())?;
        let mut take = || t.remove(0).1;
        let labels = |x: Tensor| Some(x.data().iter().map(|&v| v as usize).collect());
        let centers = take();
        let (tx, ty) = (take(), take());
        let (vx, vy) = (take(), take());
        let cx = take();
        Ok(Self {
            spec,
            centers,
            train: Split { inputs: tx, labels: labels(ty) },
            val: Split { inputs: vx, labels: labels(vy) },
            calib: Split { inputs: cx, labels: None },
        })
    }
}

/// Anything that maps a batch of inputs to logits.
pub trait Classifier {
    fn logits(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl Classifier for ToyViT {
    fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const EVAL_BATCH: usize = 256;

/// Top-1 accuracy over a labeled split.
pub fn evaluate_top1(model: &dyn Classifier, split: &Split) -> Result<f64> {
    let labels = split
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluation split is unlabeled"))?;
    if labels.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.logits(&split.inputs.select_leading(chunk)?)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// Trains a fresh model with Adam on cross-entropy; deterministic per seed.
pub fn pretrain(
    config: ToyViTConfig,
    data: &Dataset,
    train_cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ToyViT, TrainingMeta)> {
    if data.spec.classes != config.classes
        || data.spec.patches != config.patches()
        || data.spec.patch_dim != config.patch_dim
    {
        return Err(Error::config(
            "data",
            "dataset shape does not match the model config",
        ));
    }
    if train_cfg.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be positive"));
    }
    let mut model = ToyViT::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new();
    let labels = data.train.labels.as_ref().expect("train split is labeled");
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train_cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let x = tape.constant(data.train.inputs.select_leading(batch)?);
            let y = model.forward(&mut tape, &vars, x)?;
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(y, &ys)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "pretraining loss {lv} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
            opt.tick();
            for (slot, (p, id)) in model.params_mut().into_iter().zip(vars.ids()).enumerate() {
                opt.update(slot, train_cfg.lr, p, &grads.wrt(id));
            }
        }
    }
    let acc = evaluate_top1(&model, &data.val)?;
    Ok((
        model,
        TrainingMeta {
            epochs: train_cfg.epochs,
            final_accuracy: acc,
            seed,
        },
    ))
}
