//! Fisher-information machinery at a block output `z`.
//!
//! The exact FIM is obtained by enumerating every class `y` of the
//! categorical output: `F = sum_y p(y; z) g_y g_y^T` with
//! `g_y = d/dz log p(y; z)`. The estimators below only see averaged
//! perturbations `dz` and averaged KL gradients `grad`, which satisfy
//! `grad ≈ F dz` to second order:
//!
//! * diagonal: `F_jj = grad_j / dz_j`
//! * rank one: `F = u u^T`, `u = grad / sqrt(grad^T dz)`
//! * rank k: `F = G (D^T D)^{-1} D^T` (Moore–Penrose fit of stored columns)
//! * DPLR: `alpha * F_rank-k + (1 - alpha) * F_diag`
//!
//! plus the squared-gradient diagonal baseline and plain MSE.

use crate::autodiff::{log_softmax_row, softmax_row};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Smallest admissible `grad^T dz` for the rank-one factor.
pub const RANK1_MIN_INNER: f64 = 1e-12;
/// Relative orthogonal residual below which an appended column is dependent.
pub const BANK_DEPENDENCE_TOL: f64 = 1e-6;
/// Largest accepted condition number of the Gram matrix `D^T D`.
pub const BANK_MAX_CONDITION: f64 = 1e10;

/// Maps rows of block outputs `[N, a]` to class logits `[N, C]`.
pub trait LogitModel {
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, z: &Tensor) -> Result<Tensor>;
    /// Row-wise vector-Jacobian product: `logit_grad [N, C] -> [N, a]`.
    fn vjp(&self, z: &Tensor, logit_grad: &Tensor) -> Result<Tensor>;
}

/// `z` are the logits.
#[derive(Debug, Clone, Copy)]
pub struct IdentityTail {
    pub classes: usize,
}

impl LogitModel for IdentityTail {
    fn input_len(&self) -> usize {
        self.classes
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, z: &Tensor) -> Result<Tensor> {
        if z.last_dim() != self.classes {
            return Err(Error::shape(format!(
                "identity tail expects {} columns, got {:?}",
                self.classes,
                z.shape()
            )));
        }
        Ok(z.clone())
    }

    fn vjp(&self, _z: &Tensor, logit_grad: &Tensor) -> Result<Tensor> {
        Ok(logit_grad.clone())
    }
}

fn as_rows(z: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![1, z.len()], z.to_vec())
}

/// One enumerated class with its probability and score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    pub class: usize,
    pub weight: f64,
    pub score: Vec<f64>,
}

/// Scores `d/dz log p(y; z)` for every class `y`.
pub fn score_samples(tail: &dyn LogitModel, z: &[f64]) -> Result<Vec<ScoreSample>> {
    let c = tail.num_classes();
    if c > 100 {
        return Err(Error::invalid(format!("{c} classes is too many to enumerate")));
    }
    if z.len() != tail.input_len() {
        return Err(Error::shape(format!(
            "z has {} entries, tail expects {}",
            z.len(),
            tail.input_len()
        )));
    }
    let logits = tail.logits(&as_rows(z)?)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let p = crate::nn::softmax(logits.row(0));

    // every class at once: C copies of z, seed row y with e_y - p
    let mut zs = Vec::with_capacity(c * z.len());
    let mut seeds = Vec::with_capacity(c * c);
    for y in 0..c {
        zs.extend_from_slice(z);
        seeds.extend((0..c).map(|j| if j == y { 1.0 } else { 0.0 } - p[j]));
    }
    let zs = Tensor::new(vec![c, z.len()], zs)?;
    let seeds = Tensor::new(vec![c, c], seeds)?;
    let scores = tail.vjp(&zs, &seeds)?;
    Ok((0..c)
        .map(|y| ScoreSample {
            class: y,
            weight: p[y],
            score: scores.row(y).to_vec(),
        })
        .collect())
}

/// Exact FIM by class enumeration; symmetric PSD `[a, a]`.
pub fn exact_fim(tail: &dyn LogitModel, z: &[f64]) -> Result<Tensor> {
    let a = z.len();
    let mut f = vec![0.0; a * a];
    for s in score_samples(tail, z)? {
        for i in 0..a {
            let wi = s.weight * s.score[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..a {
                f[i * a + j] += wi * s.score[j];
            }
        }
    }
    // exact symmetry
    for i in 0..a {
        for j in (i + 1)..a {
            let m = 0.5 * (f[i * a + j] + f[j * a + i]);
            f[i * a + j] = m;
            f[j * a + i] = m;
        }
    }
    Tensor::new(vec![a, a], f)
}

/// `E_y[d/dz log p(y; z)]`, zero under the regularity condition.
pub fn score_expectation(tail: &dyn LogitModel, z: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; z.len()];
    for s in score_samples(tail, z)? {
        for (o, g) in out.iter_mut().zip(&s.score) {
            *o += s.weight * g;
        }
    }
    Ok(out)
}

/// Perturbations and KL gradients at a block output, per sample and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub avg_dz: Vec<f64>,
    pub avg_grad: Vec<f64>,
    /// Per-sample gradients `[N, a]`.
    pub grads: Tensor,
    pub mean_kl: f64,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.avg_dz.iter().all(|&v| v == 0.0)
    }
}

/// Per-sample `L_KL(dz_i) = KL(p(z_i) || p(z_i + dz_i))` and its gradient in
/// `dz_i`; returns arithmetic means over the batch.
pub fn collect_perturbation(tail: &dyn LogitModel, z: &Tensor, dz: &Tensor) -> Result<Perturbation> {
    z.expect_same_shape(dz, "collect_perturbation")?;
    if !dz.is_finite() {
        return Err(Error::NonFinite("perturbation batch".into()));
    }
    let n = z.rows();
    let a = z.last_dim();
    let zq = z.add(dz)?;
    let lp = tail.logits(z)?;
    let lq = tail.logits(&zq)?;
    let c = lp.last_dim();
    let mut seed = vec![0.0; n * c];
    let (mut pp, mut pq) = (vec![0.0; c], vec![0.0; c]);
    let (mut lpp, mut lpq) = (vec![0.0; c], vec![0.0; c]);
    let mut kl_sum = 0.0;
    for r in 0..n {
        softmax_row(lp.row(r), &mut pp);
        softmax_row(lq.row(r), &mut pq);
        log_softmax_row(lp.row(r), &mut lpp);
        log_softmax_row(lq.row(r), &mut lpq);
        kl_sum += (0..c).map(|j| pp[j] * (lpp[j] - lpq[j])).sum::<f64>().max(0.0);
        for j in 0..c {
            seed[r * c + j] = pq[j] - pp[j];
        }
    }
    let grads = tail.vjp(&zq, &Tensor::new(vec![n, c], seed)?)?;
    let grads = grads.reshape(&[n, a])?;
    let mut avg_dz = vec![0.0; a];
    let mut avg_grad = vec![0.0; a];
    for r in 0..n {
        for j in 0..a {
            avg_dz[j] += dz.row(r)[j];
            avg_grad[j] += grads.row(r)[j];
        }
    }
    for v in avg_dz.iter_mut().chain(avg_grad.iter_mut()) {
        *v /= n as f64;
    }
    if avg_grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KL gradient".into()));
    }
    Ok(Perturbation {
        avg_dz,
        avg_grad,
        grads,
        mean_kl: kl_sum / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagEstimate {
    pub diag: Vec<f64>,
    /// Fraction of entries whose ratio was negative and clamped to zero.
    pub clamp_fraction: f64,
}

/// `diag_j = grad_j / dz_j`, zero where `|dz_j| < 1e-8 * max|dz|`, negative
/// ratios clamped to zero.
pub fn estimate_diag(avg_dz: &[f64], avg_grad: &[f64]) -> Result<DiagEstimate> {
    if avg_dz.len() != avg_grad.len() {
        return Err(Error::shape("estimate_diag: length mismatch"));
    }
    let max = avg_dz.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let eps = 1e-8 * max;
    let mut clamped = 0usize;
    let diag = avg_dz
        .iter()
        .zip(avg_grad)
        .map(|(&d, &g)| {
            if d == 0.0 || d.abs() < eps {
                return 0.0;
            }
            let r = g / d;
            if r < 0.0 {
                clamped += 1;
                0.0
            } else {
                r
            }
        })
        .collect();
    Ok(DiagEstimate {
        diag,
        clamp_fraction: if avg_dz.is_empty() {
            0.0
        } else {
            clamped as f64 / avg_dz.len() as f64
        },
    })
}

/// `u = grad / sqrt(grad^T dz)`; errors with [`Error::RankOneFallback`] when
/// the inner product is not positive.
pub fn rank1_factor(avg_dz: &[f64], avg_grad: &[f64]) -> Result<Vec<f64>> {
    if avg_dz.len() != avg_grad.len() {
        return Err(Error::shape("rank1_factor: length mismatch"));
    }
    let inner = dot(avg_grad, avg_dz);
    if !(inner > RANK1_MIN_INNER) {
        return Err(Error::RankOneFallback { inner });
    }
    let s = inner.sqrt();
    Ok(avg_grad.iter().map(|g| g / s).collect())
}

pub fn loss_rank1(sample_dz: &[f64], u: &[f64]) -> f64 {
    let p = dot(sample_dz, u);
    p * p
}

pub fn loss_diag(sample_dz: &[f64], diag: &[f64]) -> f64 {
    sample_dz.iter().zip(diag).map(|(d, f)| f * d * d).sum()
}

pub fn loss_brecq(sample_dz: &[f64], sample_grad: &[f64]) -> f64 {
    sample_dz
        .iter()
        .zip(sample_grad)
        .map(|(d, g)| g * g * d * d)
        .sum()
}

pub fn loss_dplr(sample_dz: &[f64], bank: &PerturbationBank, diag: &[f64], alpha: f64) -> f64 {
    alpha * loss_rankk(sample_dz, bank) + (1.0 - alpha) * loss_diag(sample_dz, diag)
}

pub fn loss_rankk(sample_dz: &[f64], bank: &PerturbationBank) -> f64 {
    let (a, c) = bank.sample_products(sample_dz);
    let k = bank.rank();
    let b = bank.gram_inv.data();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            total += a[i] * b[i * k + j] * c[j];
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    Full,
    ZeroColumn,
    NearDependence { residual_ratio: f64 },
    IllConditioned { condition: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AppendOutcome {
    Accepted { rank: usize },
    Rejected(RejectReason),
}

impl AppendOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, AppendOutcome::Accepted { .. })
    }
}

/// Stored perturbation columns `D [a, k]`, gradient columns `G [a, k]` and
/// the preprocessed inverse Gram matrix `B = (D^T D)^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBank {
    len: usize,
    target_rank: usize,
    dz: Vec<Vec<f64>>,
    grad: Vec<Vec<f64>>,
    gram_inv: Tensor,
}

fn gram(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let k = cols.len();
    DMatrix::from_fn(k, k, |i, j| dot(&cols[i], &cols[j]))
}

fn condition(g: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse Gram matrix by LU solve against the identity, with a small ridge
/// when the Gram matrix is ill-conditioned.
pub fn gram_inverse(cols: &[Vec<f64>]) -> Result<Tensor> {
    let k = cols.len();
    let mut g = gram(cols);
    if condition(&g) > BANK_MAX_CONDITION {
        let ridge = 1e-10 * g.trace() / k as f64;
        for i in 0..k {
            g[(i, i)] += ridge;
        }
    }
    let inv = g
        .lu()
        .solve(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::NonFinite("singular Gram matrix".into()))?;
    Tensor::new(vec![k, k], (0..k * k).map(|i| inv[(i / k, i % k)]).collect())
}

impl PerturbationBank {
    pub fn new(len: usize, target_rank: usize) -> Result<Self> {
        if len == 0 || target_rank == 0 {
            return Err(Error::invalid("bank needs positive length and rank"));
        }
        Ok(Self {
            len,
            target_rank,
            dz: Vec::new(),
            grad: Vec::new(),
            gram_inv: Tensor::zeros(&[1, 1]),
        })
    }

    pub fn rank(&self) -> usize {
        self.dz.len()
    }

    pub fn target_rank(&self) -> usize {
        self.target_rank
    }

    pub fn is_full(&self) -> bool {
        self.rank() >= self.target_rank
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.dz.is_empty()
    }

    pub fn dz_columns(&self) -> &[Vec<f64>] {
        &self.dz
    }

    pub fn grad_columns(&self) -> &[Vec<f64>] {
        &self.grad
    }

    pub fn gram_inv(&self) -> &Tensor {
        &self.gram_inv
    }

    /// Appends one `(dz, grad)` column pair unless it is (nearly) dependent
    /// on the stored columns or would make the Gram matrix ill-conditioned.
    pub fn append(&mut self, avg_dz: &[f64], avg_grad: &[f64]) -> Result<AppendOutcome> {
        if avg_dz.len() != self.len || avg_grad.len() != self.len {
            return Err(Error::shape(format!(
                "bank of length {} got columns of {} and {}",
                self.len,
                avg_dz.len(),
                avg_grad.len()
            )));
        }
        if self.is_full() {
            return Ok(AppendOutcome::Rejected(RejectReason::Full));
        }
        let norm = dot(avg_dz, avg_dz).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(AppendOutcome::Rejected(RejectReason::ZeroColumn));
        }
        if !self.is_empty() {
            // residual of the least-squares projection onto span(D)
            let c: Vec<f64> = self.dz.iter().map(|col| dot(col, avg_dz)).collect();
            let k = self.rank();
            let b = self.gram_inv.data();
            let coef: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| b[i * k + j] * c[j]).sum())
                .collect();
            let mut res = avg_dz.to_vec();
            for (col, w) in self.dz.iter().zip(&coef) {
                for (r, x) in res.iter_mut().zip(col) {
                    *r -= w * x;
                }
            }
            let ratio = dot(&res, &res).sqrt() / norm;
            if ratio < BANK_DEPENDENCE_TOL {
                return Ok(AppendOutcome::Rejected(RejectReason::NearDependence {
                    residual_ratio: ratio,
                }));
            }
        }
        let mut cols = self.dz.clone();
        cols.push(avg_dz.to_vec());
        let g = gram(&cols);
        let cond = condition(&g);
        if cond > BANK_MAX_CONDITION {
            return Ok(AppendOutcome::Rejected(RejectReason::IllConditioned {
                condition: cond,
            }));
        }
        let inv = gram_inverse(&cols)?;
        if gram_inverse_error(&g, &inv) > 1e-8 {
            return Ok(AppendOutcome::Rejected(RejectReason::IllConditioned {
                condition: cond,
            }));
        }
        self.dz = cols;
        self.grad.push(avg_grad.to_vec());
        self.gram_inv = inv;
        Ok(AppendOutcome::Accepted { rank: self.rank() })
    }

    /// `A_j = sample_dz . grad_j` and `C_j = dz_j . sample_dz`.
    pub fn sample_products(&self, sample_dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = self.grad.iter().map(|g| dot(sample_dz, g)).collect();
        let c = self.dz.iter().map(|d| dot(d, sample_dz)).collect();
        (a, c)
    }

    /// Dense `F_rank-k = G B D^T`, `[a, a]`.
    pub fn dense(&self) -> Tensor {
        let (a, k) = (self.len, self.rank());
        let mut out = Tensor::zeros(&[a, a]);
        if k == 0 {
            return out;
        }
        let b = self.gram_inv.data();
        // M = B D^T  [k, a]
        let mut m = vec![0.0; k * a];
        for i in 0..k {
            for j in 0..k {
                let bij = b[i * k + j];
                for (mv, dv) in m[i * a..(i + 1) * a].iter_mut().zip(&self.dz[j]) {
                    *mv += bij * dv;
                }
            }
        }
        let o = out.data_mut();
        for r in 0..a {
            for i in 0..k {
                let g = self.grad[i][r];
                if g == 0.0 {
                    continue;
                }
                for (ov, mv) in o[r * a..(r + 1) * a].iter_mut().zip(&m[i * a..(i + 1) * a]) {
                    *ov += g * mv;
                }
            }
        }
        out
    }

    /// `D^T G` as a `[k, k]` matrix (symmetric only when a symmetric factor
    /// `u u^T` could reproduce the bank).
    pub fn cross_products(&self) -> Tensor {
        let k = self.rank().max(1);
        Tensor::from_fn(&[k, k], |i| {
            if self.is_empty() {
                0.0
            } else {
                dot(&self.dz[i / k], &self.grad[i % k])
            }
        })
    }
}

fn gram_inverse_error(g: &DMatrix<f64>, inv: &Tensor) -> f64 {
    let k = g.nrows();
    let mut worst = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            let v: f64 = (0..k).map(|l| g[(i, l)] * inv.data()[l * k + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

/// Which curvature estimate a loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Brecq,
    Diag,
    Rank1,
    Rankk,
    Dplr,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Mse,
        LossKind::Brecq,
        LossKind::Diag,
        LossKind::Rank1,
        LossKind::Rankk,
        LossKind::Dplr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Brecq => "brecq",
            LossKind::Diag => "diag",
            LossKind::Rank1 => "rank1",
            LossKind::Rankk => "rankk",
            LossKind::Dplr => "dplr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the loss needs KL-gradient probes through the network tail.
    pub fn needs_probe(self) -> bool {
        !matches!(self, LossKind::Mse)
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, LossKind::Rankk | LossKind::Dplr)
    }
}

/// A curvature estimate `F` defining the quadratic loss `dz^T F dz`.
#[derive(Debug, Clone, PartialEq)]
pub enum FimEstimate {
    Diag(Vec<f64>),
    Rank1(Vec<f64>),
    RankK(PerturbationBank),
    Dplr {
        bank: PerturbationBank,
        diag: Vec<f64>,
        alpha: f64,
    },
    /// Mean squared per-sample gradient.
    BrecqDiag(Vec<f64>),
}

impl FimEstimate {
    pub fn dplr(bank: PerturbationBank, diag: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} not in [0, 1]")));
        }
        Ok(FimEstimate::Dplr { bank, diag, alpha })
    }

    pub fn len(&self) -> usize {
        match self {
            FimEstimate::Diag(d) | FimEstimate::Rank1(d) | FimEstimate::BrecqDiag(d) => d.len(),
            FimEstimate::RankK(b) | FimEstimate::Dplr { bank: b, .. } => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `dz^T F dz`.
    pub fn quadratic(&self, dz: &[f64]) -> f64 {
        match self {
            FimEstimate::Diag(d) | FimEstimate::BrecqDiag(d) => loss_diag(dz, d),
            FimEstimate::Rank1(u) => loss_rank1(dz, u),
            FimEstimate::RankK(b) => loss_rankk(dz, b),
            FimEstimate::Dplr { bank, diag, alpha } => loss_dplr(dz, bank, diag, *alpha),
        }
    }

    /// Gradient of `dz^T F dz` in `dz`, i.e. `(F + F^T) dz`.
    pub fn quadratic_grad(&self, dz: &[f64]) -> Vec<f64> {
        match self {
            FimEstimate::Diag(d) | FimEstimate::BrecqDiag(d) => {
                dz.iter().zip(d).map(|(x, f)| 2.0 * f * x).collect()
            }
            FimEstimate::Rank1(u) => {
                let p = 2.0 * dot(dz, u);
                u.iter().map(|x| p * x).collect()
            }
            FimEstimate::RankK(b) => rankk_grad(dz, b),
            FimEstimate::Dplr { bank, diag, alpha } => {
                let rk = rankk_grad(dz, bank);
                rk.iter()
                    .zip(dz.iter().zip(diag))
                    .map(|(r, (x, f))| alpha * r + (1.0 - alpha) * 2.0 * f * x)
                    .collect()
            }
        }
    }

    /// Dense `[a, a]` matrix.
    pub fn dense(&self) -> Tensor {
        let a = self.len();
        match self {
            FimEstimate::Diag(d) | FimEstimate::BrecqDiag(d) => {
                Tensor::from_fn(&[a, a], |i| if i / a == i % a { d[i / a] } else { 0.0 })
            }
            FimEstimate::Rank1(u) => Tensor::from_fn(&[a, a], |i| u[i / a] * u[i % a]),
            FimEstimate::RankK(b) => b.dense(),
            FimEstimate::Dplr { bank, diag, alpha } => {
                let mut m = bank.dense().scale(*alpha);
                for i in 0..a {
                    m.data_mut()[i * a + i] += (1.0 - alpha) * diag[i];
                }
                m
            }
        }
    }
}

/// `G B C + D B^T A` with `A`, `C` from [`PerturbationBank::sample_products`].
fn rankk_grad(dz: &[f64], bank: &PerturbationBank) -> Vec<f64> {
    let k = bank.rank();
    let mut out = vec![0.0; dz.len()];
    if k == 0 {
        return out;
    }
    let (a, c) = bank.sample_products(dz);
    let b = bank.gram_inv.data();
    for i in 0..k {
        let bc: f64 = (0..k).map(|j| b[i * k + j] * c[j]).sum();
        let bta: f64 = (0..k).map(|j| b[j * k + i] * a[j]).sum();
        for (o, (g, d)) in out.iter_mut().zip(bank.grad[i].iter().zip(&bank.dz[i])) {
            *o += g * bc + d * bta;
        }
    }
    out
}

/// How a flat block output of length `tokens * dim` is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub tokens: usize,
    pub dim: usize,
    pub class_token: Option<usize>,
}

/// The `[dim, dim]` sub-block of an `[a, a]` curvature matrix belonging to
/// the class token's coordinates.
pub fn class_token_fim_heatmap(matrix: &Tensor, layout: TokenLayout) -> Result<Tensor> {
    let cls = layout
        .class_token
        .ok_or_else(|| Error::invalid("token layout has no class token"))?;
    let a = layout.tokens * layout.dim;
    if matrix.shape() != [a, a] {
        return Err(Error::shape(format!(
            "heatmap source {:?} does not match layout {a}x{a}",
            matrix.shape()
        )));
    }
    if cls >= layout.tokens {
        return Err(Error::invalid(format!("class token {cls} out of range")));
    }
    let off = cls * layout.dim;
    matrix.block(off, off, layout.dim, layout.dim)
}

/// Writes a heatmap as CSV with a `# rows=.. cols=.. token=class` header.
pub fn write_heatmap_csv(matrix: &Tensor, mut out: impl std::io::Write) -> Result<()> {
    let (r, c) = (matrix.shape()[0], matrix.last_dim());
    writeln!(out, "# rows={r} cols={c} token=class")?;
    for i in 0..r {
        let line: Vec<String> = matrix.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_from(cols: &[(&[f64], &[f64])]) -> PerturbationBank {
        let mut b = PerturbationBank::new(cols[0].0.len(), 8).unwrap();
        for (d, g) in cols {
            assert!(b.append(d, g).unwrap().accepted());
        }
        b
    }

    #[test]
    fn identity_tail_fim_at_origin() {
        let f = exact_fim(&IdentityTail { classes: 2 }, &[0.0, 0.0]).unwrap();
        let expect = [0.25, -0.25, -0.25, 0.25];
        for (a, b) in f.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_tail_fim_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[6], 2.0, &mut rng);
        let f = exact_fim(&IdentityTail { classes: 6 }, z.data()).unwrap();
        for r in 0..6 {
            assert!(f.row(r).iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_fim_vanishes() {
        let f = exact_fim(&IdentityTail { classes: 2 }, &[20.0, -20.0]).unwrap();
        assert!(f.max_abs() <= 1e-7);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(exact_fim(&IdentityTail { classes: 2 }, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn score_expectation_vanishes() {
        let e = score_expectation(&IdentityTail { classes: 2 }, &[0.0, 0.0]).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[10], 1.5, &mut rng);
        let e = score_expectation(&IdentityTail { classes: 10 }, z.data()).unwrap();
        assert!(e.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn score_weights_sum_to_one() {
        let s = score_samples(&IdentityTail { classes: 4 }, &[0.1, 2.0, -1.0, 0.0]).unwrap();
        let total: f64 = s.iter().map(|x| x.weight).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_perturbation_gives_zero_gradient() {
        let z = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 1.0, 0.0, 2.0]).unwrap();
        let dz = Tensor::zeros(&[2, 3]);
        let p = collect_perturbation(&IdentityTail { classes: 3 }, &z, &dz).unwrap();
        assert!(p.avg_grad.iter().all(|&v| v == 0.0));
        assert!(p.is_zero());
    }

    #[test]
    fn small_perturbation_gradient_is_fim_times_dz() {
        let eps = 1e-3;
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let dz = Tensor::new(vec![1, 2], vec![eps, -eps]).unwrap();
        let p = collect_perturbation(&IdentityTail { classes: 2 }, &z, &dz).unwrap();
        assert!((p.avg_grad[0] - 0.5 * eps).abs() < eps * eps);
        assert!((p.avg_grad[1] + 0.5 * eps).abs() < eps * eps);
    }

    #[test]
    fn perturbation_mean_convention() {
        let z = Tensor::zeros(&[2, 2]);
        let dz = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = collect_perturbation(&IdentityTail { classes: 2 }, &z, &dz).unwrap();
        assert_eq!(p.avg_dz, vec![0.5, 0.5]);
    }

    #[test]
    fn diag_examples() {
        assert_eq!(estimate_diag(&[1.0, 2.0], &[2.0, 6.0]).unwrap().diag, vec![2.0, 3.0]);
        assert_eq!(estimate_diag(&[0.0, 1.0], &[1.0, 1.0]).unwrap().diag, vec![0.0, 1.0]);
        let e = estimate_diag(&[1.0, 1.0], &[-1.0, 2.0]).unwrap();
        assert_eq!(e.diag, vec![0.0, 2.0]);
        assert_eq!(e.clamp_fraction, 0.5);
    }

    #[test]
    fn diag_reproduces_defining_quadratic_form() {
        let d = estimate_diag(&[1.0, 2.0], &[2.0, 6.0]).unwrap();
        assert_eq!(loss_diag(&[1.0, 2.0], &d.diag), 14.0);
        assert_eq!(loss_diag(&[1.0, 1.0], &[2.0, 3.0]), 5.0);
        assert_eq!(loss_diag(&[0.0, 0.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn rank1_examples() {
        let u = rank1_factor(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!((u[0] - 2f64.sqrt()).abs() < 1e-15 && u[1] == 0.0);
        assert!((loss_rank1(&[1.0, 0.0], &u) - 2.0).abs() < 1e-12);
        assert_eq!(loss_rank1(&[0.0, 1.0], &u), 0.0);
        assert_eq!(loss_rank1(&[0.0, 0.0], &u), 0.0);

        let u = rank1_factor(&[1.0, 1.0], &[3.0, 3.0]).unwrap();
        let s6 = 6f64.sqrt();
        assert!((u[0] - 3.0 / s6).abs() < 1e-15 && (u[1] - 3.0 / s6).abs() < 1e-15);

        assert!(matches!(
            rank1_factor(&[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::RankOneFallback { .. })
        ));
    }

    #[test]
    fn rank1_reproduces_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dz = Tensor::randn(&[7], 1.0, &mut rng);
        let g = dz.map(|v| 0.3 * v + 0.01);
        let u = rank1_factor(dz.data(), g.data()).unwrap();
        let udz = dot(&u, dz.data());
        for (ui, gi) in u.iter().zip(g.data()) {
            assert!((ui * udz - gi).abs() <= 1e-10 * gi.abs().max(1e-300));
        }
    }

    #[test]
    fn bank_append_rules() {
        let mut b = PerturbationBank::new(2, 3).unwrap();
        assert!(b.append(&[2.0, 0.0], &[1.0, 0.0]).unwrap().accepted());
        assert_eq!(b.rank(), 1);
        assert!((b.gram_inv().data()[0] - 0.25).abs() < 1e-15);

        let mut b = PerturbationBank::new(2, 3).unwrap();
        b.append(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        let out = b.append(&[1.0 + 1e-9, 0.0], &[5.0, 5.0]).unwrap();
        assert!(matches!(
            out,
            AppendOutcome::Rejected(RejectReason::NearDependence { .. })
        ));
        assert_eq!(b.rank(), 1);

        assert!(b.append(&[0.0, 1.0], &[0.0, 1.0]).unwrap().accepted());
        assert_eq!(b.gram_inv().data(), &[1.0, 0.0, 0.0, 1.0]);

        let mut full = PerturbationBank::new(2, 1).unwrap();
        full.append(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(
            full.append(&[0.0, 1.0], &[1.0, 0.0]).unwrap(),
            AppendOutcome::Rejected(RejectReason::Full)
        );
        assert_eq!(
            PerturbationBank::new(2, 2).unwrap().append(&[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            AppendOutcome::Rejected(RejectReason::ZeroColumn)
        );
    }

    #[test]
    fn rankk_examples() {
        let b = bank_from(&[(&[1.0, 0.0], &[2.0, 0.0])]);
        assert!((loss_rankk(&[1.0, 0.0], &b) - 2.0).abs() < 1e-15);
        assert_eq!(loss_rankk(&[0.0, 1.0], &b), 0.0);
    }

    #[test]
    fn dplr_endpoints_and_midpoint() {
        let b = bank_from(&[(&[1.0, 0.0], &[2.0, 0.0])]);
        let diag = [0.7, 1.3];
        let s = [1.0, 0.0];
        assert_eq!(loss_dplr(&s, &b, &diag, 0.0), loss_diag(&s, &diag));
        assert_eq!(loss_dplr(&s, &b, &diag, 1.0), loss_rankk(&s, &b));
        let mid = 0.5 * 2.0 + 0.5 * loss_diag(&s, &diag);
        assert!((loss_dplr(&s, &b, &diag, 0.5) - mid).abs() < 1e-15);
    }

    #[test]
    fn brecq_examples() {
        assert_eq!(loss_brecq(&[1.0, 1.0], &[2.0, 3.0]), 13.0);
        assert_eq!(loss_brecq(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn brecq_misestimates_two_class_curvature() {
        let eps = 1e-2;
        let z = Tensor::zeros(&[1, 2]);
        let dz = Tensor::new(vec![1, 2], vec![eps, -eps]).unwrap();
        let p = collect_perturbation(&IdentityTail { classes: 2 }, &z, &dz).unwrap();
        let brecq = loss_brecq(&p.avg_dz, &p.avg_grad);
        let truth = loss_diag(&p.avg_dz, &[0.25, 0.25]);
        assert!(truth > 2.0 * brecq, "truth {truth} brecq {brecq}");
    }

    #[test]
    fn quadratic_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = 6;
        let mut bank = PerturbationBank::new(a, 3).unwrap();
        for _ in 0..3 {
            let d = Tensor::randn(&[a], 1.0, &mut rng);
            let g = Tensor::randn(&[a], 1.0, &mut rng);
            bank.append(d.data(), g.data()).unwrap();
        }
        let diag: Vec<f64> = (0..a).map(|i| 0.1 * i as f64).collect();
        let u = Tensor::randn(&[a], 1.0, &mut rng).into_data();
        let ests = [
            FimEstimate::Diag(diag.clone()),
            FimEstimate::Rank1(u),
            FimEstimate::RankK(bank.clone()),
            FimEstimate::dplr(bank, diag, 0.3).unwrap(),
        ];
        let x = Tensor::randn(&[a], 1.0, &mut rng);
        for e in &ests {
            let g = e.quadratic_grad(x.data());
            let num =
                crate::oracle::central_gradient(&|t: &Tensor| e.quadratic(t.data()), &x, 1e-5)
                    .unwrap();
            for (p, q) in g.iter().zip(num.data()) {
                assert!((p - q).abs() < 1e-6, "{p} vs {q}");
            }
            // dense agrees with the factored quadratic form
            let m = e.dense();
            let mx = m.matmul(&x.reshape(&[a, 1]).unwrap()).unwrap();
            assert!((x.dot(&mx.reshape(&[a]).unwrap()) - e.quadratic(x.data())).abs() < 1e-10);
        }
    }

    #[test]
    fn heatmap_extraction() {
        let m = Tensor::from_fn(&[6, 6], |i| i as f64);
        let whole = class_token_fim_heatmap(
            &m,
            TokenLayout {
                tokens: 1,
                dim: 6,
                class_token: Some(0),
            },
        )
        .unwrap();
        assert_eq!(whole, m);
        let lay = TokenLayout {
            tokens: 3,
            dim: 2,
            class_token: Some(0),
        };
        let d = FimEstimate::Diag(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).dense();
        let h = class_token_fim_heatmap(&d, lay).unwrap();
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 2.0]);
        assert!(class_token_fim_heatmap(
            &d,
            TokenLayout {
                class_token: None,
                ..lay
            }
        )
        .is_err());

        let mut buf = Vec::new();
        write_heatmap_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# rows=2 cols=2 token=class\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
