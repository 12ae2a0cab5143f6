//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset: `cargo test --test acceptance -- 3 4`.

use fisherq::fim::{
    collect_perturbation, exact_fim, loss_dplr, score_expectation, IdentityTail, LogitModel,
    LossKind, PerturbationBank,
};
use fisherq::oracle::finite_diff_hessian;
use fisherq::quant::{
    act_quant_scalar, calibrate_weight, quantize_weight, rectified_sigmoid, CalibMethod, QuantSpec,
};
use fisherq::recon::{quantize_model, QuantizeConfig, ReconConfig};
use fisherq::zoo::{
    evaluate_top1, gen_dataset, pretrain, Classifier, Dataset, PretrainConfig, SyntheticDataSpec,
    ToyViT, ToyViTConfig,
};
use fisherq::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Trained {
    model: ToyViT,
    data: Dataset,
}

struct Ctx {
    trained: Option<Trained>,
}

impl Ctx {
    fn trained(&mut self) -> Result<&Trained> {
        if self.trained.is_none() {
            let start = Instant::now();
            let data = gen_dataset(&SyntheticDataSpec::default())?;
            let (model, meta) = pretrain(ToyViTConfig::default(), &data, &PretrainConfig::default(), 0)?;
            println!(
                "setup: pretrained toy ViT, val top-1 {:.4} ({:.1}s, not counted below)",
                meta.final_accuracy,
                start.elapsed().as_secs_f64()
            );
            self.trained = Some(Trained { model, data });
        }
        Ok(self.trained.as_ref().unwrap())
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Final-block outputs of the first `n` validation samples, `[n, a]`.
fn final_block_z(t: &Trained, n: usize) -> Result<Tensor> {
    let last = t.model.config.blocks - 1;
    let x = t.data.val.take(n)?.inputs;
    let z = t.model.block_output(&x, last)?;
    z.reshape(&[n, t.model.config.block_output_len()])
}

fn kl_and_grad(tail: &dyn LogitModel, z: &[f64], dz: &[f64]) -> Result<(f64, Vec<f64>)> {
    let a = z.len();
    let p = collect_perturbation(
        tail,
        &Tensor::new(vec![1, a], z.to_vec())?,
        &Tensor::new(vec![1, a], dz.to_vec())?,
    )?;
    Ok((p.mean_kl, p.avg_grad))
}

// Quadratic KL expansion on the trained model.
fn c1(ctx: &mut Ctx) -> Result<Verdict> {
    let t = ctx.trained()?;
    let tail = t.model.tail(t.model.config.blocks - 1);
    let z = final_block_z(t, 10)?;
    let (mut worst_rel, mut worst_shrink) = (0.0_f64, f64::INFINITY);
    for seed in 0..10 {
        let zi = z.row(seed);
        let f = exact_fim(&tail, zi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let dir = randn(&mut rng, &[zi.len()], 1.0);
        let dz = dir.scale(1e-3 * norm(zi) / dir.norm());
        let residual = |dz: &Tensor| -> Result<(f64, f64)> {
            let (kl, _) = kl_and_grad(&tail, zi, dz.data())?;
            let quad = 0.5 * dz.dot(&Tensor::vector(matvec(&f, dz.data())));
            Ok((kl, (kl - quad).abs()))
        };
        let (kl, r1) = residual(&dz)?;
        let (_, r2) = residual(&dz.scale(0.5))?;
        worst_rel = worst_rel.max(r1 / kl);
        worst_shrink = worst_shrink.min(r1 / r2);
    }
    verdict(
        worst_rel <= 0.05 && worst_shrink >= 6.0,
        format!("max relative residual {worst_rel:.2e} (<= 5e-2), min halving shrink {worst_shrink:.2} (>= 6)"),
    )
}

// KL gradient equals F dz to first order.
fn c2(ctx: &mut Ctx) -> Result<Verdict> {
    let t = ctx.trained()?;
    let tail = t.model.tail(t.model.config.blocks - 1);
    let z = final_block_z(t, 10)?;
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        let zi = z.row(seed);
        let f = exact_fim(&tail, zi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed as u64);
        let dir = randn(&mut rng, &[zi.len()], 1.0);
        let dz = dir.scale(1e-3 * norm(zi) / dir.norm());
        let (_, g) = kl_and_grad(&tail, zi, dz.data())?;
        let fdz = matvec(&f, dz.data());
        let diff: Vec<f64> = g.iter().zip(&fdz).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&fdz));
    }
    verdict(worst <= 0.05, format!("max relative error {worst:.2e} (<= 5e-2)"))
}

// Score has zero mean and its second moment is the negative expected Hessian.
fn c3(_: &mut Ctx) -> Result<Verdict> {
    let classes = 5;
    let tail = IdentityTail { classes };
    let (mut worst_mean, mut worst_excess) = (0.0_f64, 0.0_f64);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let z = randn(&mut rng, &[classes], 2.0);
        let mean = score_expectation(&tail, z.data())?;
        worst_mean = mean.iter().fold(worst_mean, |m, v| m.max(v.abs()));
        let f = exact_fim(&tail, z.data())?;
        let p: Vec<f64> = log_softmax(z.data()).iter().map(|l| l.exp()).collect();
        let mut neg_h = Tensor::zeros(&[classes, classes]);
        for (y, &py) in p.iter().enumerate() {
            let h = finite_diff_hessian(&|x: &Tensor| log_softmax(x.data())[y], &z, 1e-4)?;
            neg_h = neg_h.sub(&h.scale(py))?;
        }
        for (a, b) in f.data().iter().zip(neg_h.data()) {
            let tol = (1e-5_f64).max(0.01 * a.abs());
            worst_excess = worst_excess.max((a - b).abs() / tol);
        }
    }
    verdict(
        worst_mean <= 1e-10 && worst_excess <= 1.0,
        format!(
            "max |E[score]| {worst_mean:.2e} (<= 1e-10), worst FIM/Hessian gap {worst_excess:.3} of tolerance (<= 1)"
        ),
    )
}

// The rank-k estimate maps every stored perturbation to its gradient.
fn c4(_: &mut Ctx) -> Result<Verdict> {
    let a = 40;
    let mut worst = 0.0_f64;
    for k in [1usize, 3, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k as u64);
        let m = randn(&mut rng, &[a, a], 1.0);
        let mut bank = PerturbationBank::new(a, k)?;
        while bank.rank() < k {
            let dz = randn(&mut rng, &[a], 1.0);
            let grad = matvec(&m, dz.data());
            assert!(bank.append(dz.data(), &grad)?.accepted());
        }
        let f = bank.dense();
        for (dz, g) in bank.dz_columns().iter().zip(bank.grad_columns()) {
            let fd = matvec(&f, dz);
            let diff: Vec<f64> = fd.iter().zip(g).map(|(x, y)| x - y).collect();
            worst = worst.max(norm(&diff) / norm(g));
        }
    }
    verdict(worst <= 1e-8, format!("max relative column error {worst:.2e} (<= 1e-8) for k in {{1, 3, 5}}"))
}

// Cross products of real KL perturbation banks are not symmetric.
fn c5(_: &mut Ctx) -> Result<Verdict> {
    let classes = 10;
    let tail = IdentityTail { classes };
    let mut asymmetric = 0;
    let mut smallest = f64::INFINITY;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let z = randn(&mut rng, &[classes], 2.0);
        let mut bank = PerturbationBank::new(classes, 2)?;
        while bank.rank() < 2 {
            let dz = randn(&mut rng, &[classes], 1.0);
            let (_, g) = kl_and_grad(&tail, z.data(), dz.data())?;
            bank.append(dz.data(), &g)?;
        }
        let x = bank.cross_products();
        let asym = (x.get2(0, 1) - x.get2(1, 0)).abs();
        smallest = smallest.min(asym);
        if asym > 1e-6 {
            asymmetric += 1;
        }
    }
    verdict(
        asymmetric >= 9,
        format!("{asymmetric}/10 banks with |D^T G - G^T D| > 1e-6 (>= 9), smallest {smallest:.2e}"),
    )
}

fn recon_base() -> ReconConfig {
    ReconConfig {
        max_iter: 300,
        interval: 20,
        lr_scale: 1e-3,
        ..Default::default()
    }
}

fn accuracy(t: &Trained, bits: u32, cfg: &ReconConfig, recon_samples: usize) -> Result<f64> {
    let qcfg = QuantizeConfig {
        w_bits: bits,
        a_bits: bits,
        ..Default::default()
    };
    let calib = t.data.calib.take(recon_samples)?.inputs;
    let out = quantize_model(&t.model, &calib, &qcfg, cfg)?;
    evaluate_top1(&out.model, &t.data.val)
}

// DPLR is affine in alpha and its endpoints reproduce diag and rank-k.
fn c6(ctx: &mut Ctx) -> Result<Verdict> {
    let a = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let m = randn(&mut rng, &[a, a], 1.0);
    let mut bank = PerturbationBank::new(a, 4)?;
    while bank.rank() < 4 {
        let dz = randn(&mut rng, &[a], 1.0);
        bank.append(dz.data(), &matvec(&m, dz.data()))?;
    }
    let diag: Vec<f64> = (0..a).map(|_| rng.gen_range(0.0..2.0)).collect();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let dz = randn(&mut rng, &[a], 1.0);
        let l0 = loss_dplr(dz.data(), &bank, &diag, 0.0);
        let l1 = loss_dplr(dz.data(), &bank, &diag, 1.0);
        for alpha in [0.25, 0.5, rng.gen_range(0.0..1.0)] {
            let l = loss_dplr(dz.data(), &bank, &diag, alpha);
            let line = (1.0 - alpha) * l0 + alpha * l1;
            worst = worst.max((l - line).abs() / l.abs().max(1.0));
        }
    }

    let t = ctx.trained()?;
    let base = ReconConfig {
        max_iter: 100,
        ..recon_base()
    };
    let run = |kind: LossKind, alpha: f64| {
        accuracy(t, 3, &ReconConfig { loss_kind: kind, alpha, ..base }, 128)
    };
    let (d0, diag_acc) = (run(LossKind::Dplr, 0.0)?, run(LossKind::Diag, 0.5)?);
    let (d1, rankk_acc) = (run(LossKind::Dplr, 1.0)?, run(LossKind::Rankk, 0.5)?);
    let same = |x: f64, y: f64| format!("{x:.4}") == format!("{y:.4}");
    verdict(
        worst <= 1e-12 && same(d0, diag_acc) && same(d1, rankk_acc),
        format!(
            "affinity error {worst:.1e} (<= 1e-12); alpha=0 {d0:.4} vs diag {diag_acc:.4}; alpha=1 {d1:.4} vs rankk {rankk_acc:.4}"
        ),
    )
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// Loss ablation at 3 and 4 bits.
fn c7(ctx: &mut Ctx) -> Result<Verdict> {
    let t = ctx.trained()?;
    let seeds = 0..5u64;
    let mut table = Vec::new();
    let mut lines = Vec::new();
    for (bits, kinds) in [
        (3, vec![LossKind::Mse, LossKind::Diag, LossKind::Dplr]),
        (4, vec![LossKind::Mse, LossKind::Diag, LossKind::Rank1, LossKind::Rankk, LossKind::Dplr]),
    ] {
        for kind in kinds {
            let accs = seeds
                .clone()
                .map(|seed| accuracy(t, bits, &ReconConfig { loss_kind: kind, seed, ..recon_base() }, 128))
                .collect::<Result<Vec<_>>>()?;
            let m = 100.0 * mean(&accs);
            lines.push(format!("W{bits}A{bits} {} {m:.2}", kind.name()));
            table.push((bits, kind, m));
        }
    }
    let get = |bits: u32, kind: LossKind| {
        table.iter().find(|(b, k, _)| *b == bits && *k == kind).unwrap().2
    };
    let w3 = get(3, LossKind::Dplr) >= get(3, LossKind::Diag) - 0.5
        && get(3, LossKind::Dplr) > get(3, LossKind::Mse) + 1.0;
    let fim4: Vec<f64> = table
        .iter()
        .filter(|(b, k, _)| *b == 4 && *k != LossKind::Mse)
        .map(|x| x.2)
        .collect();
    let (lo, hi) = fim4
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let w4 = hi - lo <= 2.0 && lo >= get(4, LossKind::Mse) - 0.5;
    verdict(
        w3 && w4,
        format!(
            "3-bit ordering {} ; 4-bit spread {:.2} pt, min FIM {lo:.2} vs MSE {:.2} {} ; [{}]",
            if w3 { "ok" } else { "violated" },
            hi - lo,
            get(4, LossKind::Mse),
            if w4 { "ok" } else { "violated" },
            lines.join(", ")
        ),
    )
}

// Rank-append iterations and final rank follow the progressive schedule.
fn c8(ctx: &mut Ctx) -> Result<Verdict> {
    let t = ctx.trained()?;
    let mut checked = 0;
    let mut problems = Vec::new();
    for (rank, interval, max_iter) in [(3, 5, 30), (8, 7, 40), (4, 10, 10)] {
        let cfg = ReconConfig {
            loss_kind: LossKind::Dplr,
            rank,
            interval,
            max_iter,
            lr_scale: 1e-3,
            ..Default::default()
        };
        let qcfg = QuantizeConfig {
            w_bits: 3,
            a_bits: 3,
            ..Default::default()
        };
        let out = quantize_model(&t.model, &t.data.calib.inputs, &qcfg, &cfg)?;
        for (report, events) in out.reports.iter().zip(&out.rank_events) {
            checked += 1;
            let first = &events[0];
            let mut current = first.rank;
            let mut expected = Vec::new();
            let mut it = interval;
            while it < max_iter && current < rank {
                let Some(e) = events.iter().find(|e| e.iteration == it) else { break };
                expected.push(it);
                current = e.rank;
                it += interval;
            }
            let logged: Vec<usize> = events[1..].iter().map(|e| e.iteration).collect();
            let accepted = events.iter().filter(|e| e.outcome == "accepted").count();
            let want_rank = rank.min(1 + (max_iter - 1) / interval).min(accepted);
            let full_prefix = it >= max_iter || current >= rank;
            if first.iteration != 0 || logged != expected || !full_prefix || report.rank_reached != want_rank {
                problems.push(format!(
                    "r={rank} x={interval} T={max_iter} block {}: logged {logged:?}, rank {} vs {want_rank}",
                    report.block, report.rank_reached
                ));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{checked} block schedules on 3 configs match")
        } else {
            problems.join("; ")
        },
    )
}

// Quantizer round trip, rounding gate range, and lossless 32-bit models.
fn c9(ctx: &mut Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut worst_act = 0.0_f64;
    for _ in 0..10_000 {
        let bits = rng.gen_range(2..=8);
        let qmax = ((1u64 << bits) - 1) as f64;
        let s = rng.gen_range(0.01..1.0);
        let zp = rng.gen_range(0..=qmax as u64) as f64;
        let x = rng.gen_range(-zp * s..=(qmax - zp) * s);
        worst_act = worst_act.max((x - act_quant_scalar(x, s, zp, qmax)).abs() / (0.5 * s));
    }
    let w = randn(&mut rng, &[100, 100], 0.3);
    let spec = QuantSpec::weight(4);
    let (state, _) = calibrate_weight(&spec, &w, CalibMethod::MinMax)?;
    let wq = quantize_weight(&w, &state, &spec, false)?;
    let mut worst_w = 0.0_f64;
    for (i, (a, b)) in w.data().iter().zip(wq.data()).enumerate() {
        worst_w = worst_w.max((a - b).abs() / (0.5 * state.scales[i % 100]));
    }
    let h_ok = (0..10_000).all(|_| {
        let h = rectified_sigmoid(rng.gen_range(-50.0..50.0));
        (0.0..=1.0).contains(&h)
    });

    let t = ctx.trained()?;
    let qcfg = QuantizeConfig {
        w_bits: 32,
        a_bits: 32,
        ..Default::default()
    };
    let cfg = ReconConfig {
        loss_kind: LossKind::Mse,
        max_iter: 20,
        ..Default::default()
    };
    let out = quantize_model(&t.model, &t.data.calib.inputs, &qcfg, &cfg)?;
    let x = t.data.val.inputs.clone();
    let (fp, q) = (t.model.logits(&x)?, out.model.logits(&x)?);
    let identical = fp.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let tol = 1.0 + 1e-9;
    verdict(
        worst_act <= tol && worst_w <= tol && h_ok && identical,
        format!(
            "activation error {worst_act:.4} s/2, weight error {worst_w:.4} s/2 (<= 1), h in [0,1]: {h_ok}, 32-bit logits bit-identical: {identical}"
        ),
    )
}

// One probe sample suffices; fewer reconstruction samples hurt more.
fn c10(ctx: &mut Ctx) -> Result<Verdict> {
    let t = ctx.trained()?;
    let avg = |fim: usize, recon: usize| -> Result<f64> {
        let accs = (0..3u64)
            .map(|seed| {
                let cfg = ReconConfig {
                    loss_kind: LossKind::Dplr,
                    fim_samples: Some(fim),
                    seed,
                    ..recon_base()
                };
                accuracy(t, 3, &cfg, recon)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(100.0 * mean(&accs))
    };
    let full = avg(128, 128)?;
    let one = avg(1, 128)?;
    let small = avg(16, 16)?;
    let probe_shift = (full - one).abs();
    let recon_drop = full - small;
    verdict(
        probe_shift <= 2.0 && recon_drop > probe_shift,
        format!(
            "W3A3 DPLR: probes 128 {full:.2}, probes 1 {one:.2} (shift {probe_shift:.2} <= 2); recon set 16 {small:.2} (drop {recon_drop:.2} > shift)"
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Result<Verdict>;

fn main() {
    let criteria: [(usize, &str, Criterion, Option<f64>); 10] = [
        (1, "KL quadratic expansion", c1, Some(30.0)),
        (2, "KL gradient identity", c2, Some(30.0)),
        (3, "score mean and negative expected Hessian", c3, Some(10.0)),
        (4, "rank-k pseudo-inverse consistency", c4, Some(5.0)),
        (5, "cross-product asymmetry", c5, Some(5.0)),
        (6, "DPLR affinity and endpoints", c6, None),
        (7, "loss ablation at W3A3 and W4A4", c7, Some(600.0)),
        (8, "progressive rank schedule", c8, None),
        (9, "quantizer properties", c9, None),
        (10, "probe and reconstruction sample sizes", c10, None),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx { trained: None };
    let mut failed = 0;
    for (n, name, f, limit) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        if n != 3 && n != 4 && n != 5 {
            // shared setup is timed separately
            if let Err(e) = ctx.trained() {
                println!("criterion {n} ({name}): FAIL setup error: {e}");
                failed += 1;
                continue;
            }
        }
        let start = Instant::now();
        let result = f(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.map_or(true, |l| secs < l);
        let budget = limit.map_or(String::new(), |l| format!(", limit {l:.0}s"));
        match result {
            Ok(v) if v.pass && in_time => {
                println!("criterion {n} ({name}): PASS [{secs:.1}s{budget}] {}", v.detail)
            }
            Ok(v) => {
                failed += 1;
                let why = if v.pass { "over time budget; " } else { "" };
                println!("criterion {n} ({name}): FAIL [{secs:.1}s{budget}] {why}{}", v.detail)
            }
            Err(e) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s{budget}] error: {e}")
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
