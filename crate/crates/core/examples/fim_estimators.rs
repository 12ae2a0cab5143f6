//! Compares the curvature estimators against the exact Fisher information
//! of a toy ViT's last block: how well each quadratic form `dz' F dz`
//! tracks the exact one on fresh perturbations.
//!
//! cargo run --release --example fim_estimators

use fisherq::fim::{
    collect_perturbation, estimate_diag, exact_fim, rank1_factor, FimEstimate, LogitModel,
    PerturbationBank,
};
use fisherq::zoo::{gen_dataset, pretrain, PretrainConfig, SyntheticDataSpec, ToyViTConfig};
use fisherq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fisherq::Result<()> {
    let data = gen_dataset(&SyntheticDataSpec::default())?;
    let cfg = PretrainConfig { epochs: 10, ..Default::default() };
    let (model, meta) = pretrain(ToyViTConfig::default(), &data, &cfg, 0)?;
    println!("toy ViT trained to {:.3} val top-1", meta.final_accuracy);

    let last = model.config.blocks - 1;
    let tail = model.tail(last);
    let n = 32;
    let a = tail.input_len();
    let z = model.block_output(&data.calib.take(n)?.inputs, last)?.reshape(&[n, a])?;
    let mut exact = Tensor::zeros(&[a, a]);
    for r in 0..n {
        exact = exact.add(&exact_fim(&tail, z.row(r))?.scale(1.0 / n as f64))?;
    }

    // probes: structured perturbations standing in for quantization error
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bank = PerturbationBank::new(a, 8)?;
    let mut first = None;
    for _ in 0..8 {
        let dz = Tensor::randn(&[n, a], 0.05, &mut rng);
        let p = collect_perturbation(&tail, &z, &dz)?;
        bank.append(&p.avg_dz, &p.avg_grad)?;
        first.get_or_insert(p);
    }
    let p = first.unwrap();
    let diag = estimate_diag(&p.avg_dz, &p.avg_grad)?;
    println!("diag clamp fraction {:.3}", diag.clamp_fraction);
    let mut estimates = vec![("diag", FimEstimate::Diag(diag.diag.clone()))];
    match rank1_factor(&p.avg_dz, &p.avg_grad) {
        Ok(u) => estimates.push(("rank1", FimEstimate::Rank1(u))),
        Err(e) => println!("rank1 skipped: {e}"),
    }
    estimates.push(("rankk", FimEstimate::RankK(bank.clone())));
    estimates.push(("dplr", FimEstimate::dplr(bank, diag.diag, 0.5)?));

    let tests: Vec<Tensor> = (0..50).map(|_| Tensor::randn(&[a], 0.05, &mut rng)).collect();
    let quad = |m: &Tensor, v: &Tensor| -> f64 {
        (0..a).map(|i| v.data()[i] * m.row(i).iter().zip(v.data()).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    let truth: Vec<f64> = tests.iter().map(|v| quad(&exact, v)).collect();
    println!("{:>6} {:>12} {:>12}", "kind", "corr", "rel err");
    for (name, e) in &estimates {
        let est: Vec<f64> = tests.iter().map(|v| e.quadratic(v.data())).collect();
        let (mt, me) = (mean(&truth), mean(&est));
        let cov: f64 = truth.iter().zip(&est).map(|(t, e)| (t - mt) * (e - me)).sum();
        let vt: f64 = truth.iter().map(|t| (t - mt).powi(2)).sum();
        let ve: f64 = est.iter().map(|e| (e - me).powi(2)).sum();
        let rel = truth.iter().zip(&est).map(|(t, e)| ((t - e) / t).abs()).sum::<f64>() / truth.len() as f64;
        println!("{name:>6} {:>12.3} {rel:>12.3}", cov / (vt * ve).sqrt());
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
