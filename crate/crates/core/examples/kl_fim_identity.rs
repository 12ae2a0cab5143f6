//! The KL divergence between a softmax and its perturbation is, to second
//! order, half the quadratic form of the Fisher information; its gradient is
//! `F dz`. Shows both identities and the cubic decay of the residual.
//!
//! cargo run --release --example kl_fim_identity

use fisherq::fim::{collect_perturbation, exact_fim, score_expectation, IdentityTail};
use fisherq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fisherq::Result<()> {
    let classes = 6;
    let tail = IdentityTail { classes };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Tensor::randn(&[classes], 1.5, &mut rng);
    let f = exact_fim(&tail, z.data())?;
    let mean = score_expectation(&tail, z.data())?;
    println!("E[score] max abs: {:.1e}", mean.iter().fold(0.0_f64, |m, v| m.max(v.abs())));

    let dir = Tensor::randn(&[classes], 1.0, &mut rng);
    let dir = dir.scale(1.0 / dir.norm());
    println!("{:>10} {:>12} {:>12} {:>10} {:>10}", "|dz|", "KL", "dz'Fdz/2", "residual", "grad err");
    for k in 0..6 {
        let eps = 0.1 / 2f64.powi(k);
        let dz = dir.scale(eps);
        let p = collect_perturbation(
            &tail,
            &z.reshape(&[1, classes])?,
            &dz.reshape(&[1, classes])?,
        )?;
        let fdz: Vec<f64> = (0..classes)
            .map(|i| f.row(i).iter().zip(dz.data()).map(|(a, b)| a * b).sum())
            .collect();
        let quad = 0.5 * dz.dot(&Tensor::vector(fdz.clone()));
        let gerr = Tensor::vector(p.avg_grad.clone()).sub(&Tensor::vector(fdz.clone()))?.norm()
            / Tensor::vector(fdz).norm();
        println!(
            "{eps:>10.2e} {:>12.4e} {quad:>12.4e} {:>10.2e} {gerr:>10.2e}",
            p.mean_kl,
            (p.mean_kl - quad).abs()
        );
    }
    println!("each halving of |dz| should cut the residual about 8x");
    Ok(())
}
