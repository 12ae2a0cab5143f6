//! Prints the bank-append log of a DPLR reconstruction: one probe at
//! iteration 0, then an attempt every `interval` iterations until the
//! target rank is reached.
//!
//! cargo run --release --example rank_schedule -- [rank] [interval] [max_iter]

use fisherq::fim::LossKind;
use fisherq::recon::{quantize_model, QuantizeConfig, ReconConfig};
use fisherq::zoo::{ToyViT, ToyViTConfig};
use fisherq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fisherq::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let cfg = ReconConfig {
        loss_kind: LossKind::Dplr,
        rank: arg(1, 4),
        interval: arg(2, 10),
        max_iter: arg(3, 60),
        ..Default::default()
    };
    let model = ToyViT::init(ToyViTConfig::default(), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = model.config;
    let calib = Tensor::randn(&[32, c.patches(), c.patch_dim], 1.0, &mut rng);
    let qcfg = QuantizeConfig { w_bits: 3, a_bits: 3, ..Default::default() };
    let out = quantize_model(&model, &calib, &qcfg, &cfg)?;
    println!("scheduled rank {}", cfg.scheduled_rank());
    for (b, events) in out.rank_events.iter().enumerate() {
        for e in events {
            println!("block {b} iteration {:>4}: {:<28} rank {}", e.iteration, e.outcome, e.rank);
        }
        println!("block {b} reached rank {}", out.reports[b].rank_reached);
    }
    Ok(())
}
