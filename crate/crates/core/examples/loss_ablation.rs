//! Quantizes one pretrained toy ViT with every loss at a given bit-width
//! and prints validation top-1 per loss and seed. Defaults follow the
//! ablation settings of the acceptance suite (300 iterations, rank append
//! every 20, scale learning rate 1e-3).
//!
//! cargo run --release --example loss_ablation -- CHECKPOINT [bits] [iters] [seeds]

use fisherq::fim::LossKind;
use fisherq::recon::{quantize_model, QuantizeConfig, ReconConfig};
use fisherq::zoo::{evaluate_top1, gen_dataset, SyntheticDataSpec, ToyViT};
use std::time::Instant;

fn main() -> fisherq::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).expect("usage: loss_ablation CHECKPOINT [bits] [iters] [seeds]");
    let bits: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5);
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let kinds: Vec<LossKind> = std::env::var("LOSSES")
        .map(|v| v.split(',').filter_map(LossKind::parse).collect())
        .unwrap_or_else(|_| LossKind::ALL.to_vec());

    let (model, _) = ToyViT::load(ckpt.as_ref())?;
    let data = gen_dataset(&SyntheticDataSpec::default())?;
    println!("full precision: {:.4}", evaluate_top1(&model, &data.val)?);
    let qcfg = QuantizeConfig {
        w_bits: bits,
        a_bits: env("ABITS").map(|b| b as u32).unwrap_or(bits),
        ..Default::default()
    };
    for kind in kinds {
        let mut accs = Vec::new();
        let start = Instant::now();
        for seed in 0..seeds {
            let cfg = ReconConfig {
                loss_kind: kind,
                max_iter: iters,
                interval: env("INTERVAL").map(|v| v as usize).unwrap_or(20).max(1),
                lr_v: env("LR_V").unwrap_or(1e-3),
                lr_scale: env("LR_S").unwrap_or(1e-3),
                reg_weight: env("REG").unwrap_or(0.01),
                p_drop: env("PDROP").unwrap_or(0.5),
                alpha: env("ALPHA").unwrap_or(0.5),
                batch_size: env("BATCH").map(|v| v as usize).unwrap_or(32),
                seed,
                ..Default::default()
            };
            let out = quantize_model(&model, &data.calib.inputs, &qcfg, &cfg)?;
            accs.push(evaluate_top1(&out.model, &data.val)?);
            if std::env::var("VERBOSE").is_ok() {
                for r in &out.reports {
                    println!("  {}", serde_json::to_string(r)?);
                }
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "{:>6}: mean {:.4} {:?} ({:.1}s)",
            kind.name(),
            mean,
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
