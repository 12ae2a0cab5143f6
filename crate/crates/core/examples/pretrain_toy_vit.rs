//! Generates the synthetic dataset, pretrains the default toy ViT and
//! writes a checkpoint.
//!
//! cargo run --release --example pretrain_toy_vit -- [epochs] [seed] [out.bin]

use fisherq::zoo::{gen_dataset, pretrain, PretrainConfig, SyntheticDataSpec, ToyViT, ToyViTConfig};
use std::time::Instant;

fn main() -> fisherq::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.get(3).cloned().unwrap_or_else(|| "toy_vit.bin".into());

    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let mut spec = SyntheticDataSpec::default();
    spec.gap = env("GAP").unwrap_or(spec.gap);
    spec.train = env("TRAIN").map(|v| v as usize).unwrap_or(spec.train);
    let data = gen_dataset(&spec)?;
    let start = Instant::now();
    let cfg = PretrainConfig {
        epochs,
        lr: env("LR").unwrap_or(1e-3),
        ..Default::default()
    };
    let (model, meta) = pretrain(ToyViTConfig::default(), &data, &cfg, seed)?;
    println!(
        "epochs {epochs} seed {seed}: val top-1 {:.4} in {:.1}s",
        meta.final_accuracy,
        start.elapsed().as_secs_f64()
    );
    model.save(out.as_ref(), &meta)?;
    let (back, _) = ToyViT::load(out.as_ref())?;
    assert_eq!(back, model);
    println!("checkpoint written to {out}");
    Ok(())
}
