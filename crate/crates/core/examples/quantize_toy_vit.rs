//! End to end: pretrain (or load) a toy ViT, quantize it block by block
//! under one loss and print the per-block reports as JSON lines.
//!
//! cargo run --release --example quantize_toy_vit -- [loss] [bits] [checkpoint]

use fisherq::fim::LossKind;
use fisherq::recon::{quantize_model, QuantizeConfig, ReconConfig};
use fisherq::zoo::{evaluate_top1, gen_dataset, pretrain, PretrainConfig, SyntheticDataSpec, ToyViT, ToyViTConfig};

fn main() -> fisherq::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let loss = args.get(1).and_then(|s| LossKind::parse(s)).unwrap_or(LossKind::Dplr);
    let bits = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let data = gen_dataset(&SyntheticDataSpec::default())?;
    let model = match args.get(3) {
        Some(path) => ToyViT::load(path.as_ref())?.0,
        None => pretrain(ToyViTConfig::default(), &data, &PretrainConfig::default(), 0)?.0,
    };
    println!("full precision top-1 {:.4}", evaluate_top1(&model, &data.val)?);

    let qcfg = QuantizeConfig { w_bits: bits, a_bits: bits, ..Default::default() };
    let cfg = ReconConfig { loss_kind: loss, max_iter: 300, interval: 20, lr_scale: 1e-3, ..Default::default() };
    let out = quantize_model(&model, &data.calib.inputs, &qcfg, &cfg)?;
    for r in &out.reports {
        println!("{}", serde_json::to_string(r)?);
    }
    for n in &out.notes {
        println!("note: {n}");
    }
    println!("W{bits}A{bits} {} top-1 {:.4}", loss.name(), evaluate_top1(&out.model, &data.val)?);
    Ok(())
}
