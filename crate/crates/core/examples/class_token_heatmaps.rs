//! Writes the four class-token curvature panels of the last block (exact,
//! diag, low-rank, DPLR) as CSV files ready for plotting.
//!
//! cargo run --release --example class_token_heatmaps -- [out_dir]

use fisherq::experiment::final_block_heatmaps;
use fisherq::fim::write_heatmap_csv;
use fisherq::recon::{QuantizeConfig, ReconConfig};
use fisherq::zoo::{gen_dataset, pretrain, PretrainConfig, SyntheticDataSpec, ToyViTConfig};
use std::path::PathBuf;

fn main() -> fisherq::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into()));
    let data = gen_dataset(&SyntheticDataSpec::default())?;
    let (model, _) = pretrain(ToyViTConfig::default(), &data, &PretrainConfig::default(), 0)?;
    let qcfg = QuantizeConfig { w_bits: 3, a_bits: 3, ..Default::default() };
    let cfg = ReconConfig { max_iter: 200, interval: 20, lr_scale: 1e-3, ..Default::default() };
    std::fs::create_dir_all(&dir)?;
    for (name, m) in final_block_heatmaps(&model, &data.calib.inputs, &qcfg, &cfg)? {
        let path = dir.join(format!("{name}.csv"));
        write_heatmap_csv(&m, std::fs::File::create(&path)?)?;
        let diag: f64 = (0..m.rows()).map(|i| m.get2(i, i).abs()).sum();
        let total: f64 = m.data().iter().map(|v| v.abs()).sum();
        println!("{name:>8}: {} (diagonal share of |mass| {:.2})", path.display(), diag / total);
    }
    Ok(())
}
