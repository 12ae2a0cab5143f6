//! Drives the experiment runner from an inline config: a small loss sweep
//! on a reduced model, followed by the markdown summary.
//!
//! cargo run --release --example sweep_from_toml -- [out_dir]

use fisherq::experiment::{report, run, ExperimentConfig, RESULTS_FILE};

const CONFIG: &str = r#"
[model]
blocks = 1
tokens = 5
embed_dim = 16
heads = 2
mlp_ratio = 2.0
classes = 4
patch_dim = 8

[data]
classes = 4
patches = 4
patch_dim = 8
train = 400
val = 200
calib = 64

[pretrain]
epochs = 10

[recon]
max_iter = 100
interval = 10
rank = 4

[sweep]
losses = ["mse", "diag", "dplr"]
bits = [[3, 3], [4, 4]]
seeds = [0, 1]
"#;

fn main() -> fisherq::Result<()> {
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.output.dir = std::env::args().nth(1).unwrap_or_else(|| "sweep-out".into()).into();
    let summary = run(&cfg)?;
    println!("{} runs, full precision {:.4}", summary.rows.len(), summary.fp_top1);
    let (rep, _) = report(&cfg.output.dir.join(RESULTS_FILE), false)?;
    print!("{}", rep.to_markdown());
    Ok(())
}
