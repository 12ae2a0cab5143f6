//! Config-driven experiments: pretrain (or load) a toy ViT, sweep
//! quantization settings, and write result tables, per-block reports,
//! loss traces and class-token curvature heatmaps.

use crate::error::{Error, Result};
use crate::fim::{class_token_fim_heatmap, exact_fim, write_heatmap_csv, FimEstimate, LossKind, TokenLayout};
use crate::recon::{
    capture_block_io, prepare_estimate, quantize_model, reconstruct_block, QuantizeConfig,
    QuantizedModel, ReconConfig,
};
use crate::tensor::Tensor;
use crate::zoo::{
    evaluate_top1, gen_dataset, pretrain, Dataset, PretrainConfig, SyntheticDataSpec, ToyViT,
    ToyViTConfig, TrainingMeta,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const SUMMARY_FILE: &str = "summary.md";

/// Heatmap panel names, in file order.
pub const HEATMAP_PANELS: [&str; 4] = ["complete", "diag", "lowrank", "dplr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Reuse an existing checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Sweep axes. An omitted axis takes its single value from `[quant]` or
/// `[recon]`; a present axis must be non-empty and free of duplicates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub losses: Option<Vec<LossKind>>,
    pub ranks: Option<Vec<usize>>,
    pub alphas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    /// `[w_bits, a_bits]` pairs.
    pub bits: Option<Vec<[u32; 2]>>,
    pub fim_samples: Option<Vec<usize>>,
    /// Calibration samples used for reconstruction.
    pub recon_samples: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write the final-block heatmap bundle after the sweep.
    pub heatmaps: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("fisherq-out"),
            heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ToyViTConfig,
    pub data: SyntheticDataSpec,
    pub pretrain: PretrainSection,
    pub quant: QuantizeConfig,
    pub recon: ReconConfig,
    pub sweep: SweepAxes,
    pub output: OutputSection,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combination {
    pub index: usize,
    pub loss: LossKind,
    pub w_bits: u32,
    pub a_bits: u32,
    pub rank: usize,
    pub alpha: f64,
    pub fim_samples: Option<usize>,
    pub recon_samples: usize,
    pub seed: u64,
}

impl Combination {
    pub fn run_id(&self) -> String {
        let fim = self
            .fim_samples
            .map_or_else(|| "all".to_string(), |f| f.to_string());
        format!(
            "{:04}_{}_w{}a{}_r{}_alpha{}_f{}_n{}_s{}",
            self.index,
            self.loss.name(),
            self.w_bits,
            self.a_bits,
            self.rank,
            self.alpha,
            fim,
            self.recon_samples,
            self.seed
        )
    }
}

fn axis<T: Clone + PartialEq>(field: &str, given: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match given {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(Error::config(field, "sweep axis must not be empty")),
        Some(v) => {
            for (i, x) in v.iter().enumerate() {
                if v[..i].contains(x) {
                    return Err(Error::config(field, "sweep axis contains a duplicate value"));
                }
            }
            Ok(v.clone())
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.to_string().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.data.classes != self.model.classes
            || self.data.patches != self.model.patches()
            || self.data.patch_dim != self.model.patch_dim
        {
            return Err(Error::config(
                "data",
                "classes/patches/patch_dim must match the model (patches = tokens - 1)",
            ));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        let q = &self.quant;
        for (field, b) in [("quant.w_bits", q.w_bits), ("quant.a_bits", q.a_bits)] {
            if !(2..=32).contains(&b) {
                return Err(Error::config(field, "bit-width must lie in 2..=32"));
            }
        }
        if !(2..=32).contains(&q.stem_head_bits) {
            return Err(Error::config("quant.stem_head_bits", "bit-width must lie in 2..=32"));
        }
        self.recon.validate()?;
        if let Some(bits) = &self.sweep.bits {
            if bits.iter().flatten().any(|b| !(2..=32).contains(b)) {
                return Err(Error::config("sweep.bits", "bit-widths must lie in 2..=32"));
            }
        }
        if let Some(r) = &self.sweep.ranks {
            if r.contains(&0) {
                return Err(Error::config("sweep.ranks", "ranks must be at least 1"));
            }
        }
        if let Some(a) = &self.sweep.alphas {
            if a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::config("sweep.alphas", "alphas must lie in [0, 1]"));
            }
        }
        if let Some(f) = &self.sweep.fim_samples {
            if f.contains(&0) {
                return Err(Error::config("sweep.fim_samples", "must be at least 1"));
            }
        }
        if let Some(n) = &self.sweep.recon_samples {
            if n.iter().any(|&n| n == 0 || n > self.data.calib) {
                return Err(Error::config(
                    "sweep.recon_samples",
                    format!("must lie in 1..={} (data.calib)", self.data.calib),
                ));
            }
        }
        self.combinations().map(|_| ())
    }

    /// Every sweep combination in key order: bits, loss, rank, alpha,
    /// probe samples, reconstruction samples, seed.
    pub fn combinations(&self) -> Result<Vec<Combination>> {
        let s = &self.sweep;
        let r = &self.recon;
        let bits = axis("sweep.bits", &s.bits, [self.quant.w_bits, self.quant.a_bits])?;
        let losses = axis("sweep.losses", &s.losses, r.loss_kind)?;
        let ranks = axis("sweep.ranks", &s.ranks, r.rank)?;
        let alphas = axis("sweep.alphas", &s.alphas, r.alpha)?;
        let fims = match &s.fim_samples {
            None => vec![r.fim_samples],
            Some(v) => axis("sweep.fim_samples", &Some(v.clone()), 0)?
                .into_iter()
                .map(Some)
                .collect(),
        };
        let recons = axis("sweep.recon_samples", &s.recon_samples, self.data.calib)?;
        let seeds = axis("sweep.seeds", &s.seeds, r.seed)?;
        let mut out = Vec::new();
        for &[w_bits, a_bits] in &bits {
            for &loss in &losses {
                for &rank in &ranks {
                    for &alpha in &alphas {
                        for &fim_samples in &fims {
                            for &recon_samples in &recons {
                                for &seed in &seeds {
                                    out.push(Combination {
                                        index: out.len(),
                                        loss,
                                        w_bits,
                                        a_bits,
                                        rank,
                                        alpha,
                                        fim_samples,
                                        recon_samples,
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn recon_for(&self, c: &Combination) -> ReconConfig {
        ReconConfig {
            loss_kind: c.loss,
            rank: c.rank,
            alpha: c.alpha,
            fim_samples: c.fim_samples,
            seed: c.seed,
            ..self.recon
        }
    }

    pub fn quant_for(&self, c: &Combination) -> QuantizeConfig {
        QuantizeConfig {
            w_bits: c.w_bits,
            a_bits: c.a_bits,
            ..self.quant
        }
    }
}

/// One line of `results.csv`. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub loss_kind: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub stem_head_bits: u32,
    pub rank: usize,
    pub interval: usize,
    pub alpha: f64,
    /// Effective probe sample count.
    pub fim_samples: usize,
    pub recon_samples: usize,
    pub max_iter: usize,
    pub batch_size: usize,
    pub p_drop: f64,
    pub lr_v: f64,
    pub lr_scale: f64,
    pub reg_weight: f64,
    pub normalize_fim: bool,
    pub seed: u64,
    pub pretrain_seed: u64,
    pub fp_top1: f64,
    /// Empty for failed runs.
    pub quant_top1: Option<f64>,
    /// Per-block final losses joined by `;`.
    pub block_final_losses: String,
    /// Per-block bank ranks joined by `;`.
    pub ranks_reached: String,
    /// `ok` or `failed: <message>`.
    pub status: String,
    pub seconds: f64,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub fp_top1: f64,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Loads the configured checkpoint or pretrains a fresh model.
pub fn obtain_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<(ToyViT, TrainingMeta)> {
    match &cfg.pretrain.checkpoint {
        Some(path) => {
            let (model, meta) = ToyViT::load(path)?;
            if model.config != cfg.model {
                return Err(Error::config(
                    "pretrain.checkpoint",
                    "checkpoint model config differs from [model]",
                ));
            }
            Ok((model, meta))
        }
        None => pretrain(cfg.model, data, &cfg.pretrain.train_config(), cfg.pretrain.seed),
    }
}

/// Runs one combination and writes its per-block artifacts under `dir`.
pub fn run_combination(
    cfg: &ExperimentConfig,
    model: &ToyViT,
    data: &Dataset,
    c: &Combination,
    dir: &Path,
) -> Result<(f64, Vec<f64>, Vec<usize>)> {
    let calib = data.calib.take(c.recon_samples)?.inputs;
    let out = quantize_model(model, &calib, &cfg.quant_for(c), &cfg.recon_for(c))?;
    let top1 = evaluate_top1(&out.model, &data.val)?;

    fs::create_dir_all(dir)?;
    let mut jsonl = fs::File::create(dir.join("blocks.jsonl"))?;
    for r in &out.reports {
        writeln!(jsonl, "{}", serde_json::to_string(r)?)?;
    }
    let mut trace = csv::Writer::from_path(dir.join("trace.csv"))?;
    trace.write_record(["block", "iteration", "loss"])?;
    for (b, t) in out.traces.iter().enumerate() {
        for (i, l) in t.iter().enumerate() {
            trace.write_record([b.to_string(), i.to_string(), l.to_string()])?;
        }
    }
    trace.flush()?;
    let mut events = csv::Writer::from_path(dir.join("rank_events.csv"))?;
    events.write_record(["block", "iteration", "outcome", "rank"])?;
    for (b, ev) in out.rank_events.iter().enumerate() {
        for e in ev {
            events.write_record([
                b.to_string(),
                e.iteration.to_string(),
                e.outcome.clone(),
                e.rank.to_string(),
            ])?;
        }
    }
    events.flush()?;
    if !out.notes.is_empty() {
        fs::write(dir.join("notes.txt"), out.notes.join("\n") + "\n")?;
    }
    Ok((
        top1,
        out.reports.iter().map(|r| r.final_loss).collect(),
        out.reports.iter().map(|r| r.rank_reached).collect(),
    ))
}

/// Runs the whole sweep. A failing combination yields a failure row and
/// the sweep continues; `results.csv` is flushed after every row.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let combos = cfg.combinations()?;
    let out_dir = cfg.output.dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(CONFIG_ECHO), cfg.to_toml())?;

    let data = gen_dataset(&cfg.data)?;
    let (model, meta) = obtain_model(cfg, &data)?;
    model.save(&out_dir.join(CHECKPOINT_FILE), &meta)?;
    let fp_top1 = evaluate_top1(&model, &data.val)?;

    let mut writer = csv::Writer::from_path(out_dir.join(RESULTS_FILE))?;
    let mut rows = Vec::with_capacity(combos.len());
    for c in &combos {
        let start = Instant::now();
        let rc = cfg.recon_for(c);
        let dir = out_dir.join("runs").join(c.run_id());
        let outcome = run_combination(cfg, &model, &data, c, &dir);
        let (quant_top1, losses, ranks, status) = match outcome {
            Ok((t, l, r)) => (Some(t), join(l), join(r), "ok".to_string()),
            Err(e) => (None, String::new(), String::new(), format!("failed: {e}")),
        };
        let row = ResultRow {
            run_id: c.run_id(),
            loss_kind: c.loss.name().into(),
            w_bits: c.w_bits,
            a_bits: c.a_bits,
            stem_head_bits: cfg.quant.stem_head_bits,
            rank: c.rank,
            interval: rc.interval,
            alpha: c.alpha,
            fim_samples: c.fim_samples.unwrap_or(c.recon_samples).min(c.recon_samples),
            recon_samples: c.recon_samples,
            max_iter: rc.max_iter,
            batch_size: rc.batch_size,
            p_drop: rc.p_drop,
            lr_v: rc.lr_v,
            lr_scale: rc.lr_scale,
            reg_weight: rc.reg_weight,
            normalize_fim: rc.normalize_fim,
            seed: c.seed,
            pretrain_seed: meta.seed,
            fp_top1,
            quant_top1,
            block_final_losses: losses,
            ranks_reached: ranks,
            status,
            seconds: start.elapsed().as_secs_f64(),
        };
        writer.serialize(&row)?;
        writer.flush()?;
        rows.push(row);
    }

    if cfg.output.heatmaps {
        write_heatmaps(cfg, &model, &data, &out_dir.join(HEATMAP_DIR))?;
    }
    Ok(RunSummary {
        out_dir,
        rows,
        fp_top1,
    })
}

/// Class-token `[D, D]` panels of the last block's curvature: the exact
/// FIM averaged over the probe samples, and the diag, low-rank and DPLR
/// estimates after a DPLR reconstruction of that block. Earlier blocks are
/// calibrated without reconstruction.
pub fn final_block_heatmaps(
    model: &ToyViT,
    calib: &Tensor,
    qcfg: &QuantizeConfig,
    cfg: &ReconConfig,
) -> Result<Vec<(&'static str, Tensor)>> {
    let cfg = ReconConfig {
        loss_kind: LossKind::Dplr,
        ..*cfg
    };
    cfg.validate()?;
    let last = model.config.blocks - 1;
    let mut q = QuantizedModel::new(model, qcfg.w_bits, qcfg.a_bits, qcfg.stem_head_bits)?;
    for b in 0..last {
        let s = capture_block_io(&q, b, calib, qcfg.calib_method)?;
        q.set_block(b, s.quant)?;
    }
    let mut state = capture_block_io(&q, last, calib, qcfg.calib_method)?;
    let tail = model.tail(last);
    prepare_estimate(&mut state, &tail, &cfg)?;
    reconstruct_block(&mut state, &tail, &cfg)?;
    let Some(FimEstimate::Dplr { bank, diag, alpha }) = &state.estimate else {
        return Err(Error::invalid("curvature probe vanished; no estimate to plot"));
    };

    let a = state.output_len();
    let n = cfg.fim_samples.unwrap_or(usize::MAX).min(state.samples());
    let z = state.z_target.reshape(&[state.samples(), a])?;
    let mut complete = Tensor::zeros(&[a, a]);
    for r in 0..n {
        let f = exact_fim(&tail, z.row(r))?;
        complete = complete.add(&f.scale(1.0 / n as f64))?;
    }
    let layout = TokenLayout {
        tokens: model.config.tokens,
        dim: model.config.embed_dim,
        class_token: Some(0),
    };
    let dplr = FimEstimate::dplr(bank.clone(), diag.clone(), *alpha)?;
    let panels = [
        complete,
        FimEstimate::Diag(diag.clone()).dense(),
        bank.dense(),
        dplr.dense(),
    ];
    HEATMAP_PANELS
        .into_iter()
        .zip(panels)
        .map(|(name, m)| Ok((name, class_token_fim_heatmap(&m, layout)?)))
        .collect()
}

/// Writes the four heatmap CSVs for the sweep's first bit pair.
pub fn write_heatmaps(
    cfg: &ExperimentConfig,
    model: &ToyViT,
    data: &Dataset,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let c = cfg.combinations()?[0];
    let calib = data.calib.take(c.recon_samples)?.inputs;
    let rc = ReconConfig {
        fim_samples: c.fim_samples,
        ..cfg.recon
    };
    let panels = final_block_heatmaps(model, &calib, &cfg.quant_for(&c), &rc)?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, m) in panels {
        let p = dir.join(format!("{name}.csv"));
        write_heatmap_csv(&m, fs::File::create(&p)?)?;
        paths.push(p);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub loss_kind: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub rank: usize,
    pub alpha: f64,
    pub fim_samples: usize,
    pub recon_samples: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cells: Vec<SummaryCell>,
    pub malformed: usize,
    pub failed: usize,
}

/// Sample standard deviation; zero for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates a results file over seeds. Rows that do not parse are
/// skipped and counted.
pub fn summarize(results: &Path) -> Result<Report> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(results)?;
    let headers = reader.headers()?.clone();
    let mut groups: BTreeMap<(u32, u32, usize, String, usize, u64, usize, usize), Vec<f64>> =
        BTreeMap::new();
    let (mut malformed, mut failed) = (0, 0);
    for rec in reader.records() {
        let row: ResultRow = match rec.and_then(|r| r.deserialize(Some(&headers))) {
            Ok(r) => r,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        let valid = LossKind::parse(&row.loss_kind).is_some()
            && row.quant_top1.map_or(true, |t| (0.0..=1.0).contains(&t));
        if !valid {
            malformed += 1;
            continue;
        }
        let Some(top1) = row.quant_top1.filter(|_| row.is_ok()) else {
            failed += 1;
            continue;
        };
        let order = LossKind::ALL
            .iter()
            .position(|k| k.name() == row.loss_kind)
            .unwrap_or(0);
        groups
            .entry((
                row.w_bits,
                row.a_bits,
                order,
                row.loss_kind,
                row.rank,
                row.alpha.to_bits(),
                row.fim_samples,
                row.recon_samples,
            ))
            .or_default()
            .push(top1);
    }
    let cells = groups
        .into_iter()
        .map(|((w, a, _, loss, rank, alpha, fim, recon), v)| {
            let (mean, std) = mean_std(&v);
            SummaryCell {
                loss_kind: loss,
                w_bits: w,
                a_bits: a,
                rank,
                alpha: f64::from_bits(alpha),
                fim_samples: fim,
                recon_samples: recon,
                runs: v.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(Report {
        cells,
        malformed,
        failed,
    })
}

impl Report {
    /// Top-1 in percent, mean ± sample std over seeds.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| loss | W/A | rank | alpha | fim samples | recon samples | runs | top-1 (%) |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            s.push_str(&format!(
                "| {} | {}/{} | {} | {} | {} | {} | {} | {:.2} ± {:.2} |\n",
                c.loss_kind,
                c.w_bits,
                c.a_bits,
                c.rank,
                c.alpha,
                c.fim_samples,
                c.recon_samples,
                c.runs,
                100.0 * c.mean,
                100.0 * c.std
            ));
        }
        if self.malformed > 0 {
            s.push_str(&format!("\nskipped {} malformed row(s)\n", self.malformed));
        }
        if self.failed > 0 {
            s.push_str(&format!("\n{} failed run(s) excluded\n", self.failed));
        }
        s
    }
}

/// Summarizes `results` into `summary.md` beside it and, when asked,
/// rebuilds the heatmap bundle from the echoed config and checkpoint.
pub fn report(results: &Path, heatmaps: bool) -> Result<(Report, Vec<PathBuf>)> {
    if !results.is_file() {
        return Err(Error::config(
            "--results",
            format!("{} does not exist", results.display()),
        ));
    }
    let rep = summarize(results)?;
    let dir = results.parent().unwrap_or(Path::new("."));
    fs::write(dir.join(SUMMARY_FILE), rep.to_markdown())?;
    let mut paths = Vec::new();
    if heatmaps {
        let mut cfg = ExperimentConfig::load(&dir.join(CONFIG_ECHO))?;
        cfg.pretrain.checkpoint = Some(dir.join(CHECKPOINT_FILE));
        let data = gen_dataset(&cfg.data)?;
        let (model, _) = obtain_model(&cfg, &data)?;
        paths = write_heatmaps(&cfg, &model, &data, &dir.join(HEATMAP_DIR))?;
    }
    Ok((rep, paths))
}
