//! End-to-end checks of the `fisherq` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[model]
blocks = 2
tokens = 3
embed_dim = 8
heads = 2
mlp_ratio = 2.0
classes = 3
patch_dim = 4
[data]
classes = 3
patches = 2
patch_dim = 4
train = 90
val = 60
calib = 16
[pretrain]
epochs = 3
[recon]
max_iter = 12
interval = 3
rank = 3
batch_size = 8
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fisherq"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn run(cfg: &Path, out: &Path) -> std::process::Output {
    bin()
        .args(["run", "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn rows(out: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(out.join("results.csv")).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn column(out: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(out.join("results.csv")).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["run", "--config", "/no/such/file.toml"]), Some(1));
    assert_eq!(code(&["run", "--config", "x.toml", "--unknown"]), Some(1));
    assert_eq!(code(&["report", "--results", "/no/such.csv"]), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[recon]\nrank = 0\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("recon.rank"));

    // a checkpoint that does not exist is a runtime failure
    let cfg = tmp.path().join("ckpt.toml");
    fs::write(&cfg, TINY.replace("epochs = 3", "checkpoint = \"/no/such.bin\"")).unwrap();
    let out = run(&cfg, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_precision_bits_reproduce_fp_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[quant]\nw_bits = 32\na_bits = 32\n[sweep]\nlosses = [\"mse\"]\nseeds = [0]\n");
    let out = tmp.path().join("out");
    assert!(run(&cfg, &out).status.success());
    let r = &rows(&out)[0];
    assert_eq!(r[column(&out, "quant_top1")], r[column(&out, "fp_top1")]);
}

#[test]
fn rerun_is_identical_apart_from_seconds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\nlosses = [\"mse\", \"dplr\"]\nseeds = [0, 1]\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a).status.success());
    assert!(run(&cfg, &b).status.success());
    let secs = column(&a, "seconds");
    let strip = |rs: Vec<csv::StringRecord>| -> Vec<Vec<String>> {
        rs.iter()
            .map(|r| r.iter().enumerate().filter(|(i, _)| *i != secs).map(|(_, v)| v.to_string()).collect())
            .collect()
    };
    let (ra, rb) = (strip(rows(&a)), strip(rows(&b)));
    assert_eq!(ra.len(), 4);
    assert_eq!(ra, rb);
    // every combination exactly once
    let ids: std::collections::BTreeSet<_> = ra.iter().map(|r| r[0].clone()).collect();
    assert_eq!(ids.len(), 4);
}

#[test]
fn alpha_endpoints_match_diag_and_rankk() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[quant]\nw_bits = 3\na_bits = 3\n[sweep]\nlosses = [\"diag\", \"rankk\", \"dplr\"]\nalphas = [0.0, 1.0]\n",
    );
    let out = tmp.path().join("out");
    assert!(run(&cfg, &out).status.success());
    let (loss, alpha, acc, losses) = (
        column(&out, "loss_kind"),
        column(&out, "alpha"),
        column(&out, "quant_top1"),
        column(&out, "block_final_losses"),
    );
    let all = rows(&out);
    let find = |l: &str, a: &str| all.iter().find(|r| &r[loss] == l && &r[alpha] == a).unwrap();
    let acc4 = |r: &csv::StringRecord| format!("{:.4}", r[acc].parse::<f64>().unwrap());
    assert_eq!(acc4(find("dplr", "0.0")), acc4(find("diag", "0.0")));
    assert_eq!(acc4(find("dplr", "1.0")), acc4(find("rankk", "0.0")));
    assert_eq!(find("dplr", "0.0")[losses], find("diag", "0.0")[losses]);
}

#[test]
fn report_and_heatmaps_from_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\nseeds = [0, 1]\n");
    let out = tmp.path().join("out");
    assert!(run(&cfg, &out).status.success());
    let rep = bin()
        .args(["report", "--heatmaps", "--results"])
        .arg(out.join("results.csv"))
        .output()
        .unwrap();
    assert!(rep.status.success());
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("| dplr | 4/4 |"));
    for name in ["complete", "diag", "lowrank", "dplr"] {
        let csv = fs::read_to_string(out.join("heatmaps").join(format!("{name}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# rows=8 cols=8 token=class"));
        assert_eq!(lines.count(), 8);
    }
    // the echoed config reproduces the run
    let again = tmp.path().join("again");
    assert!(run(&out.join("config.toml"), &again).status.success());
    assert_eq!(rows(&out).len(), rows(&again).len());
}
