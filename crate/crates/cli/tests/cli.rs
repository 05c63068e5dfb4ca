use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docscale::checkpoint::load_checkpoint;
use docscale::optim::reference_lr;

const SMALL: &str = r#"
[corpus]
docs_per_class = 20

[splits]
n_splits = 3
train_size = 32
val_size = 8
per_class_quota = 10

[pretrain]
epochs = 2

[finetune]
epochs = 3

[text.train]
epochs = 2

[bench]
steps = 2
warmup = 1
"#;

fn docscale(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_docscale"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = docscale(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: PathBuf) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn gen_data_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-data", "--out", "a"]);
    ok(d.path(), &["gen-data", "--out", "b"]);
    for f in ["corpus.json", "splits.json", "images/000007.bin", "tokens/000007.txt"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
    ok(d.path(), &["gen-data", "--out", "c", "--seed", "99"]);
    assert_ne!(fs::read(d.path().join("a/corpus.json")).unwrap(), fs::read(d.path().join("c/corpus.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("a/manifest-gen-data.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn empty_class_is_a_single_line_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("zero.toml"), "[corpus]\ndocs_per_class = 0\n").unwrap();
    let o = docscale(d.path(), &["--config", "zero.toml", "gen-data", "--out", "x"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error[config]: "), "{err}");
}

#[test]
fn pretrain_finetune_text_and_ensemble_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--out", "data"]);

    ok(p, &["pretrain", "--data", "data", "--out", "pre1"]);
    ok(p, &["pretrain", "--data", "data", "--out", "pre2"]);
    let rows = csv_rows(p.join("pre1/pretrain_metrics.csv"));
    assert_eq!(rows[0], "epoch,train_loss,val_acc,lr");
    assert_eq!(rows.len(), 3);
    assert_eq!(fs::read(p.join("pre1/pretrain_metrics.csv")).unwrap(), fs::read(p.join("pre2/pretrain_metrics.csv")).unwrap());
    assert_eq!(fs::read(p.join("pre1/pretrain.ckpt")).unwrap(), fs::read(p.join("pre2/pretrain.ckpt")).unwrap());
    let peak = rows[1..].iter().map(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!((peak - reference_lr(1.6, 8, 1).unwrap()).abs() < 1e-12, "peak lr {peak}");

    ok(p, &["finetune", "--data", "data", "--checkpoint", "pre1/pretrain.ckpt", "--out", "ft"]);
    assert_eq!(csv_rows(p.join("ft/finetune_metrics.csv")).len(), 4);
    let (_, before) = load_checkpoint::<f32>(&p.join("pre1/pretrain.ckpt")).unwrap();
    let (_, after) = load_checkpoint::<f32>(&p.join("ft/finetune.ckpt")).unwrap();
    for g in ["stem", "stages", "top"] {
        assert_eq!(before.group_checksum(g), after.group_checksum(g), "{g}");
    }
    assert_ne!(before.group_checksum("head"), after.group_checksum("head"));

    ok(p, &["train-text", "--data", "data", "--out", "txt"]);
    assert_eq!(csv_rows(p.join("txt/text_metrics.csv")).len(), 3);

    let args = ["ensemble-eval", "--data", "data", "--image-checkpoint", "ft/finetune.ckpt", "--text-checkpoint", "txt/text.ckpt"];
    ok(p, &[&args[..], &["--out", "ens1"]].concat());
    ok(p, &[&args[..], &["--out", "ens2"]].concat());
    let report = csv_rows(p.join("ens1/report.csv"));
    assert_eq!(report[0], "split_id,image_acc,text_acc,ensemble_acc,w1,w2");
    assert_eq!(report.len(), 1 + 3 + 1);
    assert!(report[4].starts_with("median,"));
    assert_eq!(fs::read(p.join("ens1/report.csv")).unwrap(), fs::read(p.join("ens2/report.csv")).unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(p.join("ens1/summary.json")).unwrap()).unwrap();
    assert!(summary["median"]["ensemble_acc"].is_f64() && summary["mean"]["ensemble_acc"].is_f64());

    let o = docscale(p, &["ensemble-eval", "--data", "data", "--image-checkpoint", "txt/text.ckpt", "--text-checkpoint", "txt/text.ckpt", "--out", "bad"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[incompatible]"));
}

#[test]
fn text_vocab_mismatch_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("v.toml"), "[corpus]\nvocab_size = 60\n[text.model]\nvocab_size = 64\n").unwrap();
    ok(d.path(), &["--config", "v.toml", "gen-data", "--out", "data"]);
    let o = docscale(d.path(), &["train-text", "--data", "data", "--out", "t"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[incompatible]"));
}

#[test]
fn bench_writes_speedup_table() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["bench-scaling", "--k-list", "1", "--out", "b1"]);
    let rows = csv_rows(d.path().join("b1/scaling.csv"));
    assert_eq!(rows[0], "k,wall_seconds,samples_per_sec,speedup,efficiency");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("1,") && rows[1].contains(",1.0000,"));

    ok(d.path(), &["bench-scaling", "--k-list", "1,2", "--out", "b2"]);
    assert_eq!(csv_rows(d.path().join("b2/scaling.csv")).len(), 3);
}

#[test]
fn shipped_profiles_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("profiles");
    for name in ["desk.toml", "full.toml"] {
        let o = Command::new(env!("CARGO_BIN_EXE_docscale"))
            .args(["--config", root.join(name).to_str().unwrap(), "--print-config", "gen-data"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
