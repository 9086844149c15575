use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn iedp(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iedp"));
    cmd.args(args).env("IEDP_THREADS", "1").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Data, encoder and a short finished training run shared by the tests.
fn run_dir() -> &'static TempDir {
    static D: OnceLock<TempDir> = OnceLock::new();
    D.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let root = d.path();
        let o = iedp(&["gen-data", "--n", "24", "--out", p(&root.join("data")), "--splits", "0.8333333333,0.1666666667"], &[]);
        assert_eq!(code(&o), 0, "{o:?}");
        let o = iedp(&["pretrain-encoders", "--data", p(&root.join("data")), "--out", p(&root.join("enc")), "--iters", "3", "--batch-size", "8"], &[]);
        assert_eq!(code(&o), 0, "{o:?}");
        let cfg = format!(
            "data = {}\nencoder_checkpoint = {}\nout_dir = {}\nmax_iters = 3\nbatch_size = 2\nnq = 64\neval_two_scale = false\n",
            p(&root.join("data")),
            p(&root.join("enc/encoder.bin")),
            p(&root.join("run"))
        );
        fs::write(root.join("run.cfg"), cfg).unwrap();
        let o = iedp(&["train", "--config", p(&root.join("run.cfg")), "--checkpoint-every", "0"], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        d
    })
}

#[test]
fn gen_data_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&iedp(&["gen-data", "--n", "100", "--out", p(&a), "--splits", "0.8,0.2", "--seed", "4"], &[])), 0);
    assert_eq!(code(&iedp(&["gen-data", "--n", "100", "--out", p(&b), "--splits", "0.8,0.2", "--seed", "4"], &[])), 0);
    let text = fs::read_to_string(a.join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    let splits: Vec<&str> = m["samples"].as_array().unwrap().iter().map(|s| s["split"].as_str().unwrap()).collect();
    assert_eq!(splits.iter().filter(|s| **s == "train").count(), 80);
    assert_eq!(splits.iter().filter(|s| **s == "val").count(), 20);
    let hash = |d: &Path| hex::encode(Sha256::digest(fs::read(d.join("manifest.json")).unwrap()));
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(code(&iedp(&["gen-data", "--n", "10"], &[])), 1);
    assert_eq!(code(&iedp(&["no-such-command"], &[])), 1);
    assert_eq!(code(&iedp(&["--help"], &[])), 0);

    let root = run_dir().path();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, fs::read_to_string(root.join("run.cfg")).unwrap() + "learning_rate = 0.1\n").unwrap();
    let o = iedp(&["train", "--config", p(&cfg)], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = iedp(&["train", "--config", p(&root.join("run.cfg")), "--nq", "100"], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = iedp(&["eval", "--checkpoint", p(&tmp.path().join("missing.bin")), "--data", p(&tmp.path().join("nodata"))], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretraining_report_records_retrieval() {
    let root = run_dir().path();
    let o = iedp(&["pretrain-encoders", "--data", p(&root.join("data")), "--out", p(&root.join("enc0")), "--iters", "0"], &[]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("enc0/retrieval.json")).unwrap()).unwrap();
    assert!(r["top1_retrieval"].is_number());
    assert_eq!(r["chance"].as_f64(), Some(0.25));
}

#[test]
fn eval_is_repeatable_with_the_documented_schema() {
    let root = run_dir().path();
    let ckpt = root.join("run/model.bin");
    let run = |out: &str| {
        let o = iedp(&["eval", "--checkpoint", p(&ckpt), "--data", p(&root.join("data")), "--out", p(&root.join(out))], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(root.join(out).join("metrics.json")).unwrap()
    };
    let a = run("eval_a");
    assert_eq!(a, run("eval_b"));
    let m: serde_json::Value = serde_json::from_str(&a).unwrap();
    let mut keys: Vec<&str> = m.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["delta1", "delta2", "delta3", "log10", "miou_ms", "miou_ss", "rel", "rmse"]);
    assert!(m["miou_ss"].is_number() && m["miou_ms"].is_number() && m["rmse"].is_null());
    let csv = fs::read_to_string(root.join("eval_a/per_class_iou.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("class_id,class,iou"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn forced_label_read_is_a_verification_failure() {
    let root = run_dir().path();
    let o = iedp(
        &["eval", "--checkpoint", p(&root.join("run/model.bin")), "--data", p(&root.join("data")), "--out", p(&root.join("eval_leak"))],
        &[("IEDP_FORCE_LABEL_READ", "1")],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn infer_writes_a_prediction_image() {
    let root = run_dir().path();
    let out = root.join("pred.png");
    let o = iedp(
        &["infer", "--checkpoint", p(&root.join("run/model.bin")), "--image", p(&root.join("data/images/00000.png")), "--out", p(&out)],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::metadata(&out).unwrap().len() > 0);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("report.json");
    let o = iedp(&["gradcheck", "--scope", "ops", "--out", p(&json)], &[]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS ") && l.contains("max rel err")), "{text}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|r| r["params"].as_array().unwrap().iter().all(|q| q["rel_err"].is_number())));

    let o = iedp(&["gradcheck", "--scope", "ops"], &[("IEDP_GRADCHECK_FAULT", "layer_norm")]);
    assert_eq!(code(&o), 3);
    let text = stdout(&o);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL ")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].contains("layer_norm"));
}
