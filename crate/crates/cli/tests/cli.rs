use std::path::Path;
use std::process::{Command, Output};

fn mwt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mwt(args);
    assert!(o.status.success(), "mwt {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn synth_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["synth", d, "--texts", "16", "--images", "16", "--pairs", "16", "--examples", "8", "--steps", "3", "--epochs", "1"]);
}

fn path(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_string()
}

#[test]
fn synth_pretrain_finetune_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d);
    ok(&["pretrain", &path(d, "pretrain.toml")]);
    let ckpt = d.join("runs/pretrain/checkpoint.mwt");
    let first_ckpt = std::fs::read(&ckpt).unwrap();
    let first_metrics = std::fs::read_to_string(d.join("runs/pretrain/metrics.jsonl")).unwrap();
    assert_eq!(first_metrics.lines().count(), 3);

    ok(&["pretrain", &path(d, "pretrain.toml")]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), first_ckpt);
    assert_eq!(std::fs::read_to_string(d.join("runs/pretrain/metrics.jsonl")).unwrap(), first_metrics);

    let inspect = ok(&["inspect", ckpt.to_str().unwrap()]);
    assert!(inspect.contains("Stored tensors"), "{inspect}");

    ok(&["finetune", &path(d, "finetune-retrieval.toml")]);
    let tuned = d.join("runs/retrieval/checkpoint.mwt");
    let args = ["eval", tuned.to_str().unwrap(), "--task", "retrieval", "--data", &path(d, "retrieval.tsv")];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let record: serde_json::Value = serde_json::from_str(a.lines().last().unwrap()).unwrap();
    for dir in ["image_to_text", "text_to_image"] {
        let r: Vec<f64> = ["R@1", "R@5", "R@10"].iter().map(|k| record[dir][k].as_f64().unwrap()).collect();
        assert!(r[0] <= r[1] && r[1] <= r[2], "{dir}: {r:?}");
    }
    assert!(a.starts_with("direction\tR@1\tR@5\tR@10"), "{a}");

    let caption = ok(&["caption", tuned.to_str().unwrap(), &path(d, "images/cap00000.rst"), "--max-len", "4"]);
    assert_eq!(caption.lines().count(), 1, "{caption}");
}

#[test]
fn synth_configs_carry_task_defaults() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    let text = std::fs::read_to_string(dir.path().join("finetune-retrieval.toml")).unwrap();
    let config = multiway::config::RunConfig::from_toml(&text).unwrap();
    let section = config.finetune.unwrap().resolved();
    assert_eq!(section.mask_prob, 0.6);
    assert_eq!(section.drop_path, Some(0.3));
}

#[test]
fn missing_path_exits_with_usage_status() {
    let o = mwt(&["pretrain", "/no/such/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("/no/such/run.toml"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_task_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    let o = mwt(&["finetune", &path(dir.path(), "finetune-caption.toml"), "--task", "segmentation"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("segmentation"), "{}", stderr(&o));
}

#[test]
fn inspect_reports_the_giant_breakdown() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper-giant.toml");
    let out = ok(&["inspect", config]);
    assert!(out.contains("V-FFN 692,362,240 (~692M)"), "{out}");
    assert!(out.contains("VL-FFN 51,927,168"), "{out}");
}

#[test]
fn corrupted_checkpoint_reports_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d);
    ok(&["pretrain", &path(d, "pretrain.toml")]);
    let ckpt = d.join("runs/pretrain/checkpoint.mwt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let at = bytes.len() - 64;
    bytes[at] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = mwt(&["inspect", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}
