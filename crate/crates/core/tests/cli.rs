//! Binary surface: argument handling, prerequisites, manifests, ablation
//! table.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/tiny.toml");

fn unigrec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unigrec"))
        .args(args)
        .env("UNIGREC_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Fixture config with faster training, written next to a temp run root.
fn quick_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(FIXTURE)
        .unwrap()
        .replace("epochs = 100", "epochs = 20")
        .replace("max_epochs = 8", "max_epochs = 2")
        .replace("seeds = [0, 1, 2]", "seeds = [0]");
    let path = dir.join("quick.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn eval_before_training_names_the_joint_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let o = unigrec(&["eval", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unigrec joint"), "{}", stderr(&o));

    let o = unigrec(&["joint", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unigrec prepare"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(FIXTURE).unwrap().replace("[teacher]", "[teacher]\nwidth = 3");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = unigrec(&["prepare", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
    assert!(!dir.path().join("tiny").exists());
}

#[test]
fn rerun_is_a_no_op_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let args = ["prepare", "--config", cfg.to_str().unwrap()];
    assert!(unigrec(&args, dir.path()).status.success());
    let dataset = dir.path().join("tiny/data/dataset.json");
    let stamp = fs::metadata(&dataset).unwrap().modified().unwrap();

    let o = unigrec(&args, dir.path());
    assert!(o.status.success());
    assert!(stderr(&o).contains("up to date"), "{}", stderr(&o));
    assert_eq!(fs::metadata(&dataset).unwrap().modified().unwrap(), stamp);

    std::thread::sleep(std::time::Duration::from_millis(20));
    let o = unigrec(&["prepare", "--config", cfg.to_str().unwrap(), "--force"], dir.path());
    assert!(o.status.success());
    assert!(!stderr(&o).contains("up to date"));
    assert_ne!(fs::metadata(&dataset).unwrap().modified().unwrap(), stamp);

    // a different seed changes the teacher config hash
    assert!(unigrec(&["train-teacher", "--config", cfg.to_str().unwrap()], dir.path()).status.success());
    let o = unigrec(&["train-teacher", "--config", cfg.to_str().unwrap(), "--seed", "4"], dir.path());
    assert!(o.status.success());
    assert!(!stderr(&o).contains("up to date"));
}

#[test]
fn ablate_writes_one_row_per_rung() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert!(unigrec(&["prepare", "--config", c], dir.path()).status.success());
    let o = unigrec(&["ablate", "--config", c, "--rungs", "M0,M2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("tiny/ablation/table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "Variant,Seeds,Recall@5,Recall@10,NDCG@5,NDCG@10");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("M0,1,"));
    assert!(lines[2].starts_with("M2,1,"));

    // distilling rungs need the teacher
    let o = unigrec(&["ablate", "--config", c, "--rungs", "M6"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unigrec train-teacher"), "{}", stderr(&o));
}

#[test]
fn bad_rung_name_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let o = unigrec(&["ablate", "--config", cfg.to_str().unwrap(), "--rungs", "M9"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("M9"));
}
