use std::path::Path;
use std::process::{Command, Output};

fn lgcaa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgcaa"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough that training and evaluation take a moment.
const TINY: &str = r#"{
  "run_name": "tiny",
  "dataset": { "count": 2, "hr_size": 16 },
  "model": { "width": 8, "time_dim": 8 },
  "train": { "steps": 3, "eval_size": 2 },
  "sample": { "steps": 3 }
}"#;

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let first = lgcaa(&["degrade", "--out", "runs"], dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let run = dir.path().join("runs/default/degrade");
    assert!(run.join("manifest.json").exists());
    let hash = std::fs::read_to_string(run.join("config_hash.txt")).unwrap();
    assert_eq!(hash.trim().len(), 64);

    let again = lgcaa(&["degrade", "--out", "runs"], dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = lgcaa(&["degrade", "--out", "runs", "--force"], dir.path());
    assert!(forced.status.success(), "{}", stderr(&forced));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        "{\n  \"seed\": 1,\n  \"trian\": {}\n}\n",
    )
    .unwrap();
    let o = lgcaa(&["degrade", "--config", "bad.json"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(
        err.contains("bad.json") && err.contains("line 3") && err.contains("trian"),
        "{err}"
    );

    std::fs::write(
        dir.path().join("neg.json"),
        "{ \"train\": { \"lr\": -1.0 } }",
    )
    .unwrap();
    let o = lgcaa(&["train", "--config", "neg.json"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_writes_hashed_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = lgcaa(
        &["train", "--config", "tiny.json", "--out", "runs"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let train = dir.path().join("runs/tiny/train");
    let hash = std::fs::read_to_string(train.join("config_hash.txt")).unwrap();
    let header = format!("# config_hash={}", hash.trim());
    let log = std::fs::read_to_string(train.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some(header.as_str()));

    let ck = train.join("checkpoint.bin");
    let ck = ck.to_str().unwrap();
    let o = lgcaa(&["eval", "--checkpoint", ck, "--out", "runs"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("psnr"));
    for table in ["eval.csv", "latent_hist.csv"] {
        let text = std::fs::read_to_string(dir.path().join("runs/tiny/eval").join(table)).unwrap();
        assert_eq!(text.lines().next(), Some(header.as_str()), "{table}");
    }

    let o = lgcaa(
        &[
            "sweep",
            "--checkpoint",
            ck,
            "--steps",
            "2,3",
            "--seeds",
            "0",
            "--out",
            "runs",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = std::fs::read_to_string(dir.path().join("runs/tiny/sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some(header.as_str()));
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn gradcheck_rejects_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = lgcaa(&["gradcheck", "--seeds", "0", "--tol", "0"], dir.path());
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("gradient checks failed"),
        "{}",
        stderr(&o)
    );
}
