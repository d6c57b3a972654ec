use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tag_head::config::{DataConfig, RunConfig};

fn taghead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taghead"))
        .args(args)
        .output()
        .expect("spawn taghead")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    RunConfig::tiny(0).save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_reports_a_parameter_free_graph() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("params");
    let o = taghead(&["params", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.lines().any(|l| l == "graph 0"), "{stdout}");
    assert_eq!(fs::read_to_string(out.join("params.txt")).unwrap(), stdout);
}

#[test]
fn gradcheck_passes_and_the_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ok = taghead(&["gradcheck", "--config", s(&cfg), "--out", s(&dir.path().join("g"))]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(text(&ok.stdout).ends_with("PASS\n"));

    let bad = taghead(&["gradcheck", "--fault", "--config", s(&cfg), "--out", s(&dir.path().join("f"))]);
    assert!(!bad.status.success());
    assert!(text(&bad.stderr).contains("gradient check failed"));
}

#[test]
fn train_then_eval_reproduces_the_test_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let t = taghead(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(t.status.success(), "{}", text(&t.stderr));
    assert!(text(&t.stderr).contains("epoch 2 val"));
    for f in ["config.json", "model.json", "metrics.csv", "checkpoint.bin", "report.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let eval = dir.path().join("eval");
    let ckpt = run.join("checkpoint.bin");
    let e = taghead(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    assert!(e.status.success(), "{}", text(&e.stderr));
    assert_eq!(
        fs::read_to_string(run.join("report.txt")).unwrap(),
        fs::read_to_string(eval.join("report.txt")).unwrap()
    );

    let d = taghead(&[
        "dump-features", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--stage", "encoder", "--out", s(&eval),
    ]);
    assert!(d.status.success(), "{}", text(&d.stderr));
    assert!(text(&d.stdout).starts_with("rows 6\n"));
    assert!(eval.join("features_test_encoder.csv").exists());
}

#[test]
fn ablate_runs_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablate");
    let o = taghead(&["ablate", "--config", s(&cfg), "--seeds", "0,1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    for label in ["B ", "B+TE ", "B+TE+IF-FC ", "B+TE+TAT ", "FULL "] {
        assert!(stdout.lines().any(|l| l.starts_with(label)), "{label} missing from {stdout}");
    }
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 11);
}

#[test]
fn generated_data_can_be_trained_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let g = taghead(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(g.status.success(), "{}", text(&g.stderr));
    assert!(text(&g.stdout).starts_with("train 12 val 6 test 6"));

    let mut from_disk = RunConfig::tiny(0);
    from_disk.data = DataConfig::Path(data);
    let disk_cfg = dir.path().join("disk.json");
    from_disk.save(&disk_cfg).unwrap();
    let a = taghead(&["train", "--config", s(&disk_cfg), "--out", s(&dir.path().join("a"))]);
    let b = taghead(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]);
    assert!(a.status.success(), "{}", text(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = taghead(&["params", "--config", s(&dir.path().join("nope.json"))]);
    assert!(!missing.status.success());
    assert!(text(&missing.stderr).contains("reading config"));

    let cfg = tiny_config(dir.path());
    let raw = fs::read_to_string(&cfg).unwrap().replacen("\"seed\"", "\"sede\"", 1);
    let typo = dir.path().join("typo.json");
    fs::write(&typo, raw).unwrap();
    let o = taghead(&["params", "--config", s(&typo)]);
    assert!(!o.status.success());

    let o = taghead(&["eval", "--config", s(&cfg), "--checkpoint", "x", "--split", "holdout"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("unknown split"));

    let o = taghead(&["eval", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("none.bin"))]);
    assert!(!o.status.success());
}
