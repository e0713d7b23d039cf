use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = "\
experiment.scenario = domain
experiment.seed = 3
experiment.debug_dump_masks = true
data.num_tasks = 2
data.total_classes = 3
data.train_per_task = 120
data.test_per_task = 60
data.channels = 2
data.height = 6
data.width = 6
model.conv_channels = 4, 6
model.conv_kernels = 3, 3
model.conv_strides = 1, 2
model.hidden = 12
trainer.epochs = 3
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subnetcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, cfg: &Path) -> Output {
    run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
}

#[test]
fn unknown_key_is_rejected_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "selection.sparsityy = 0.5\n").unwrap();
    let o = train(&tmp.path().join("out"), &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sparsityy"), "{}", stderr(&o));
}

#[test]
fn smoke_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = a.to_str().unwrap();

    let o = train(&a, &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("forgetting: 0.00 0.00"));

    // same seed, second directory: identical files
    assert!(train(&b, &cfg).status.success());
    for f in [
        "metrics/epochs.csv",
        "metrics/accuracy_matrix.csv",
        "summary.json",
        "model.bin",
        "masks.smcl",
        "taskstats.bin",
        "history.json",
        "config.cfg",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    // rerunning a finished run resumes to the same result
    assert!(train(&a, &cfg).status.success());
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());

    let o = run(&["eval", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("oracle-id accuracy") && text.contains("inferred-id accuracy"));

    let o = run(&["masks", "verify", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = run(&["masks", "stats", "--out", out]);
    assert!(stdout(&o).contains("ratio at plane capacity vs float32: 32.0×"), "{}", stdout(&o));

    for k in 0..2 {
        let to = tmp.path().join(format!("task{k}.smcl"));
        let o = run(&["masks", "extract", "--out", out, "--task", &k.to_string(), "--to", to.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(fs::read(&to).unwrap(), fs::read(a.join(format!("debug/mask_task{k}.smcl"))).unwrap());
    }
    let o = run(&["masks", "extract", "--out", out, "--task", "2", "--to", "/dev/null"]);
    assert_eq!(o.status.code(), Some(4));

    let o = run(&["infer-id", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("layer calls: [") && stdout(&o).contains(", 0, 0, 0]"), "{}", stdout(&o));

    let o = run(&["eval", "--out", out, "--scenario", "task"]);
    assert_eq!(o.status.code(), Some(3));

    // a different setting in the same directory is a resume mismatch
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "4"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("experiment.seed"));

    // damaged container
    let masks = a.join("masks.smcl");
    let mut bytes = fs::read(&masks).unwrap();
    bytes[0] = b'X';
    fs::write(&masks, &bytes).unwrap();
    assert_eq!(run(&["masks", "verify", "--out", out]).status.code(), Some(10));
    bytes[0] = b'S';
    bytes.pop();
    fs::write(&masks, &bytes).unwrap();
    assert_eq!(run(&["masks", "verify", "--out", out]).status.code(), Some(12));
}

#[test]
fn ablation_table_and_toggles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    fs::write(&cfg, SMOKE).unwrap();
    let out = tmp.path().join("abl");
    let o = run(&[
        "ablation",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ladder",
        "baseline,freeze-norm",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("WSN based Baseline") && text.contains("+ Freeze batch normalization layers"));
    assert!(out.join("ablation.json").is_file());

    let o = run(&["ablation", "--ladder", "baseline,freeze-bn", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("freeze-bn"));
}
