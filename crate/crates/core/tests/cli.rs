use std::path::Path;

use chanprune::cli;

const TINY: &[&str] = &[
    "--set", "image_size=8",
    "--set", "train_per_class=60",
    "--set", "test_per_class=20",
    "--set", "widths=4,6,6,8",
    "--set", "selection_batches=2",
    "--epochs", "3",
    "--refit-epochs", "2",
    "--finetune-epochs", "1",
];

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Outcome {
    let argv: Vec<String> = std::iter::once("chanprune").chain(args.iter().copied()).map(String::from).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn run_tiny(cmd: &[&str], out: &Path) -> Outcome {
    let mut args = cmd.to_vec();
    args.extend_from_slice(TINY);
    let out = out.to_str().unwrap();
    args.extend_from_slice(&["--out", out]);
    run(&args)
}

fn assert_single_line_failure(o: &Outcome) {
    assert_ne!(o.code, 0);
    assert_eq!(o.stderr.trim_end().lines().count(), 1, "{:?}", o.stderr);
}

fn train_baseline(dir: &Path) -> String {
    let o = run_tiny(&["train"], dir);
    assert_eq!(o.code, 0, "{}", o.stderr);
    dir.join("baseline.prnk").to_str().unwrap().to_string()
}

#[test]
fn train_prune_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_baseline(dir.path());
    let o = run_tiny(
        &["prune", "--model", &model, "--rate", "0.3", "--losses", "r,s,c", "--alpha", "0.001", "--beta", "1"],
        dir.path(),
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("#FLOPs"));
    for f in ["pruned.prnk", "report.json", "curve_layer0.csv", "curve_layer7.csv", "train_log.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let pruned = dir.path().join("pruned.prnk");
    let o = run_tiny(&["eval", "--model", pruned.to_str().unwrap()], dir.path());
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("test error"));
    let o = run(&["report", "--report", dir.path().join("report.json").to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("L_r+L_s+L_c"));
}

#[test]
fn prune_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_baseline(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run_tiny(&["prune", "--model", &model, "--seed", "4"], d);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }
    for f in ["pruned.prnk", "report.json", "curve_layer2.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_writes_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(&["ablation", "--seeds", "1"], dir.path());
    assert_eq!(o.code, 0, "{}", o.stderr);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["L_r", "L_s", "L_c", "L_r+L_s", "L_r+L_c", "L_s+L_c", "L_r+L_s+L_c"]);
    assert!(dir.path().join("ablation.txt").is_file());
}

#[test]
fn rate_sweep_writes_one_row_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(&["rate-sweep", "--seeds", "1", "--rates", "0.3,0.7"], dir.path());
    assert_eq!(o.code, 0, "{}", o.stderr);
    let csv = std::fs::read_to_string(dir.path().join("rate_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("70,"));
}

#[test]
fn check_grad_passes() {
    let o = run(&["check-grad", "--seeds", "2"]);
    assert_eq!(o.code, 0, "{}", o.stdout);
    assert!(!o.stdout.contains("FAIL"));
}

#[test]
fn config_file_and_set_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# tiny\nimage_size = 8\ntrain_per_class = 30\ntest_per_class = 10\nwidths = 2,2,2,2\nepochs = 1\n").unwrap();
    let out = dir.path().join("o");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(out.join("baseline.prnk").is_file());
}

#[test]
fn failures_are_single_line() {
    let dir = tempfile::tempdir().unwrap();
    assert_single_line_failure(&run(&["train", "--bogus"]));
    assert_single_line_failure(&run(&["frobnicate"]));
    assert_single_line_failure(&run_tiny(&["train", "--losses", ""], dir.path()));
    assert_single_line_failure(&run_tiny(&["train", "--rate", "1.5"], dir.path()));
    assert_single_line_failure(&run_tiny(&["train", "--set", "nonsense"], dir.path()));
    assert_single_line_failure(&run_tiny(&["train", "--data", "/no/such/dir"], dir.path()));
    assert_single_line_failure(&run_tiny(&["prune", "--model", "/no/such/model.prnk"], dir.path()));
    assert_single_line_failure(&run(&["report", "--report", "/no/such/report.json"]));
    let garbage = dir.path().join("garbage.prnk");
    std::fs::write(&garbage, b"not a model").unwrap();
    assert_single_line_failure(&run_tiny(&["eval", "--model", garbage.to_str().unwrap()], dir.path()));
}

#[test]
fn pruning_an_untrained_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(&["train", "--set", "epochs=0"], dir.path());
    assert_eq!(o.code, 0, "{}", o.stderr);
    let model = dir.path().join("baseline.prnk");
    let o = run_tiny(&["prune", "--model", model.to_str().unwrap()], dir.path());
    assert!(o.code != 0 && o.stderr.contains("trained"), "{}", o.stderr);
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.code, 0);
    for cmd in ["train", "prune", "eval", "ablation", "rate-sweep", "check-grad", "report"] {
        assert!(o.stdout.contains(cmd), "{cmd}");
    }
}
