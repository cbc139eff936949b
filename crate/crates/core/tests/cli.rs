use std::path::Path;
use std::process::{Command, Output};

fn distcomp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distcomp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "M = 8\nN = 3\nB = 2\nK_max = 3\neval_realizations = 20\neval_draws = 5\ncalibration_realizations = 2\ncalibration_draws = 200\n";

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = distcomp(&["print-config"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("T = 200\n"));
    std::fs::write(dir.path().join("c.toml"), &text).unwrap();
    let again = distcomp(&["--config", "c.toml", "--print-config"], dir.path());
    assert_eq!(stdout(&again), text);
}

#[test]
fn usage_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "M = 8\nbatch_size = -3\n").unwrap();
    let o = distcomp(&["--config", "bad.toml", "train"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    std::fs::write(dir.path().join("typo.toml"), "learning_rate = 0.1\n").unwrap();
    let o = distcomp(&["--config", "typo.toml", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    assert_eq!(distcomp(&["--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(
        distcomp(&["--methods", "pca", "sweep-k"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(distcomp(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = distcomp(&["selftest"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn baseline_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let common = ["--config", "small.toml", "--methods", "evd,bcd,lower-bound"];
    let run = |cmd: &[&str], out: &str| {
        let mut args: Vec<&str> = common.to_vec();
        args.extend(["--out", out]);
        args.extend(cmd);
        let o = distcomp(&args, d);
        assert!(o.status.success(), "{:?}: {}", cmd, stderr(&o));
        o
    };
    run(&["sweep-k"], "a");
    run(&["sweep-k"], "b");
    let a = std::fs::read(d.join("a/sweep.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/sweep.csv")).unwrap());
    assert!(d.join("a/sweep_manifest.txt").exists());
    let text = String::from_utf8(a).unwrap();
    // 3 methods x 3 stages plus the header
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().nth(1).unwrap().starts_with("evd,1,6,"));

    run(&["cost-curves", "--sweep", "a/sweep.csv"], "a");
    run(&["crossover", "--sweep", "a/sweep.csv"], "a");
    assert!(d.join("a/crossover.csv").exists());
    let o = run(
        &["plot", "a/sweep.csv", "a/cost_curves.csv", "a/crossover_costs.csv"],
        "a/plots",
    );
    assert_eq!(stdout(&o).lines().count(), 3);
    let svg = std::fs::read_to_string(d.join("a/plots/sweep.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 3);

    // a different seed changes the numbers
    let mut args: Vec<&str> = common.to_vec();
    args.extend(["--out", "c", "--seed", "9", "sweep-k"]);
    assert!(distcomp(&args, d).status.success());
    assert_ne!(
        std::fs::read(d.join("c/sweep.csv")).unwrap(),
        std::fs::read(d.join("a/sweep.csv")).unwrap()
    );
}

#[test]
fn plot_reports_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.csv"), "epoch,train_loss,validation_loss\n0,1,1\n").unwrap();
    let o = distcomp(&["--out", "p", "plot", "x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`learning_rate`"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{SMALL}hidden = [8, 4]\nbatch_size = 32\nvalidation_size = 64\nbatches_per_epoch = 3\nmax_epochs = 2\ncalibration_size = 128\n"
    );
    std::fs::write(dir.path().join("t.toml"), cfg).unwrap();
    let o = distcomp(&["--config", "t.toml", "--out", "o", "train"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let ckpt = out.lines().find_map(|l| l.strip_prefix("checkpoint ")).unwrap();
    let log = out.lines().find_map(|l| l.strip_prefix("log ")).unwrap();
    assert!(dir.path().join(ckpt).exists());
    let log = std::fs::read_to_string(dir.path().join(log)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("o/train_manifest.txt").exists());
}
