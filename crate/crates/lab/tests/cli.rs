use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn setgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SETGAN_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = setgan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small but complete training settings.
const TINY: &[&str] = &[
    "--set", "model.g_hidden=8",
    "--set", "model.d_hidden=8",
    "--set", "early_stop.samples=256",
    "--set", "data.samples=400",
    "--set", "data.heldout=256",
];

#[test]
fn datagen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["datagen", "--out", p(&a), "--samples", "500", "--seed", "3"]);
    ok(&["datagen", "--out", p(&b), "--samples", "500", "--seed", "3"]);
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), 500);
}

#[test]
fn zero_epoch_run_holds_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--arch", "gan", "--epochs", "0", "--out", p(&run)];
    args.extend_from_slice(TINY);
    ok(&args);
    for f in ["config.json", "run.json", "log.csv", "checkpoint/generator.json", "checkpoint/discriminator.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap(), "epoch,d_loss,g_loss,sbd,wall_s\n");
    let eval = ok(&["eval", p(&run), "--trials", "2", "--samples", "256"]);
    assert!(eval.starts_with("metric,value,stderr,trials\n"));
    assert!(run.join("eval.csv").is_file());
}

#[test]
fn invalid_configuration_exits_with_two() {
    let out = setgan(&["train", "--arch", "pacgan", "--k", "1", "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k"));
    let out = setgan(&["train", "--set", "hist.binz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hist.binz"));
    let out = setgan(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--arch", "gan", "--epochs", "1", "--lr", "1e200", "--out"];
    let run = dir.path().join("run");
    args.push(p(&run));
    args.extend_from_slice(TINY);
    let out = setgan(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(setgan(&["eval", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn resolved_config_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = vec!["train", "--arch", "setgan", "--k", "3", "--epochs", "2", "--seed", "7", "--out", p(&a)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "early_stop.every=1"]);
    ok(&args);
    let cfg = a.join("config.json");
    ok(&["train", "--config", p(&cfg), "--out", p(&b)]);
    for f in ["config.json", "run.json", "checkpoint/generator.json", "checkpoint/discriminator.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("log.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(strip(&a).len(), 3);
}

#[test]
fn sbd_command_reports_zero_and_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("real.csv");
    ok(&["datagen", "--out", p(&real), "--samples", "2000"]);
    let out = ok(&["sbd", p(&real), p(&real)]);
    assert_eq!(out.trim(), "sbd,0");
    let wide = dir.path().join("wide.csv");
    fs::write(&wide, "1,2,3\n4,5,6\n").unwrap();
    assert_eq!(setgan(&["sbd", p(&real), p(&wide)]).status.code(), Some(2));
}

#[test]
fn sbd_against_a_single_point_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("real.csv");
    let point = dir.path().join("point.csv");
    ok(&["datagen", "--out", p(&real), "--samples", "4096"]);
    fs::write(&point, "0,0\n".repeat(4096)).unwrap();
    let v: f64 = ok(&["sbd", p(&real), p(&point)]).trim().strip_prefix("sbd,").unwrap().parse().unwrap();
    // One bin with everything against 32 bins of 1/32 each.
    let expected = 31.0 / 32.0 + (31.0f64 / 32.0).powi(2) / (1.0 + 1.0 / 32.0);
    assert!((v - expected).abs() < 1e-9, "{v}");
}

#[test]
fn haar_report_lists_every_level() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("img.csv");
    let mut text = String::new();
    for i in 0..64 {
        let row: Vec<String> = (0..16).map(|j| ((i * 7 + j * 3) % 11).to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&f, text).unwrap();
    let out = ok(&["sbd", p(&f), p(&f), "--depth", "3", "--haar-levels", "2", "--image-side", "4"]);
    let keys: Vec<&str> = out.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["sbd", "sbd_level_1", "sbd_level_2", "sbd_haar_mean"]);
}

#[test]
fn single_cell_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let mut args = vec![
        "sweep", "--archs", "gan", "--lr-draws", "1", "--ratios", "1", "--seeds", "0", "--epochs", "1", "--out", p(&out),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "arch,lr,gd_ratio,seed,sbd,is,hq,modes,epochs_run,status");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("gan,") && lines[1].ends_with(",ok"));
    assert!(dir.path().join("sweep.timings.csv").is_file());
    let rep = ok(&["report", p(&out)]);
    assert!(rep.lines().nth(1).unwrap().starts_with("gan,1,1,1,"));
}

#[test]
fn every_subcommand_has_help() {
    for cmd in ["datagen", "train", "eval", "sweep", "sbd", "report"] {
        assert!(ok(&[cmd, "--help"]).contains("Usage"));
    }
}
