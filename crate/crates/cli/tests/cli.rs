//! End-to-end tests of the compiled binary: every subcommand, the exit-code
//! classes, and output reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swarmflow"))
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Final state from a snapshot CSV (single member): (x1, x2).
fn read_single_member(path: &Path) -> (f64, f64) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("member_id,x1"), "header {header:?}");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    (row[1].parse().unwrap(), row[2].parse().unwrap())
}

#[test]
fn train_then_propagate_lands_near_the_target() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("exp.toml"),
        r#"
seed = 11
output_dir = "run"

[system]
preset = "identity-channel"
dim = 2

[source]
kind = "point"
point = [0.0, 0.0]

[target]
kind = "point"
point = [1.0, 0.5]

[train]
batch_size = 64
steps = 2000
hidden = [32, 32]
log_interval = 100
"#,
    )
    .unwrap();

    let out = run_in(tmp.path(), &["train", "exp.toml"], &[]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let run_dir = tmp.path().join("run");
    assert!(run_dir.join("checkpoint.swf").exists());

    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,residual_norm_mean,grad_norm,wall_time_s"
    );
    let losses: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 20);
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "loss did not fall: {losses:?}"
    );

    let out = run_in(
        tmp.path(),
        &[
            "propagate",
            "exp.toml",
            "--checkpoint",
            "run/checkpoint.swf",
            "--steps",
            "1",
        ],
        &[],
    );
    assert!(out.status.success(), "propagate failed: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("terminal energy distance to target"));

    let (x, y) = read_single_member(&run_dir.join("snapshot_001.csv"));
    let miss = ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt();
    let rel = miss / (1.0f64 + 0.25).sqrt();
    assert!(rel <= 0.05, "single-step miss {rel:.4}");

    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["members"], 1);
    assert_eq!(trace["dim"], 2);
    assert!(trace["terminal_distance_to_target"].as_f64().unwrap().is_finite());
    assert_eq!(trace["steps"].as_array().unwrap().len(), 1);
}

#[test]
fn stub_propagation_is_pure_drift() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("rot.toml"),
        r#"
seed = 0
output_dir = "drift"

[system]
preset = "rotation2d"
omega = 1.5707963267948966

[source]
kind = "point"
point = [1.0, 0.0]

[target]
kind = "point"
point = [0.0, 1.0]

[propagate]
svg = true
"#,
    )
    .unwrap();

    let out = run_in(
        tmp.path(),
        &["propagate", "rot.toml", "--stub", "--steps", "16"],
        &[],
    );
    assert!(out.status.success(), "stub run failed: {}", stderr_of(&out));
    let dir = tmp.path().join("drift");
    let (x, y) = read_single_member(&dir.join("snapshot_016.csv"));
    assert!(
        x.abs() < 1e-9 && (y - 1.0).abs() < 1e-9,
        "drift endpoint ({x}, {y})"
    );
    assert!(dir.join("snapshot_000.svg").exists());
    assert!(fs::read_to_string(dir.join("snapshot_016.svg"))
        .unwrap()
        .contains("<circle"));
}

#[test]
fn verify_passes_writes_json_and_fails_under_the_tolerance_hook() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["verify", "--json", "report.json"], &[]);
    assert!(out.status.success(), "verify failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("gramian quadrature agreement"));
    assert!(!text.contains("FAIL"));

    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let list = reports.as_array().unwrap();
    assert_eq!(list.len(), 6);
    assert!(list.iter().all(|r| r["passed"].as_bool().unwrap()));

    let out = run_in(
        tmp.path(),
        &["verify"],
        &[("SWARMFLOW_TOLERANCE_SCALE", "1e-20")],
    );
    assert_eq!(out.status.code(), Some(4), "tolerance hook must trip checks");
}

#[test]
fn config_errors_exit_with_the_config_class() {
    let tmp = tempfile::tempdir().unwrap();

    // Source CSV that does not exist.
    fs::write(
        tmp.path().join("missing.toml"),
        r#"
[system]
preset = "identity-channel"
dim = 2

[source]
kind = "csv"
path = "does-not-exist.csv"

[target]
kind = "point"
point = [0.0, 0.0]
"#,
    )
    .unwrap();
    let out = run_in(tmp.path(), &["train", "missing.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("does-not-exist.csv"));

    // Uncontrollable pair: second state never sees the input.
    fs::write(
        tmp.path().join("uncontrollable.toml"),
        r#"
[system]
a = [[0.0, 0.0], [0.0, 0.0]]
b = [[1.0], [0.0]]

[source]
kind = "point"
point = [0.0, 0.0]

[target]
kind = "point"
point = [1.0, 1.0]
"#,
    )
    .unwrap();
    let out = run_in(tmp.path(), &["train", "uncontrollable.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("controllable"));

    // Unparseable TOML.
    fs::write(tmp.path().join("broken.toml"), "[system\npreset =").unwrap();
    let out = run_in(tmp.path(), &["train", "broken.toml"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_dimension_mismatch_names_both_dims() {
    let tmp = tempfile::tempdir().unwrap();
    // steps = 0 writes the freshly initialized field, which is enough to
    // carry a dimension.
    fs::write(
        tmp.path().join("d2.toml"),
        r#"
output_dir = "d2"

[system]
preset = "identity-channel"
dim = 2

[source]
kind = "point"
point = [0.0, 0.0]

[target]
kind = "point"
point = [1.0, 1.0]

[train]
steps = 0
hidden = [4]
"#,
    )
    .unwrap();
    let out = run_in(tmp.path(), &["train", "d2.toml"], &[]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    fs::write(
        tmp.path().join("d3.toml"),
        r#"
[system]
preset = "rotation3d(1.0, 0.7)"

[source]
kind = "point"
point = [1.0, 0.0, 0.0]

[target]
kind = "point"
point = [0.0, 1.0, 0.0]
"#,
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["propagate", "d3.toml", "--checkpoint", "d2/checkpoint.swf"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(
        err.contains('2') && err.contains('3'),
        "mismatch message must name both dimensions: {err}"
    );
}

#[test]
fn seed_env_overrides_and_runs_reproduce_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("init.toml"),
        r#"
seed = 1
output_dir = "o"

[system]
preset = "identity-channel"
dim = 2

[source]
kind = "point"
point = [0.0, 0.0]

[target]
kind = "point"
point = [1.0, 1.0]

[train]
steps = 0
hidden = [8]
"#,
    )
    .unwrap();
    let ckpt = tmp.path().join("o/checkpoint.swf");

    let out = run_in(tmp.path(), &["train", "init.toml"], &[]);
    assert!(out.status.success());
    let base = fs::read(&ckpt).unwrap();

    let out = run_in(tmp.path(), &["train", "init.toml"], &[("SWARMFLOW_SEED", "99")]);
    assert!(out.status.success());
    let overridden = fs::read(&ckpt).unwrap();
    assert_ne!(base, overridden, "env seed must change the initialization");

    let out = run_in(tmp.path(), &["train", "init.toml"], &[("SWARMFLOW_SEED", "99")]);
    assert!(out.status.success());
    let again = fs::read(&ckpt).unwrap();
    assert_eq!(overridden, again, "same seed must reproduce bytes exactly");

    let out = run_in(tmp.path(), &["train", "init.toml"], &[("SWARMFLOW_SEED", "nope")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gramian_subcommand_prints_the_window_operators() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("di.toml"),
        r#"
[system]
preset = "double-integrator"

[source]
kind = "point"
point = [0.0, 0.0]

[target]
kind = "point"
point = [1.0, 0.0]
"#,
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["gramian", "di.toml", "--window", "0.0", "1.0"],
        &[],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("phi ="));
    assert!(text.contains("gramian ="));
    // Unit-window double integrator: W[0][0] = 1/3.
    assert!(text.contains("3.333333"), "gramian values missing: {text}");

    let out = run_in(
        tmp.path(),
        &["gramian", "di.toml", "--window", "0.9", "0.2"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "inverted window is a config error");
}
