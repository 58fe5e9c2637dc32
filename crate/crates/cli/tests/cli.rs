use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[simulator]
n_particles = 3
sample_every = 20
n_sampled_steps = 12

[data]
train = 8
validation = 3
test = 3

[model]
sigma_mode = "isotropic"
hidden_dim = 8
encoder_window = 6
decoder_window = 6
teacher_force_every = 3

[loss]
kind = "iso_gauss"

[training]
epochs = 2
batch_size = 4

[error_profile]
dt_grid = [0.002, 0.005]
reference_dt = 0.001
sigma_grid = [1e-4, 1e-3]
horizon = 6
n_runs = 2
"#;

fn fnri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnri"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env("FNRI_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_workflow_in_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("config.toml"), SMALL).unwrap();

    ok(&fnri(d, &["simulate", "--config", "config.toml"]));
    for f in ["train.tuld", "valid.tuld", "test.tuld"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }

    ok(&fnri(
        d,
        &[
            "error-profile",
            "comp",
            "--config",
            "config.toml",
            "--out",
            "comp.csv",
        ],
    ));
    let csv = fs::read_to_string(d.join("comp.csv")).unwrap();
    assert!(csv.starts_with("axis1,axis2,mean_deviation,stderr,n_effective"));
    assert_eq!(csv.lines().count(), 1 + 6 * 2);

    let log = ok(&fnri(
        d,
        &["train", "--config", "config.toml", "--out", "run"],
    ));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    assert!(d.join("run/checkpoint.fnrc").exists());
    assert!(d.join("run/runlog.jsonl").exists());

    let report = ok(&fnri(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.fnrc",
            "--out",
            "report",
        ],
    ));
    assert!(report.contains("edge_accuracy_percent:"));
    assert_eq!(
        fs::read_to_string(d.join("report/report.txt")).unwrap(),
        report
    );
    let again = ok(&fnri(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.fnrc",
            "--out",
            "report2",
        ],
    ));
    assert_eq!(report, again);

    let table = ok(&fnri(d, &["report", "--runlog", "run/runlog.jsonl"]));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn prior_schedule_from_grids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("config.toml"), SMALL).unwrap();
    ok(&fnri(d, &["simulate"]));
    ok(&fnri(d, &["error-profile", "prior"]));
    let prior = fs::read_to_string(d.join("prior.csv")).unwrap();
    assert!(prior.starts_with("t_index,sigma"));
    assert_eq!(prior.lines().count(), 1 + 6);
}

#[test]
fn init_writes_a_loadable_profile() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fnri(
        dir.path(),
        &["init", "--profile", "full", "--out", "full.toml"],
    ));
    let text = fs::read_to_string(dir.path().join("full.toml")).unwrap();
    assert!(text.contains("train = 50000"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[training]\nepoch = 3\n").unwrap();
    let out = fnri(d, &["simulate", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let out = fnri(d, &["evaluate", "--checkpoint", "missing.fnrc"]);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_fnri"))
        .args(["--run-dir"])
        .arg(d)
        .args(["init"])
        .env("FNRI_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
