use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advland_core::schedule::{EpsScheduler, PeriodWindow};
use advland_xio::report::{verify_manifest, Manifest};
use advland_xio::RunConfig;

fn advland(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advland"))
        .args(args)
        .env("ADVLAND_THREADS", "2")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)))
}

const SCHEDULE: &str = r#"
task = "schedule"

[schedule]
epochs = 30
eps = { kind = "cosine", eps_max = 0.45, warmup = 10.0, eps_target = 0.3 }
lr = { kind = "constant", lr = 0.001 }
"#;

const TRAIN: &str = r#"
task = "train"
seed = 5

[model]
kind = "mlp"
widths = [2, 8, 3]
activation = "tanh"

[data]
kind = "blobs"
n = 60
m = 2
classes = 3
margin = 0.5
test_n = 30

[budget]
eps = 0.2

[attack]
kind = "relative"
steps = 5
step_fraction = 0.25
random_start = true
restarts = 1

[schedule]
epochs = 4
periods = [2, 4]
eps = { kind = "linear", eps_max = 0.3, warmup = 2.0, eps_target = 0.2 }
lr = { kind = "constant", lr = 0.01 }

[train]
batch_size = 16
"#;

#[test]
fn unknown_key_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &SCHEDULE.replace("epochs = 30", "epochs = 30\nwarmpu = 3"),
    );
    let out = advland(&[
        "schedule",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["exit"], 2);
    assert!(err["message"].as_str().unwrap().contains("warmpu"), "{err}");
}

#[test]
fn task_mismatch_and_missing_section_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SCHEDULE);
    let out = advland(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let bare = write(dir.path(), "b.toml", "task = \"hessian\"\n");
    let out = advland(&[
        "hessian",
        "--config",
        bare.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = TRAIN.replace("task = \"train\"", "task = \"attack\"")
        + "\n[input]\ncheckpoints = [\"nope.ckpt\"]\n";
    let cfg = write(dir.path(), "c.toml", &text);
    let out = advland(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["exit"], 1);
}

#[test]
fn schedule_csv_follows_the_scheduler() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SCHEDULE);
    let o = dir.path().join("o");
    let out = advland(&[
        "schedule",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(o.join("schedule.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# advland-v1 schedule"));
    assert_eq!(lines.next(), Some("epoch,eps,lr"));
    let s = EpsScheduler::cosine(0.0, 0.45, 10.0, 0.3);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    for (d, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), d);
        assert_eq!(
            f[1].parse::<f64>().unwrap(),
            s.eps_at(d, PeriodWindow::single(30)).unwrap()
        );
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.001);
    }
}

#[test]
fn theory_report_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "task = \"theory\"\nseed = 7\n\n[theory]\ninstances = 40\n",
    );
    let o = dir.path().join("o");
    let out = advland(&[
        "theory",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(o.join("theory.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true, "{report}");
}

#[test]
fn identical_runs_are_byte_identical_and_echo_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TRAIN);
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &runs {
        let out = advland(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            o.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let ma: Manifest = verify_manifest(&runs[0]).unwrap();
    let mb: Manifest = verify_manifest(&runs[1]).unwrap();
    assert_eq!(ma, mb);
    let names: Vec<&str> = ma.outputs.iter().map(|o| o.path.as_str()).collect();
    for want in [
        "model.ckpt",
        "snapshot-2.ckpt",
        "snapshot-4.ckpt",
        "summary.json",
        "telemetry.csv",
    ] {
        assert!(names.contains(&want), "{names:?}");
    }
    for name in names.iter().copied().chain(["manifest.json"]) {
        assert_eq!(
            std::fs::read(runs[0].join(name)).unwrap(),
            std::fs::read(runs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let echoed = RunConfig::from_toml(&ma.config).unwrap();
    let original = RunConfig::from_toml(TRAIN).unwrap();
    assert_eq!(echoed, original);

    let other = dir.path().join("c");
    let out = advland(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        other.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_ne!(
        std::fs::read(other.join("model.ckpt")).unwrap(),
        std::fs::read(runs[0].join("model.ckpt")).unwrap()
    );
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate()
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}
