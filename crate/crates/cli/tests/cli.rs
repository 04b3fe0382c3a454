use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sal_core::experiment::{ExperimentConfig, RunRecord};

const TINY: &str = r#"
name = "tiny"
scenario = "sal"
strategy = "margin"
start_fraction = 0.2
query_fraction = 0.1
change_fraction = 0.3
num_iterations = 2
seeds = [0]

[dataset]
kind = "synthetic"
num_classes = 2
train_per_class = 10
val_per_class = 2
test_per_class = 3
image_size = 16
seed = 3

[train]
epochs = 2
batch_size = 8
patience = 0
ssim_window = 3

[train.backbone]
channels = [4, 6]
strides = [1, 2]
"#;

fn sal(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sal"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "sal {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, scenario: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    let text = TINY.replace("name = \"tiny\"", &format!("name = \"{name}\"")).replace(
        "scenario = \"sal\"",
        &format!("scenario = \"{scenario}\""),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn is_png(path: &Path) -> bool {
    std::fs::read(path).is_ok_and(|b| b.starts_with(b"\x89PNG\r\n\x1a\n"))
}

#[test]
fn run_writes_record_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "tiny", "sal");
    let out = dir.path().join("out");
    sal(&["run", "--config", config.to_str().unwrap(), "--seed", "4", "--output", out.to_str().unwrap()], dir.path());

    let json = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| RunRecord::read_json(p).is_ok())
        .expect("run record written");
    let record = RunRecord::read_json(&json).unwrap();
    assert_eq!(record.seed, 4);
    assert_eq!(record.points.len(), 3);
    record.check_invariants().unwrap();

    let csv = std::fs::read_to_string(json.with_file_name(format!("{}-curve.csv", record.run_id))).unwrap();
    assert_eq!(csv.lines().count(), 1 + record.points.len());
}

#[test]
fn sweep_then_plot_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "tiny_sal", "sal");
    let b = write_config(dir.path(), "tiny_b1", "b1");
    let out = dir.path().join("sweep");
    let printed = sal(
        &["sweep", "--config", a.to_str().unwrap(), b.to_str().unwrap(), "--seeds", "2", "--output", out.to_str().unwrap()],
        dir.path(),
    );

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary, String::from_utf8_lossy(&printed.stdout));
    assert_eq!(summary.lines().count(), 3, "{summary}");
    for name in ["tiny_sal", "tiny_b1"] {
        let agg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(name).join("aggregate.json")).unwrap()).unwrap();
        assert_eq!(agg["seeds"].as_array().unwrap().len(), 2);
        assert!(out.join(name).join("aggregate.csv").exists());
    }

    let records = out.to_str().unwrap();
    let curve = dir.path().join("curve.png");
    sal(&["plot", "--records", records, "--kind", "curve", "--out", curve.to_str().unwrap()], dir.path());
    assert!(is_png(&curve));

    let scatter = dir.path().join("scatter.png");
    sal(&["plot", "--records", records, "--kind", "scatter", "--out", scatter.to_str().unwrap()], dir.path());
    assert!(is_png(&scatter));

    let overlays = dir.path().join("overlays");
    let printed = sal(
        &["plot", "--records", records, "--kind", "overlay", "--count", "2", "--out", overlays.to_str().unwrap()],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&printed.stdout);
    let paths: Vec<&str> = stdout.lines().collect();
    assert_eq!(paths.len(), 4 * 2, "two images for each of four runs");
    assert!(paths.iter().all(|p| is_png(Path::new(p))));
}

#[test]
fn plot_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sal"))
        .args(["plot", "--records", dir.path().to_str().unwrap(), "--kind", "curve"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no run records"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        count += 1;
    }
    assert_eq!(count, 6);
}
