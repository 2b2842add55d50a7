use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn spatreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatreg"))
        .args(args)
        .env_remove("SPATREG_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"levels":2,"blocks":1,"width":4,"iterations_per_level":[5,5],"batch_size":2,"image_shape":[32,32],"learning_rate":0.001}"#;

/// A small dataset and a briefly trained model shared by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

impl Fixture {
    fn ckpt(&self) -> PathBuf {
        self.run.join("model.ckpt")
    }

    fn pair(&self, i: usize, what: &str) -> PathBuf {
        self.data.join(format!("pair_{i:04}_{what}.sra"))
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let cfg = dir.path().join("config.json");
        std::fs::write(&cfg, TINY).unwrap();
        ok(spatreg(&["gen-data", "--seed", "3", "--shape", "32", "--pairs", "4", "--levels", "2", "--out", s(&data)]));
        ok(spatreg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
        Fixture { _dir: dir, data, run }
    })
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_lists_every_pair() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    ok(spatreg(&["gen-data", "--seed", "7", "--shape", "32,32", "--pairs", "10", "--out", s(&out)]));
    let m = manifest(&out);
    let pairs = m["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 10);
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(spatreg(&["gen-data", "--seed", "11", "--shape", "32", "--pairs", "3", "--out", s(out)]));
    }
    let files = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
    for name in files(&a) {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn gen_data_rejects_shape_too_small_for_pyramid() {
    let dir = TempDir::new().unwrap();
    let o = spatreg(&["gen-data", "--seed", "1", "--shape", "8", "--pairs", "2", "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape incompatible with pyramid depth"), "{}", stderr(&o));
}

#[test]
fn gen_data_unwritable_destination_exits_2() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = spatreg(&["gen-data", "--seed", "1", "--shape", "32", "--pairs", "1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_writes_run_artifacts() {
    let f = fixture();
    for name in ["model.ckpt", "training_curve.csv", "config.json", "experiment.json"] {
        assert!(f.run.join(name).exists(), "{name}");
    }
    let curve = std::fs::read_to_string(f.run.join("training_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 10);
}

#[test]
fn register_emits_containers_and_report() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("reg");
    ok(spatreg(&[
        "register",
        "--checkpoint",
        s(&f.ckpt()),
        "--fixed",
        s(&f.pair(0, "fixed")),
        "--moving",
        s(&f.pair(0, "moving")),
        "--labels",
        s(&f.pair(0, "fixed_labels")),
        "--moving-labels",
        s(&f.pair(0, "moving_labels")),
        "--lambda",
        "3.76,2.42,2.61,2.33,0.67",
        "--out",
        s(&out),
    ]));
    for name in ["warped.sra", "displacement.sra", "deformation.sra", "jacobian.sra", "metrics.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["dice_per_region"].as_array().unwrap().len(), 5);
    assert!(report["folding_pct"].as_f64().is_some());
}

#[test]
fn register_rejects_wrong_lambda_length() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = spatreg(&[
        "register",
        "--checkpoint",
        s(&f.ckpt()),
        "--fixed",
        s(&f.pair(0, "fixed")),
        "--moving",
        s(&f.pair(0, "moving")),
        "--labels",
        s(&f.pair(0, "fixed_labels")),
        "--lambda",
        "1,2,3",
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn checkpoint_version_mismatch_exits_3() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let bytes = std::fs::read(f.ckpt()).unwrap();
    let needle = br#"{"format_version":1,"#;
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut patched = bytes.clone();
    patched[at + needle.len() - 2] = b'7';
    let ckpt = dir.path().join("old.ckpt");
    std::fs::write(&ckpt, patched).unwrap();
    let o = spatreg(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--lambda",
        "1,1,1,1,1",
        "--report",
        s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_version_mismatch_exits_3() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"format_version":99,"levels":2,"image_shape":[32,32]}"#).unwrap();
    let o = spatreg(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn evaluate_csv_has_report_columns() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.csv");
    ok(spatreg(&[
        "evaluate",
        "--checkpoint",
        s(&f.ckpt()),
        "--data",
        s(&f.data),
        "--lambda",
        "2,2,2,2,2",
        "--report",
        s(&report),
    ]));
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,avg_dice,folding_pct,jac_grad_mean,jac_std,lambda_star"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 6);
    assert_eq!(row[5], "2;2;2;2;2");
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep.csv");
    ok(spatreg(&[
        "sweep-lambda",
        "--checkpoint",
        s(&f.ckpt()),
        "--data",
        s(&f.data),
        "--region",
        "2",
        "--grid",
        "0.5,1,2,4,8",
        "--out",
        s(&out),
    ]));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("lambda_k,"));
}

#[test]
fn optimize_lambda_reports_bounded_weights() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("opt.json");
    ok(spatreg(&["optimize-lambda", "--checkpoint", s(&f.ckpt()), "--val-data", s(&f.data), "--steps", "2", "--out", s(&out)]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let star = v["lambda_star"].as_array().unwrap();
    assert_eq!(star.len(), 5);
    assert!(star.iter().all(|x| (0.0..=10.0).contains(&x.as_f64().unwrap())));
}

#[test]
fn seed_variable_overrides_config() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_spatreg"))
        .args(["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&run)])
        .env("SPATREG_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let stored: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(stored["seed"], 42);
}
