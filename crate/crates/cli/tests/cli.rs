use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weakloc"));
    c.env_remove("WEAKLOC_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn effective_config(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("effective config: "))
        .expect("config printed");
    serde_json::from_str(line).unwrap()
}

/// Small architecture so runs take a second or two.
const SMALL_RUN: &str = r#"{
  "batch_size": 16,
  "arch": {
    "backbone": [{"channels": 4, "kernel": 3, "stride": 2}, {"channels": 8, "kernel": 3, "stride": 2}],
    "roi_size": 16,
    "stl_size": 40,
    "stl_shared_layers": 1,
    "transition_dim": 8
  }
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL_RUN).unwrap();
        fs::write(
            dir.path().join("gen.json"),
            r#"{"image_size": 32, "radius_min": 4.0, "radius_max": 6.0, "distractors": 2}"#,
        )
        .unwrap();
        let f = Fixture { dir };
        let o = run(bin()
            .args([
                "gen",
                "--total",
                "150",
                "--profile",
                "uniform",
                "--seed",
                "3",
                "--config",
            ])
            .arg(f.path("gen.json"))
            .arg("--out")
            .arg(f.path("data")));
        assert!(o.status.success(), "{}", stderr(&o));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        run(bin()
            .arg("train")
            .arg("--data")
            .arg(self.path("data"))
            .arg("--out")
            .arg(self.path(out))
            .arg("--config")
            .arg(self.path("small.json"))
            .args(extra))
    }
}

fn read_csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let j = header.iter().position(|h| *h == column).unwrap();
    lines
        .map(|l| l.split(',').nth(j).unwrap().to_string())
        .collect()
}

#[test]
fn gen_prints_counts_of_the_skewed_profile() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args([
            "gen",
            "--total",
            "1347",
            "--profile",
            "paper",
            "--seed",
            "7",
            "--out",
        ])
        .arg(dir.path().join("d")));
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/manifest.json")).unwrap())
            .unwrap();
    let counts = &manifest["class_counts"];
    let sum = |keys: &[&str]| {
        keys.iter()
            .map(|k| counts[*k].as_u64().unwrap())
            .sum::<u64>()
    };
    assert_eq!(sum(&["A1", "A2", "A3"]), 327);
    assert_eq!(sum(&["B1", "B2", "B3"]), 453);
    assert_eq!(sum(&["N"]), 567);
    let table = stdout(&o);
    assert!(
        table
            .lines()
            .any(|l| l.starts_with("all") && l.contains("1347")),
        "{table}"
    );
}

#[test]
fn gen_refuses_when_a_class_would_be_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["gen", "--total", "40", "--classes", "6", "--out"])
        .arg(dir.path().join("d")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("A3"), "{}", stderr(&o));
    assert!(!dir.path().join("d/manifest.json").exists());
}

#[test]
fn unknown_scheme_is_a_usage_error() {
    let o = run(bin().args(["train", "--scheme", "resnet", "--data", "x", "--out", "y"]));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("lbm") && err.contains("stl"), "{err}");
}

#[test]
fn missing_subcommand_arguments_exit_with_usage() {
    assert_eq!(run(bin().arg("eval")).status.code(), Some(2));
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
}

#[test]
fn stl_run_flips_alpha_and_exports_overlays() {
    let f = Fixture::new();
    let o = f.train(
        "stl",
        &[
            "--scheme",
            "stl",
            "--alpha",
            "0.6",
            "--flip-epoch",
            "2",
            "--epochs",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best epoch"));
    let epochs = read_csv_column(&f.path("stl/losses.csv"), "epoch");
    let alphas = read_csv_column(&f.path("stl/losses.csv"), "alpha_eff");
    for (e, a) in epochs.iter().zip(&alphas) {
        let want = if e == "1" { 0.6 } else { 0.4 };
        assert!(
            (a.parse::<f64>().unwrap() - want).abs() < 1e-12,
            "epoch {e}: {a}"
        );
    }

    let o = run(bin()
        .arg("export-overlays")
        .arg("--checkpoint")
        .arg(f.path("stl"))
        .arg("--data")
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("ov"))
        .args(["--scale", "2"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("data/manifest.json")).unwrap()).unwrap();
    let fractured_test = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["split"] == "test" && s["label6"] != "N")
        .count();
    let files: Vec<_> = fs::read_dir(f.path("ov"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), fractured_test);
    for p in &files {
        let bytes = fs::read(p).unwrap();
        let header = b"P6\n64 64\n255\n";
        assert!(bytes.starts_with(header));
        assert_eq!(bytes.len(), header.len() + 64 * 64 * 3);
    }
}

#[test]
fn classification_only_schemes_have_no_overlays() {
    let f = Fixture::new();
    let o = f.train("lbm", &["--scheme", "lbm", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(bin()
        .arg("export-overlays")
        .arg("--checkpoint")
        .arg(f.path("lbm/checkpoint"))
        .arg("--data")
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("ov")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lbm"));
}

#[test]
fn eval_writes_metrics_and_compares() {
    let f = Fixture::new();
    assert!(f
        .train("gp", &["--scheme", "globalpool", "--epochs", "1"])
        .status
        .success());
    assert!(f
        .train("ubm", &["--scheme", "ubm", "--epochs", "1"])
        .status
        .success());
    let eval = |run_dir: &str, out: &str, extra: &[&str]| {
        bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(f.path(run_dir))
            .arg("--data")
            .arg(f.path("data"))
            .arg("--out")
            .arg(f.path(out))
            .args(extra)
            .output()
            .unwrap()
    };
    let o = eval("ubm", "ubm.json", &["--name", "ubm-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = eval("gp", "gp.json", &["--compare"]);
    assert_eq!(o.status.code(), Some(2), "--compare needs a report");
    let ubm_json = f.path("ubm.json");
    let o = eval("gp", "gp.json", &["--compare", ubm_json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(
        table.contains("globalpool") && table.contains("ubm-run") && table.contains("mAP"),
        "{table}"
    );
    let gp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("gp.json")).unwrap()).unwrap();
    assert!(gp["localization"]["map"].is_number());
    assert!(gp["classification"]["weighted_f1"].is_number());

    let o = eval("gp", "gp_loc.json", &["--loc-only"]);
    assert!(o.status.success());
    let loc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("gp_loc.json")).unwrap()).unwrap();
    assert!(loc["classification"].is_null());
    assert_eq!(loc["localization"], gp["localization"]);

    let o = run(bin()
        .arg("compare")
        .arg(f.path("gp.json"))
        .arg(f.path("ubm/summary.json")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn malformed_checkpoint_names_the_file() {
    let f = Fixture::new();
    assert!(f
        .train("r", &["--scheme", "lbm", "--epochs", "1"])
        .status
        .success());
    let meta = f.path("r/checkpoint/checkpoint.json");
    fs::write(&meta, "{ not json").unwrap();
    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(f.path("r"))
        .arg("--data")
        .arg(f.path("data")));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checkpoint.json"), "{}", stderr(&o));

    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(f.path("nowhere"))
        .arg("--data")
        .arg(f.path("data")));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn diverging_run_exits_with_numeric_code() {
    let f = Fixture::new();
    let o = f.train(
        "nan",
        &["--scheme", "lbm", "--epochs", "3", "--lr", "1e300"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn seed_precedence() {
    let f = Fixture::new();
    fs::write(f.path("seeded.json"), r#"{"seed": 5, "epochs": 1}"#).unwrap();
    let train = |env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.arg("train")
            .args(["--scheme", "lbm", "--data"])
            .arg(f.path("data"))
            .arg("--out")
            .arg(f.path("seed_run"))
            .arg("--config")
            .arg(f.path("seeded.json"));
        if let Some(e) = env {
            c.env("WEAKLOC_SEED", e);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        let o = run(&mut c);
        assert!(o.status.success(), "{}", stderr(&o));
        effective_config(&o)["seed"].as_u64().unwrap()
    };
    assert_eq!(train(None, None), 5);
    assert_eq!(train(Some("9"), None), 9);
    assert_eq!(train(Some("9"), Some("11")), 11);

    let o = run(bin()
        .args(["train", "--scheme", "lbm", "--data"])
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("bad"))
        .env("WEAKLOC_SEED", "minus one"));
    assert_eq!(o.status.code(), Some(2));

    fs::write(f.path("typo.json"), r#"{"epoch": 3}"#).unwrap();
    let o = run(bin()
        .args(["train", "--scheme", "lbm", "--data"])
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("bad"))
        .arg("--config")
        .arg(f.path("typo.json")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn config_file_alpha_sets_its_flip() {
    let f = Fixture::new();
    fs::write(
        f.path("a1.json"),
        r#"{"scheme": "stl", "alpha": 1.0, "epochs": 1}"#,
    )
    .unwrap();
    let o = run(bin()
        .arg("train")
        .arg("--data")
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("a1"))
        .arg("--config")
        .arg(f.path("a1.json")));
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = effective_config(&o);
    assert_eq!(cfg["scheme"], "stl");
    assert_eq!(cfg["alpha"], 1.0);
    assert!(cfg["flip_epoch"].is_null());
}

#[test]
fn repeated_pipelines_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for round in 0..2 {
        let root = dir.path().join(format!("round{round}"));
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("small.json"), SMALL_RUN).unwrap();
        fs::write(
            root.join("gen.json"),
            r#"{"image_size": 32, "radius_min": 4.0, "radius_max": 6.0, "distractors": 2}"#,
        )
        .unwrap();
        let o = run(bin()
            .args([
                "gen",
                "--total",
                "150",
                "--profile",
                "uniform",
                "--seed",
                "21",
                "--config",
            ])
            .arg(root.join("gen.json"))
            .arg("--out")
            .arg(root.join("data")));
        assert!(o.status.success());
        let o = run(bin()
            .args([
                "train", "--scheme", "astn", "--epochs", "2", "--seed", "4", "--config",
            ])
            .arg(root.join("small.json"))
            .arg("--data")
            .arg(root.join("data"))
            .arg("--out")
            .arg(root.join("run")));
        assert!(o.status.success(), "{}", stderr(&o));
        let o = run(bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(root.join("run"))
            .arg("--data")
            .arg(root.join("data"))
            .arg("--out")
            .arg(root.join("metrics.json")));
        assert!(o.status.success());
        outputs.push(fs::read(root.join("metrics.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
