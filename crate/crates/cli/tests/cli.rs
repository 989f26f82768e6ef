use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
reveal_radius = 3.0

[synth]
train_per_class = 12
heldout_per_class = 4
stimuli_per_class = 7
size = 32

[train]
batch_size = 16
widths = [4, 4, 4]
stop_rule = { until_accuracy = { threshold = 0.9, max_epochs = 3 } }

[multiclass]
batch_size = 16
widths = [4, 4, 4]
stop_rule = { fixed_epochs = 2 }

[ep]
iterations = 8

[finetune]
epochs = 1
unmasked_per_class = 4
"#;

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().display().to_string();
        let paths = format!(
            "[paths]\ndataset = \"{root}/data/train\"\nheldout = \"{root}/data/heldout\"\nstimuli = \"{root}/data/stimuli\"\ncheckpoints = \"{root}/ckpt\"\nresults = \"{root}/results\"\n"
        );
        let config = dir.path().join("pipeline.toml");
        fs::write(&config, format!("{TINY}{extra}\n{paths}")).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ferbench"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs and expects success; returns the printed output directory.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    }
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn files_with_ext(dir: &Path, exts: &[&str]) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| exts.iter().any(|x| e == *x)))
        .collect();
    out.sort();
    out
}

fn assert_same_analytics(a: &Path, b: &Path) {
    let fa = files_with_ext(a, &["csv", "json"]);
    let fb = files_with_ext(b, &["csv", "json"]);
    assert_eq!(
        fa.iter().map(|p| p.file_name()).collect::<Vec<_>>(),
        fb.iter().map(|p| p.file_name()).collect::<Vec<_>>()
    );
    assert!(!fa.is_empty());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{} differs",
            x.display()
        );
    }
}

fn hash_line(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn full_pipeline_on_a_tiny_configuration() {
    let ws = Workspace::new("");
    ws.ok(&["synth-data"]);
    assert!(ws.path("data/stimuli/manifest.jsonl").is_file());

    let trained = ws.ok(&["train-pairs"]);
    assert!(trained.starts_with(ws.path("results")));
    assert!(trained
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("train-pairs-"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(trained.join("training_report.json")).unwrap()).unwrap();
    assert_eq!(report["classifiers"].as_array().unwrap().len(), 28);
    for row in report["classifiers"].as_array().unwrap() {
        for key in ["pair", "epochs_run", "final_train_acc", "wall_time_s"] {
            assert!(row.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(fs::read_dir(ws.path("ckpt/pairs")).unwrap().count(), 28);
    ws.ok(&["train-multiclass"]);

    // evaluate: 28 pair reports, two ensemble matrices, one multiclass matrix
    let e1 = ws.ok(&["evaluate", "--out", ws.path("eval1").to_str().unwrap()]);
    let pairs: serde_json::Value =
        serde_json::from_slice(&fs::read(e1.join("pairs.json")).unwrap()).unwrap();
    assert_eq!(pairs["pairs"].as_array().unwrap().len(), 28);
    let matrices: Vec<_> = files_with_ext(&e1, &["csv"]);
    let names: Vec<_> = matrices
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        [
            "confusion_multiclass.csv",
            "confusion_simple.csv",
            "confusion_weighted.csv"
        ]
    );
    for m in &matrices {
        assert_eq!(csv_rows(m).len(), 8);
    }
    let corr: serde_json::Value =
        serde_json::from_slice(&fs::read(e1.join("correlations.json")).unwrap()).unwrap();
    assert_eq!(corr["correlations"].as_array().unwrap().len(), 6);
    let e2 = ws.ok(&["evaluate", "--out", ws.path("eval2").to_str().unwrap()]);
    assert_same_analytics(&e1, &e2);

    // provenance appears in every analytic file
    let first = hash_line(&e1.join("confusion_simple.csv"));
    assert!(
        first.starts_with("# config_hash=") && first.ends_with(" seed=3"),
        "{first}"
    );
    let hash = first
        .trim_start_matches("# config_hash=")
        .split(' ')
        .next()
        .unwrap()
        .to_string();
    for f in files_with_ext(&e1, &["json"]) {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&f).unwrap()).unwrap();
        assert_eq!(
            v["provenance"]["config_hash"],
            hash.as_str(),
            "{}",
            f.display()
        );
        assert_eq!(v["provenance"]["seed"], 3);
    }

    let sim = ws.ok(&[
        "simulate",
        "--accuracy",
        "1.0",
        "--out",
        ws.path("human").to_str().unwrap(),
    ]);
    let exports = sim.join("P01.jsonl");
    assert_eq!(fs::read_to_string(&exports).unwrap().lines().count(), 56);

    // compare: 3 methods x 28 pairs
    let c1 = ws.ok(&[
        "compare",
        "--exports",
        sim.to_str().unwrap(),
        "--out",
        ws.path("cmp1").to_str().unwrap(),
    ]);
    let rows = csv_rows(&c1.join("dice.csv"));
    assert_eq!(rows.len(), 84);
    for method in ["cam", "gradcam", "extremal_perturbation"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split(',').nth(1) == Some(method))
                .count(),
            28
        );
    }
    for r in &rows {
        let d: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&d), "{r}");
    }
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(c1.join("stats.json")).unwrap()).unwrap();
    assert!(stats["anova"]["f"].is_number() || stats["anova"]["f"].is_null());
    assert_eq!(stats["tukey"].as_array().unwrap().len(), 3);
    assert!(c1.join("dice_boxplot.png").is_file());
    assert_eq!(
        fs::read_dir(c1.join("maps/human_clicks")).unwrap().count(),
        56
    );
    let c2 = ws.ok(&[
        "compare",
        "--exports",
        sim.to_str().unwrap(),
        "--out",
        ws.path("cmp2").to_str().unwrap(),
    ]);
    assert_same_analytics(&c1, &c2);

    let sal = ws.ok(&[
        "saliency",
        "--method",
        "cam",
        "--out",
        ws.path("sal").to_str().unwrap(),
    ]);
    assert_eq!(fs::read_dir(sal.join("maps/cam")).unwrap().count(), 56);

    let ft = ws.ok(&["finetune", "--exports", exports.to_str().unwrap()]);
    let ftr: serde_json::Value =
        serde_json::from_slice(&fs::read(ft.join("finetune_report.json")).unwrap()).unwrap();
    assert_eq!(ftr["classifiers"].as_array().unwrap().len(), 28);
    assert_eq!(fs::read_dir(ws.path("ckpt/finetuned")).unwrap().count(), 28);
    let ef = ws.ok(&[
        "evaluate",
        "--finetuned",
        "--exports",
        exports.to_str().unwrap(),
    ]);
    assert!(ef.join("confusion_human.csv").is_file());

    let rep = ws.ok(&[
        "report",
        "--from",
        c1.to_str().unwrap(),
        "--exports",
        exports.to_str().unwrap(),
        "--click-figures",
        "3",
    ]);
    assert!(rep.join("dice_boxplot.png").is_file());
    assert!(rep.join("human_behavior.json").is_file());
    assert_eq!(fs::read_dir(rep.join("clicks")).unwrap().count(), 3);
    let rep2 = ws.ok(&["report", "--from", e1.to_str().unwrap()]);
    assert_eq!(files_with_ext(&rep2, &["png"]).len(), 3);
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let ws = Workspace::new("");
    let out = ws.run(&["train-pairs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ferbench synth-data"));

    ws.ok(&["synth-data"]);
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ferbench train-pairs"));

    let out = ws.run(&[
        "compare",
        "--exports",
        ws.path("nowhere.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new("");
    assert_eq!(ws.run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        ws.run(&["saliency", "--method", "sobel"]).status.code(),
        Some(1)
    );
    assert_eq!(ws.run(&["compare"]).status.code(), Some(1));
    let bad = Workspace::new("bogus_key = 1");
    assert_eq!(bad.run(&["config"]).status.code(), Some(1));
    let invalid = Workspace::new("[saliency]\nmethods = []");
    assert_eq!(invalid.run(&["config"]).status.code(), Some(1));
    let out = ws.run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn diverging_training_exits_with_three() {
    let ws = Workspace::new("");
    ws.ok(&["synth-data", "--train-per-class", "4"]);
    let out = ws.run(&["train-multiclass", "--epochs", "3", "--seed", "3"]);
    assert!(out.status.success());
    let out = ws.run(&["train-pairs", "--lr", "1e30"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_flags_change_the_hash() {
    let ws = Workspace::new("");
    let hash = |args: &[&str]| {
        let out = ws.run(args);
        assert!(out.status.success());
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    let base = hash(&["config"]);
    assert_eq!(base, hash(&["config"]));
    assert_ne!(base, hash(&["--seed", "4", "config"]));
    assert_eq!(base, hash(&["--out", "/tmp/x", "config"]));
}
