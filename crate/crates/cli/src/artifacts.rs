//! Locating and loading the files one command leaves for the next.

use std::fs;
use std::path::{Path, PathBuf};

use ferbench_core::analytics::report::Provenance;
use ferbench_core::autodiff::{load_checkpoint, save_checkpoint};
use ferbench_core::stimuli::{load_dataset, StimulusImage, MANIFEST_FILE};
use ferbench_core::training::{ClassifierTarget, PairSpec, TrainedClassifier};
use ferbench_core::trial::{read_trials_jsonl, TrialRecord};

use crate::CliError;

pub const PAIRS_DIR: &str = "pairs";
pub const FINETUNED_DIR: &str = "finetuned";
pub const MULTICLASS_FILE: &str = "multiclass.ckpt";

fn missing(what: &str, path: &Path, command: &str) -> CliError {
    CliError::Data(format!(
        "{what} not found at {}; run `ferbench {command}` first",
        path.display()
    ))
}

/// A dataset split written by `synth-data`.
pub fn load_split(dir: &Path, what: &str) -> Result<Vec<StimulusImage>, CliError> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(missing(&format!("{what} dataset"), dir, "synth-data"));
    }
    let items = load_dataset(dir)?;
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "{what} dataset at {} is empty",
            dir.display()
        )));
    }
    Ok(items)
}

pub fn pair_checkpoint(dir: &Path, pair: PairSpec) -> PathBuf {
    dir.join(format!("{pair}.ckpt"))
}

/// Stores the classifier with its training metadata and provenance.
pub fn save_classifier(
    path: &Path,
    clf: &TrainedClassifier,
    prov: &Provenance,
) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut meta = clf.meta();
    meta["provenance"] = serde_json::to_value(prov)?;
    save_checkpoint(path, &clf.net, Some(meta))?;
    Ok(())
}

pub fn load_classifier(path: &Path, command: &str) -> Result<TrainedClassifier, CliError> {
    if !path.is_file() {
        return Err(missing("checkpoint", path, command));
    }
    let (net, manifest) = load_checkpoint(path)?;
    let meta = manifest
        .meta
        .ok_or_else(|| CliError::Data(format!("{} has no training metadata", path.display())))?;
    Ok(TrainedClassifier::from_checkpoint(net, &meta)?)
}

/// All 28 pair classifiers from `dir`, in canonical pair order.
pub fn load_pairs(dir: &Path, command: &str) -> Result<Vec<TrainedClassifier>, CliError> {
    PairSpec::all()
        .into_iter()
        .map(|pair| {
            let clf = load_classifier(&pair_checkpoint(dir, pair), command)?;
            if clf.target != ClassifierTarget::Pair(pair) {
                return Err(CliError::Data(format!(
                    "checkpoint for {pair} holds a {} classifier",
                    clf.target
                )));
            }
            Ok(clf)
        })
        .collect()
}

/// Trial records from JSON-lines files, or from every `.jsonl` file of a
/// directory in name order.
pub fn load_exports(paths: &[PathBuf]) -> Result<Vec<TrialRecord>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            inner.retain(|f| f.extension().is_some_and(|e| e == "jsonl"));
            inner.sort();
            files.extend(inner);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(missing("human export", p, "simulate` or `ferbench serve"));
        }
    }
    let mut trials = Vec::new();
    for f in files {
        let file = fs::File::open(&f)?;
        trials.extend(
            read_trials_jsonl(std::io::BufReader::new(file))
                .map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?,
        );
    }
    if trials.is_empty() {
        return Err(CliError::Data(
            "no trial records in the given exports".into(),
        ));
    }
    Ok(trials)
}

/// `<root>/<command>-<UTC timestamp>`, suffixed when that name is taken.
pub fn timestamped_dir(root: &Path, command: &str) -> Result<PathBuf, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    fs::create_dir_all(root)?;
    let mut dir = root.join(format!("{command}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{command}-{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
