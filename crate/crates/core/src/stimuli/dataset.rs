use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, ExpressionLabel, Image, StimuliError};

/// An expression image with its true label, the fixed false label offered
/// alongside it in 2AFC trials, and (synthetic data only) the ground-truth
/// discriminative region.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusImage {
    pub id: String,
    pub pixels: Image,
    pub true_label: ExpressionLabel,
    pub false_label: ExpressionLabel,
    pub gt_region: Option<BinaryMask>,
}

impl StimulusImage {
    pub fn new(
        id: impl Into<String>,
        pixels: Image,
        true_label: ExpressionLabel,
        false_label: ExpressionLabel,
    ) -> Result<Self, StimuliError> {
        if true_label == false_label {
            return Err(StimuliError::SameLabels(true_label));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(StimuliError::Shape("pixel values must lie in [0,1]".into()));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            true_label,
            false_label,
            gt_region: None,
        })
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub file: String,
    pub true_label: ExpressionLabel,
    pub false_label: ExpressionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_file: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// All items of the smaller class plus an equal-size uniform subset (without
/// replacement) of the larger one, in dataset order.
pub fn undersample_pair<'a, R: Rng + ?Sized>(
    items: &'a [StimulusImage],
    a: ExpressionLabel,
    b: ExpressionLabel,
    rng: &mut R,
) -> Result<Vec<&'a StimulusImage>, StimuliError> {
    let of = |l: ExpressionLabel| -> Vec<usize> {
        items
            .iter()
            .enumerate()
            .filter(|(_, s)| s.true_label == l)
            .map(|(i, _)| i)
            .collect()
    };
    let (ia, ib) = (of(a), of(b));
    for (idx, l) in [(&ia, a), (&ib, b)] {
        if idx.is_empty() {
            return Err(StimuliError::MissingClass(l));
        }
    }
    let (small, large) = if ia.len() <= ib.len() {
        (ia, ib)
    } else {
        (ib, ia)
    };
    let mut keep: Vec<usize> = sample(rng, large.len(), small.len())
        .into_iter()
        .map(|j| large[j])
        .collect();
    keep.extend(small);
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| &items[i]).collect())
}

/// Writes `<id>.png` files (plus `<id>.gt.png` ground-truth masks) and the
/// JSON-lines manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, items: &[StimulusImage]) -> Result<(), StimuliError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for item in items {
        let file = format!("{}.png", item.id);
        item.pixels.save_png(dir.join(&file))?;
        let gt_file = match &item.gt_region {
            Some(mask) => {
                let f = format!("{}.gt.png", item.id);
                mask.save_png(dir.join(&f))?;
                Some(f)
            }
            None => None,
        };
        let rec = ManifestRecord {
            id: item.id.clone(),
            file,
            true_label: item.true_label,
            false_label: item.false_label,
            gt_file,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Loads a directory of `<label>_<id>.png` images described by its manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<StimulusImage>, StimuliError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(
        fs::File::open(&path)
            .map_err(|e| StimuliError::Dataset(format!("{}: {e}", path.display())))?,
    );
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            StimuliError::Dataset(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        let prefix = rec.file.split('_').next().unwrap_or_default();
        if prefix != rec.true_label.name() {
            return Err(StimuliError::Dataset(format!(
                "file {} does not start with its label {}",
                rec.file, rec.true_label
            )));
        }
        let pixels = Image::load_png(dir.join(&rec.file))?;
        let mut item = StimulusImage::new(rec.id, pixels, rec.true_label, rec.false_label)?;
        if let Some(gt) = rec.gt_file {
            item.gt_region = Some(BinaryMask::load_png(dir.join(gt))?);
        }
        out.push(item);
    }
    Ok(out)
}
