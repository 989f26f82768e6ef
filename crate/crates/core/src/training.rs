//! Pairwise and multiclass classifier training, plus fine-tuning on
//! click-revealed images.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamState, AutodiffError, Network};
use crate::stimuli::{
    augment, images_to_batch, reveal_composite, shift_mask_8dirs, undersample_pair,
    AugmentationConfig, ClickMask, ExpressionLabel, Image, StimuliError, StimulusImage,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset has no images labelled {0}")]
    MissingLabel(ExpressionLabel),
    #[error("label {label} is not handled by classifier {target}")]
    ForeignLabel {
        label: ExpressionLabel,
        target: ClassifierTarget,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("masked fine-tuning pool is empty")]
    EmptyMaskedPool,
    #[error("pair {pair}: {source}")]
    Pair {
        pair: PairSpec,
        #[source]
        source: Box<TrainingError>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Stimuli(#[from] StimuliError),
}

/// Unordered expression pair, stored in canonical order (`a < b`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairSpec {
    a: ExpressionLabel,
    b: ExpressionLabel,
}

impl PairSpec {
    pub const COUNT: usize = 28;

    /// Canonicalizes the order; identical labels are rejected.
    pub fn new(x: ExpressionLabel, y: ExpressionLabel) -> Option<Self> {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => Some(Self { a: x, b: y }),
            std::cmp::Ordering::Greater => Some(Self { a: y, b: x }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn label_a(self) -> ExpressionLabel {
        self.a
    }

    pub fn label_b(self) -> ExpressionLabel {
        self.b
    }

    pub fn labels(self) -> [ExpressionLabel; 2] {
        [self.a, self.b]
    }

    pub fn contains(self, l: ExpressionLabel) -> bool {
        self.a == l || self.b == l
    }

    /// All 28 pairs in lexicographic canonical order.
    pub fn all() -> Vec<PairSpec> {
        let mut out = Vec::with_capacity(Self::COUNT);
        for (i, &a) in ExpressionLabel::ALL.iter().enumerate() {
            for &b in &ExpressionLabel::ALL[i + 1..] {
                out.push(PairSpec { a, b });
            }
        }
        out
    }

    /// Position within [`PairSpec::all`].
    pub fn index(self) -> usize {
        let (i, j) = (self.a.index(), self.b.index());
        (0..i).map(|r| 7 - r).sum::<usize>() + (j - i - 1)
    }
}

impl fmt::Display for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop after the first epoch whose full-train-set accuracy reaches the
    /// threshold, or at `max_epochs`.
    UntilAccuracy {
        threshold: f64,
        max_epochs: usize,
    },
    FixedEpochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub stop_rule: StopRule,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    /// Output channels of the three conv blocks.
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            stop_rule: StopRule::UntilAccuracy {
                threshold: 0.90,
                max_epochs: 150,
            },
            seed: 0,
            augmentation: AugmentationConfig::default(),
            widths: vec![8, 8, 8],
        }
    }
}

/// Learning rate of the from-scratch desk-scale network. The reference rate of
/// 1e-4 assumes a pretrained backbone and moves these weights too slowly to
/// reach the accuracy threshold within the epoch cap.
pub const DESK_SCALE_LR: f64 = 5e-3;

impl TrainConfig {
    /// Default configuration with [`DESK_SCALE_LR`].
    pub fn desk_scale() -> Self {
        Self {
            lr: DESK_SCALE_LR,
            ..Self::default()
        }
    }

    /// Forty fixed epochs, as used for the multiclass baseline.
    pub fn multiclass() -> Self {
        Self {
            stop_rule: StopRule::FixedEpochs(40),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainingError::Config(
                "learning rate must be positive".into(),
            ));
        }
        if let StopRule::UntilAccuracy { threshold, .. } = self.stop_rule {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(TrainingError::Config(
                    "accuracy threshold outside [0,1]".into(),
                ));
            }
        }
        if self.widths.is_empty() {
            return Err(TrainingError::Config("at least one conv block".into()));
        }
        self.augmentation.validate()?;
        Ok(())
    }

    fn max_epochs(&self) -> usize {
        match self.stop_rule {
            StopRule::UntilAccuracy { max_epochs, .. } => max_epochs,
            StopRule::FixedEpochs(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierTarget {
    Pair(PairSpec),
    Multiclass,
}

impl fmt::Display for ClassifierTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierTarget::Pair(p) => p.fmt(f),
            ClassifierTarget::Multiclass => f.write_str("multiclass"),
        }
    }
}

impl ClassifierTarget {
    /// Expression label of each head output.
    pub fn labels(self) -> Vec<ExpressionLabel> {
        match self {
            ClassifierTarget::Pair(p) => p.labels().to_vec(),
            ClassifierTarget::Multiclass => ExpressionLabel::ALL.to_vec(),
        }
    }

    pub fn class_index(self, label: ExpressionLabel) -> Option<usize> {
        self.labels().iter().position(|&l| l == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    #[serde(default)]
    pub masked_seen: usize,
    #[serde(default)]
    pub unmasked_seen: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub net: Network<f32>,
    pub target: ClassifierTarget,
    pub epochs_run: usize,
    pub final_train_acc: f64,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    /// Training time; not stored in checkpoints.
    pub wall_time_s: f64,
}

const EVAL_BATCH: usize = 128;

impl TrainedClassifier {
    pub fn labels(&self) -> Vec<ExpressionLabel> {
        self.target.labels()
    }

    /// Logits for every image, evaluated in chunks.
    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>, TrainingError> {
        let k = self.net.head_class_count();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let batch = images_to_batch(chunk.iter().copied())?;
            let logits = self.net.predict(&batch)?;
            out.extend(logits.data().chunks(k).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<ExpressionLabel>, TrainingError> {
        let labels = self.labels();
        Ok(self
            .logits(images)?
            .iter()
            .map(|r| labels[argmax(r)])
            .collect())
    }

    /// Metadata stored in the checkpoint manifest.
    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "target": self.target,
            "epochs_run": self.epochs_run,
            "final_train_acc": self.final_train_acc,
            "seed": self.seed,
        })
    }

    pub fn from_checkpoint(
        net: Network<f32>,
        meta: &serde_json::Value,
    ) -> Result<Self, TrainingError> {
        let bad = |what: &str| TrainingError::Config(format!("checkpoint metadata lacks {what}"));
        let target: ClassifierTarget =
            serde_json::from_value(meta.get("target").cloned().ok_or_else(|| bad("target"))?)
                .map_err(|e| TrainingError::Config(e.to_string()))?;
        if target.labels().len() != net.head_class_count() {
            return Err(TrainingError::Config(
                "head size does not match target".into(),
            ));
        }
        Ok(Self {
            net,
            target,
            epochs_run: meta
                .get("epochs_run")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("epochs_run"))? as usize,
            final_train_acc: meta
                .get("final_train_acc")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("final_train_acc"))?,
            seed: meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
            history: Vec::new(),
            wall_time_s: 0.0,
        })
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified `(image, class)` items.
pub fn accuracy(net: &Network<f32>, items: &[(&Image, usize)]) -> Result<f64, TrainingError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let k = net.head_class_count();
    let mut correct = 0;
    for chunk in items.chunks(EVAL_BATCH) {
        let batch = images_to_batch(chunk.iter().map(|(img, _)| *img))?;
        let logits = net.predict(&batch)?;
        correct += logits
            .data()
            .chunks(k)
            .zip(chunk)
            .filter(|(row, (_, y))| argmax(row) == *y)
            .count();
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Mean (optionally class-weighted) cross-entropy over `items`.
pub fn dataset_loss(
    net: &Network<f32>,
    items: &[(&Image, usize)],
    class_weights: Option<&[f32]>,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    for chunk in items.chunks(EVAL_BATCH) {
        let batch = images_to_batch(chunk.iter().map(|(img, _)| *img))?;
        let labels: Vec<usize> = chunk.iter().map(|(_, y)| *y).collect();
        let mut pass = net.forward(&batch)?;
        let l = pass.loss(&labels, class_weights)?;
        total += pass.graph.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}

fn train_step(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    batch: &[Image],
    labels: &[usize],
    class_weights: Option<&[f32]>,
) -> Result<f64, TrainingError> {
    let x = images_to_batch(batch.iter())?;
    let mut pass = net.forward(&x)?;
    let loss = pass.loss(labels, class_weights)?;
    let value = pass.graph.value(loss).data()[0] as f64;
    net.backward(&mut pass, loss)?;
    adam.step(net)?;
    Ok(value)
}

fn augmentation_rng(cfg: &TrainConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.augmentation.seed.rotate_left(17) ^ salt)
}

/// Mini-batch Adam training with per-batch augmentation and end-of-epoch
/// evaluation on the un-augmented items.
fn fit(
    net: &mut Network<f32>,
    items: &[(&Image, usize)],
    cfg: &TrainConfig,
    class_weights: Option<&[f32]>,
) -> Result<(usize, f64, Vec<EpochStats>), TrainingError> {
    let mut adam = AdamState::new(net, cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut aug_rng = augmentation_rng(cfg, 0xA5A5);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::new();
    let mut acc = accuracy(net, items)?;
    let mut epochs = 0;
    while epochs < cfg.max_epochs() {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Image> = chunk
                .iter()
                .map(|&i| augment(items[i].0, &cfg.augmentation, &mut aug_rng))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| items[i].1).collect();
            loss_sum +=
                train_step(net, &mut adam, &batch, &labels, class_weights)? * chunk.len() as f64;
        }
        epochs += 1;
        acc = accuracy(net, items)?;
        history.push(EpochStats {
            epoch: epochs,
            mean_loss: loss_sum / items.len().max(1) as f64,
            train_acc: acc,
            masked_seen: 0,
            unmasked_seen: 0,
        });
        if let StopRule::UntilAccuracy { threshold, .. } = cfg.stop_rule {
            if acc >= threshold {
                break;
            }
        }
    }
    Ok((epochs, acc, history))
}

fn check_labels(data: &[StimulusImage], labels: &[ExpressionLabel]) -> Result<(), TrainingError> {
    for &l in labels {
        if !data.iter().any(|s| s.true_label == l) {
            return Err(TrainingError::MissingLabel(l));
        }
    }
    Ok(())
}

/// Trains the binary classifier for one pair on an undersampled (balanced)
/// subset of `data`.
pub fn train_pair(
    pair: PairSpec,
    data: &[StimulusImage],
    cfg: &TrainConfig,
) -> Result<TrainedClassifier, TrainingError> {
    let started = Instant::now();
    cfg.validate()?;
    check_labels(data, &pair.labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subset = undersample_pair(data, pair.label_a(), pair.label_b(), &mut rng)?;
    let channels = subset[0].pixels.channels();
    let items: Vec<(&Image, usize)> = subset
        .iter()
        .map(|s| (&s.pixels, usize::from(s.true_label == pair.label_b())))
        .collect();
    let mut net = Network::small_cnn(channels, &cfg.widths, 2, cfg.seed)?;
    let (epochs_run, final_train_acc, history) = fit(&mut net, &items, cfg, None)?;
    Ok(TrainedClassifier {
        net,
        target: ClassifierTarget::Pair(pair),
        epochs_run,
        final_train_acc,
        seed: cfg.seed,
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains all 28 pair classifiers (in parallel); pair `i` uses seed
/// `cfg.seed ^ i`.
pub fn train_all_pairs(
    data: &[StimulusImage],
    cfg: &TrainConfig,
) -> Result<Vec<TrainedClassifier>, TrainingError> {
    cfg.validate()?;
    check_labels(data, &ExpressionLabel::ALL)?;
    PairSpec::all()
        .into_par_iter()
        .map(|pair| {
            let pair_cfg = TrainConfig {
                seed: cfg.seed ^ pair.index() as u64,
                ..cfg.clone()
            };
            train_pair(pair, data, &pair_cfg).map_err(|e| TrainingError::Pair {
                pair,
                source: Box::new(e),
            })
        })
        .collect()
}

/// `total / (8 * count_c)` per class.
pub fn multiclass_weights(data: &[StimulusImage]) -> Result<[f32; 8], TrainingError> {
    let mut counts = [0usize; 8];
    for s in data {
        counts[s.true_label.index()] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut w = [0.0f32; 8];
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(TrainingError::MissingLabel(ExpressionLabel::ALL[i]));
        }
        w[i] = (total as f64 / (8.0 * c as f64)) as f32;
    }
    Ok(w)
}

/// Eight-way classifier trained with class-weighted cross-entropy and no
/// undersampling.
pub fn train_multiclass(
    data: &[StimulusImage],
    cfg: &TrainConfig,
) -> Result<TrainedClassifier, TrainingError> {
    let started = Instant::now();
    cfg.validate()?;
    let weights = multiclass_weights(data)?;
    let items: Vec<(&Image, usize)> = data
        .iter()
        .map(|s| (&s.pixels, s.true_label.index()))
        .collect();
    let mut net = Network::small_cnn(data[0].pixels.channels(), &cfg.widths, 8, cfg.seed)?;
    let (epochs_run, final_train_acc, history) = fit(&mut net, &items, cfg, Some(&weights))?;
    Ok(TrainedClassifier {
        net,
        target: ClassifierTarget::Multiclass,
        epochs_run,
        final_train_acc,
        seed: cfg.seed,
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// A stimulus together with the clicks a participant made on it.
#[derive(Clone, Debug)]
pub struct MaskedStimulus {
    pub stimulus: StimulusImage,
    pub clicks: ClickMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Fraction of every batch drawn from the masked pool, in `(0, 1]`.
    pub masked_ratio: f64,
    pub blur_k: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                stop_rule: StopRule::FixedEpochs(5),
                ..TrainConfig::default()
            },
            masked_ratio: 0.5,
            blur_k: 70,
        }
    }
}

/// The nine reveal renditions of one masked stimulus: the recorded clicks and
/// their eight one-pixel shifts.
pub fn expand_masked(item: &MaskedStimulus, blur_k: usize) -> Result<Vec<Image>, TrainingError> {
    let mut masks = vec![item.clicks.clone()];
    masks.extend(shift_mask_8dirs(&item.clicks));
    masks
        .iter()
        .map(|m| reveal_composite(&item.stimulus.pixels, m, blur_k).map_err(TrainingError::from))
        .collect()
}

/// Continues Adam training of `clf` on click-revealed images mixed with
/// augmented unmasked images.
pub fn finetune_masked(
    clf: &TrainedClassifier,
    masked: &[MaskedStimulus],
    unmasked: &[StimulusImage],
    cfg: &FinetuneConfig,
) -> Result<TrainedClassifier, TrainingError> {
    let started = Instant::now();
    cfg.train.validate()?;
    if masked.is_empty() {
        return Err(TrainingError::EmptyMaskedPool);
    }
    if !(cfg.masked_ratio > 0.0 && cfg.masked_ratio <= 1.0) {
        return Err(TrainingError::Config(
            "masked_ratio must lie in (0, 1]".into(),
        ));
    }
    let class_of = |l: ExpressionLabel| {
        clf.target
            .class_index(l)
            .ok_or(TrainingError::ForeignLabel {
                label: l,
                target: clf.target,
            })
    };
    let mut masked_pool: Vec<(Image, usize)> = Vec::with_capacity(masked.len() * 9);
    for item in masked {
        let y = class_of(item.stimulus.true_label)?;
        masked_pool.extend(
            expand_masked(item, cfg.blur_k)?
                .into_iter()
                .map(|img| (img, y)),
        );
    }
    let unmasked_pool: Vec<(&Image, usize)> = unmasked
        .iter()
        .map(|s| class_of(s.true_label).map(|y| (&s.pixels, y)))
        .collect::<Result<_, _>>()?;

    let batch = cfg.train.batch_size;
    let per_masked = ((cfg.masked_ratio * batch as f64).round() as usize).clamp(1, batch);
    let per_unmasked = if unmasked_pool.is_empty() {
        0
    } else {
        batch - per_masked
    };

    let mut net = clf.net.clone();
    let layers_before = net.layers().to_vec();
    let mut adam = AdamState::new(&net, cfg.train.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(2));
    let mut aug_rng = augmentation_rng(&cfg.train, 0x5A5A);
    let mut masked_order: Vec<usize> = (0..masked_pool.len()).collect();
    let mut unmasked_order: Vec<usize> = (0..unmasked_pool.len()).collect();
    let mut unmasked_cursor = unmasked_order.len();
    let eval: Vec<(&Image, usize)> = masked_pool.iter().map(|(img, y)| (img, *y)).collect();
    let mut history = Vec::new();
    let mut acc = accuracy(&net, &eval)?;
    let mut epochs = 0;
    while epochs < cfg.train.max_epochs() {
        masked_order.shuffle(&mut order_rng);
        let (mut masked_seen, mut unmasked_seen, mut loss_sum) = (0, 0, 0.0);
        for chunk in masked_order.chunks(per_masked) {
            let mut images: Vec<Image> = chunk.iter().map(|&i| masked_pool[i].0.clone()).collect();
            let mut labels: Vec<usize> = chunk.iter().map(|&i| masked_pool[i].1).collect();
            for _ in 0..per_unmasked {
                if unmasked_cursor == unmasked_order.len() {
                    unmasked_order.shuffle(&mut order_rng);
                    unmasked_cursor = 0;
                }
                let (img, y) = unmasked_pool[unmasked_order[unmasked_cursor]];
                unmasked_cursor += 1;
                images.push(augment(img, &cfg.train.augmentation, &mut aug_rng));
                labels.push(y);
            }
            masked_seen += chunk.len();
            unmasked_seen += images.len() - chunk.len();
            loss_sum +=
                train_step(&mut net, &mut adam, &images, &labels, None)? * images.len() as f64;
        }
        epochs += 1;
        acc = accuracy(&net, &eval)?;
        history.push(EpochStats {
            epoch: epochs,
            mean_loss: loss_sum / (masked_seen + unmasked_seen) as f64,
            train_acc: acc,
            masked_seen,
            unmasked_seen,
        });
        if let StopRule::UntilAccuracy { threshold, .. } = cfg.train.stop_rule {
            if acc >= threshold {
                break;
            }
        }
    }
    debug_assert_eq!(net.layers(), layers_before.as_slice());
    Ok(TrainedClassifier {
        net,
        target: clf.target,
        epochs_run: clf.epochs_run + epochs,
        final_train_acc: acc,
        seed: cfg.train.seed,
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
