//! Pipeline configuration. One TOML file holds every setting; command-line
//! flags are applied on top before the configuration hash is taken.

use std::path::{Path, PathBuf};

use ferbench_core::analytics::report::Provenance;
use ferbench_core::saliency::{EPConfig, SaliencySource, DEFAULT_THRESHOLD};
use ferbench_core::training::{StopRule, TrainConfig, DESK_SCALE_LR};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training split.
    pub dataset: PathBuf,
    /// Held-out split used by `evaluate`.
    pub heldout: PathBuf,
    /// Experiment stimuli served to participants and used for saliency comparison.
    pub stimuli: PathBuf,
    pub checkpoints: PathBuf,
    /// Parent of the timestamped per-command results directories.
    pub results: PathBuf,
    /// Session journals of the experiment service.
    pub journal: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data/train".into(),
            heldout: "data/heldout".into(),
            stimuli: "data/stimuli".into(),
            checkpoints: "runs/checkpoints".into(),
            results: "runs/results".into(),
            journal: Some("runs/journal".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    /// 35 per class gives 280 stimuli, ten per expression pair.
    pub stimuli_per_class: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            heldout_per_class: 50,
            stimuli_per_class: 35,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    /// Fraction of every batch taken from click-revealed images.
    pub masked_ratio: f64,
    /// Use clicks from correctly answered trials only.
    pub correct_only: bool,
    /// Unmasked training images per class mixed into each pair's batches.
    pub unmasked_per_class: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            masked_ratio: 0.5,
            correct_only: true,
            unmasked_per_class: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    /// Cut-off on the 0..=255 scaled map.
    pub threshold: u8,
    pub methods: Vec<SaliencySource>,
    /// Compare against clicks from correct trials only.
    pub correct_only: bool,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            methods: vec![
                SaliencySource::Cam,
                SaliencySource::Gradcam,
                SaliencySource::ExtremalPerturbation,
            ],
            correct_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    pub port: u16,
    pub block_count: usize,
    pub stimulus_set_id: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            block_count: 4,
            stimulus_set_id: "default".into(),
        }
    }
}

/// Everything a pipeline run depends on. Stage seeds are derived from `seed`;
/// `seed` keys inside the training and saliency sections are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub multiclass: TrainConfig,
    pub finetune: FinetuneSection,
    pub ep: EPConfig,
    pub saliency: SaliencySection,
    /// Reveal disk radius in pixels, shared by the service and click analytics.
    pub reveal_radius: f64,
    /// Box-blur kernel of the blurred rendition; scaled from the image width when unset.
    pub blur_k: Option<usize>,
    pub serve: ServeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::desk_scale(),
            multiclass: TrainConfig {
                lr: DESK_SCALE_LR,
                ..TrainConfig::multiclass()
            },
            finetune: FinetuneSection::default(),
            ep: EPConfig::default(),
            saliency: SaliencySection::default(),
            reveal_radius: 6.0,
            blur_k: None,
            serve: ServeSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainData,
    HeldoutData,
    StimulusData,
    Pairs,
    Multiclass,
    Finetune,
    Saliency,
    Simulate,
}

/// SplitMix64 finalizer over the master seed and a stage tag, kept below 2^63
/// so that it survives a TOML round trip.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

impl PipelineConfig {
    /// Keys given in a section override the pipeline defaults one by one, so a
    /// partial `[train]` keeps the pipeline's learning rate rather than the
    /// library default.
    pub fn from_toml_str(s: &str) -> Result<Self, CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::Usage(format!("invalid config: {e}"));
        let given: toml::Table = toml::from_str(s).map_err(|e| invalid(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| invalid(&e))?;
        for (key, value) in given {
            match (merged.get_mut(&key), value) {
                (Some(toml::Value::Table(base)), toml::Value::Table(section)) => {
                    base.extend(section)
                }
                (_, value) => {
                    merged.insert(key, value);
                }
            }
        }
        merged.try_into().map_err(|e| invalid(&e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        mix(self.seed, stage as u64 + 1)
    }

    /// Writes the derived stage seeds into the nested sections.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.stage_seed(Stage::Pairs);
        self.train.augmentation.seed = self.train.seed;
        self.multiclass.seed = self.stage_seed(Stage::Multiclass);
        self.multiclass.augmentation.seed = self.multiclass.seed;
        self.ep.seed = self.stage_seed(Stage::Saliency);
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        for (name, t) in [("train", &self.train), ("multiclass", &self.multiclass)] {
            if let Err(e) = t.validate() {
                return usage(format!("[{name}]: {e}"));
            }
        }
        if let Err(e) = self.ep.validate() {
            return usage(format!("[ep]: {e}"));
        }
        let s = &self.synth;
        if s.size < 32
            || s.train_per_class == 0
            || s.heldout_per_class == 0
            || s.stimuli_per_class == 0
        {
            return usage(
                "[synth]: size must be >= 32 and every split needs at least one image per class"
                    .into(),
            );
        }
        if !(self.reveal_radius > 0.0 && self.reveal_radius.is_finite()) {
            return usage("reveal_radius must be positive".into());
        }
        if self.blur_k == Some(0) {
            return usage("blur_k must be at least 1".into());
        }
        let f = &self.finetune;
        if !(f.masked_ratio > 0.0 && f.masked_ratio <= 1.0) {
            return usage("[finetune]: masked_ratio must lie in (0, 1]".into());
        }
        let m = &self.saliency.methods;
        if m.is_empty() || m.contains(&SaliencySource::HumanClicks) {
            return usage("[saliency]: methods must list model methods only".into());
        }
        if self.serve.block_count == 0 {
            return usage("[serve]: block_count must be at least 1".into());
        }
        Ok(())
    }

    /// Blur kernel for images of the given width.
    pub fn blur_kernel(&self, width: usize) -> usize {
        self.blur_k
            .unwrap_or_else(|| ferbench_core::saliency::scaled_blur_kernel(width))
    }

    /// Fine-tuning reuses the pair training settings with a fixed epoch count.
    pub fn finetune_config(&self, width: usize) -> ferbench_core::training::FinetuneConfig {
        ferbench_core::training::FinetuneConfig {
            train: TrainConfig {
                stop_rule: StopRule::FixedEpochs(self.finetune.epochs),
                seed: self.stage_seed(Stage::Finetune),
                ..self.train.clone()
            },
            masked_ratio: self.finetune.masked_ratio,
            blur_k: self.blur_kernel(width),
        }
    }

    /// Hex SHA-256 prefix of the analytic settings. Paths and serving options
    /// are left out so that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
            o.remove("serve");
        }
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            PipelineConfig::from_toml_str("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = PipelineConfig::from_toml_str("[train]\nbatch_size = 16\n[synth]\nsize = 32\n")
            .unwrap();
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr, DESK_SCALE_LR);
        assert_eq!(c.synth.size, 32);
        assert_eq!(c.synth.train_per_class, 200);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = PipelineConfig::from_toml_str("sead = 3").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = PipelineConfig::default().resolve();
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn hash_ignores_paths_but_not_seed() {
        let a = PipelineConfig::default().resolve();
        let mut b = a.clone();
        b.paths.results = "/elsewhere".into();
        b.serve.port = 9;
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig {
            seed: 8,
            ..PipelineConfig::default()
        }
        .resolve();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn stage_seeds_differ() {
        let c = PipelineConfig::default();
        let seeds: std::collections::HashSet<u64> = [
            Stage::TrainData,
            Stage::HeldoutData,
            Stage::StimulusData,
            Stage::Pairs,
        ]
        .into_iter()
        .map(|s| c.stage_seed(s))
        .collect();
        assert_eq!(seeds.len(), 4);
    }
}
