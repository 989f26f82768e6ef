//! The `ferbench` command line: synthetic data, training, evaluation,
//! saliency comparison, reports and the experiment server.
//!
//! Each command reads the pipeline configuration, applies its flags, and
//! writes into a fresh timestamped directory under `paths.results` (or the
//! directory given with `--out`). Every CSV and JSON output records the
//! configuration hash and master seed that produced it.

pub mod artifacts;
pub mod commands;
pub mod config;
mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ferbench_core::saliency::SaliencySource;
use ferbench_core::training::StopRule;

pub use config::PipelineConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ferbench",
    version,
    about = "Human-vs-machine expression recognition workbench"
)]
pub struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults are used when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write outputs here instead of a new timestamped results directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Trial exports (JSON lines) or directories of them.
    #[arg(long = "exports", num_args = 1..)]
    pub exports: Vec<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic train, held-out and experiment splits.
    SynthData {
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        heldout_per_class: Option<usize>,
        #[arg(long)]
        stimuli_per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the 28 pairwise classifiers.
    TrainPairs {
        #[arg(long)]
        lr: Option<f64>,
        /// Epoch cap of the accuracy stopping rule.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Train the eight-way baseline.
    TrainMulticlass {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the pair classifiers on click-revealed stimuli.
    Finetune {
        #[command(flatten)]
        exports: ExportArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Ensemble, multiclass and per-pair accuracy on the held-out split.
    Evaluate {
        /// Also tabulate human choices from these exports.
        #[command(flatten)]
        exports: ExportArgs,
        /// Use the fine-tuned pair classifiers.
        #[arg(long)]
        finetuned: bool,
    },
    /// Per-pair model saliency maps of the experiment stimuli.
    Saliency {
        /// Restrict to these methods.
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<SaliencySource>,
        #[arg(long)]
        finetuned: bool,
    },
    /// Dice between human and model attention, with ANOVA and Tukey tests.
    Compare {
        #[command(flatten)]
        exports: ExportArgs,
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<SaliencySource>,
        #[arg(long)]
        finetuned: bool,
    },
    /// Figures and human behavior summaries from earlier results.
    Report {
        /// Results directory of `evaluate` or `compare`.
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        exports: ExportArgs,
        /// Number of click-sequence figures to draw.
        #[arg(long, default_value_t = 8)]
        click_figures: usize,
    },
    /// Run the experiment server.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run scripted participants through in-process sessions and export their trials.
    Simulate {
        #[arg(long, default_value_t = 1)]
        participants: usize,
        /// Probability of choosing the true label.
        #[arg(long, default_value_t = 0.85)]
        accuracy: f64,
    },
    /// Print the resolved configuration and its hash.
    Config,
}

fn parse_method(s: &str) -> Result<SaliencySource, String> {
    match s {
        "cam" => Ok(SaliencySource::Cam),
        "gradcam" => Ok(SaliencySource::Gradcam),
        "ep" | "extremal_perturbation" => Ok(SaliencySource::ExtremalPerturbation),
        _ => Err(format!("unknown method {s:?}; expected cam, gradcam or ep")),
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::TrainPairs { .. } => "train-pairs",
            Command::TrainMulticlass { .. } => "train-multiclass",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Saliency { .. } => "saliency",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
            Command::Serve { .. } => "serve",
            Command::Simulate { .. } => "simulate",
            Command::Config => "config",
        }
    }

    /// Folds command flags into the configuration.
    fn apply(&self, cfg: &mut PipelineConfig) {
        match self {
            Command::SynthData {
                train_per_class,
                heldout_per_class,
                stimuli_per_class,
                size,
            } => {
                let s = &mut cfg.synth;
                s.train_per_class = train_per_class.unwrap_or(s.train_per_class);
                s.heldout_per_class = heldout_per_class.unwrap_or(s.heldout_per_class);
                s.stimuli_per_class = stimuli_per_class.unwrap_or(s.stimuli_per_class);
                s.size = size.unwrap_or(s.size);
            }
            Command::TrainPairs { lr, max_epochs } => {
                if let Some(lr) = lr {
                    cfg.train.lr = *lr;
                }
                if let Some(n) = max_epochs {
                    cfg.train.stop_rule = match cfg.train.stop_rule {
                        StopRule::UntilAccuracy { threshold, .. } => StopRule::UntilAccuracy {
                            threshold,
                            max_epochs: *n,
                        },
                        StopRule::FixedEpochs(_) => StopRule::FixedEpochs(*n),
                    };
                }
            }
            Command::TrainMulticlass { epochs: Some(n) } => {
                cfg.multiclass.stop_rule = StopRule::FixedEpochs(*n)
            }
            Command::Finetune {
                epochs: Some(n), ..
            } => cfg.finetune.epochs = *n,
            Command::Saliency { methods, .. } | Command::Compare { methods, .. }
                if !methods.is_empty() =>
            {
                cfg.saliency.methods = methods.clone();
            }
            Command::Serve { bind, port } => {
                if let Some(b) = bind {
                    cfg.serve.bind = b.clone();
                }
                if let Some(p) = port {
                    cfg.serve.port = *p;
                }
            }
            _ => {}
        }
    }
}

/// Resolved configuration plus where this command writes.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: PipelineConfig,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cli.command.apply(&mut cfg);
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(Self {
            cfg,
            out: cli.out.clone(),
        })
    }

    pub fn provenance(&self) -> ferbench_core::analytics::report::Provenance {
        self.cfg.provenance()
    }

    /// The command's output directory, created on demand.
    pub fn results_dir(&self, command: &str) -> Result<PathBuf, CliError> {
        match &self.out {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(d.clone())
            }
            None => artifacts::timestamped_dir(&self.cfg.paths.results, command),
        }
    }
}

/// Runs one command; returns the directory it wrote into, if any.
pub fn run(cli: Cli) -> Result<Option<PathBuf>, CliError> {
    let ctx = Context::new(&cli)?;
    tracing::info!(command = cli.command.name(), config_hash = %ctx.cfg.hash(), seed = ctx.cfg.seed, "starting");
    match cli.command {
        Command::SynthData { .. } => commands::synth_data(&ctx).map(Some),
        Command::TrainPairs { .. } => commands::train_pairs(&ctx).map(Some),
        Command::TrainMulticlass { .. } => commands::train_multiclass(&ctx).map(Some),
        Command::Finetune { exports, .. } => commands::finetune(&ctx, &exports.exports).map(Some),
        Command::Evaluate { exports, finetuned } => {
            commands::evaluate(&ctx, &exports.exports, finetuned).map(Some)
        }
        Command::Saliency { finetuned, .. } => commands::saliency(&ctx, finetuned).map(Some),
        Command::Compare {
            exports, finetuned, ..
        } => commands::compare(&ctx, &exports.exports, finetuned).map(Some),
        Command::Report {
            from,
            exports,
            click_figures,
        } => commands::report(&ctx, from.as_deref(), &exports.exports, click_figures).map(Some),
        Command::Serve { .. } => commands::serve(&ctx).map(|()| None),
        Command::Simulate {
            participants,
            accuracy,
        } => commands::simulate(&ctx, participants, accuracy).map(Some),
        Command::Config => {
            print!("# config_hash={}\n{}", ctx.cfg.hash(), ctx.cfg.to_toml());
            Ok(None)
        }
    }
}
