use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ferbench_core::analytics::click_sequence_colors;
use ferbench_core::analytics::report::{
    read_confusion_csv, write_box_plot, write_confusion_csv, write_confusion_heatmap,
    write_dice_csv, write_stats_json, DiceRow, Provenance,
};
use ferbench_core::saliency::{SaliencyMap, SaliencySource};
use ferbench_core::stimuli::{
    blurred_grayscale, generate_synthetic_dataset, write_dataset, StimulusImage,
};
use ferbench_core::training::{
    finetune_masked, train_all_pairs, MaskedStimulus, PairSpec, TrainedClassifier,
};
use ferbench_core::trial::{write_trials_jsonl, TrialRecord};
use ferbench_service::participant::{ParticipantPolicy, ScriptedParticipant};
use ferbench_service::{router, AppState, ManualClock, ServiceConfig, StimulusSet, SystemClock};
use serde_json::json;

use crate::artifacts::{
    load_classifier, load_exports, load_pairs, load_split, pair_checkpoint, save_classifier,
    FINETUNED_DIR, MULTICLASS_FILE, PAIRS_DIR,
};
use crate::config::Stage;
use crate::pipeline;
use crate::{CliError, Context};

fn require_exports(exports: &[PathBuf], command: &str) -> Result<(), CliError> {
    if exports.is_empty() {
        return Err(CliError::Usage(format!(
            "`{command}` needs --exports <FILE|DIR>..."
        )));
    }
    Ok(())
}

fn classifier_report(clf: &TrainedClassifier) -> serde_json::Value {
    json!({
        "pair": clf.target,
        "epochs_run": clf.epochs_run,
        "final_train_acc": clf.final_train_acc,
        "wall_time_s": clf.wall_time_s,
    })
}

pub fn synth_data(ctx: &Context) -> Result<PathBuf, CliError> {
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let s = &cfg.synth;
    let splits = [
        (
            "train",
            &cfg.paths.dataset,
            s.train_per_class,
            Stage::TrainData,
        ),
        (
            "heldout",
            &cfg.paths.heldout,
            s.heldout_per_class,
            Stage::HeldoutData,
        ),
        (
            "stimuli",
            &cfg.paths.stimuli,
            s.stimuli_per_class,
            Stage::StimulusData,
        ),
    ];
    let mut summary = Vec::new();
    for (name, dir, n, stage) in splits {
        let seed = cfg.stage_seed(stage);
        let items = generate_synthetic_dataset(n, s.size, seed)?;
        write_dataset(dir, &items)?;
        write_stats_json(
            dir.join("provenance.json"),
            &json!({ "split": name, "per_class": n, "size": s.size, "split_seed": seed }),
            &prov,
        )?;
        tracing::info!(split = name, images = items.len(), dir = %dir.display(), "wrote split");
        summary.push(json!({ "split": name, "images": items.len(), "split_seed": seed }));
    }
    let out = ctx.results_dir("synth-data")?;
    write_stats_json(out.join("synth.json"), &json!({ "splits": summary }), &prov)?;
    Ok(out)
}

pub fn train_pairs(ctx: &Context) -> Result<PathBuf, CliError> {
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let data = load_split(&cfg.paths.dataset, "training")?;
    let trained = train_all_pairs(&data, &cfg.train)?;
    let dir = cfg.paths.checkpoints.join(PAIRS_DIR);
    let mut rows = Vec::new();
    for clf in &trained {
        let ferbench_core::training::ClassifierTarget::Pair(pair) = clf.target else {
            unreachable!("pair training yields pair classifiers");
        };
        save_classifier(&pair_checkpoint(&dir, pair), clf, &prov)?;
        rows.push(classifier_report(clf));
    }
    let threshold_met = match cfg.train.stop_rule {
        ferbench_core::training::StopRule::UntilAccuracy { threshold, .. } => trained
            .iter()
            .filter(|c| c.final_train_acc >= threshold)
            .count(),
        ferbench_core::training::StopRule::FixedEpochs(_) => trained.len(),
    };
    tracing::info!(pairs = trained.len(), threshold_met, "pair training done");
    let out = ctx.results_dir("train-pairs")?;
    write_stats_json(
        out.join("training_report.json"),
        &json!({ "classifiers": rows }),
        &prov,
    )?;
    Ok(out)
}

pub fn train_multiclass(ctx: &Context) -> Result<PathBuf, CliError> {
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let data = load_split(&cfg.paths.dataset, "training")?;
    let clf = ferbench_core::training::train_multiclass(&data, &cfg.multiclass)?;
    save_classifier(&cfg.paths.checkpoints.join(MULTICLASS_FILE), &clf, &prov)?;
    let out = ctx.results_dir("train-multiclass")?;
    write_stats_json(
        out.join("training_report.json"),
        &json!({ "classifiers": [classifier_report(&clf)], "history": clf.history }),
        &prov,
    )?;
    Ok(out)
}

fn stimulus_index(stimuli: &[StimulusImage]) -> HashMap<&str, &StimulusImage> {
    stimuli.iter().map(|s| (s.id.as_str(), s)).collect()
}

fn lookup<'a>(
    index: &HashMap<&str, &'a StimulusImage>,
    t: &TrialRecord,
) -> Result<&'a StimulusImage, CliError> {
    index.get(t.stimulus_id.as_str()).copied().ok_or_else(|| {
        CliError::Data(format!(
            "trial references stimulus {} which is not in the configured stimuli split",
            t.stimulus_id
        ))
    })
}

pub fn finetune(ctx: &Context, exports: &[PathBuf]) -> Result<PathBuf, CliError> {
    require_exports(exports, "finetune")?;
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let pairs = load_pairs(&cfg.paths.checkpoints.join(PAIRS_DIR), "train-pairs")?;
    let stimuli = load_split(&cfg.paths.stimuli, "stimuli")?;
    let train = load_split(&cfg.paths.dataset, "training")?;
    let trials = load_exports(exports)?;
    let index = stimulus_index(&stimuli);
    let ft = cfg.finetune_config(stimuli[0].pixels.width());
    let dir = cfg.paths.checkpoints.join(FINETUNED_DIR);
    let mut rows = Vec::new();
    for clf in &pairs {
        let ferbench_core::training::ClassifierTarget::Pair(pair) = clf.target else {
            unreachable!("load_pairs checks targets");
        };
        let mut masked = Vec::new();
        for t in &trials {
            if PairSpec::new(t.true_label, t.false_label) != Some(pair)
                || t.clicks.is_empty()
                || (cfg.finetune.correct_only && !t.correct)
            {
                continue;
            }
            masked.push(MaskedStimulus {
                stimulus: lookup(&index, t)?.clone(),
                clicks: t.click_mask(cfg.reveal_radius)?,
            });
        }
        let unmasked: Vec<StimulusImage> = pair
            .labels()
            .iter()
            .flat_map(|&l| {
                train
                    .iter()
                    .filter(move |s| s.true_label == l)
                    .take(cfg.finetune.unmasked_per_class)
            })
            .cloned()
            .collect();
        let tuned = if masked.is_empty() {
            tracing::warn!(%pair, "no usable clicks; keeping the original classifier");
            None
        } else {
            Some(finetune_masked(clf, &masked, &unmasked, &ft)?)
        };
        let result = tuned.as_ref().unwrap_or(clf);
        save_classifier(&pair_checkpoint(&dir, pair), result, &prov)?;
        rows.push(json!({
            "pair": pair,
            "masked_trials": masked.len(),
            "unmasked_images": unmasked.len(),
            "finetuned": tuned.is_some(),
            "epochs_run": result.epochs_run,
            "final_masked_acc": tuned.as_ref().map(|c| c.final_train_acc),
            "wall_time_s": result.wall_time_s,
        }));
    }
    let out = ctx.results_dir("finetune")?;
    write_stats_json(
        out.join("finetune_report.json"),
        &json!({ "classifiers": rows }),
        &prov,
    )?;
    Ok(out)
}

fn pair_set(ctx: &Context, finetuned: bool) -> Result<Vec<TrainedClassifier>, CliError> {
    let (sub, command) = if finetuned {
        (FINETUNED_DIR, "finetune")
    } else {
        (PAIRS_DIR, "train-pairs")
    };
    load_pairs(&ctx.cfg.paths.checkpoints.join(sub), command)
}

pub fn evaluate(ctx: &Context, exports: &[PathBuf], finetuned: bool) -> Result<PathBuf, CliError> {
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let pairs = pair_set(ctx, finetuned)?;
    let multiclass = load_classifier(
        &cfg.paths.checkpoints.join(MULTICLASS_FILE),
        "train-multiclass",
    )?;
    let heldout = load_split(&cfg.paths.heldout, "held-out")?;
    let human = if exports.is_empty() {
        None
    } else {
        Some(load_exports(exports)?)
    };
    let ev = pipeline::evaluate(&pairs, &multiclass, &heldout, human.as_deref())?;
    let out = ctx.results_dir("evaluate")?;
    write_stats_json(
        out.join("pairs.json"),
        &json!({ "finetuned": finetuned, "pairs": ev.pairs }),
        &prov,
    )?;
    for (name, m) in ev.matrices() {
        write_confusion_csv(out.join(format!("confusion_{name}.csv")), m, &prov)?;
        write_confusion_heatmap(out.join(format!("confusion_{name}.png")), m, &prov)?;
    }
    write_stats_json(
        out.join("correlations.json"),
        &pipeline::correlations(&ev),
        &prov,
    )?;
    tracing::info!(
        simple = ev.simple.accuracy(),
        weighted = ev.weighted.accuracy(),
        multiclass = ev.multiclass.accuracy(),
        "held-out accuracy"
    );
    Ok(out)
}

fn export_maps(
    dir: &Path,
    maps: impl IntoIterator<Item = (PairSpec, SaliencySource, SaliencyMap)>,
    extra: &serde_json::Value,
    prov: &Provenance,
) -> Result<(), CliError> {
    for (pair, method, map) in maps {
        let sub = dir.join("maps").join(method.name());
        std::fs::create_dir_all(&sub)?;
        let config = json!({ "pair": pair, "provenance": prov, "settings": extra });
        map.export(sub.join(format!("{pair}.png")), &config)?;
    }
    Ok(())
}

fn map_settings(ctx: &Context) -> serde_json::Value {
    json!({
        "threshold": ctx.cfg.saliency.threshold,
        "ep": ctx.cfg.ep,
        "reveal_radius": ctx.cfg.reveal_radius,
        "correct_only": ctx.cfg.saliency.correct_only,
    })
}

pub fn saliency(ctx: &Context, finetuned: bool) -> Result<PathBuf, CliError> {
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let pairs = pair_set(ctx, finetuned)?;
    let stimuli = load_split(&cfg.paths.stimuli, "stimuli")?;
    let maps = pipeline::pair_model_maps(&pairs, &stimuli, &cfg.saliency.methods, &cfg.ep)?;
    let counts = pipeline::stimuli_by_pair(&stimuli);
    let summary: Vec<serde_json::Value> = maps
        .iter()
        .map(|((pair, method), map)| {
            let mask = ferbench_core::saliency::threshold_mask(
                &ferbench_core::saliency::normalize_scale_255(map),
                cfg.saliency.threshold,
            );
            json!({
                "pair": pair,
                "method": method.name(),
                "stimuli": counts.get(pair).map_or(0, Vec::len),
                "thresholded_fraction": mask.count() as f64 / (map.width * map.height) as f64,
            })
        })
        .collect();
    let out = ctx.results_dir("saliency")?;
    export_maps(
        &out,
        maps.into_iter().map(|((p, m), map)| (p, m, map)),
        &map_settings(ctx),
        &prov,
    )?;
    write_stats_json(
        out.join("saliency.json"),
        &json!({ "finetuned": finetuned, "maps": summary }),
        &prov,
    )?;
    Ok(out)
}

pub fn compare(ctx: &Context, exports: &[PathBuf], finetuned: bool) -> Result<PathBuf, CliError> {
    require_exports(exports, "compare")?;
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let pairs = pair_set(ctx, finetuned)?;
    let stimuli = load_split(&cfg.paths.stimuli, "stimuli")?;
    let trials = load_exports(exports)?;
    let index = stimulus_index(&stimuli);
    for t in &trials {
        lookup(&index, t)?;
    }
    let methods = &cfg.saliency.methods;
    let human = pipeline::human_pair_maps(&trials, cfg.reveal_radius, cfg.saliency.correct_only)?;
    let model = pipeline::pair_model_maps(&pairs, &stimuli, methods, &cfg.ep)?;
    let rows = pipeline::dice_rows(&human, &model, methods, cfg.saliency.threshold)?;
    let out = ctx.results_dir("compare")?;
    write_dice_csv(out.join("dice.csv"), &rows, &prov)?;
    let groups = pipeline::dice_groups(&rows, methods);
    let missing: Vec<PairSpec> = PairSpec::all()
        .into_iter()
        .filter(|p| !human.contains_key(p))
        .collect();
    let mut stats = if groups.len() >= 2 && groups.iter().all(|(_, v)| v.len() >= 2) {
        pipeline::method_statistics(&groups)?
    } else {
        json!({ "note": "too few methods or pairs for ANOVA" })
    };
    stats["finetuned"] = json!(finetuned);
    stats["pairs_without_human_map"] = json!(missing);
    write_stats_json(out.join("stats.json"), &stats, &prov)?;
    if groups.iter().all(|(_, v)| !v.is_empty()) {
        let named: Vec<(String, Vec<f64>)> = groups
            .iter()
            .map(|(m, v)| (m.name().to_string(), v.clone()))
            .collect();
        write_box_plot(out.join("dice_boxplot.png"), &named, &prov)?;
    }
    let settings = map_settings(ctx);
    export_maps(
        &out,
        human
            .into_iter()
            .map(|(p, m)| (p, SaliencySource::HumanClicks, m))
            .chain(model.into_iter().map(|((p, s), m)| (p, s, m))),
        &settings,
        &prov,
    )?;
    if let Some(a) = stats.get("anova") {
        tracing::info!(f = %a["f"], p = %a["p_value"], rows = rows.len(), "method comparison");
    }
    Ok(out)
}

/// `# config_hash=<h> seed=<s>` from the first line of a report file.
fn read_provenance(path: &Path) -> Option<Provenance> {
    let text = std::fs::read_to_string(path).ok()?;
    let line = text.lines().next()?.strip_prefix("# ")?;
    let mut hash = None;
    let mut seed = None;
    for kv in line.split_whitespace() {
        match kv.split_once('=') {
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => {}
        }
    }
    Some(Provenance {
        config_hash: hash?,
        seed: seed?,
    })
}

fn read_dice_csv(path: &Path) -> Result<Vec<DiceRow>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: &str| CliError::Data(format!("{}: malformed row {line:?}", path.display()));
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let mut parts = line.split(',');
        let (Some(pair), Some(method), Some(d), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(line));
        };
        let (a, b) = pair.split_once('-').ok_or_else(|| bad(line))?;
        let pair = PairSpec::new(a.parse()?, b.parse()?).ok_or_else(|| bad(line))?;
        let method = [
            SaliencySource::Cam,
            SaliencySource::Gradcam,
            SaliencySource::ExtremalPerturbation,
            SaliencySource::HumanClicks,
        ]
        .into_iter()
        .find(|m| m.name() == method)
        .ok_or_else(|| bad(line))?;
        rows.push(DiceRow {
            pair,
            method,
            dice: d.parse().map_err(|_| bad(line))?,
        });
    }
    Ok(rows)
}

const CLICK_FIGURE_SCALE: u32 = 4;

/// Blurred stimulus, enlarged, with its clicks drawn red (first) to yellow (last).
fn click_figure(
    stim: &StimulusImage,
    trial: &TrialRecord,
    blur_k: usize,
) -> Result<image::RgbImage, CliError> {
    let base = blurred_grayscale(&stim.pixels, blur_k)?.to_rgb8();
    let s = CLICK_FIGURE_SCALE;
    let mut img = image::imageops::resize(
        &base,
        base.width() * s,
        base.height() * s,
        image::imageops::Nearest,
    );
    let r = (s * 3 / 2) as i64;
    for (x, y, rgb) in click_sequence_colors(trial) {
        let (cx, cy) = ((x * s + s / 2) as i64, (y * s + s / 2) as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= r * r
                    && px >= 0
                    && py >= 0
                    && (px as u32) < img.width()
                    && (py as u32) < img.height()
                {
                    img.put_pixel(px as u32, py as u32, image::Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

pub fn report(
    ctx: &Context,
    from: Option<&Path>,
    exports: &[PathBuf],
    click_figures: usize,
) -> Result<PathBuf, CliError> {
    if from.is_none() && exports.is_empty() {
        return Err(CliError::Usage(
            "`report` needs --from <RESULTS_DIR> and/or --exports".into(),
        ));
    }
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let mut sources = Vec::new();
    if let Some(dir) = from {
        if !dir.is_dir() {
            return Err(CliError::Data(format!(
                "results directory {} not found; run `ferbench evaluate` or `ferbench compare` first",
                dir.display()
            )));
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        sources = entries;
    }
    let out = ctx.results_dir("report")?;
    let mut figures = Vec::new();
    for path in &sources {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let src_prov = read_provenance(path).unwrap_or_else(|| prov.clone());
        if name.starts_with("confusion_") && name.ends_with(".csv") {
            let m = read_confusion_csv(path)?;
            let png = out.join(name.replace(".csv", ".png"));
            write_confusion_heatmap(&png, &m, &src_prov)?;
            figures.push(png);
        } else if name == "dice.csv" {
            let rows = read_dice_csv(path)?;
            let mut methods: Vec<SaliencySource> = Vec::new();
            for r in &rows {
                if !methods.contains(&r.method) {
                    methods.push(r.method);
                }
            }
            let groups: Vec<(String, Vec<f64>)> = pipeline::dice_groups(&rows, &methods)
                .into_iter()
                .map(|(m, v)| (m.name().to_string(), v))
                .collect();
            if !groups.is_empty() {
                let png = out.join("dice_boxplot.png");
                write_box_plot(&png, &groups, &src_prov)?;
                figures.push(png);
            }
        }
    }
    if !exports.is_empty() {
        let trials = load_exports(exports)?;
        write_stats_json(
            out.join("human_behavior.json"),
            &pipeline::human_behavior(&trials),
            &prov,
        )?;
        let m = pipeline::human_confusion(&trials);
        write_confusion_csv(out.join("confusion_human.csv"), &m, &prov)?;
        write_confusion_heatmap(out.join("confusion_human.png"), &m, &prov)?;
        if click_figures > 0 {
            let stimuli = load_split(&cfg.paths.stimuli, "stimuli")?;
            let index = stimulus_index(&stimuli);
            let dir = out.join("clicks");
            std::fs::create_dir_all(&dir)?;
            for (i, t) in trials
                .iter()
                .filter(|t| !t.clicks.is_empty())
                .take(click_figures)
                .enumerate()
            {
                let stim = lookup(&index, t)?;
                let img = click_figure(stim, t, cfg.blur_kernel(stim.pixels.width()))?;
                let png = dir.join(format!("{i:03}_{}.png", t.stimulus_id));
                img.save(&png)
                    .map_err(|e| CliError::Data(format!("{}: {e}", png.display())))?;
                figures.push(png);
            }
        }
    }
    tracing::info!(figures = figures.len(), "report written");
    Ok(out)
}

fn service_config(ctx: &Context) -> ServiceConfig {
    let cfg = &ctx.cfg;
    ServiceConfig {
        bind: cfg.serve.bind.clone(),
        port: cfg.serve.port,
        stimulus_dir: cfg.paths.stimuli.clone(),
        stimulus_set_id: cfg.serve.stimulus_set_id.clone(),
        reveal_radius: cfg.reveal_radius,
        blur_k: cfg.blur_k,
        block_count: cfg.serve.block_count,
        journal_dir: cfg.paths.journal.clone(),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::from)
}

pub fn serve(ctx: &Context) -> Result<(), CliError> {
    let sc = service_config(ctx);
    load_split(&sc.stimulus_dir, "stimuli")?;
    let addr = format!("{}:{}", sc.bind, sc.port);
    let state = Arc::new(AppState::from_config(sc, Arc::new(SystemClock))?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        tracing::info!(%addr, "experiment service listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::from)
    })
}

pub fn simulate(ctx: &Context, participants: usize, accuracy: f64) -> Result<PathBuf, CliError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(CliError::Usage("--accuracy must lie in [0, 1]".into()));
    }
    let (cfg, prov) = (&ctx.cfg, ctx.provenance());
    let sc = ServiceConfig {
        journal_dir: None,
        ..service_config(ctx)
    };
    let items = load_split(&sc.stimulus_dir, "stimuli")?;
    let set = StimulusSet::new(sc.stimulus_set_id.clone(), items.clone(), sc.blur_k)?;
    let clock = ManualClock::new(0);
    let state = Arc::new(AppState::new(sc, vec![set], Arc::new(clock.clone()))?);
    let policy = ParticipantPolicy {
        accuracy,
        ..ParticipantPolicy::default()
    };
    let participant =
        ScriptedParticipant::new(router(state), Some(clock), policy).with_knowledge(&items);
    let out = ctx.results_dir("simulate")?;
    let base = cfg.stage_seed(Stage::Simulate);
    let mut sessions = Vec::new();
    let rt = runtime()?;
    for i in 0..participants {
        let code = format!("P{:02}", i + 1);
        let seed = base.wrapping_add(i as u64);
        let log = rt.block_on(participant.run(&code, seed, Some(seed)))?;
        let records: Vec<TrialRecord> = log.trials.into_iter().map(|t| t.record).collect();
        let file = std::fs::File::create(out.join(format!("{code}.jsonl")))?;
        write_trials_jsonl(std::io::BufWriter::new(file), &records)?;
        sessions.push(json!({
            "participant_code": code,
            "session_id": log.created.session_id,
            "trials": records.len(),
            "correct": records.iter().filter(|r| r.correct).count(),
        }));
    }
    write_stats_json(
        out.join("sessions.json"),
        &json!({ "sessions": sessions }),
        &prov,
    )?;
    Ok(out)
}
