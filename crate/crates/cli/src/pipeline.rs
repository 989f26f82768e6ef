//! The analyses behind `evaluate`, `saliency`, `compare` and `report`, kept
//! free of file handling so they can be driven directly.

use std::collections::BTreeMap;

use ferbench_core::analytics::report::DiceRow;
use ferbench_core::analytics::{
    aggregate_click_attention, collect_pair_logits, dice, matrix_correlation, one_way_anova,
    pearson, tally, tukey_pairwise, ConfusionMatrix, CorrelationMode, VoteMethod,
};
use ferbench_core::saliency::{
    average_maps, cam, extremal_perturbation, gradcam, normalize_scale_255, threshold_mask,
    EPConfig, SaliencyMap, SaliencySource,
};
use ferbench_core::stimuli::{ExpressionLabel, Image, StimulusImage};
use ferbench_core::training::{PairSpec, TrainedClassifier};
use ferbench_core::trial::TrialRecord;
use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairReport {
    pub pair: PairSpec,
    /// Accuracy on held-out images of the pair's two classes.
    pub heldout_accuracy: f64,
    pub heldout_count: usize,
    pub epochs_run: usize,
    pub final_train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub pairs: Vec<PairReport>,
    pub simple: ConfusionMatrix,
    pub weighted: ConfusionMatrix,
    pub multiclass: ConfusionMatrix,
    /// Human 2AFC choices, when exports were supplied.
    pub human: Option<ConfusionMatrix>,
}

impl Evaluation {
    /// Named matrices in a fixed order.
    pub fn matrices(&self) -> Vec<(&'static str, &ConfusionMatrix)> {
        let mut out = vec![
            ("simple", &self.simple),
            ("weighted", &self.weighted),
            ("multiclass", &self.multiclass),
        ];
        if let Some(h) = &self.human {
            out.push(("human", h));
        }
        out
    }
}

fn images(items: &[StimulusImage]) -> Vec<&Image> {
    items.iter().map(|s| &s.pixels).collect()
}

/// Runs both ensembles, the multiclass model and every pair on held-out data.
pub fn evaluate(
    pairs: &[TrainedClassifier],
    multiclass: &TrainedClassifier,
    heldout: &[StimulusImage],
    human: Option<&[TrialRecord]>,
) -> Result<Evaluation, CliError> {
    let imgs = images(heldout);
    let logits = collect_pair_logits(pairs, &imgs)?;
    let mut simple = ConfusionMatrix::default();
    let mut weighted = ConfusionMatrix::default();
    for (item, entries) in heldout.iter().zip(&logits) {
        simple.add(
            item.true_label,
            tally(entries, VoteMethod::Simple)?.winner(),
        );
        weighted.add(
            item.true_label,
            tally(entries, VoteMethod::Weighted)?.winner(),
        );
    }
    let multi = ConfusionMatrix::from_predictions(
        heldout
            .iter()
            .map(|s| s.true_label)
            .zip(multiclass.predict(&imgs)?),
    );
    let mut reports = Vec::with_capacity(pairs.len());
    for (k, clf) in pairs.iter().enumerate() {
        let ferbench_core::training::ClassifierTarget::Pair(pair) = clf.target else {
            return Err(CliError::Data(format!(
                "{} is not a pair classifier",
                clf.target
            )));
        };
        let labels = pair.labels();
        let (mut hit, mut n) = (0, 0);
        for (item, entries) in heldout.iter().zip(&logits) {
            if !pair.contains(item.true_label) {
                continue;
            }
            let [a, b] = entries[k].1;
            let pick = if b > a { labels[1] } else { labels[0] };
            n += 1;
            hit += usize::from(pick == item.true_label);
        }
        reports.push(PairReport {
            pair,
            heldout_accuracy: if n == 0 { 0.0 } else { hit as f64 / n as f64 },
            heldout_count: n,
            epochs_run: clf.epochs_run,
            final_train_acc: clf.final_train_acc,
        });
    }
    Ok(Evaluation {
        pairs: reports,
        simple,
        weighted,
        multiclass: multi,
        human: human.map(human_confusion),
    })
}

/// Rows are true labels, columns the chosen label.
pub fn human_confusion(trials: &[TrialRecord]) -> ConfusionMatrix {
    ConfusionMatrix::from_predictions(trials.iter().map(|t| (t.true_label, t.choice)))
}

/// Pearson correlation of every pair of matrices, over all cells and over the
/// off-diagonal cells. Degenerate pairs get a null coefficient and a note.
pub fn correlations(ev: &Evaluation) -> Value {
    let ms = ev.matrices();
    let mut rows = Vec::new();
    for i in 0..ms.len() {
        for j in i + 1..ms.len() {
            for mode in [CorrelationMode::All, CorrelationMode::OffDiagonal] {
                let mut row = json!({ "a": ms[i].0, "b": ms[j].0, "mode": mode });
                match matrix_correlation(ms[i].1, ms[j].1, mode) {
                    Ok(r) => {
                        row["r"] = json!(r.statistic);
                        row["p_value"] = json!(r.p_value);
                    }
                    Err(e) => {
                        row["r"] = Value::Null;
                        row["note"] = json!(e.to_string());
                    }
                }
                rows.push(row);
            }
        }
    }
    let accuracy: serde_json::Map<String, Value> = ms
        .iter()
        .map(|(n, m)| (n.to_string(), json!(m.accuracy())))
        .collect();
    json!({ "accuracy": accuracy, "correlations": rows })
}

/// Experiment stimuli grouped by the expression pair offered with them.
pub fn stimuli_by_pair(stimuli: &[StimulusImage]) -> BTreeMap<PairSpec, Vec<&StimulusImage>> {
    let mut out: BTreeMap<PairSpec, Vec<&StimulusImage>> = BTreeMap::new();
    for s in stimuli {
        if let Some(p) = PairSpec::new(s.true_label, s.false_label) {
            out.entry(p).or_default().push(s);
        }
    }
    out
}

/// Normalized map of one stimulus toward its true label.
pub fn model_map(
    clf: &TrainedClassifier,
    stim: &StimulusImage,
    method: SaliencySource,
    ep: &EPConfig,
) -> Result<SaliencyMap, CliError> {
    let class = clf.target.class_index(stim.true_label).ok_or_else(|| {
        CliError::Data(format!(
            "{} cannot score stimulus {} ({})",
            clf.target, stim.id, stim.true_label
        ))
    })?;
    let map = match method {
        SaliencySource::Cam => cam(&clf.net, &stim.pixels, class)?,
        SaliencySource::Gradcam => gradcam(&clf.net, &stim.pixels, class)?,
        SaliencySource::ExtremalPerturbation => {
            extremal_perturbation(&clf.net, &stim.pixels, class, ep)?.map
        }
        SaliencySource::HumanClicks => {
            return Err(CliError::Usage(
                "human clicks are not a model method".into(),
            ));
        }
    };
    Ok(map.normalize())
}

/// Per-pair average of the per-stimulus maps of each method, computed with
/// that pair's classifier.
pub fn pair_model_maps(
    pairs: &[TrainedClassifier],
    stimuli: &[StimulusImage],
    methods: &[SaliencySource],
    ep: &EPConfig,
) -> Result<BTreeMap<(PairSpec, SaliencySource), SaliencyMap>, CliError> {
    let by_pair = stimuli_by_pair(stimuli);
    let mut out = BTreeMap::new();
    for (pair, items) in &by_pair {
        let clf = &pairs[pair.index()];
        for &method in methods {
            let maps = items
                .iter()
                .map(|s| model_map(clf, s, method, ep))
                .collect::<Result<Vec<_>, _>>()?;
            out.insert((*pair, method), average_maps(&maps)?);
        }
        tracing::debug!(%pair, stimuli = items.len(), "model maps done");
    }
    Ok(out)
}

/// Click attention per pair; pairs without usable trials are absent.
pub fn human_pair_maps(
    trials: &[TrialRecord],
    radius: f64,
    correct_only: bool,
) -> Result<BTreeMap<PairSpec, SaliencyMap>, CliError> {
    let mut grouped: BTreeMap<PairSpec, Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials {
        if let Some(p) = PairSpec::new(t.true_label, t.false_label) {
            grouped.entry(p).or_default().push(t);
        }
    }
    let mut out = BTreeMap::new();
    for (pair, ts) in grouped {
        match aggregate_click_attention(&ts, radius, correct_only) {
            Ok(m) => {
                out.insert(pair, m.normalize());
            }
            Err(ferbench_core::analytics::AnalyticsError::Empty(why)) => {
                tracing::warn!(%pair, why, "no human attention map");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Dice between thresholded human and model maps, pair-major.
pub fn dice_rows(
    human: &BTreeMap<PairSpec, SaliencyMap>,
    model: &BTreeMap<(PairSpec, SaliencySource), SaliencyMap>,
    methods: &[SaliencySource],
    threshold: u8,
) -> Result<Vec<DiceRow>, CliError> {
    let mut rows = Vec::new();
    for (pair, hmap) in human {
        let hmask = threshold_mask(&normalize_scale_255(hmap), threshold);
        for &method in methods {
            let Some(m) = model.get(&(*pair, method)) else {
                continue;
            };
            let mmask = threshold_mask(&normalize_scale_255(m), threshold);
            rows.push(DiceRow {
                pair: *pair,
                method,
                dice: dice(&hmask, &mmask)?,
            });
        }
    }
    Ok(rows)
}

/// Dice values grouped by method, in the given method order.
pub fn dice_groups(
    rows: &[DiceRow],
    methods: &[SaliencySource],
) -> Vec<(SaliencySource, Vec<f64>)> {
    methods
        .iter()
        .map(|&m| {
            (
                m,
                rows.iter()
                    .filter(|r| r.method == m)
                    .map(|r| r.dice)
                    .collect(),
            )
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-way ANOVA across methods followed by Tukey-Kramer comparisons.
pub fn method_statistics(groups: &[(SaliencySource, Vec<f64>)]) -> Result<Value, CliError> {
    let values: Vec<Vec<f64>> = groups.iter().map(|(_, v)| v.clone()).collect();
    let anova = one_way_anova(&values)?;
    let tukey = tukey_pairwise(&values)?;
    let summary: Vec<Value> = groups
        .iter()
        .map(|(m, v)| json!({ "method": m, "n": v.len(), "mean_dice": mean(v) }))
        .collect();
    let comparisons: Vec<Value> = tukey
        .iter()
        .map(|c| {
            json!({
                "a": groups[c.i].0,
                "b": groups[c.j].0,
                "mean_diff": c.mean_diff,
                "q": c.result.statistic,
                "p_value": c.result.p_value,
            })
        })
        .collect();
    Ok(json!({
        "methods": summary,
        "anova": { "f": anova.statistic, "p_value": anova.p_value, "df": anova.df },
        "tukey": comparisons,
    }))
}

fn correlation_json(x: &[f64], y: &[f64]) -> Value {
    match pearson(x, y) {
        Ok(r) => json!({ "r": r.statistic, "p_value": r.p_value, "n": x.len() }),
        Err(e) => json!({ "r": Value::Null, "n": x.len(), "note": e.to_string() }),
    }
}

/// Accuracy, click count and decision time per true label, with their
/// correlations.
pub fn human_behavior(trials: &[TrialRecord]) -> Value {
    let mut per_class = Vec::new();
    let (mut acc, mut clicks, mut times) = (Vec::new(), Vec::new(), Vec::new());
    for label in ExpressionLabel::ALL {
        let ts: Vec<&TrialRecord> = trials.iter().filter(|t| t.true_label == label).collect();
        if ts.is_empty() {
            continue;
        }
        let a = ts.iter().filter(|t| t.correct).count() as f64 / ts.len() as f64;
        let c = ts.iter().map(|t| t.clicks.len() as f64).sum::<f64>() / ts.len() as f64;
        let timed: Vec<f64> = ts
            .iter()
            .filter_map(|t| t.duration_ms.map(|d| d as f64))
            .collect();
        let d = if timed.is_empty() {
            Value::Null
        } else {
            json!(mean(&timed))
        };
        per_class.push(json!({
            "label": label,
            "trials": ts.len(),
            "accuracy": a,
            "mean_clicks": c,
            "mean_duration_ms": d,
            "zero_click_trials": ts.len() - timed.len(),
        }));
        acc.push(a);
        clicks.push(c);
        if let Some(d) = d.as_f64() {
            times.push((c, d));
        }
    }
    let timed: Vec<&TrialRecord> = trials.iter().filter(|t| t.duration_ms.is_some()).collect();
    let tc: Vec<f64> = timed.iter().map(|t| t.clicks.len() as f64).collect();
    let td: Vec<f64> = timed
        .iter()
        .map(|t| t.duration_ms.unwrap_or(0) as f64)
        .collect();
    let (cc, ct): (Vec<f64>, Vec<f64>) = times.into_iter().unzip();
    json!({
        "trials": trials.len(),
        "accuracy": trials.iter().filter(|t| t.correct).count() as f64 / trials.len().max(1) as f64,
        "per_class": per_class,
        "correlations": {
            "class_accuracy_vs_clicks": correlation_json(&acc, &clicks),
            "class_clicks_vs_duration": correlation_json(&cc, &ct),
            "trial_clicks_vs_duration": correlation_json(&tc, &td),
        },
    })
}
