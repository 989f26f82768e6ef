use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::stimuli::{ExpressionLabel, Image};
use crate::training::{ClassifierTarget, PairSpec, TrainedClassifier};

/// Output of one pair classifier: logits in `[label_a, label_b]` order.
pub type PairLogits = (PairSpec, [f64; 2]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMethod {
    Simple,
    /// The winning logit is added to the preferred class.
    Weighted,
    /// Like `Weighted`, but adds the winning softmax probability.
    WeightedSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub method: VoteMethod,
    /// Per-class accumulators in canonical label order.
    pub scores: [f64; 8],
    /// Number of classifiers preferring each class.
    pub votes: [u32; 8],
}

impl VoteTally {
    /// Highest score, ties to the earlier canonical label. Weighted tallies only
    /// consider classes that received at least one vote, so that negative
    /// accumulated logits cannot lose to an untouched zero.
    pub fn winner(&self) -> ExpressionLabel {
        let eligible = |i: usize| self.method == VoteMethod::Simple || self.votes[i] > 0;
        let mut best: Option<usize> = None;
        for i in (0..8).filter(|&i| eligible(i)) {
            if best.is_none_or(|b| self.scores[i] > self.scores[b]) {
                best = Some(i);
            }
        }
        ExpressionLabel::ALL[best.unwrap_or(0)]
    }
}

fn check_entries(entries: &[PairLogits]) -> Result<(), AnalyticsError> {
    let mut seen = [false; PairSpec::COUNT];
    for (pair, logits) in entries {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(AnalyticsError::VoteInput(format!(
                "non-finite logits for {pair}"
            )));
        }
        if std::mem::replace(&mut seen[pair.index()], true) {
            return Err(AnalyticsError::VoteInput(format!(
                "duplicate classifier {pair}"
            )));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(AnalyticsError::VoteInput(format!(
            "missing classifier {}",
            PairSpec::all()[i]
        )));
    }
    Ok(())
}

/// Accumulates one vote per classifier. A classifier whose two logits are equal
/// prefers its first label.
pub fn tally(entries: &[PairLogits], method: VoteMethod) -> Result<VoteTally, AnalyticsError> {
    check_entries(entries)?;
    let mut t = VoteTally {
        method,
        scores: [0.0; 8],
        votes: [0; 8],
    };
    for (pair, [la, lb]) in entries {
        let (winner, top) = if lb > la {
            (pair.label_b(), *lb)
        } else {
            (pair.label_a(), *la)
        };
        let i = winner.index();
        t.votes[i] += 1;
        t.scores[i] += match method {
            VoteMethod::Simple => 1.0,
            VoteMethod::Weighted => top,
            VoteMethod::WeightedSoftmax => 1.0 / (1.0 + (la.min(*lb) - top).exp()),
        };
    }
    Ok(t)
}

pub fn simple_vote(entries: &[PairLogits]) -> Result<ExpressionLabel, AnalyticsError> {
    Ok(tally(entries, VoteMethod::Simple)?.winner())
}

pub fn weighted_vote(entries: &[PairLogits]) -> Result<ExpressionLabel, AnalyticsError> {
    Ok(tally(entries, VoteMethod::Weighted)?.winner())
}

/// Runs every pair classifier on every image; `out[i]` holds the 28 entries
/// for image `i`.
pub fn collect_pair_logits(
    classifiers: &[TrainedClassifier],
    images: &[&Image],
) -> Result<Vec<Vec<PairLogits>>, AnalyticsError> {
    let mut out = vec![Vec::with_capacity(classifiers.len()); images.len()];
    for clf in classifiers {
        let ClassifierTarget::Pair(pair) = clf.target else {
            return Err(AnalyticsError::VoteInput(
                "multiclass model in pair ensemble".into(),
            ));
        };
        for (row, l) in out.iter_mut().zip(clf.logits(images)?) {
            row.push((pair, [l[0] as f64, l[1] as f64]));
        }
    }
    Ok(out)
}
