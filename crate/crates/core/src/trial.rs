//! Two-alternative forced-choice trial records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimuli::{ClickMask, ExpressionLabel, StimuliError};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("trial {stimulus_id}: {detail}")]
    Invalid { stimulus_id: String, detail: String },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Stimuli(#[from] StimuliError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub x: u32,
    pub y: u32,
    /// Server time since the trial was first served.
    pub ms_since_trial_start: u64,
    /// Client-reported timestamp, kept for diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub session_id: String,
    pub stimulus_id: String,
    pub true_label: ExpressionLabel,
    pub false_label: ExpressionLabel,
    pub width: u32,
    pub height: u32,
    pub clicks: Vec<ClickEvent>,
    pub choice: ExpressionLabel,
    pub correct: bool,
    /// First click to choice; `None` when the choice was made without clicking.
    pub duration_ms: Option<u64>,
    pub choice_ms_since_trial_start: u64,
}

impl TrialRecord {
    pub fn validate(&self) -> Result<(), TrialError> {
        let bad = |detail: String| {
            Err(TrialError::Invalid {
                stimulus_id: self.stimulus_id.clone(),
                detail,
            })
        };
        if self.true_label == self.false_label {
            return bad("true and false labels coincide".into());
        }
        if self.choice != self.true_label && self.choice != self.false_label {
            return bad(format!(
                "choice {} is not one of the offered labels",
                self.choice
            ));
        }
        if self.correct != (self.choice == self.true_label) {
            return bad("correct flag disagrees with choice".into());
        }
        if let Some(c) = self
            .clicks
            .iter()
            .find(|c| c.x >= self.width || c.y >= self.height)
        {
            return bad(format!(
                "click ({}, {}) outside {}x{}",
                c.x, c.y, self.width, self.height
            ));
        }
        if self
            .clicks
            .windows(2)
            .any(|w| w[1].ms_since_trial_start < w[0].ms_since_trial_start)
        {
            return bad("click timestamps go backwards".into());
        }
        let expected = self.clicks.first().map(|c| {
            self.choice_ms_since_trial_start
                .saturating_sub(c.ms_since_trial_start)
        });
        if self.duration_ms != expected {
            return bad(format!(
                "duration {:?} should be {expected:?}",
                self.duration_ms
            ));
        }
        Ok(())
    }

    /// Union-of-disks mask of this trial's clicks.
    pub fn click_mask(&self, radius: f64) -> Result<ClickMask, TrialError> {
        let pts = self.clicks.iter().map(|c| (c.x, c.y)).collect();
        Ok(ClickMask::new(
            self.width as usize,
            self.height as usize,
            radius,
            pts,
        )?)
    }
}

/// One JSON object per line.
pub fn write_trials_jsonl<W: Write>(mut out: W, trials: &[TrialRecord]) -> Result<(), TrialError> {
    for t in trials {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses and validates a JSON-lines export; blank lines are skipped.
pub fn read_trials_jsonl<R: BufRead>(input: R) -> Result<Vec<TrialRecord>, TrialError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line).map_err(|source| TrialError::Parse {
            line: i + 1,
            source,
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
