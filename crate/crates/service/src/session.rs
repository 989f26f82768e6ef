//! Per-session trial sequencing. Every state change is expressed as a
//! [`JournalEvent`] so that a session can be rebuilt from its journal.

use ferbench_core::stimuli::ExpressionLabel;
use ferbench_core::trial::{ClickEvent, TrialRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stimulus_set::StimulusSet;
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub participant_code: String,
    pub stimulus_set_id: String,
    pub seed: u64,
    pub created_at_ms: u64,
    /// Stimulus ids in presentation order.
    pub trial_order: Vec<String>,
    /// Display order of the option pair per trial: `true` shows the false label first.
    pub false_first: Vec<bool>,
    /// Start index of each block.
    pub block_boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Created(SessionMeta),
    Served {
        cursor: usize,
        at_ms: u64,
    },
    Click {
        cursor: usize,
        x: u32,
        y: u32,
        client_ms: Option<f64>,
        at_ms: u64,
    },
    Choice {
        cursor: usize,
        choice: ExpressionLabel,
        at_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct ActiveTrial {
    served_at_ms: u64,
    clicks: Vec<ClickEvent>,
}

/// What the participant sees for the current trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialView {
    pub stimulus_index: usize,
    pub stimulus_id: String,
    pub trial_index: usize,
    pub block_index: usize,
    pub first_in_block: bool,
    pub option_pair: [ExpressionLabel; 2],
    pub clicks_so_far: usize,
}

#[derive(Clone, Debug)]
pub struct Session {
    meta: SessionMeta,
    cursor: usize,
    active: Option<ActiveTrial>,
    completed: Vec<TrialRecord>,
}

/// Start indices of `block_count` blocks of `ceil(n / block_count)` trials.
pub fn block_boundaries(n: usize, block_count: usize) -> Vec<usize> {
    let size = n.div_ceil(block_count.max(1)).max(1);
    (0..n).step_by(size).collect()
}

/// Seeded presentation order and option display order for a new session.
pub fn plan_session(
    session_id: String,
    participant_code: String,
    set: &StimulusSet,
    seed: u64,
    block_count: usize,
    created_at_ms: u64,
) -> SessionMeta {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<String> = set.items().iter().map(|s| s.id.clone()).collect();
    order.shuffle(&mut rng);
    let false_first = (0..order.len()).map(|_| rng.random_bool(0.5)).collect();
    SessionMeta {
        session_id,
        participant_code,
        stimulus_set_id: set.id.clone(),
        seed,
        created_at_ms,
        block_boundaries: block_boundaries(order.len(), block_count),
        trial_order: order,
        false_first,
    }
}

impl Session {
    pub fn new(meta: SessionMeta) -> Self {
        Self {
            meta,
            cursor: 0,
            active: None,
            completed: Vec::new(),
        }
    }

    /// Rebuilds a session by re-applying its journal.
    pub fn replay(events: &[JournalEvent], set: &StimulusSet) -> Result<Self, ServiceError> {
        let Some(JournalEvent::Created(meta)) = events.first() else {
            return Err(ServiceError::Journal(
                "journal does not start with a created event".into(),
            ));
        };
        let mut s = Session::new(meta.clone());
        for e in &events[1..] {
            s.apply(e, set)
                .map_err(|err| ServiceError::Journal(format!("replaying {e:?}: {err}")))?;
        }
        Ok(s)
    }

    pub fn meta(&self) -> &SessionMeta {
        &self.meta
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn trial_count(&self) -> usize {
        self.meta.trial_order.len()
    }

    pub fn completed(&self) -> &[TrialRecord] {
        &self.completed
    }

    /// Clicks recorded so far on the served trial.
    pub fn active_clicks(&self) -> &[ClickEvent] {
        self.active.as_ref().map_or(&[], |a| a.clicks.as_slice())
    }

    pub fn is_finished(&self) -> bool {
        self.cursor >= self.trial_count()
    }

    pub fn block_index(&self, trial: usize) -> usize {
        self.meta
            .block_boundaries
            .iter()
            .rposition(|&b| b <= trial)
            .unwrap_or(0)
    }

    fn stimulus_index(&self, set: &StimulusSet) -> Result<usize, ServiceError> {
        let id = &self.meta.trial_order[self.cursor];
        set.index_of(id).ok_or_else(|| {
            ServiceError::Journal(format!("stimulus {id} missing from set {}", set.id))
        })
    }

    fn option_pair(&self, set: &StimulusSet, idx: usize) -> [ExpressionLabel; 2] {
        let s = set.item(idx);
        if self.meta.false_first[self.cursor] {
            [s.false_label, s.true_label]
        } else {
            [s.true_label, s.false_label]
        }
    }

    /// The current trial, or `None` once every trial is done. The event is
    /// `Some` the first time a trial is served.
    pub fn next_trial(
        &self,
        set: &StimulusSet,
        now_ms: u64,
    ) -> Result<Option<(TrialView, Option<JournalEvent>)>, ServiceError> {
        if self.is_finished() {
            return Ok(None);
        }
        let idx = self.stimulus_index(set)?;
        let event = self.active.is_none().then_some(JournalEvent::Served {
            cursor: self.cursor,
            at_ms: now_ms,
        });
        let view = TrialView {
            stimulus_index: idx,
            stimulus_id: set.item(idx).id.clone(),
            trial_index: self.cursor,
            block_index: self.block_index(self.cursor),
            first_in_block: self.meta.block_boundaries.contains(&self.cursor),
            option_pair: self.option_pair(set, idx),
            clicks_so_far: self.active.as_ref().map_or(0, |a| a.clicks.len()),
        };
        Ok(Some((view, event)))
    }

    fn check_active(&self, stimulus_id: &str) -> Result<&ActiveTrial, ServiceError> {
        if self.is_finished() {
            return Err(ServiceError::Conflict("session is complete".into()));
        }
        let active = self
            .active
            .as_ref()
            .ok_or_else(|| ServiceError::Conflict("no trial has been served yet".into()))?;
        let current = &self.meta.trial_order[self.cursor];
        if current != stimulus_id {
            return Err(ServiceError::Conflict(format!(
                "stimulus {stimulus_id} is not the active trial ({current})"
            )));
        }
        Ok(active)
    }

    pub fn click(
        &self,
        set: &StimulusSet,
        stimulus_id: &str,
        x: i64,
        y: i64,
        client_ms: Option<f64>,
        now_ms: u64,
    ) -> Result<JournalEvent, ServiceError> {
        self.check_active(stimulus_id)?;
        let (w, h) = set.dims();
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Err(ServiceError::Invalid(format!(
                "click ({x}, {y}) outside {w}x{h}"
            )));
        }
        Ok(JournalEvent::Click {
            cursor: self.cursor,
            x: x as u32,
            y: y as u32,
            client_ms: client_ms.filter(|v| v.is_finite()),
            at_ms: now_ms,
        })
    }

    pub fn choose(
        &self,
        set: &StimulusSet,
        stimulus_id: &str,
        choice: ExpressionLabel,
        now_ms: u64,
    ) -> Result<JournalEvent, ServiceError> {
        self.check_active(stimulus_id)?;
        let idx = self.stimulus_index(set)?;
        let pair = self.option_pair(set, idx);
        if !pair.contains(&choice) {
            return Err(ServiceError::Invalid(format!(
                "choice {choice} is not one of {} / {}",
                pair[0], pair[1]
            )));
        }
        Ok(JournalEvent::Choice {
            cursor: self.cursor,
            choice,
            at_ms: now_ms,
        })
    }

    /// Applies an event produced by this session (or read from its journal).
    /// Returns the finished record for choice events.
    pub fn apply(
        &mut self,
        event: &JournalEvent,
        set: &StimulusSet,
    ) -> Result<Option<TrialRecord>, ServiceError> {
        let at_cursor = |c: usize| {
            if c == self.cursor {
                Ok(())
            } else {
                Err(ServiceError::Conflict(format!(
                    "event for trial {c} while at {}",
                    self.cursor
                )))
            }
        };
        match *event {
            JournalEvent::Created(_) => {
                Err(ServiceError::Journal("duplicate created event".into()))
            }
            JournalEvent::Served { cursor, at_ms } => {
                at_cursor(cursor)?;
                if self.active.is_none() {
                    self.active = Some(ActiveTrial {
                        served_at_ms: at_ms,
                        clicks: Vec::new(),
                    });
                }
                Ok(None)
            }
            JournalEvent::Click {
                cursor,
                x,
                y,
                client_ms,
                at_ms,
            } => {
                at_cursor(cursor)?;
                let active = self.active.as_mut().ok_or_else(|| {
                    ServiceError::Conflict("click before the trial was served".into())
                })?;
                active.clicks.push(ClickEvent {
                    x,
                    y,
                    ms_since_trial_start: at_ms.saturating_sub(active.served_at_ms),
                    client_ms,
                });
                Ok(None)
            }
            JournalEvent::Choice {
                cursor,
                choice,
                at_ms,
            } => {
                at_cursor(cursor)?;
                let idx = self.stimulus_index(set)?;
                let active = self.active.take().ok_or_else(|| {
                    ServiceError::Conflict("choice before the trial was served".into())
                })?;
                let s = set.item(idx);
                let (w, h) = set.dims();
                let choice_ms = at_ms.saturating_sub(active.served_at_ms);
                let record = TrialRecord {
                    session_id: self.meta.session_id.clone(),
                    stimulus_id: s.id.clone(),
                    true_label: s.true_label,
                    false_label: s.false_label,
                    width: w,
                    height: h,
                    duration_ms: active
                        .clicks
                        .first()
                        .map(|c| choice_ms.saturating_sub(c.ms_since_trial_start)),
                    clicks: active.clicks,
                    choice,
                    correct: choice == s.true_label,
                    choice_ms_since_trial_start: choice_ms,
                };
                record.validate()?;
                self.completed.push(record.clone());
                self.cursor += 1;
                Ok(Some(record))
            }
        }
    }
}
