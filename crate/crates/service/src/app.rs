use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use ferbench_core::stimuli::{load_dataset, ExpressionLabel};
use ferbench_core::trial::TrialRecord;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::config::ServiceConfig;
use crate::journal::{self, Journal, JOURNAL_EXTENSION};
use crate::patch::{encode_patch, Patch};
use crate::session::{plan_session, JournalEvent, Session};
use crate::stimulus_set::StimulusSet;
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub participant_code: String,
    pub stimulus_set_id: String,
    pub trial_count: usize,
    pub block_boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialResponse {
    Trial {
        stimulus_id: String,
        trial_index: usize,
        trial_count: usize,
        block_index: usize,
        block_count: usize,
        /// Set on the first trial of each block, where the client shows a break.
        first_in_block: bool,
        /// Display order is randomized per trial.
        option_pair: [ExpressionLabel; 2],
        width: u32,
        height: u32,
        reveal_radius: f64,
        clicks_so_far: usize,
        image_png_base64: String,
    },
    Complete {
        trial_count: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    pub click_index: usize,
    pub ms_since_trial_start: u64,
    pub patch: Patch,
}

#[derive(Debug)]
struct Slot {
    session: Session,
    journal: Option<Journal>,
}

impl Slot {
    /// Journals first, then applies; a failed write leaves the state untouched.
    fn commit(
        &mut self,
        event: &JournalEvent,
        set: &StimulusSet,
    ) -> Result<Option<TrialRecord>, ServiceError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(event)?;
        }
        self.session.apply(event, set)
    }
}

/// Shared server state. Sessions are isolated behind their own lock; the
/// session table lock is held only for lookup and insertion.
#[derive(Debug)]
pub struct AppState {
    config: ServiceConfig,
    sets: HashMap<String, Arc<StimulusSet>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
    clock: Arc<dyn Clock>,
}

fn poisoned<T>(_: T) -> ServiceError {
    ServiceError::Internal("session lock poisoned".into())
}

impl AppState {
    /// Builds the state and resumes any sessions journaled in `journal_dir`.
    pub fn new(
        config: ServiceConfig,
        sets: Vec<StimulusSet>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let sets: HashMap<String, Arc<StimulusSet>> = sets
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(s)))
            .collect();
        let state = Self {
            config,
            sets,
            sessions: RwLock::new(HashMap::new()),
            clock,
        };
        state.resume()?;
        Ok(state)
    }

    /// Loads the configured stimulus directory.
    pub fn from_config(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let items = load_dataset(&config.stimulus_dir)?;
        let set = StimulusSet::new(config.stimulus_set_id.clone(), items, config.blur_k)?;
        Self::new(config, vec![set], clock)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn resume(&self) -> Result<(), ServiceError> {
        let Some(dir) = &self.config.journal_dir else {
            return Ok(());
        };
        if !dir.exists() {
            return Ok(());
        }
        let mut table = self.sessions.write().map_err(poisoned)?;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(JOURNAL_EXTENSION) {
                continue;
            }
            let events = journal::recover(&path)?;
            let Some(JournalEvent::Created(meta)) = events.first() else {
                return Err(ServiceError::Journal(format!(
                    "{} has no created event",
                    path.display()
                )));
            };
            let set = self.set(&meta.stimulus_set_id)?;
            let session = Session::replay(&events, &set)?;
            tracing::info!(session = %meta.session_id, cursor = session.cursor(), "resumed session");
            table.insert(
                meta.session_id.clone(),
                Arc::new(Mutex::new(Slot {
                    session,
                    journal: Some(Journal::open(path)?),
                })),
            );
        }
        Ok(())
    }

    fn set(&self, id: &str) -> Result<Arc<StimulusSet>, ServiceError> {
        self.sets
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("stimulus set {id}")))
    }

    fn slot(&self, session_id: &str) -> Result<Arc<Mutex<Slot>>, ServiceError> {
        self.sessions
            .read()
            .map_err(poisoned)?
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))
    }

    pub fn create_session(
        &self,
        participant_code: &str,
        stimulus_set_id: Option<&str>,
        seed: Option<u64>,
    ) -> Result<SessionCreated, ServiceError> {
        if participant_code.trim().is_empty() {
            return Err(ServiceError::Invalid(
                "participant_code must not be empty".into(),
            ));
        }
        let set = self.set(stimulus_set_id.unwrap_or(&self.config.stimulus_set_id))?;
        let mut rng = rand::rng();
        let mut id_bytes = [0u8; 16];
        rng.fill_bytes(&mut id_bytes);
        let session_id = URL_SAFE_NO_PAD.encode(id_bytes);
        let seed = seed.unwrap_or_else(|| rng.next_u64());
        let meta = plan_session(
            session_id.clone(),
            participant_code.to_string(),
            &set,
            seed,
            self.config.block_count,
            self.clock.now_ms(),
        );
        let journal = match &self.config.journal_dir {
            Some(dir) => {
                let mut j = Journal::open(Journal::path_for(dir, &session_id))?;
                j.append(&JournalEvent::Created(meta.clone()))?;
                Some(j)
            }
            None => None,
        };
        let created = SessionCreated {
            session_id: session_id.clone(),
            participant_code: meta.participant_code.clone(),
            stimulus_set_id: meta.stimulus_set_id.clone(),
            trial_count: meta.trial_order.len(),
            block_boundaries: meta.block_boundaries.clone(),
        };
        let slot = Slot {
            session: Session::new(meta),
            journal,
        };
        self.sessions
            .write()
            .map_err(poisoned)?
            .insert(session_id.clone(), Arc::new(Mutex::new(slot)));
        tracing::info!(session = %session_id, participant = participant_code, "created session");
        Ok(created)
    }

    pub fn next_trial(&self, session_id: &str) -> Result<TrialResponse, ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().map_err(poisoned)?;
        let set = self.set(&slot.session.meta().stimulus_set_id)?;
        let Some((view, event)) = slot.session.next_trial(&set, self.clock.now_ms())? else {
            return Ok(TrialResponse::Complete {
                trial_count: slot.session.trial_count(),
            });
        };
        if let Some(e) = event {
            slot.commit(&e, &set)?;
        }
        let (width, height) = set.dims();
        Ok(TrialResponse::Trial {
            stimulus_id: view.stimulus_id,
            trial_index: view.trial_index,
            trial_count: slot.session.trial_count(),
            block_index: view.block_index,
            block_count: slot.session.meta().block_boundaries.len(),
            first_in_block: view.first_in_block,
            option_pair: view.option_pair,
            width,
            height,
            reveal_radius: self.config.reveal_radius,
            clicks_so_far: view.clicks_so_far,
            image_png_base64: STANDARD.encode(set.blurred_png(view.stimulus_index)),
        })
    }

    pub fn click(
        &self,
        session_id: &str,
        stimulus_id: &str,
        x: i64,
        y: i64,
        client_ms: Option<f64>,
    ) -> Result<ClickResponse, ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().map_err(poisoned)?;
        let set = self.set(&slot.session.meta().stimulus_set_id)?;
        let event = slot
            .session
            .click(&set, stimulus_id, x, y, client_ms, self.clock.now_ms())?;
        let idx = set
            .index_of(stimulus_id)
            .ok_or_else(|| ServiceError::NotFound(format!("stimulus {stimulus_id}")))?;
        let patch = encode_patch(
            set.original_rgb8(idx),
            x as u32,
            y as u32,
            self.config.reveal_radius,
        )?;
        slot.commit(&event, &set)?;
        let (click_index, ms) = slot
            .session
            .active_clicks()
            .last()
            .map(|c| {
                (
                    slot.session.active_clicks().len() - 1,
                    c.ms_since_trial_start,
                )
            })
            .ok_or_else(|| ServiceError::Internal("click not recorded".into()))?;
        Ok(ClickResponse {
            click_index,
            ms_since_trial_start: ms,
            patch,
        })
    }

    pub fn choose(
        &self,
        session_id: &str,
        stimulus_id: &str,
        choice: ExpressionLabel,
    ) -> Result<TrialRecord, ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().map_err(poisoned)?;
        let set = self.set(&slot.session.meta().stimulus_set_id)?;
        let event = slot
            .session
            .choose(&set, stimulus_id, choice, self.clock.now_ms())?;
        slot.commit(&event, &set)?
            .ok_or_else(|| ServiceError::Internal("choice produced no record".into()))
    }

    pub fn export(&self, session_id: &str) -> Result<Vec<TrialRecord>, ServiceError> {
        let slot = self.slot(session_id)?;
        let slot = slot.lock().map_err(poisoned)?;
        Ok(slot.session.completed().to_vec())
    }

    /// Completed trials of every session, ordered by session creation time.
    pub fn export_all(&self) -> Result<Vec<TrialRecord>, ServiceError> {
        let slots: Vec<Arc<Mutex<Slot>>> = self
            .sessions
            .read()
            .map_err(poisoned)?
            .values()
            .cloned()
            .collect();
        let mut per_session = Vec::with_capacity(slots.len());
        for s in slots {
            let s = s.lock().map_err(poisoned)?;
            let meta = s.session.meta();
            per_session.push((
                (meta.created_at_ms, meta.session_id.clone()),
                s.session.completed().to_vec(),
            ));
        }
        per_session.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(per_session.into_iter().flat_map(|(_, v)| v).collect())
    }
}
