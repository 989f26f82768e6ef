//! A scripted participant that runs whole sessions over the HTTP API without
//! a browser. Used for protocol tests and for producing synthetic human
//! exports.

use std::collections::HashMap;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ferbench_core::stimuli::{BinaryMask, ExpressionLabel, StimulusImage};
use ferbench_core::trial::{read_trials_jsonl, TrialRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

use crate::api::{ChoiceRequest, ClickRequest, CreateSessionRequest};
use crate::app::{ClickResponse, SessionCreated, TrialResponse};
use crate::clock::ManualClock;
use crate::patch::Patch;
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantPolicy {
    /// Probability of picking the true label when it is known.
    pub accuracy: f64,
    /// Clicks per trial are drawn from `1..=max_clicks`.
    pub max_clicks: usize,
    /// Probability of answering without clicking.
    pub zero_click_prob: f64,
    /// Simulated pause before each action, drawn from this range in ms.
    pub think_ms: (u64, u64),
}

impl Default for ParticipantPolicy {
    fn default() -> Self {
        Self {
            accuracy: 0.85,
            max_clicks: 6,
            zero_click_prob: 0.05,
            think_ms: (150, 900),
        }
    }
}

/// Everything one trial looked like from the participant's side.
#[derive(Clone, Debug)]
pub struct ObservedTrial {
    pub stimulus_id: String,
    pub trial_index: usize,
    pub block_index: usize,
    pub first_in_block: bool,
    pub option_pair: [ExpressionLabel; 2],
    pub blurred: image::RgbImage,
    pub clicks: Vec<(u32, u32)>,
    pub patches: Vec<Patch>,
    /// Blurred image with every received patch drawn on top.
    pub composite: image::RgbImage,
    /// Simulated clock at serve, at each click, and at the choice.
    pub served_ms: u64,
    pub click_ms: Vec<u64>,
    pub choice_ms: u64,
    pub record: TrialRecord,
}

#[derive(Clone, Debug)]
pub struct SessionLog {
    pub created: SessionCreated,
    pub trials: Vec<ObservedTrial>,
}

struct Knowledge {
    true_label: ExpressionLabel,
    region: Option<BinaryMask>,
}

pub struct ScriptedParticipant {
    router: Router,
    clock: Option<ManualClock>,
    policy: ParticipantPolicy,
    knowledge: HashMap<String, Knowledge>,
}

fn error_for(status: StatusCode, body: &[u8]) -> ServiceError {
    let msg = serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or_else(|| String::from_utf8_lossy(body).into_owned());
    match status {
        StatusCode::NOT_FOUND => ServiceError::NotFound(msg),
        StatusCode::CONFLICT => ServiceError::Conflict(msg),
        StatusCode::UNPROCESSABLE_ENTITY | StatusCode::BAD_REQUEST => ServiceError::Invalid(msg),
        _ => ServiceError::Internal(format!("{status}: {msg}")),
    }
}

impl ScriptedParticipant {
    /// `clock`, when given, must be the clock the router's state reads; the
    /// participant advances it to simulate thinking time.
    pub fn new(router: Router, clock: Option<ManualClock>, policy: ParticipantPolicy) -> Self {
        Self {
            router,
            clock,
            policy,
            knowledge: HashMap::new(),
        }
    }

    /// Lets the participant recognise these stimuli and aim clicks at their
    /// discriminative regions.
    pub fn with_knowledge(mut self, items: &[StimulusImage]) -> Self {
        for s in items {
            self.knowledge.insert(
                s.id.clone(),
                Knowledge {
                    true_label: s.true_label,
                    region: s.gt_region.clone(),
                },
            );
        }
        self
    }

    async fn raw(
        &self,
        method: Method,
        uri: &str,
        body: Option<Vec<u8>>,
    ) -> Result<(StatusCode, Vec<u8>), ServiceError> {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req
            .body(body.map_or_else(Body::empty, Body::from))
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let resp = self
            .router
            .clone()
            .oneshot(req)
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok((status, bytes.to_vec()))
    }

    async fn call<T: DeserializeOwned>(
        &self,
        method: Method,
        uri: &str,
        body: Option<&impl Serialize>,
    ) -> Result<T, ServiceError> {
        let body = body.map(serde_json::to_vec).transpose()?;
        let (status, bytes) = self.raw(method, uri, body).await?;
        if !status.is_success() {
            return Err(error_for(status, &bytes));
        }
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn pause(&self, rng: &mut ChaCha8Rng) {
        if let Some(c) = &self.clock {
            c.advance(rng.random_range(self.policy.think_ms.0..=self.policy.think_ms.1));
        }
    }

    fn now(&self) -> u64 {
        self.clock
            .as_ref()
            .map_or(0, |c| crate::clock::Clock::now_ms(c))
    }

    pub async fn export(&self, session_id: &str) -> Result<Vec<TrialRecord>, ServiceError> {
        let (status, bytes) = self
            .raw(Method::GET, &format!("/sessions/{session_id}/export"), None)
            .await?;
        if !status.is_success() {
            return Err(error_for(status, &bytes));
        }
        Ok(read_trials_jsonl(bytes.as_slice())?)
    }

    /// Creates a session and completes every trial in it.
    pub async fn run(
        &self,
        participant_code: &str,
        seed: u64,
        session_seed: Option<u64>,
    ) -> Result<SessionLog, ServiceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let created: SessionCreated = self
            .call(
                Method::POST,
                "/sessions",
                Some(&CreateSessionRequest {
                    participant_code: participant_code.into(),
                    stimulus_set_id: None,
                    seed: session_seed,
                }),
            )
            .await?;
        let base = format!("/sessions/{}", created.session_id);
        let mut trials = Vec::with_capacity(created.trial_count);
        loop {
            let TrialResponse::Trial {
                stimulus_id,
                trial_index,
                block_index,
                first_in_block,
                option_pair,
                width,
                height,
                image_png_base64,
                ..
            } = self
                .call::<TrialResponse>(Method::GET, &format!("{base}/trial"), None::<&()>)
                .await?
            else {
                break;
            };
            let served_ms = self.now();
            let bytes = STANDARD
                .decode(&image_png_base64)
                .map_err(|e| ServiceError::Invalid(format!("trial image base64: {e}")))?;
            let blurred = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| ServiceError::Invalid(format!("trial image png: {e}")))?
                .to_rgb8();
            let known = self.knowledge.get(&stimulus_id);
            let n_clicks = if rng.random_bool(self.policy.zero_click_prob) {
                0
            } else {
                rng.random_range(1..=self.policy.max_clicks.max(1))
            };
            let mut composite = blurred.clone();
            let (mut clicks, mut patches, mut click_ms) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..n_clicks {
                self.pause(&mut rng);
                let (x, y) = pick_point(
                    known.and_then(|k| k.region.as_ref()),
                    width,
                    height,
                    &mut rng,
                );
                let resp: ClickResponse = self
                    .call(
                        Method::POST,
                        &format!("{base}/clicks"),
                        Some(&ClickRequest {
                            stimulus_id: stimulus_id.clone(),
                            x: x as i64,
                            y: y as i64,
                            client_ms: Some(self.now() as f64),
                        }),
                    )
                    .await?;
                resp.patch.composite_onto(&mut composite)?;
                clicks.push((x, y));
                click_ms.push(self.now());
                patches.push(resp.patch);
            }
            self.pause(&mut rng);
            let choice = match known {
                Some(k) if rng.random_bool(self.policy.accuracy) => k.true_label,
                Some(k) => *option_pair
                    .iter()
                    .find(|&&l| l != k.true_label)
                    .unwrap_or(&option_pair[0]),
                None => option_pair[rng.random_range(0..2)],
            };
            let record: TrialRecord = self
                .call(
                    Method::POST,
                    &format!("{base}/choice"),
                    Some(&ChoiceRequest {
                        stimulus_id: stimulus_id.clone(),
                        choice,
                    }),
                )
                .await?;
            trials.push(ObservedTrial {
                stimulus_id,
                trial_index,
                block_index,
                first_in_block,
                option_pair,
                blurred,
                clicks,
                patches,
                composite,
                served_ms,
                click_ms,
                choice_ms: self.now(),
                record,
            });
        }
        Ok(SessionLog { created, trials })
    }
}

/// A pixel of `region` when it has any, otherwise anywhere in the image.
fn pick_point(region: Option<&BinaryMask>, w: u32, h: u32, rng: &mut ChaCha8Rng) -> (u32, u32) {
    if let Some(r) = region.filter(|r| !r.is_empty()) {
        let on: Vec<usize> = r
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect();
        let i = on[rng.random_range(0..on.len())];
        return ((i % r.width()) as u32, (i / r.width()) as u32);
    }
    (rng.random_range(0..w), rng.random_range(0..h))
}
