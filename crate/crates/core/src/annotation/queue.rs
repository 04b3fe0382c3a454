use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{build_requests, validate_response, AnnotationRequest, AnnotationResponse, Annotator, BatchRequest};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Where the loop currently is, as seen by annotators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    /// Models are training; no batch is open.
    #[default]
    Training,
    Annotating,
    /// A batch timed out; the run is waiting to be resumed.
    Suspended,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatusReport {
    pub run_id: String,
    pub iteration: usize,
    pub phase: Phase,
    pub budget_fraction: f64,
    /// Whether the open batch asks for masks.
    pub human_phase: bool,
    pub pending: usize,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmitAck {
    pub sample_id: String,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("no batch is open")]
    Closed,
    #[error("sample {0} is not part of the open batch")]
    UnknownSample(String),
    #[error("response is for run {got}, the open batch belongs to {expected}")]
    RunMismatch { expected: String, got: String },
    #[error("invalid annotation: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
struct State {
    run_id: String,
    iteration: usize,
    phase: Phase,
    budget_fraction: f64,
    num_classes: usize,
    want_mask: bool,
    open: bool,
    requests: BTreeMap<String, AnnotationRequest>,
    answers: BTreeMap<String, AnnotationResponse>,
}

/// Thread-safe hand-off between the loop, which opens a batch and blocks,
/// and annotators, who fetch pending requests and submit answers. The batch
/// closes as soon as every sample has an answer; until then a later answer
/// for the same sample replaces the earlier one.
#[derive(Debug, Default)]
pub struct AnnotationQueue {
    state: Mutex<State>,
    done: Condvar,
}

impl AnnotationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn open_batch(&self, requests: Vec<AnnotationRequest>, num_classes: usize, budget_fraction: f64) {
        let mut s = self.lock();
        if let Some(first) = requests.first() {
            s.run_id = first.run_id.clone();
            s.iteration = first.iteration;
            s.want_mask = first.want_mask;
        }
        s.num_classes = num_classes;
        s.budget_fraction = budget_fraction;
        s.answers.clear();
        s.requests = requests.into_iter().map(|r| (r.sample_id.clone(), r)).collect();
        s.open = !s.requests.is_empty();
        s.phase = if s.open { Phase::Annotating } else { Phase::Training };
    }

    /// Requests of the open batch that have no answer yet.
    pub fn pending(&self) -> Vec<AnnotationRequest> {
        let s = self.lock();
        if !s.open {
            return Vec::new();
        }
        s.requests
            .values()
            .filter(|r| !s.answers.contains_key(&r.sample_id))
            .cloned()
            .collect()
    }

    pub fn submit(&self, response: AnnotationResponse) -> Result<SubmitAck, SubmitError> {
        let mut s = self.lock();
        if !s.open {
            return Err(SubmitError::Closed);
        }
        if let Some(run) = &response.run_id {
            if *run != s.run_id {
                return Err(SubmitError::RunMismatch {
                    expected: s.run_id.clone(),
                    got: run.clone(),
                });
            }
        }
        let request = s
            .requests
            .get(&response.sample_id)
            .ok_or_else(|| SubmitError::UnknownSample(response.sample_id.clone()))?;
        validate_response(&response, (request.height, request.width), s.num_classes, request.want_mask)
            .map_err(|e| SubmitError::Invalid(e.to_string()))?;
        let id = response.sample_id.clone();
        s.answers.insert(id.clone(), response);
        let remaining = s.requests.len() - s.answers.len();
        if remaining == 0 {
            s.open = false;
            s.phase = Phase::Training;
            self.done.notify_all();
        }
        Ok(SubmitAck { sample_id: id, remaining })
    }

    /// Blocks until the open batch is complete and returns its answers.
    /// On timeout the batch is closed, the phase becomes suspended and
    /// `None` is returned.
    pub fn wait(&self, timeout: Duration) -> Option<Vec<AnnotationResponse>> {
        let guard = self.lock();
        let (mut s, _) = self
            .done
            .wait_timeout_while(guard, timeout, |s| s.open)
            .unwrap_or_else(|p| p.into_inner());
        if s.open {
            s.open = false;
            s.phase = Phase::Suspended;
            return None;
        }
        Some(std::mem::take(&mut s.answers).into_values().collect())
    }

    pub fn set_progress(&self, run_id: &str, iteration: usize, budget_fraction: f64, phase: Phase) {
        let mut s = self.lock();
        s.run_id = run_id.to_string();
        s.iteration = iteration;
        s.budget_fraction = budget_fraction;
        s.phase = phase;
    }

    pub fn status(&self) -> StatusReport {
        let s = self.lock();
        StatusReport {
            run_id: s.run_id.clone(),
            iteration: s.iteration,
            phase: s.phase,
            budget_fraction: s.budget_fraction,
            human_phase: s.want_mask && s.open,
            pending: if s.open { s.requests.len() - s.answers.len() } else { 0 },
            completed: s.answers.len(),
        }
    }
}

/// Annotator that publishes each batch on a shared queue and waits for
/// remote answers.
#[derive(Debug, Clone)]
pub struct QueueAnnotator {
    pub queue: Arc<AnnotationQueue>,
    pub timeout: Duration,
}

impl QueueAnnotator {
    pub fn new(queue: Arc<AnnotationQueue>, timeout: Duration) -> Self {
        QueueAnnotator { queue, timeout }
    }
}

impl Annotator for QueueAnnotator {
    fn annotate(&mut self, train: &Dataset, batch: &BatchRequest) -> Result<Vec<AnnotationResponse>> {
        let requests = build_requests(train, batch)?;
        let budget = self.queue.status().budget_fraction;
        self.queue.open_batch(requests, train.num_classes, budget);
        self.queue
            .wait(self.timeout)
            .ok_or(Error::Suspended { checkpoint: None })
    }

    fn progress(&mut self, run_id: &str, iteration: usize, budget_fraction: f64, finished: bool) {
        let phase = if finished { Phase::Done } else { Phase::Training };
        self.queue.set_progress(run_id, iteration, budget_fraction, phase);
    }
}
