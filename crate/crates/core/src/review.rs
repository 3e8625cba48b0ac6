//! Blinded human spot-checks of generated comparisons and expert
//! cross-examination of benchmark answers.
//!
//! All state lives in one append-only event log that is replayed on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ComparisonItem;
use crate::evalkit::McqRecord;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{arm} arm has {have} items, {want} requested (feasible k = {feasible})")]
    Insufficient {
        arm: Arm,
        have: usize,
        want: usize,
        feasible: usize,
    },
    #[error("no verdicts for batch `{0}`")]
    NoVerdicts(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("review log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("review log {path} line {line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Kept,
    Removed,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Kept => "kept",
            Arm::Removed => "removed",
        })
    }
}

/// Image slot in a review payload. `uri` is always serialized (null when
/// unknown) so every payload has the same field set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadImage {
    pub image_id: String,
    pub uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewPayload {
    pub images: Vec<PayloadImage>,
    pub descriptions: Vec<String>,
    pub comparison: String,
}

impl ReviewPayload {
    /// Descriptions are looked up per member; missing ones become empty
    /// strings so the list always lines up with `images`.
    pub fn from_item(item: &ComparisonItem, descriptions: &HashMap<String, String>) -> Self {
        let members = item.group.members();
        Self {
            images: members
                .iter()
                .map(|m| PayloadImage {
                    image_id: m.id.clone(),
                    uri: m.uri.clone(),
                })
                .collect(),
            descriptions: members
                .iter()
                .map(|m| descriptions.get(&m.id).cloned().unwrap_or_default())
                .collect(),
            comparison: item.response.clone(),
        }
    }
}

/// What reviewers see. Carries no arm information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub batch: String,
    pub payload: ReviewPayload,
}

/// Server-side task record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTask {
    pub task: ReviewTask,
    pub hidden_arm: Arm,
}

/// Samples `k` payloads from each arm and shuffles them together. Task ids
/// are assigned after shuffling, so they reveal nothing about the arm.
pub fn create_review_batch(
    batch: &str,
    kept: &[ReviewPayload],
    removed: &[ReviewPayload],
    k: usize,
    seed: u64,
) -> Result<Vec<StoredTask>, ReviewError> {
    let feasible = kept.len().min(removed.len());
    for (arm, items) in [(Arm::Kept, kept), (Arm::Removed, removed)] {
        if items.len() < k {
            return Err(ReviewError::Insufficient {
                arm,
                have: items.len(),
                want: k,
                feasible,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(Arm, ReviewPayload)> = Vec::with_capacity(2 * k);
    for (arm, items) in [(Arm::Kept, kept), (Arm::Removed, removed)] {
        picked.extend(items.choose_multiple(&mut rng, k).map(|p| (arm, p.clone())));
    }
    picked.shuffle(&mut rng);
    Ok(picked
        .into_iter()
        .enumerate()
        .map(|(i, (arm, payload))| StoredTask {
            task: ReviewTask {
                task_id: format!("{batch}-{i:04}"),
                batch: batch.to_string(),
                payload,
            },
            hidden_arm: arm,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub task_id: String,
    pub reviewer_id: String,
    pub correct: bool,
    pub timestamp: DateTime<Utc>,
}

/// Incoming verdict; the server stamps it when `timestamp` is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSubmission {
    pub task_id: String,
    pub reviewer_id: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    Stored,
    /// Same reviewer, task and judgement as an earlier verdict.
    Duplicate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmRate {
    pub verdicts: usize,
    pub correct: usize,
    /// `None` when the arm has no verdicts yet.
    pub rate: Option<f64>,
}

impl ArmRate {
    fn add(&mut self, correct: bool) {
        self.verdicts += 1;
        self.correct += correct as usize;
        self.rate = Some(self.correct as f64 / self.verdicts as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub batch: String,
    pub kept: ArmRate,
    pub removed: ArmRate,
    pub overall: ArmRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossExamStatus {
    Pending,
    Confirmed,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossExamTask {
    pub task_id: String,
    pub record: McqRecord,
    pub proposed_answer_index: usize,
    pub status: CrossExamStatus,
    pub final_answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<DateTime<Utc>>,
}

impl CrossExamTask {
    /// Uses the record's keyed answer as the proposal.
    pub fn from_record(record: McqRecord) -> Result<Self, ReviewError> {
        let proposed = record
            .answer_index
            .ok_or_else(|| ReviewError::Invalid(format!("record `{}` has no proposed answer", record.id)))?;
        Ok(Self {
            task_id: record.id.clone(),
            record,
            proposed_answer_index: proposed,
            status: CrossExamStatus::Pending,
            final_answer_index: None,
            resolved_by: None,
            resolved_at: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Resolution {
    Confirm,
    Edit { new_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveRequest {
    #[serde(flatten)]
    pub resolution: Resolution,
    #[serde(default)]
    pub reviewer_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    BatchCreated {
        batch: String,
        tasks: Vec<StoredTask>,
    },
    Verdict(ReviewVerdict),
    CrossExamCreated {
        tasks: Vec<CrossExamTask>,
    },
    CrossExamResolved {
        task_id: String,
        resolution: Resolution,
        reviewer_id: Option<String>,
        timestamp: DateTime<Utc>,
    },
}

#[derive(Default)]
struct State {
    batches: BTreeMap<String, Vec<String>>,
    tasks: HashMap<String, StoredTask>,
    verdicts: Vec<ReviewVerdict>,
    by_key: HashMap<(String, String), usize>,
    crossexam: BTreeMap<String, CrossExamTask>,
}

impl State {
    fn check(&self, event: &Event) -> Result<Option<SubmitOutcome>, ReviewError> {
        match event {
            Event::BatchCreated { batch, tasks } => {
                if self.batches.contains_key(batch) {
                    return Err(ReviewError::Conflict(format!("batch `{batch}` already exists")));
                }
                if let Some(t) = tasks.iter().find(|t| self.tasks.contains_key(&t.task.task_id)) {
                    return Err(ReviewError::Conflict(format!("task `{}` already exists", t.task.task_id)));
                }
                Ok(None)
            }
            Event::Verdict(v) => {
                if !self.tasks.contains_key(&v.task_id) {
                    return Err(ReviewError::NotFound {
                        kind: "task",
                        id: v.task_id.clone(),
                    });
                }
                match self.by_key.get(&(v.task_id.clone(), v.reviewer_id.clone())) {
                    Some(&i) if self.verdicts[i].correct == v.correct => Ok(Some(SubmitOutcome::Duplicate)),
                    Some(_) => Err(ReviewError::Conflict(format!(
                        "reviewer `{}` already gave a different verdict on `{}`",
                        v.reviewer_id, v.task_id
                    ))),
                    None => Ok(Some(SubmitOutcome::Stored)),
                }
            }
            Event::CrossExamCreated { tasks } => {
                if let Some(t) = tasks.iter().find(|t| self.crossexam.contains_key(&t.task_id)) {
                    return Err(ReviewError::Conflict(format!("cross-exam task `{}` already exists", t.task_id)));
                }
                Ok(None)
            }
            Event::CrossExamResolved { task_id, resolution, .. } => {
                let task = self.crossexam.get(task_id).ok_or_else(|| ReviewError::NotFound {
                    kind: "cross-exam task",
                    id: task_id.clone(),
                })?;
                if task.status != CrossExamStatus::Pending {
                    return Err(ReviewError::Conflict(format!("cross-exam task `{task_id}` is already resolved")));
                }
                if let Resolution::Edit { new_index } = resolution {
                    if *new_index >= task.record.options.len() {
                        return Err(ReviewError::Invalid(format!(
                            "answer index {new_index} out of range for {} options",
                            task.record.options.len()
                        )));
                    }
                }
                Ok(None)
            }
        }
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::BatchCreated { batch, tasks } => {
                let ids = tasks.iter().map(|t| t.task.task_id.clone()).collect();
                for t in tasks {
                    self.tasks.insert(t.task.task_id.clone(), t);
                }
                self.batches.insert(batch, ids);
            }
            Event::Verdict(v) => {
                let key = (v.task_id.clone(), v.reviewer_id.clone());
                if !self.by_key.contains_key(&key) {
                    self.by_key.insert(key, self.verdicts.len());
                    self.verdicts.push(v);
                }
            }
            Event::CrossExamCreated { tasks } => {
                for t in tasks {
                    self.crossexam.insert(t.task_id.clone(), t);
                }
            }
            Event::CrossExamResolved {
                task_id,
                resolution,
                reviewer_id,
                timestamp,
            } => {
                if let Some(t) = self.crossexam.get_mut(&task_id) {
                    let (status, index) = match resolution {
                        Resolution::Confirm => (CrossExamStatus::Confirmed, t.proposed_answer_index),
                        Resolution::Edit { new_index } if new_index == t.proposed_answer_index => {
                            (CrossExamStatus::Confirmed, new_index)
                        }
                        Resolution::Edit { new_index } => (CrossExamStatus::Edited, new_index),
                    };
                    t.status = status;
                    t.final_answer_index = Some(index);
                    t.resolved_by = reviewer_id;
                    t.resolved_at = Some(timestamp);
                }
            }
        }
    }
}

pub const LOG_FILE: &str = "review-log.jsonl";

/// Review state backed by `<dir>/review-log.jsonl`.
pub struct ReviewStore {
    path: PathBuf,
    log: File,
    state: State,
}

impl ReviewStore {
    /// Opens (or creates) the store and replays its log. A torn final line
    /// from an interrupted write is ignored.
    pub fn open(dir: &Path) -> Result<Self, ReviewError> {
        let path = dir.join(LOG_FILE);
        let io = |source| ReviewError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut state = State::default();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            let mut lines = reader.split(b'\n').enumerate().peekable();
            while let Some((i, line)) = lines.next() {
                let line = line.map_err(io)?;
                let text = String::from_utf8_lossy(&line);
                let is_last = lines.peek().is_none();
                if text.trim().is_empty() {
                    valid_len += line.len() as u64 + 1;
                    continue;
                }
                match serde_json::from_str::<Event>(&text) {
                    Ok(event) => {
                        state.check(&event).map_err(|e| ReviewError::Malformed {
                            path: path.clone(),
                            line: i + 1,
                            reason: e.to_string(),
                        })?;
                        state.apply(event);
                        valid_len += line.len() as u64 + 1;
                    }
                    Err(e) if is_last => {
                        tracing::warn!(path = %path.display(), line = i + 1, error = %e, "dropping torn log tail");
                    }
                    Err(e) => {
                        return Err(ReviewError::Malformed {
                            path: path.clone(),
                            line: i + 1,
                            reason: e.to_string(),
                        })
                    }
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if path.metadata().map_err(io)?.len() > valid_len {
            log.set_len(valid_len).map_err(io)?;
        }
        Ok(Self { path, log, state })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, event: Event) -> Result<(), ReviewError> {
        let io = |source| ReviewError::Io {
            path: self.path.clone(),
            source,
        };
        let mut line = serde_json::to_string(&event).expect("events serialize");
        line.push('\n');
        self.log.write_all(line.as_bytes()).map_err(io)?;
        self.log.sync_data().map_err(io)?;
        self.state.apply(event);
        Ok(())
    }

    pub fn add_batch(&mut self, batch: &str, tasks: Vec<StoredTask>) -> Result<usize, ReviewError> {
        if let Some(t) = tasks.iter().find(|t| t.task.batch != batch) {
            return Err(ReviewError::Invalid(format!("task `{}` belongs to batch `{}`", t.task.task_id, t.task.batch)));
        }
        let event = Event::BatchCreated {
            batch: batch.to_string(),
            tasks,
        };
        self.state.check(&event)?;
        let n = match &event {
            Event::BatchCreated { tasks, .. } => tasks.len(),
            _ => unreachable!(),
        };
        self.append(event)?;
        Ok(n)
    }

    pub fn batches(&self) -> Vec<String> {
        self.state.batches.keys().cloned().collect()
    }

    /// Client view of a batch, in shuffled order.
    pub fn tasks(&self, batch: &str) -> Result<Vec<ReviewTask>, ReviewError> {
        let ids = self.state.batches.get(batch).ok_or_else(|| ReviewError::NotFound {
            kind: "batch",
            id: batch.to_string(),
        })?;
        Ok(ids.iter().map(|id| self.state.tasks[id].task.clone()).collect())
    }

    pub fn submit_verdict(&mut self, submission: VerdictSubmission) -> Result<SubmitOutcome, ReviewError> {
        if submission.reviewer_id.trim().is_empty() {
            return Err(ReviewError::Invalid("reviewer_id must not be empty".into()));
        }
        let event = Event::Verdict(ReviewVerdict {
            task_id: submission.task_id,
            reviewer_id: submission.reviewer_id,
            correct: submission.correct,
            timestamp: submission.timestamp.unwrap_or_else(Utc::now),
        });
        let outcome = self.state.check(&event)?.expect("verdict check yields an outcome");
        if outcome == SubmitOutcome::Stored {
            self.append(event)?;
        }
        Ok(outcome)
    }

    /// Verdicts on tasks of `batch`, optionally only one reviewer's.
    pub fn verdicts(&self, batch: &str, reviewer: Option<&str>) -> Result<Vec<ReviewVerdict>, ReviewError> {
        if !self.state.batches.contains_key(batch) {
            return Err(ReviewError::NotFound {
                kind: "batch",
                id: batch.to_string(),
            });
        }
        Ok(self
            .state
            .verdicts
            .iter()
            .filter(|v| self.state.tasks[&v.task_id].task.batch == batch)
            .filter(|v| reviewer.is_none_or(|r| v.reviewer_id == r))
            .cloned()
            .collect())
    }

    pub fn correctness_report(&self, batch: &str) -> Result<CorrectnessReport, ReviewError> {
        let verdicts = self.verdicts(batch, None)?;
        if verdicts.is_empty() {
            return Err(ReviewError::NoVerdicts(batch.to_string()));
        }
        let mut kept = ArmRate::default();
        let mut removed = ArmRate::default();
        let mut overall = ArmRate::default();
        for v in &verdicts {
            match self.state.tasks[&v.task_id].hidden_arm {
                Arm::Kept => kept.add(v.correct),
                Arm::Removed => removed.add(v.correct),
            }
            overall.add(v.correct);
        }
        Ok(CorrectnessReport {
            batch: batch.to_string(),
            kept,
            removed,
            overall,
        })
    }

    pub fn add_crossexam(&mut self, tasks: Vec<CrossExamTask>) -> Result<usize, ReviewError> {
        let n = tasks.len();
        let event = Event::CrossExamCreated { tasks };
        self.state.check(&event)?;
        self.append(event)?;
        Ok(n)
    }

    pub fn list_pending(&self) -> Vec<CrossExamTask> {
        self.state
            .crossexam
            .values()
            .filter(|t| t.status == CrossExamStatus::Pending)
            .cloned()
            .collect()
    }

    pub fn crossexam(&self, task_id: &str) -> Option<&CrossExamTask> {
        self.state.crossexam.get(task_id)
    }

    pub fn resolve(&mut self, task_id: &str, request: ResolveRequest) -> Result<CrossExamTask, ReviewError> {
        let event = Event::CrossExamResolved {
            task_id: task_id.to_string(),
            resolution: request.resolution,
            reviewer_id: request.reviewer_id,
            timestamp: Utc::now(),
        };
        self.state.check(&event)?;
        self.append(event)?;
        Ok(self.state.crossexam[task_id].clone())
    }
}
