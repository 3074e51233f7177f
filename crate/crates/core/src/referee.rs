//! The orchestrator: a FIFO of submissions, dispatch to a worker, scoring
//! against ground truth, qualification against the reference baseline, and
//! an append-only record store.
//!
//! State lives in a data directory:
//!
//! ```text
//! blobs/<sha256>          archives and per-image reports
//! submissions.ndjson      enqueue and status-change events
//! records.ndjson          one EvaluationRecord per line, write-once per id
//! ```
//!
//! A record is always appended before the status event that makes its
//! submission terminal, so replaying both logs after a crash re-queues
//! exactly the submissions that never produced a record.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labelmap::{decode_label_map, LabelMap, LabelMapError, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::metrics::{score_pairs, ScoringReport};
use crate::runner::{read_dir_files, RunLimits};
use crate::worker::{outputs_digest, DispatchError, EvaluateRequest, EvaluationOutcome, OutputStatus, WorkerClient};

pub const BLOBS_DIR: &str = "blobs";
pub const SUBMISSIONS_LOG: &str = "submissions.ndjson";
pub const RECORDS_LOG: &str = "records.ndjson";

#[derive(Debug, Error)]
pub enum RefereeError {
    #[error("submission {0} already exists")]
    DuplicateSubmissionId(String),
    #[error("unknown submission {0}")]
    UnknownSubmission(String),
    #[error("blob {0} not found")]
    MissingBlob(String),
    #[error("a record for {0} already exists")]
    RecordExists(String),
    #[error("queue is empty")]
    QueueEmpty,
    #[error("invalid status transition {from:?} -> {to:?}")]
    InvalidTransition { from: Status, to: Status },
    #[error("worker unreachable for {id} (attempt {attempts}): {reason}")]
    WorkerUnreachable {
        id: String,
        attempts: u32,
        /// True once the retry budget is spent and the submission is Failed.
        gave_up: bool,
        reason: String,
    },
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Queued,
    Running,
    Scored,
    Disqualified,
    Failed,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Scored | Status::Disqualified | Status::Failed)
    }

    pub fn can_become(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::Queued, Status::Running)
                | (Status::Running, Status::Scored | Status::Disqualified | Status::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    pub team: String,
    pub submitted_at: DateTime<Utc>,
    /// SHA-256 of the archive in the blob store.
    pub archive_ref: String,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefereeConfig {
    pub reference_accuracy: f64,
    /// Milliseconds per image.
    pub reference_mean_time: f64,
    pub test_set_ref: String,
    pub expected_image_count: usize,
    pub run_limits: RunLimits,
    #[serde(default = "default_width")]
    pub expected_width: u32,
    #[serde(default = "default_height")]
    pub expected_height: u32,
    /// Allowed excess of reported over wall-clock time before a record is
    /// flagged, as a fraction.
    #[serde(default = "default_slack")]
    pub timing_slack: f64,
    #[serde(default = "default_attempts")]
    pub max_worker_attempts: u32,
}

fn default_width() -> u32 {
    DEFAULT_WIDTH
}
fn default_height() -> u32 {
    DEFAULT_HEIGHT
}
fn default_slack() -> f64 {
    0.1
}
fn default_attempts() -> u32 {
    3
}

impl RefereeConfig {
    /// Baseline of 0.50 accuracy at 108.1 ms, as listed with the final results.
    pub fn published_baseline(test_set_ref: impl Into<String>, expected_image_count: usize) -> Self {
        Self::with_baseline(0.50, 108.1, test_set_ref.into(), expected_image_count)
    }

    /// Baseline of 0.5011 accuracy at 200 ms, as measured for the sample solution.
    pub fn sample_solution_baseline(test_set_ref: impl Into<String>, expected_image_count: usize) -> Self {
        Self::with_baseline(0.5011, 200.0, test_set_ref.into(), expected_image_count)
    }

    fn with_baseline(acc: f64, mean_ms: f64, test_set_ref: String, n: usize) -> Self {
        RefereeConfig {
            reference_accuracy: acc,
            reference_mean_time: mean_ms,
            test_set_ref,
            expected_image_count: n,
            run_limits: RunLimits::for_reference(mean_ms, n),
            expected_width: DEFAULT_WIDTH,
            expected_height: DEFAULT_HEIGHT,
            timing_slack: default_slack(),
            max_worker_attempts: default_attempts(),
        }
    }

    pub fn validate(&self) -> Result<(), RefereeError> {
        let bad = |m: &str| Err(RefereeError::InvalidConfig(m.into()));
        if !(self.reference_accuracy > 0.0 && self.reference_accuracy <= 1.0) {
            return bad("reference_accuracy must be in (0, 1]");
        }
        if !(self.reference_mean_time > 0.0 && self.reference_mean_time.is_finite()) {
            return bad("reference_mean_time must be positive");
        }
        if self.expected_image_count == 0 {
            return bad("expected_image_count must be positive");
        }
        if self.expected_width == 0 || self.expected_height == 0 {
            return bad("expected dimensions must be positive");
        }
        if self.timing_slack.is_nan() || self.timing_slack < 0.0 {
            return bad("timing_slack must be non-negative");
        }
        if self.max_worker_attempts == 0 {
            return bad("max_worker_attempts must be at least 1");
        }
        self.run_limits.validate().map_err(RefereeError::InvalidConfig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Qualification {
    Qualified,
    DisqualifiedBelowReferenceAccuracy,
    DisqualifiedAboveReferenceTime,
    DisqualifiedWrongOutputCount,
    DisqualifiedRunFailure,
    DisqualifiedMalformedOutput,
}

impl Qualification {
    pub fn is_qualified(self) -> bool {
        self == Qualification::Qualified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub submission_id: String,
    pub team: String,
    pub submitted_at: DateTime<Utc>,
    pub accuracy: Option<f64>,
    /// Milliseconds per image.
    pub mean_time: Option<f64>,
    pub score: Option<f64>,
    pub qualification: Qualification,
    pub suspect_timing: bool,
    pub per_image_report_ref: Option<String>,
    /// Human-readable cause for disqualifications.
    #[serde(default)]
    pub detail: Option<String>,
}

/// Threshold check against the baseline. Equality on either metric passes.
pub fn qualify(accuracy: f64, mean_time: f64, config: &RefereeConfig) -> Qualification {
    if accuracy < config.reference_accuracy {
        Qualification::DisqualifiedBelowReferenceAccuracy
    } else if mean_time > config.reference_mean_time {
        Qualification::DisqualifiedAboveReferenceTime
    } else {
        Qualification::Qualified
    }
}

/// Content-addressed file store.
#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(BlobStore { dir })
    }

    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let id = hex::encode(Sha256::digest(bytes));
        let path = self.dir.join(&id);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{id}.{}", uuid::Uuid::new_v4()));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<Vec<u8>, RefereeError> {
        if id.len() != 64 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(RefereeError::MissingBlob(id.into()));
        }
        match fs::read(self.dir.join(id)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(RefereeError::MissingBlob(id.into())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get_path(id).is_some_and(|p| p.is_file())
    }

    fn get_path(&self, id: &str) -> Option<PathBuf> {
        (id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit())).then(|| self.dir.join(id))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum SubmissionEvent {
    Enqueued { submission: Submission },
    Status { id: String, status: Status, at: DateTime<Utc> },
}

/// Which records [`Referee::load_records`] returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordFilter {
    All,
    Team(String),
    /// Inclusive on both ends, by `submitted_at`.
    Range { from: DateTime<Utc>, to: DateTime<Utc> },
    Id(String),
}

/// A submission's current state as seen by clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmissionView {
    pub submission: Submission,
    /// Zero-based place in the queue while Queued.
    pub position: Option<usize>,
    pub record: Option<EvaluationRecord>,
}

struct State {
    submissions: HashMap<String, Submission>,
    records: HashMap<String, EvaluationRecord>,
    queue: VecDeque<String>,
    attempts: HashMap<String, u32>,
    submissions_log: File,
    records_log: File,
}

pub struct Referee {
    config: RefereeConfig,
    ground_truth_dir: PathBuf,
    worker: Arc<dyn WorkerClient>,
    blobs: BlobStore,
    state: Mutex<State>,
    work: Condvar,
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()
}

/// Cuts a partially written final line (crash mid-append) so later appends
/// start on a fresh line.
fn repair_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping {} bytes of torn last line", path.display(), bytes.len() - keep);
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)
}

/// Parses an NDJSON log. An unparsable final line is skipped.
fn read_log<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<io::Result<_>>()?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if i == last => log::warn!("{}: ignoring torn last line: {e}", path.display()),
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

fn decode_many(files: &[(String, Vec<u8>)]) -> Vec<Result<LabelMap, LabelMapError>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        files.par_iter().map(|(_, b)| decode_label_map(b)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        files.iter().map(|(_, b)| decode_label_map(b)).collect()
    }
}

impl Referee {
    /// Opens (or creates) the store under `data_dir` and replays its logs.
    pub fn open(
        data_dir: &Path,
        config: RefereeConfig,
        ground_truth_dir: impl Into<PathBuf>,
        worker: Arc<dyn WorkerClient>,
    ) -> Result<Self, RefereeError> {
        config.validate()?;
        fs::create_dir_all(data_dir)?;
        let blobs = BlobStore::open(data_dir.join(BLOBS_DIR))?;
        let sub_path = data_dir.join(SUBMISSIONS_LOG);
        let rec_path = data_dir.join(RECORDS_LOG);
        repair_tail(&sub_path)?;
        repair_tail(&rec_path)?;

        let mut records = HashMap::new();
        for r in read_log::<EvaluationRecord>(&rec_path)? {
            if records.contains_key(&r.submission_id) {
                log::warn!("duplicate record for {} ignored", r.submission_id);
                continue;
            }
            records.insert(r.submission_id.clone(), r);
        }

        let mut submissions: HashMap<String, Submission> = HashMap::new();
        let mut arrival = Vec::new();
        for ev in read_log::<SubmissionEvent>(&sub_path)? {
            match ev {
                SubmissionEvent::Enqueued { submission } => {
                    arrival.push(submission.id.clone());
                    submissions.insert(submission.id.clone(), submission);
                }
                SubmissionEvent::Status { id, status, .. } => {
                    if let Some(s) = submissions.get_mut(&id) {
                        s.status = status;
                    }
                }
            }
        }
        // A record whose status event was lost still makes the submission terminal.
        for (id, r) in &records {
            if let Some(s) = submissions.get_mut(id) {
                s.status = if r.qualification.is_qualified() {
                    Status::Scored
                } else {
                    Status::Disqualified
                };
            }
        }
        let pending = |want: Status| {
            arrival
                .iter()
                .filter(|id| submissions[*id].status == want && !records.contains_key(*id))
                .cloned()
                .collect::<Vec<_>>()
        };
        let mut queue: VecDeque<String> = pending(Status::Running).into();
        queue.extend(pending(Status::Queued));
        if !queue.is_empty() {
            log::info!("recovered {} pending submissions", queue.len());
        }

        Ok(Referee {
            config,
            ground_truth_dir: ground_truth_dir.into(),
            worker,
            blobs,
            state: Mutex::new(State {
                submissions,
                records,
                queue,
                attempts: HashMap::new(),
                submissions_log: open_append(&sub_path)?,
                records_log: open_append(&rec_path)?,
            }),
            work: Condvar::new(),
        })
    }

    pub fn config(&self) -> &RefereeConfig {
        &self.config
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends `submission` to the queue and returns its zero-based position.
    pub fn enqueue(&self, mut submission: Submission) -> Result<usize, RefereeError> {
        if !self.blobs.contains(&submission.archive_ref) {
            return Err(RefereeError::MissingBlob(submission.archive_ref));
        }
        submission.status = Status::Queued;
        let mut st = self.lock();
        if st.submissions.contains_key(&submission.id) {
            return Err(RefereeError::DuplicateSubmissionId(submission.id));
        }
        append_line(
            &mut st.submissions_log,
            &SubmissionEvent::Enqueued {
                submission: submission.clone(),
            },
        )?;
        let id = submission.id.clone();
        st.submissions.insert(id.clone(), submission);
        st.queue.push_back(id);
        let pos = st.queue.len() - 1;
        drop(st);
        self.work.notify_all();
        Ok(pos)
    }

    pub fn queue_len(&self) -> usize {
        self.lock().queue.len()
    }

    /// Ids in dispatch order.
    pub fn queue_snapshot(&self) -> Vec<String> {
        self.lock().queue.iter().cloned().collect()
    }

    /// Blocks until the queue is non-empty or `timeout` passes.
    pub fn wait_for_work(&self, timeout: Duration) -> bool {
        let st = self.lock();
        let (st, _) = self
            .work
            .wait_timeout_while(st, timeout, |s| s.queue.is_empty())
            .unwrap_or_else(|p| p.into_inner());
        !st.queue.is_empty()
    }

    pub fn submission(&self, id: &str) -> Result<SubmissionView, RefereeError> {
        let st = self.lock();
        let submission = st
            .submissions
            .get(id)
            .cloned()
            .ok_or_else(|| RefereeError::UnknownSubmission(id.into()))?;
        let position = (submission.status == Status::Queued)
            .then(|| st.queue.iter().position(|q| q == id))
            .flatten();
        Ok(SubmissionView {
            record: st.records.get(id).cloned(),
            submission,
            position,
        })
    }

    /// All of `team`'s submissions, oldest first.
    pub fn submissions_of(&self, team: &str) -> Vec<SubmissionView> {
        let st = self.lock();
        let mut out: Vec<SubmissionView> = st
            .submissions
            .values()
            .filter(|s| s.team == team)
            .map(|s| SubmissionView {
                submission: s.clone(),
                position: (s.status == Status::Queued)
                    .then(|| st.queue.iter().position(|q| *q == s.id))
                    .flatten(),
                record: st.records.get(&s.id).cloned(),
            })
            .collect();
        drop(st);
        out.sort_by(|a, b| {
            (a.submission.submitted_at, &a.submission.id).cmp(&(b.submission.submitted_at, &b.submission.id))
        });
        out
    }

    fn set_status(&self, st: &mut State, id: &str, to: Status) -> Result<(), RefereeError> {
        let from = st
            .submissions
            .get(id)
            .ok_or_else(|| RefereeError::UnknownSubmission(id.into()))?
            .status;
        if from == to {
            return Ok(());
        }
        if !from.can_become(to) {
            return Err(RefereeError::InvalidTransition { from, to });
        }
        append_line(
            &mut st.submissions_log,
            &SubmissionEvent::Status {
                id: id.into(),
                status: to,
                at: Utc::now(),
            },
        )?;
        st.submissions.get_mut(id).expect("checked").status = to;
        Ok(())
    }

    /// Write-once append to the record log.
    pub fn persist_record(&self, record: &EvaluationRecord) -> Result<(), RefereeError> {
        let mut st = self.lock();
        self.persist_locked(&mut st, record)
    }

    fn persist_locked(&self, st: &mut State, record: &EvaluationRecord) -> Result<(), RefereeError> {
        if st.records.contains_key(&record.submission_id) {
            return Err(RefereeError::RecordExists(record.submission_id.clone()));
        }
        append_line(&mut st.records_log, record)?;
        st.records.insert(record.submission_id.clone(), record.clone());
        Ok(())
    }

    /// Records matching `filter`, ordered by `submitted_at` then id.
    pub fn load_records(&self, filter: &RecordFilter) -> Result<Vec<EvaluationRecord>, RefereeError> {
        let st = self.lock();
        if let RecordFilter::Id(id) = filter {
            return st
                .records
                .get(id)
                .cloned()
                .map(|r| vec![r])
                .ok_or_else(|| RefereeError::UnknownSubmission(id.clone()));
        }
        let mut out: Vec<EvaluationRecord> = st
            .records
            .values()
            .filter(|r| match filter {
                RecordFilter::All => true,
                RecordFilter::Team(t) => &r.team == t,
                RecordFilter::Range { from, to } => r.submitted_at >= *from && r.submitted_at <= *to,
                RecordFilter::Id(_) => unreachable!(),
            })
            .cloned()
            .collect();
        drop(st);
        out.sort_by(|a, b| {
            a.submitted_at
                .cmp(&b.submitted_at)
                .then_with(|| a.submission_id.cmp(&b.submission_id))
        });
        Ok(out)
    }

    /// Dequeues the head, runs it on the worker and persists the outcome.
    ///
    /// When the worker cannot be reached the submission goes back to the
    /// head of the queue; after `max_worker_attempts` it is marked Failed
    /// and no record is written.
    pub fn evaluate_next(&self) -> Result<EvaluationRecord, RefereeError> {
        let submission = {
            let mut st = self.lock();
            let id = st.queue.pop_front().ok_or(RefereeError::QueueEmpty)?;
            if let Err(e) = self.set_status(&mut st, &id, Status::Running) {
                st.queue.push_front(id);
                return Err(e);
            }
            st.submissions[&id].clone()
        };
        let id = submission.id.clone();

        let archive = match self.blobs.get(&submission.archive_ref) {
            Ok(a) => a,
            Err(e) => {
                self.fail(&id)?;
                return Err(e);
            }
        };
        let req = EvaluateRequest {
            test_set: self.config.test_set_ref.clone(),
            expected_width: self.config.expected_width,
            expected_height: self.config.expected_height,
            limits: self.config.run_limits,
        };
        let outcome = self.worker.evaluate(&req, &archive).and_then(|o| {
            match &o.outputs_digest {
                Some(d) if *d != outputs_digest(&o.predictions) => {
                    Err(DispatchError::Protocol("outputs digest mismatch".into()))
                }
                _ => Ok(o),
            }
        });
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => return Err(self.retry_or_fail(&id, e)),
        };

        let record = match self.judge(&submission, outcome) {
            Ok(r) => r,
            Err(e) => {
                self.fail(&id)?;
                return Err(e);
            }
        };
        let mut st = self.lock();
        self.persist_locked(&mut st, &record)?;
        let status = if record.qualification.is_qualified() {
            Status::Scored
        } else {
            Status::Disqualified
        };
        self.set_status(&mut st, &id, status)?;
        st.attempts.remove(&id);
        Ok(record)
    }

    fn fail(&self, id: &str) -> Result<(), RefereeError> {
        let mut st = self.lock();
        st.attempts.remove(id);
        self.set_status(&mut st, id, Status::Failed)
    }

    fn retry_or_fail(&self, id: &str, err: DispatchError) -> RefereeError {
        let mut st = self.lock();
        let attempts = {
            let n = st.attempts.entry(id.to_string()).or_insert(0);
            *n += 1;
            *n
        };
        let gave_up = attempts >= self.config.max_worker_attempts;
        if gave_up {
            st.attempts.remove(id);
            if let Err(e) = self.set_status(&mut st, id, Status::Failed) {
                return e;
            }
        } else {
            st.queue.push_front(id.to_string());
        }
        log::warn!("dispatch of {id} failed (attempt {attempts}): {err}");
        RefereeError::WorkerUnreachable {
            id: id.into(),
            attempts,
            gave_up,
            reason: err.to_string(),
        }
    }

    fn load_ground_truth(&self) -> Result<Vec<(String, Vec<u8>)>, RefereeError> {
        let files = read_dir_files(&self.ground_truth_dir)
            .map_err(|e| RefereeError::GroundTruth(format!("{}: {e}", self.ground_truth_dir.display())))?;
        let files: Vec<(String, Vec<u8>)> = files.into_iter().filter(|(n, _)| n.ends_with(".png")).collect();
        if files.len() != self.config.expected_image_count {
            return Err(RefereeError::GroundTruth(format!(
                "{} maps found, {} expected",
                files.len(),
                self.config.expected_image_count
            )));
        }
        Ok(files)
    }

    /// Applies the disqualification rules in pipeline order and scores what
    /// survives them.
    fn judge(&self, sub: &Submission, outcome: EvaluationOutcome) -> Result<EvaluationRecord, RefereeError> {
        let mut record = EvaluationRecord {
            submission_id: sub.id.clone(),
            team: sub.team.clone(),
            submitted_at: sub.submitted_at,
            accuracy: None,
            mean_time: None,
            score: None,
            qualification: Qualification::DisqualifiedRunFailure,
            suspect_timing: false,
            per_image_report_ref: None,
            detail: None,
        };
        let disqualify = |mut r: EvaluationRecord, q: Qualification, detail: String| {
            r.qualification = q;
            r.detail = Some(detail);
            Ok(r)
        };

        if let Some(e) = outcome.intake_error {
            return disqualify(record, Qualification::DisqualifiedRunFailure, e);
        }
        let Some(run) = outcome.run else {
            return disqualify(record, Qualification::DisqualifiedRunFailure, "no run result".into());
        };
        record.suspect_timing = run.timing_suspect(self.config.timing_slack);
        if !run.succeeded() {
            let why = if run.timed_out {
                format!("timed out after {:.0} ms", run.wall_clock)
            } else {
                format!("exit status {}", run.exit_status)
            };
            return disqualify(record, Qualification::DisqualifiedRunFailure, why);
        }
        match outcome.outputs {
            OutputStatus::Complete => {}
            OutputStatus::WrongOutputCount { missing, extra } => {
                return disqualify(
                    record,
                    Qualification::DisqualifiedWrongOutputCount,
                    format!("missing {missing:?}, unexpected {extra:?}"),
                )
            }
            OutputStatus::Malformed { failures } => {
                let first = failures
                    .first()
                    .map(|f| format!("{}: {}", f.name, f.reason))
                    .unwrap_or_default();
                return disqualify(
                    record,
                    Qualification::DisqualifiedMalformedOutput,
                    format!("{} bad files; first {first}", failures.len()),
                );
            }
            OutputStatus::NotCollected => {
                return disqualify(record, Qualification::DisqualifiedRunFailure, "outputs not collected".into())
            }
        }
        if let Some(e) = &run.sentinel_error {
            return disqualify(record, Qualification::DisqualifiedMalformedOutput, e.clone());
        }
        let Some(total_ms) = run.reported_total_inference else {
            return disqualify(
                record,
                Qualification::DisqualifiedMalformedOutput,
                "no inference-time line on stdout".into(),
            );
        };

        let gt_files = self.load_ground_truth()?;
        let gt_names: Vec<&String> = gt_files.iter().map(|(n, _)| n).collect();
        let pred_names: Vec<&String> = outcome.predictions.iter().map(|p| &p.name).collect();
        if gt_names != pred_names {
            return Err(RefereeError::GroundTruth(
                "prediction names do not match the ground-truth set".into(),
            ));
        }
        let gts = decode_many(&gt_files)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RefereeError::GroundTruth(e.to_string()))?;
        let pred_files: Vec<(String, Vec<u8>)> =
            outcome.predictions.into_iter().map(|p| (p.name, p.bytes)).collect();
        let mut preds = Vec::with_capacity(pred_files.len());
        for ((name, _), m) in pred_files.iter().zip(decode_many(&pred_files)) {
            match m {
                Ok(m) => preds.push(m),
                Err(e) => {
                    return disqualify(record, Qualification::DisqualifiedMalformedOutput, format!("{name}: {e}"))
                }
            }
        }

        let names: Vec<String> = pred_files.into_iter().map(|(n, _)| n).collect();
        let report = match score_pairs(&preds, &gts).and_then(|s| ScoringReport::build(&names, s, total_ms)) {
            Ok(r) => r,
            Err(e) => return disqualify(record, Qualification::DisqualifiedMalformedOutput, e.to_string()),
        };
        let report_json = serde_json::to_vec(&report).map_err(io::Error::other)?;
        record.per_image_report_ref = Some(self.blobs.put(&report_json)?);
        record.accuracy = Some(report.accuracy);
        record.mean_time = Some(report.mean_inference_time_ms);
        record.score = Some(report.score);
        record.qualification = qualify(report.accuracy, report.mean_inference_time_ms, &self.config);
        if !record.qualification.is_qualified() {
            record.detail = Some(format!(
                "accuracy {:.4} at {:.2} ms vs baseline {:.4} at {:.2} ms",
                report.accuracy, report.mean_inference_time_ms, self.config.reference_accuracy, self.config.reference_mean_time
            ));
        }
        Ok(record)
    }

    /// Per-status submission counts.
    pub fn status_counts(&self) -> BTreeMap<String, usize> {
        let st = self.lock();
        let mut out = BTreeMap::new();
        for s in st.submissions.values() {
            *out.entry(format!("{:?}", s.status)).or_insert(0) += 1;
        }
        out
    }
}
