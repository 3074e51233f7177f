//! Device worker: evaluates one archive at a time against a registered test
//! set, either in-process ([`LocalWorker`]) or over TCP ([`serve_worker`] and
//! [`TcpWorkerClient`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::runner::{
    collect_outputs_with_bytes, directory_size, execute_solution, expected_output_names,
    unpack_archive, CollectError, ExecutionContext, FileFailure, RunLimits, RunResult,
};
use crate::sandbox::Isolation;
use crate::wire::{read_frame, write_frame, WireError, MAX_PAYLOAD_BYTES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub test_set: String,
    pub expected_width: u32,
    pub expected_height: u32,
    pub limits: RunLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OutputStatus {
    Complete,
    WrongOutputCount {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    Malformed {
        failures: Vec<FileFailure>,
    },
    /// The run failed, so outputs were not examined.
    NotCollected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Everything the orchestrator needs to judge a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutcome {
    /// Archive could not be unpacked or the process could not be spawned.
    pub intake_error: Option<String>,
    pub run: Option<RunResult>,
    pub outputs: OutputStatus,
    /// SHA-256 over the ordered prediction files, when complete.
    pub outputs_digest: Option<String>,
    pub predictions: Vec<PredictionFile>,
}

impl EvaluationOutcome {
    fn intake_failure(msg: String) -> Self {
        EvaluationOutcome {
            intake_error: Some(msg),
            run: None,
            outputs: OutputStatus::NotCollected,
            outputs_digest: None,
            predictions: Vec::new(),
        }
    }
}

pub fn outputs_digest(files: &[PredictionFile]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update((f.name.len() as u64).to_be_bytes());
        h.update(f.name.as_bytes());
        h.update((f.bytes.len() as u64).to_be_bytes());
        h.update(&f.bytes);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("worker unreachable: {0}")]
    Unreachable(String),
    #[error("worker protocol error: {0}")]
    Protocol(String),
    #[error("worker rejected request: {0}")]
    Rejected(String),
}

/// Anything that can evaluate an archive.
pub trait WorkerClient: Send + Sync {
    fn evaluate(&self, req: &EvaluateRequest, archive: &[u8]) -> Result<EvaluationOutcome, DispatchError>;
}

impl<W: WorkerClient + ?Sized> WorkerClient for Arc<W> {
    fn evaluate(&self, req: &EvaluateRequest, archive: &[u8]) -> Result<EvaluationOutcome, DispatchError> {
        (**self).evaluate(req, archive)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerConfig {
    /// Test-set id to directory of input images.
    pub test_sets: BTreeMap<String, PathBuf>,
    /// Parent directory for per-job working directories.
    pub scratch_root: PathBuf,
    #[serde(default)]
    pub isolation: Isolation,
}

/// Runs archives on this host. Evaluations are serialized.
pub struct LocalWorker {
    config: WorkerConfig,
    busy: Mutex<()>,
}

impl LocalWorker {
    /// Relative paths in `config` are resolved against the current directory
    /// now, since solutions run with a different working directory.
    pub fn new(mut config: WorkerConfig) -> Self {
        let absolute = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        config.scratch_root = absolute(&config.scratch_root);
        for dir in config.test_sets.values_mut() {
            *dir = absolute(dir);
        }
        LocalWorker {
            config,
            busy: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    fn run_job(&self, job: &Path, input_dir: &Path, req: &EvaluateRequest, archive: &[u8]) -> EvaluationOutcome {
        let solution_root = job.join("solution");
        let output_dir = job.join("output");
        let scratch_dir = job.join("scratch");
        for d in [&solution_root, &output_dir, &scratch_dir] {
            if let Err(e) = fs::create_dir_all(d) {
                return EvaluationOutcome::intake_failure(format!("job setup: {e}"));
            }
        }
        let manifest = match unpack_archive(archive, &solution_root) {
            Ok(m) => m,
            Err(e) => return EvaluationOutcome::intake_failure(e.to_string()),
        };
        let expected = match expected_output_names(input_dir) {
            Ok(n) => n,
            Err(e) => return EvaluationOutcome::intake_failure(format!("test set: {e}")),
        };
        let ctx = ExecutionContext {
            solution_root,
            scratch_dir,
            isolation: self.config.isolation,
        };
        let run = match execute_solution(&manifest, &ctx, input_dir, &output_dir, &req.limits) {
            Ok(r) => r,
            Err(e) => return EvaluationOutcome::intake_failure(e.to_string()),
        };
        if !run.succeeded() {
            return EvaluationOutcome {
                intake_error: None,
                run: Some(run),
                outputs: OutputStatus::NotCollected,
                outputs_digest: None,
                predictions: Vec::new(),
            };
        }

        let size = directory_size(&output_dir).unwrap_or(u64::MAX);
        let collected = if size > req.limits.max_output_bytes {
            Err(CollectError::InvalidFiles(vec![FileFailure {
                name: String::new(),
                reason: format!("outputs total {size} bytes, limit {}", req.limits.max_output_bytes),
            }]))
        } else {
            collect_outputs_with_bytes(&output_dir, &expected, req.expected_width, req.expected_height)
        };
        let (outputs, predictions) = match collected {
            Ok(maps) => {
                let files = expected
                    .iter()
                    .zip(maps)
                    .map(|(name, (_, bytes))| PredictionFile {
                        name: name.clone(),
                        bytes,
                    })
                    .collect();
                (OutputStatus::Complete, files)
            }
            Err(CollectError::WrongOutputCount { missing, extra }) => {
                (OutputStatus::WrongOutputCount { missing, extra }, Vec::new())
            }
            Err(CollectError::InvalidFiles(failures)) => (OutputStatus::Malformed { failures }, Vec::new()),
            Err(CollectError::Io(reason)) => (
                OutputStatus::Malformed {
                    failures: vec![FileFailure {
                        name: String::new(),
                        reason,
                    }],
                },
                Vec::new(),
            ),
        };
        EvaluationOutcome {
            intake_error: None,
            run: Some(run),
            outputs_digest: (outputs == OutputStatus::Complete).then(|| outputs_digest(&predictions)),
            outputs,
            predictions,
        }
    }
}

impl WorkerClient for LocalWorker {
    fn evaluate(&self, req: &EvaluateRequest, archive: &[u8]) -> Result<EvaluationOutcome, DispatchError> {
        let input_dir = self
            .config
            .test_sets
            .get(&req.test_set)
            .ok_or_else(|| DispatchError::Rejected(format!("unknown test set {:?}", req.test_set)))?;
        req.limits.validate().map_err(DispatchError::Rejected)?;

        let _guard = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        let job = self.config.scratch_root.join(format!("job-{}", uuid::Uuid::new_v4()));
        fs::create_dir_all(&job).map_err(|e| DispatchError::Rejected(format!("scratch: {e}")))?;
        let outcome = self.run_job(&job, input_dir, req, archive);
        if let Err(e) = fs::remove_dir_all(&job) {
            log::warn!("failed to remove {}: {e}", job.display());
        }
        Ok(outcome)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum WorkerRequest {
    EvaluateArchive(EvaluateRequest),
    Ping,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluatedHeader {
    pub intake_error: Option<String>,
    pub run: Option<RunResult>,
    pub outputs: OutputStatus,
    pub outputs_digest: Option<String>,
    /// Prediction files, concatenated in this order in the payload.
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum WorkerResponse {
    Evaluated(EvaluatedHeader),
    Pong,
    Error { message: String },
}

fn encode_outcome(outcome: EvaluationOutcome) -> (WorkerResponse, Vec<u8>) {
    let mut payload = Vec::with_capacity(outcome.predictions.iter().map(|p| p.bytes.len()).sum());
    let files = outcome
        .predictions
        .into_iter()
        .map(|p| {
            payload.extend_from_slice(&p.bytes);
            FileEntry {
                name: p.name,
                len: p.bytes.len() as u64,
            }
        })
        .collect();
    let header = EvaluatedHeader {
        intake_error: outcome.intake_error,
        run: outcome.run,
        outputs: outcome.outputs,
        outputs_digest: outcome.outputs_digest,
        files,
    };
    (WorkerResponse::Evaluated(header), payload)
}

fn decode_outcome(header: EvaluatedHeader, payload: Vec<u8>) -> Result<EvaluationOutcome, DispatchError> {
    let total: u64 = header.files.iter().map(|f| f.len).sum();
    if total != payload.len() as u64 {
        return Err(DispatchError::Protocol(format!(
            "file lengths sum to {total}, payload has {}",
            payload.len()
        )));
    }
    let mut offset = 0usize;
    let predictions: Vec<PredictionFile> = header
        .files
        .into_iter()
        .map(|f| {
            let end = offset + f.len as usize;
            let bytes = payload[offset..end].to_vec();
            offset = end;
            PredictionFile { name: f.name, bytes }
        })
        .collect();
    if let Some(d) = &header.outputs_digest {
        if *d != outputs_digest(&predictions) {
            return Err(DispatchError::Protocol("outputs digest mismatch".into()));
        }
    }
    Ok(EvaluationOutcome {
        intake_error: header.intake_error,
        run: header.run,
        outputs: header.outputs,
        outputs_digest: header.outputs_digest,
        predictions,
    })
}

fn handle_connection(stream: TcpStream, worker: &dyn WorkerClient) -> Result<(), WireError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some((req, payload)) = read_frame::<_, WorkerRequest>(&mut reader, MAX_PAYLOAD_BYTES)? {
        match req {
            WorkerRequest::Ping => write_frame(&mut writer, &WorkerResponse::Pong, &[])?,
            WorkerRequest::EvaluateArchive(req) => match worker.evaluate(&req, &payload) {
                Ok(outcome) => {
                    let (resp, body) = encode_outcome(outcome);
                    write_frame(&mut writer, &resp, &body)?;
                }
                Err(e) => write_frame(
                    &mut writer,
                    &WorkerResponse::Error {
                        message: e.to_string(),
                    },
                    &[],
                )?,
            },
        }
    }
    Ok(())
}

/// Accepts orchestrator connections forever, handling one at a time.
pub fn serve_worker(listener: TcpListener, worker: Arc<dyn WorkerClient>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let peer = stream.peer_addr().ok();
        if let Err(e) = handle_connection(stream, worker.as_ref()) {
            log::warn!("connection from {peer:?} ended with error: {e}");
        }
    }
    Ok(())
}

/// Talks to a remote worker over the framed protocol, one connection per
/// request.
#[derive(Debug, Clone)]
pub struct TcpWorkerClient {
    pub addr: String,
    pub connect_timeout: Duration,
    /// Added on top of the run's wall-clock limit when waiting for a reply.
    pub reply_grace: Duration,
}

impl TcpWorkerClient {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpWorkerClient {
            addr: addr.into(),
            connect_timeout: Duration::from_secs(5),
            reply_grace: Duration::from_secs(120),
        }
    }

    fn connect(&self) -> Result<TcpStream, DispatchError> {
        let addrs = self
            .addr
            .to_socket_addrs()
            .map_err(|e| DispatchError::Unreachable(format!("{}: {e}", self.addr)))?;
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.connect_timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(DispatchError::Unreachable(format!(
            "{}: {}",
            self.addr,
            last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into())
        )))
    }

    pub fn ping(&self) -> Result<(), DispatchError> {
        let stream = self.connect()?;
        stream
            .set_read_timeout(Some(self.connect_timeout))
            .map_err(|e| DispatchError::Unreachable(e.to_string()))?;
        let mut w = BufWriter::new(stream.try_clone().map_err(|e| DispatchError::Unreachable(e.to_string()))?);
        write_frame(&mut w, &WorkerRequest::Ping, &[]).map_err(|e| DispatchError::Unreachable(e.to_string()))?;
        match read_frame::<_, WorkerResponse>(&mut BufReader::new(stream), 0) {
            Ok(Some((WorkerResponse::Pong, _))) => Ok(()),
            Ok(other) => Err(DispatchError::Protocol(format!("unexpected reply {other:?}"))),
            Err(e) => Err(DispatchError::Unreachable(e.to_string())),
        }
    }
}

impl WorkerClient for TcpWorkerClient {
    fn evaluate(&self, req: &EvaluateRequest, archive: &[u8]) -> Result<EvaluationOutcome, DispatchError> {
        let stream = self.connect()?;
        let wait = Duration::from_millis(req.limits.wall_clock_timeout) + self.reply_grace;
        stream
            .set_read_timeout(Some(wait))
            .map_err(|e| DispatchError::Unreachable(e.to_string()))?;
        let mut writer = BufWriter::new(stream.try_clone().map_err(|e| DispatchError::Unreachable(e.to_string()))?);
        write_frame(&mut writer, &WorkerRequest::EvaluateArchive(req.clone()), archive)
            .map_err(|e| DispatchError::Unreachable(e.to_string()))?;
        drop(writer);
        let mut reader = BufReader::new(stream);
        match read_frame::<_, WorkerResponse>(&mut reader, MAX_PAYLOAD_BYTES) {
            Ok(Some((WorkerResponse::Evaluated(h), payload))) => decode_outcome(h, payload),
            Ok(Some((WorkerResponse::Error { message }, _))) => Err(DispatchError::Rejected(message)),
            Ok(Some((WorkerResponse::Pong, _))) => Err(DispatchError::Protocol("unexpected pong".into())),
            Ok(None) => Err(DispatchError::Unreachable("worker closed the connection".into())),
            Err(WireError::Io(e)) => Err(DispatchError::Unreachable(e.to_string())),
            Err(e) => Err(DispatchError::Protocol(e.to_string())),
        }
    }
}
