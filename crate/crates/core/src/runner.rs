//! The device-side half of the referee: unpack a submission archive, run its
//! entry command against a directory of test images under limits, read back
//! the self-reported inference time and collect the prediction maps.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelmap::{decode_label_map, validate_dimensions, LabelMap, LabelMapError};
use crate::sandbox::{landlock_abi, Isolation, WriteJail};

/// Stdout line prefix carrying the cumulative inference time.
pub const SENTINEL_PREFIX: &str = "LPCV_TOTAL_INFERENCE_TIME_MS:";

pub const MANIFEST_FILE: &str = "manifest.json";

/// Cap on the total uncompressed size of an archive.
pub const MAX_UNPACKED_BYTES: u64 = 4 << 30;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("archive has no manifest.json at its root")]
    MissingManifest,
    #[error("archive entry escapes the destination: {0}")]
    PathEscape(String),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("failed to spawn solution: {0}")]
    SpawnFailure(String),
    #[error("malformed inference-time sentinel: {0:?}")]
    MalformedSentinel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Declares how to run a submission. Parsed from `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionManifest {
    #[serde(default)]
    pub name: String,
    pub entry_command: Vec<String>,
    #[serde(default)]
    pub declared_runtime: String,
}

impl SolutionManifest {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let exe = self
            .entry_command
            .first()
            .ok_or_else(|| RunnerError::ManifestInvalid("entry_command is empty".into()))?;
        normalize_relative(exe)
            .ok_or_else(|| RunnerError::ManifestInvalid(format!("entry {exe:?} escapes the archive root")))?;
        Ok(())
    }

    /// Absolute path of the entry executable under `root`.
    pub fn executable(&self, root: &Path) -> Result<PathBuf, RunnerError> {
        self.validate()?;
        let rel = normalize_relative(&self.entry_command[0]).expect("validated");
        Ok(root.join(rel))
    }
}

/// Lexically normalises a relative path; `None` when it is absolute or climbs
/// above its root.
fn normalize_relative(p: &str) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for comp in Path::new(p).components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    /// Milliseconds.
    pub wall_clock_timeout: u64,
    pub max_output_bytes: u64,
    pub max_stdout_bytes: u64,
}

impl RunLimits {
    /// Timeout of twice the reference solution's total run time.
    pub fn for_reference(reference_mean_ms: f64, image_count: usize) -> Self {
        RunLimits {
            wall_clock_timeout: (2.0 * reference_mean_ms * image_count as f64).ceil() as u64,
            ..RunLimits::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.wall_clock_timeout == 0 || self.max_output_bytes == 0 || self.max_stdout_bytes == 0 {
            return Err("run limits must all be positive".into());
        }
        Ok(())
    }
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits {
            // 2 x 108.1 ms x 600 images
            wall_clock_timeout: 129_720,
            max_output_bytes: 1 << 30,
            max_stdout_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub exit_status: i32,
    pub wall_clock: f64,
    pub reported_total_inference: Option<f64>,
    pub stdout_tail: String,
    pub produced_files: Vec<String>,
    #[serde(default)]
    pub timed_out: bool,
    /// Set when the last sentinel line was present but unparsable.
    #[serde(default)]
    pub sentinel_error: Option<String>,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && !self.timed_out
    }

    /// True when the reported total exceeds wall clock by more than `slack`
    /// (a fraction, e.g. 0.1).
    pub fn timing_suspect(&self, slack: f64) -> bool {
        self.reported_total_inference
            .is_some_and(|t| t > self.wall_clock * (1.0 + slack))
    }
}

/// Checks an archive without extracting it: entry paths stay inside the
/// root, the uncompressed size is bounded, and the manifest parses and names
/// an entry that exists.
pub fn inspect_archive(archive: &[u8]) -> Result<SolutionManifest, RunnerError> {
    let mut zip = zip::ZipArchive::new(Cursor::new(archive))
        .map_err(|e| RunnerError::CorruptArchive(e.to_string()))?;
    let mut total = 0u64;
    let mut manifest_index = None;
    let mut files = BTreeSet::new();
    for i in 0..zip.len() {
        let entry = zip
            .by_index_raw(i)
            .map_err(|e| RunnerError::CorruptArchive(e.to_string()))?;
        if entry.enclosed_name().is_none() || normalize_relative(entry.name()).is_none() {
            return Err(RunnerError::PathEscape(entry.name().to_string()));
        }
        total = total.saturating_add(entry.size());
        let rel = normalize_relative(entry.name()).expect("checked");
        if entry.is_file() {
            if rel == Path::new(MANIFEST_FILE) {
                manifest_index = Some(i);
            }
            files.insert(rel);
        }
    }
    if total > MAX_UNPACKED_BYTES {
        return Err(RunnerError::CorruptArchive(format!(
            "uncompressed size {total} exceeds {MAX_UNPACKED_BYTES}"
        )));
    }
    let index = manifest_index.ok_or(RunnerError::MissingManifest)?;
    let mut text = String::new();
    zip.by_index(index)
        .map_err(|e| RunnerError::CorruptArchive(e.to_string()))?
        .take(1 << 20)
        .read_to_string(&mut text)
        .map_err(|e| RunnerError::ManifestInvalid(e.to_string()))?;
    let manifest: SolutionManifest =
        serde_json::from_str(&text).map_err(|e| RunnerError::ManifestInvalid(e.to_string()))?;
    manifest.validate()?;
    let entry = normalize_relative(&manifest.entry_command[0]).expect("validated");
    if !files.contains(&entry) {
        return Err(RunnerError::ManifestInvalid(format!(
            "entry {:?} not found in archive",
            manifest.entry_command[0]
        )));
    }
    Ok(manifest)
}

/// Extracts `archive` under `dest` and parses its manifest.
pub fn unpack_archive(archive: &[u8], dest: &Path) -> Result<SolutionManifest, RunnerError> {
    let manifest = inspect_archive(archive)?;
    let mut zip = zip::ZipArchive::new(Cursor::new(archive))
        .map_err(|e| RunnerError::CorruptArchive(e.to_string()))?;
    fs::create_dir_all(dest)?;
    for i in 0..zip.len() {
        let mut entry = zip
            .by_index(i)
            .map_err(|e| RunnerError::CorruptArchive(e.to_string()))?;
        let rel = normalize_relative(entry.name()).expect("checked above");
        let out = dest.join(&rel);
        if entry.is_dir() {
            fs::create_dir_all(&out)?;
            continue;
        }
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(&out)?;
        io::copy(&mut entry, &mut file)
            .map_err(|e| RunnerError::CorruptArchive(format!("{}: {e}", entry.name())))?;
        if let Some(mode) = entry.unix_mode() {
            fs::set_permissions(&out, fs::Permissions::from_mode(mode & 0o755))?;
        }
    }

    let exe = manifest.executable(dest)?;
    if !exe.is_file() {
        return Err(RunnerError::ManifestInvalid(format!(
            "entry {:?} not found in archive",
            manifest.entry_command[0]
        )));
    }
    let mut perms = fs::metadata(&exe)?.permissions();
    perms.set_mode(perms.mode() | 0o500);
    fs::set_permissions(&exe, perms)?;
    Ok(manifest)
}

/// Builds a zip archive from a manifest and `(path, contents)` pairs. Files
/// are stored executable.
pub fn pack_archive(
    manifest: &SolutionManifest,
    files: &[(&str, &[u8])],
) -> Result<Vec<u8>, RunnerError> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default().unix_permissions(0o755);
    let zerr = |e: zip::result::ZipError| RunnerError::CorruptArchive(e.to_string());
    zip.start_file(MANIFEST_FILE, opts).map_err(zerr)?;
    zip.write_all(&serde_json::to_vec_pretty(manifest).expect("manifest serializes"))?;
    for (name, data) in files {
        zip.start_file(*name, opts).map_err(zerr)?;
        zip.write_all(data)?;
    }
    Ok(zip.finish().map_err(zerr)?.into_inner())
}

fn is_plain_decimal(s: &str) -> bool {
    let mut digits = 0;
    let mut dots = 0;
    for ch in s.chars() {
        match ch {
            '0'..='9' => digits += 1,
            '.' => dots += 1,
            _ => return false,
        }
    }
    digits > 0 && dots <= 1
}

/// Reads the cumulative inference time from the last sentinel line.
pub fn parse_reported_time(stdout: &str) -> Result<Option<f64>, RunnerError> {
    let Some(line) = stdout
        .lines()
        .map(str::trim)
        .rfind(|l| l.starts_with(SENTINEL_PREFIX))
    else {
        return Ok(None);
    };
    let value = line[SENTINEL_PREFIX.len()..].trim();
    if !is_plain_decimal(value) {
        return Err(RunnerError::MalformedSentinel(line.to_string()));
    }
    value
        .parse::<f64>()
        .map(Some)
        .map_err(|_| RunnerError::MalformedSentinel(line.to_string()))
}

/// Keeps the last `cap` bytes written to it.
struct TailBuffer {
    cap: usize,
    buf: VecDeque<u8>,
}

impl TailBuffer {
    fn push(&mut self, data: &[u8]) {
        let data = &data[data.len().saturating_sub(self.cap)..];
        let overflow = (self.buf.len() + data.len()).saturating_sub(self.cap);
        self.buf.drain(..overflow);
        self.buf.extend(data);
    }
}

fn drain_into(mut src: impl Read, sink: Arc<Mutex<TailBuffer>>) {
    let mut chunk = [0u8; 8192];
    loop {
        match src.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => sink.lock().unwrap().push(&chunk[..n]),
        }
    }
}

fn kill_group(pgid: u32) {
    unsafe {
        libc::killpg(pgid as libc::pid_t, libc::SIGKILL);
    }
}

/// Where a run happens and how it is confined.
#[derive(Debug, Clone)]
pub struct ExecutionContext {
    /// Unpacked archive root; becomes the child's working directory.
    pub solution_root: PathBuf,
    /// Writable scratch area (HOME and TMPDIR point here).
    pub scratch_dir: PathBuf,
    pub isolation: Isolation,
}

/// Runs `<entry_command> <input_dir> <output_dir>` and waits for it, killing
/// the whole process group at the wall-clock limit.
pub fn execute_solution(
    manifest: &SolutionManifest,
    ctx: &ExecutionContext,
    input_dir: &Path,
    output_dir: &Path,
    limits: &RunLimits,
) -> Result<RunResult, RunnerError> {
    let exe = manifest.executable(&ctx.solution_root)?;
    fs::create_dir_all(&ctx.scratch_dir)?;
    let input_dir = fs::canonicalize(input_dir)?;
    let output_dir = fs::canonicalize(output_dir)?;

    let jail = match ctx.isolation {
        Isolation::None => None,
        Isolation::Auto if landlock_abi().is_none() => None,
        Isolation::Auto | Isolation::Landlock => Some(
            WriteJail::new(&[&output_dir, &ctx.scratch_dir, &ctx.solution_root])
                .map_err(|e| RunnerError::SpawnFailure(format!("sandbox setup: {e}")))?,
        ),
    };

    let mut cmd = Command::new(&exe);
    cmd.args(&manifest.entry_command[1..])
        .arg(&input_dir)
        .arg(&output_dir)
        .current_dir(&ctx.solution_root)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("HOME", &ctx.scratch_dir)
        .env("TMPDIR", &ctx.scratch_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let fsize = limits.max_output_bytes as libc::rlim_t;
    let jail = jail.map(Arc::new);
    let child_jail = jail.clone();
    unsafe {
        cmd.pre_exec(move || {
            let lim = libc::rlimit {
                rlim_cur: fsize,
                rlim_max: fsize,
            };
            if libc::setrlimit(libc::RLIMIT_FSIZE, &lim) != 0 {
                return Err(io::Error::last_os_error());
            }
            if let Some(j) = &child_jail {
                j.enter()?;
            }
            Ok(())
        });
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| RunnerError::SpawnFailure(format!("{}: {e}", exe.display())))?;
    let pgid = child.id();

    let stdout_tail = Arc::new(Mutex::new(TailBuffer {
        cap: limits.max_stdout_bytes as usize,
        buf: VecDeque::new(),
    }));
    let stderr_tail = Arc::new(Mutex::new(TailBuffer {
        cap: 64 * 1024,
        buf: VecDeque::new(),
    }));
    let out_reader = {
        let pipe = child.stdout.take().expect("piped");
        let sink = stdout_tail.clone();
        thread::spawn(move || drain_into(pipe, sink))
    };
    let err_reader = {
        let pipe = child.stderr.take().expect("piped");
        let sink = stderr_tail.clone();
        thread::spawn(move || drain_into(pipe, sink))
    };

    let deadline = started + Duration::from_millis(limits.wall_clock_timeout);
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(pgid);
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let wall_clock = started.elapsed().as_secs_f64() * 1000.0;
    // Stray descendants would otherwise hold the pipes open.
    kill_group(pgid);
    let _ = out_reader.join();
    let _ = err_reader.join();

    let exit_status = status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1);
    let stdout_bytes: Vec<u8> = stdout_tail.lock().unwrap().buf.iter().copied().collect();
    let stdout_tail = String::from_utf8_lossy(&stdout_bytes).into_owned();
    let stderr_bytes: Vec<u8> = stderr_tail.lock().unwrap().buf.iter().copied().collect();
    if !stderr_bytes.is_empty() {
        log::debug!("solution stderr: {}", String::from_utf8_lossy(&stderr_bytes));
    }
    let (reported_total_inference, sentinel_error) = match parse_reported_time(&stdout_tail) {
        Ok(v) => (v, None),
        Err(e) => (None, Some(e.to_string())),
    };

    Ok(RunResult {
        exit_status: if timed_out && exit_status == 0 { 137 } else { exit_status },
        wall_clock,
        reported_total_inference,
        stdout_tail,
        produced_files: list_files(&output_dir)?,
        timed_out,
        sentinel_error,
    })
}

fn list_files(dir: &Path) -> io::Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

/// Total size in bytes of the regular files under `dir`.
pub fn directory_size(dir: &Path) -> io::Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        total += if meta.is_dir() {
            directory_size(&entry.path())?
        } else {
            meta.len()
        };
    }
    Ok(total)
}

/// Expected prediction file names for the images in `input_dir`: each
/// regular file's stem with a `.png` extension, sorted.
pub fn expected_output_names(input_dir: &Path) -> io::Result<Vec<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(input_dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let path = entry.path();
        let Some(stem) = path.file_stem() else { continue };
        names.insert(format!("{}.png", stem.to_string_lossy()));
    }
    Ok(names.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileFailure {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum CollectError {
    #[error("wrong output count: missing {missing:?}, unexpected {extra:?}")]
    WrongOutputCount {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("invalid prediction files: {}", .0.iter().map(|f| format!("{}: {}", f.name, f.reason)).collect::<Vec<_>>().join("; "))]
    InvalidFiles(Vec<FileFailure>),
    #[error("cannot read output directory: {0}")]
    Io(String),
}

/// Decodes and checks each prediction. On success the maps come back in
/// `expected_names` order, along with their raw bytes.
pub fn collect_outputs_with_bytes(
    output_dir: &Path,
    expected_names: &[String],
    expected_width: u32,
    expected_height: u32,
) -> Result<Vec<(LabelMap, Vec<u8>)>, CollectError> {
    let present: BTreeSet<String> = list_files(output_dir)
        .map_err(|e| CollectError::Io(e.to_string()))?
        .into_iter()
        .collect();
    let expected: BTreeSet<&String> = expected_names.iter().collect();
    let missing: Vec<String> = expected_names
        .iter()
        .filter(|n| !present.contains(*n))
        .cloned()
        .collect();
    let extra: Vec<String> = present
        .iter()
        .filter(|n| !expected.contains(n))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CollectError::WrongOutputCount { missing, extra });
    }

    let mut maps = Vec::with_capacity(expected_names.len());
    let mut failures = Vec::new();
    for name in expected_names {
        let path = output_dir.join(name);
        let result = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| {
                let map = decode_label_map(&bytes).map_err(|e| e.to_string())?;
                validate_dimensions(&map, expected_width, expected_height)
                    .map_err(|e: LabelMapError| e.to_string())?;
                Ok((map, bytes))
            });
        match result {
            Ok(pair) => maps.push(pair),
            Err(reason) => failures.push(FileFailure {
                name: name.clone(),
                reason,
            }),
        }
    }
    if failures.is_empty() {
        Ok(maps)
    } else {
        Err(CollectError::InvalidFiles(failures))
    }
}

pub fn collect_outputs(
    output_dir: &Path,
    expected_names: &[String],
    expected_width: u32,
    expected_height: u32,
) -> Result<Vec<LabelMap>, CollectError> {
    collect_outputs_with_bytes(output_dir, expected_names, expected_width, expected_height)
        .map(|v| v.into_iter().map(|(m, _)| m).collect())
}

/// Name to bytes for every file directly in `dir`.
pub fn read_dir_files(dir: &Path) -> io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(entry.path())?,
            );
        }
    }
    Ok(out)
}
