//! Service configuration, read from a JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lpref_core::referee::RefereeConfig;
use lpref_core::worker::WorkerConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "LPREF_CONFIG";

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_worker_listen() -> String {
    "127.0.0.1:7070".into()
}

fn default_max_archive_bytes() -> u64 {
    512 << 20
}

fn default_cooldown_secs() -> u64 {
    600
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Blob store, logs and idempotency keys.
    pub data_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    pub referee: RefereeConfig,
    /// Directory of ground-truth label maps for `referee.test_set_ref`.
    pub ground_truth_dir: PathBuf,
    /// Team token to team name.
    #[serde(default)]
    pub teams: BTreeMap<String, String>,
    #[serde(default = "default_max_archive_bytes")]
    pub max_archive_bytes: u64,
    /// Minimum gap between accepted submissions from one team.
    #[serde(default = "default_cooldown_secs")]
    pub submission_cooldown_secs: u64,
    /// Address of a remote worker. When absent, `worker` runs in-process.
    #[serde(default)]
    pub remote_worker: Option<String>,
    #[serde(default)]
    pub worker: Option<WorkerConfig>,
    /// Where `lpref worker` listens.
    #[serde(default = "default_worker_listen")]
    pub worker_listen: String,
    /// Web client assets served under `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ServiceConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.referee.validate()?;
        if cfg.max_archive_bytes == 0 {
            bail!("max_archive_bytes must be positive");
        }
        Ok(cfg)
    }

    pub fn team_for_token(&self, token: &str) -> Option<&str> {
        self.teams.get(token).map(String::as_str)
    }
}

/// `--config` if given, else `$LPREF_CONFIG`.
pub fn resolve_path(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
        Some(p) => Ok(p),
        None => bail!("no configuration: pass --config or set {CONFIG_ENV}"),
    }
}
