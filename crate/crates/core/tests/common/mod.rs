#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use chrono::Utc;
use lpref_core::fixtures::{generate_fixtures, FixtureSet};
use lpref_core::referee::{Referee, RefereeConfig, Status, Submission};
use lpref_core::runner::{pack_archive, SolutionManifest};
use lpref_core::sandbox::Isolation;
use lpref_core::worker::{LocalWorker, WorkerClient, WorkerConfig};

pub const TEST_SET: &str = "hidden";

pub fn fixtures(seed: u64, count: usize, w: u32, h: u32) -> (tempfile::TempDir, FixtureSet) {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_fixtures(seed, count, w, h, dir.path()).unwrap();
    (dir, set)
}

pub fn config_for(set: &FixtureSet) -> RefereeConfig {
    let m = &set.manifest;
    let mut c = RefereeConfig::published_baseline(TEST_SET, m.count);
    c.expected_width = m.width;
    c.expected_height = m.height;
    c
}

pub fn local_worker(set: &FixtureSet, scratch: &Path) -> Arc<LocalWorker> {
    Arc::new(LocalWorker::new(WorkerConfig {
        test_sets: [(TEST_SET.to_string(), set.images_dir())].into(),
        scratch_root: scratch.to_path_buf(),
        isolation: Isolation::Auto,
    }))
}

pub fn open_referee(data: &Path, set: &FixtureSet, config: RefereeConfig, worker: Arc<dyn WorkerClient>) -> Referee {
    Referee::open(data, config, set.labels_dir(), worker).unwrap()
}

/// A zip whose entry point is `run.sh` containing `script`.
pub fn shell_archive(script: &str, extra: &[(&str, &[u8])]) -> Vec<u8> {
    let manifest = SolutionManifest {
        name: "mock".into(),
        entry_command: vec!["run.sh".into()],
        declared_runtime: "sh".into(),
    };
    let mut files: Vec<(&str, &[u8])> = vec![("run.sh", script.as_bytes())];
    files.extend_from_slice(extra);
    pack_archive(&manifest, &files).unwrap()
}

/// Copies the ground-truth map for every input image, optionally tweaks the
/// output directory with `post`, then prints `sentinel` (if any).
pub fn copy_script(labels: &Path, post: &str, sentinel: Option<&str>) -> String {
    let line = sentinel
        .map(|s| format!("echo \"LPCV_TOTAL_INFERENCE_TIME_MS: {s}\""))
        .unwrap_or_default();
    format!(
        "#!/bin/sh\nset -e\nfor f in \"$1\"/*.png; do n=$(basename \"$f\"); cp \"{}/$n\" \"$2/$n\"; done\n{post}\n{line}\n",
        labels.display()
    )
}

pub fn submit(r: &Referee, id: &str, team: &str, archive: &[u8]) -> usize {
    let archive_ref = r.blobs().put(archive).unwrap();
    r.enqueue(Submission {
        id: id.into(),
        team: team.into(),
        submitted_at: Utc::now(),
        archive_ref,
        status: Status::Queued,
    })
    .unwrap()
}
