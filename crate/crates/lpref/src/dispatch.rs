//! The single consumer of the submission queue.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use lpref_core::referee::{Referee, RefereeError};

/// Evaluates queued submissions one at a time until `stop` is set.
pub fn spawn_dispatcher(referee: Arc<Referee>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::Builder::new()
        .name("dispatcher".into())
        .spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if !referee.wait_for_work(Duration::from_millis(500)) {
                    continue;
                }
                match referee.evaluate_next() {
                    Ok(rec) => log::info!(
                        "{} ({}): {:?} score={:?}",
                        rec.submission_id,
                        rec.team,
                        rec.qualification,
                        rec.score
                    ),
                    Err(RefereeError::QueueEmpty) => {}
                    Err(RefereeError::WorkerUnreachable { id, attempts, gave_up, reason }) => {
                        log::warn!("{id}: worker unreachable on attempt {attempts}: {reason}");
                        if !gave_up {
                            thread::sleep(Duration::from_secs(2u64.saturating_pow(attempts).min(60)));
                        }
                    }
                    Err(e) => log::error!("evaluation failed: {e}"),
                }
            }
        })
        .expect("spawn dispatcher thread")
}
