//! Award-track rankings and the cumulative daily progress series, both
//! derived on demand from evaluation records. Only qualified records count.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::referee::EvaluationRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LeaderboardError {
    #[error("invalid range: {from} is after {to}")]
    InvalidRange { from: NaiveDate, to: NaiveDate },
    #[error("unknown track {0:?}")]
    UnknownTrack(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Score,
    Accuracy,
    Speed,
}

impl Track {
    pub const ALL: [Track; 3] = [Track::Score, Track::Accuracy, Track::Speed];

    pub fn as_str(self) -> &'static str {
        match self {
            Track::Score => "score",
            Track::Accuracy => "accuracy",
            Track::Speed => "speed",
        }
    }

    /// Track key, oriented so that larger is better.
    fn key(self, r: &EvaluationRecord) -> Option<f64> {
        match self {
            Track::Score => r.score,
            Track::Accuracy => r.accuracy,
            Track::Speed => r.mean_time.map(|t| -t),
        }
    }
}

impl std::str::FromStr for Track {
    type Err = LeaderboardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "score" => Ok(Track::Score),
            "accuracy" => Ok(Track::Accuracy),
            "speed" => Ok(Track::Speed),
            _ => Err(LeaderboardError::UnknownTrack(s.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub team: String,
    pub best_record: EvaluationRecord,
    pub track: Track,
    pub rank: usize,
}

fn counts(r: &EvaluationRecord) -> bool {
    r.qualification.is_qualified() && r.accuracy.is_some() && r.mean_time.is_some() && r.score.is_some()
}

/// `Less` means `a` ranks ahead of `b`.
fn ahead(track: Track, a: &EvaluationRecord, b: &EvaluationRecord) -> Ordering {
    let (ka, kb) = (track.key(a).unwrap_or(f64::NEG_INFINITY), track.key(b).unwrap_or(f64::NEG_INFINITY));
    kb.total_cmp(&ka)
        .then_with(|| a.submitted_at.cmp(&b.submitted_at))
        .then_with(|| a.team.cmp(&b.team))
        .then_with(|| a.submission_id.cmp(&b.submission_id))
}

/// One entry per team holding its best qualified record for `track`, ranked
/// from 1.
pub fn rank(records: &[EvaluationRecord], track: Track) -> Vec<LeaderboardEntry> {
    let mut best: HashMap<&str, &EvaluationRecord> = HashMap::new();
    for r in records.iter().filter(|r| counts(r)) {
        best.entry(r.team.as_str())
            .and_modify(|cur| {
                if ahead(track, r, cur) == Ordering::Less {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    let mut winners: Vec<&EvaluationRecord> = best.into_values().collect();
    winners.sort_by(|a, b| ahead(track, a, b));
    winners
        .into_iter()
        .enumerate()
        .map(|(i, r)| LeaderboardEntry {
            team: r.team.clone(),
            best_record: r.clone(),
            track,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracks {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<Vec<LeaderboardEntry>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<Vec<LeaderboardEntry>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speed: Option<Vec<LeaderboardEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub generated_at: DateTime<Utc>,
    pub tracks: Tracks,
}

/// Snapshot of the requested tracks, or all three when `only` is `None`.
pub fn snapshot(records: &[EvaluationRecord], only: Option<Track>, now: DateTime<Utc>) -> Snapshot {
    let want = |t: Track| (only.is_none() || only == Some(t)).then(|| rank(records, t));
    Snapshot {
        generated_at: now,
        tracks: Tracks {
            score: want(Track::Score),
            accuracy: want(Track::Accuracy),
            speed: want(Track::Speed),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyPoint {
    pub day: NaiveDate,
    pub best_score: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub lowest_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub days: Vec<DailyPoint>,
}

fn fmax(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.max(b)))
}

fn fmin(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

/// Cumulative bests per UTC calendar day over qualified records submitted up
/// to the end of that day.
pub fn daily_series(
    records: &[EvaluationRecord],
    from: NaiveDate,
    to: NaiveDate,
) -> Result<DailySeries, LeaderboardError> {
    if from > to {
        return Err(LeaderboardError::InvalidRange { from, to });
    }
    let mut qualified: Vec<&EvaluationRecord> = records.iter().filter(|r| counts(r)).collect();
    qualified.sort_by_key(|r| r.submitted_at);

    let mut next = 0;
    let mut acc = DailyPoint {
        day: from,
        best_score: None,
        best_accuracy: None,
        lowest_time_ms: None,
    };
    let mut days = Vec::new();
    for day in from.iter_days().take_while(|d| *d <= to) {
        while let Some(r) = qualified.get(next).filter(|r| r.submitted_at.date_naive() <= day) {
            acc.best_score = fmax(acc.best_score, r.score.expect("qualified"));
            acc.best_accuracy = fmax(acc.best_accuracy, r.accuracy.expect("qualified"));
            acc.lowest_time_ms = fmin(acc.lowest_time_ms, r.mean_time.expect("qualified"));
            next += 1;
        }
        days.push(DailyPoint { day, ..acc });
    }
    Ok(DailySeries { days })
}

impl DailySeries {
    /// `day,best_score,best_accuracy,lowest_time_ms` with empty fields for
    /// absent values.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("day,best_score,best_accuracy,lowest_time_ms\n");
        for p in &self.days {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                p.day,
                cell(p.best_score),
                cell(p.best_accuracy),
                cell(p.lowest_time_ms)
            );
        }
        out
    }
}
