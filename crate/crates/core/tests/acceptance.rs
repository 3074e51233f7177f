//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use chrono::{NaiveDate, TimeZone, Utc};
use lpref_core::fixtures::ground_truth;
use lpref_core::labelmap::{decode_label_map, encode_label_map, NUM_CLASSES};
use lpref_core::leaderboard::daily_series;
use lpref_core::metrics::{confusion_counts, image_mdsc, score, score_pairs_sequential};
use lpref_core::referee::{EvaluationRecord, Qualification, RefereeConfig};
use lpref_core::worker::{DispatchError, EvaluateRequest, EvaluationOutcome, OutputStatus, WorkerClient};
use lpref_core::{ClassId, LabelMap};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn spurious_class_penalty() -> Outcome {
    // Three classes of 100, 100 and 56 pixels; one pixel predicted as a
    // fourth class absent from the ground truth.
    let gt: Vec<u8> = (0..256).map(|i| (i >= 100) as u8 + (i >= 200) as u8).collect();
    let mut pred = gt.clone();
    pred[0] = 3;
    let s = image_mdsc(&LabelMap::new(16, 16, pred).unwrap(), &LabelMap::new(16, 16, gt).unwrap())
        .map_err(|e| e.to_string())?;
    check(
        (0.745..=0.752).contains(&s.mdsc) && s.class_union.len() == 4,
        format!("mdsc = {:.6}, |C| = {}, required [0.745, 0.752]", s.mdsc, s.class_union.len()),
    )
}

/// Per-class pixel index sets straight from the definition.
fn set_oracle(pred: &LabelMap, gt: &LabelMap) -> (BTreeMap<u8, (u64, u64, u64)>, f64) {
    let set = |m: &LabelMap, c: u8| -> HashSet<usize> {
        m.pixels().iter().enumerate().filter(|(_, &p)| p == c).map(|(i, _)| i).collect()
    };
    let mut counts = BTreeMap::new();
    let mut dice_sum = 0.0;
    for c in 0..NUM_CLASSES as u8 {
        let (p, g) = (set(pred, c), set(gt, c));
        if p.is_empty() && g.is_empty() {
            continue;
        }
        let tp = p.intersection(&g).count() as u64;
        let fp = p.difference(&g).count() as u64;
        let fn_ = g.difference(&p).count() as u64;
        counts.insert(c, (tp, fp, fn_));
        dice_sum += 2.0 * tp as f64 / (p.len() + g.len()) as f64;
    }
    let mdsc = dice_sum / counts.len() as f64;
    (counts, mdsc)
}

fn random_pair(rng: &mut ChaCha8Rng) -> (LabelMap, LabelMap) {
    let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
    let k = rng.random_range(1..=NUM_CLASSES);
    let mut vocab: Vec<u8> = (0..NUM_CLASSES as u8).collect();
    for i in 0..k {
        let j = rng.random_range(i..NUM_CLASSES);
        vocab.swap(i, j);
    }
    let vocab = &vocab[..k];
    let n = (w * h) as usize;
    let gt: Vec<u8> = (0..n).map(|_| vocab[rng.random_range(0..k)]).collect();
    let noise = rng.random_range(0.0..1.0);
    let pred: Vec<u8> = gt
        .iter()
        .map(|&g| if rng.random_bool(noise) { vocab[rng.random_range(0..k)] } else { g })
        .collect();
    (LabelMap::new(w, h, pred).unwrap(), LabelMap::new(w, h, gt).unwrap())
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1CE);
    let pairs = 1500;
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let (pred, gt) = random_pair(&mut rng);
        let (want_counts, want_mdsc) = set_oracle(&pred, &gt);
        let counts = confusion_counts(&pred, &gt).map_err(|e| e.to_string())?;
        let got: BTreeMap<u8, (u64, u64, u64)> =
            counts.iter().map(|(c, k)| (c.get(), (k.tp, k.fp, k.fn_))).collect();
        if got != want_counts {
            return Err(format!("pair {i}: counts {got:?} != oracle {want_counts:?}"));
        }
        let mdsc = image_mdsc(&pred, &gt).map_err(|e| e.to_string())?.mdsc;
        worst = worst.max((mdsc - want_mdsc).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 60.0,
        format!("{pairs} pairs, exact counts, max |dmdsc| = {worst:.1e} (<= 1e-12), {secs:.1} s (< 60 s)"),
    )
}

fn published_scores() -> Outcome {
    let rows = [
        ("Reference", 0.50, 108.1, 4.63, 0.05),
        ("ENOT", 0.601, 67.0, 8.97, 0.05),
        ("AidgetRock", 0.554, 15.1, 36.7, 0.4),
        ("ModelTC", 0.512, 6.8, 75.3, 1.0),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, acc, ms, want, tol) in rows {
        let s = score(acc, ms).map_err(|e| e.to_string())?;
        ok &= (s - want).abs() <= tol;
        parts.push(format!("{name} {s:.3} ({want}+-{tol})"));
    }
    check(ok, parts.join(", "))
}

fn end_to_end() -> Outcome {
    use common::*;
    use lpref_core::labelmap::DEFAULT_WIDTH;

    let started = Instant::now();
    let (_fx, set) = fixtures(2023, 600, DEFAULT_WIDTH, DEFAULT_WIDTH);
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = config_for(&set);
    if (config.reference_accuracy, config.reference_mean_time) != (0.50, 108.1) {
        return Err("baseline is not (0.50, 108.1)".into());
    }
    let referee = open_referee(data.path(), &set, config, local_worker(&set, data.path()));
    let labels = set.labels_dir();
    let bg = encode_label_map(&LabelMap::filled(DEFAULT_WIDTH, DEFAULT_WIDTH, ClassId::BACKGROUND).unwrap());
    let bg_script = "#!/bin/sh\nfor f in \"$1\"/*.png; do cp bg.png \"$2/$(basename \"$f\")\"; done\n\
                     echo LPCV_TOTAL_INFERENCE_TIME_MS: 30000\n";
    let mocks: Vec<(&str, Vec<u8>)> = vec![
        ("copy", shell_archive(&copy_script(&labels, "", Some("64860")), &[])),
        (
            "599",
            shell_archive(
                &copy_script(&labels, "rm \"$2/$(ls \"$2\" | sort | tail -n 1)\"", Some("64860")),
                &[],
            ),
        ),
        ("crash", shell_archive("#!/bin/sh\necho starting\nkill -SEGV $$\n", &[])),
        ("background", shell_archive(bg_script, &[("bg.png", &bg)])),
    ];
    for (id, archive) in &mocks {
        submit(&referee, id, "mock", archive);
    }
    let mut recs = BTreeMap::new();
    for _ in &mocks {
        let r = referee.evaluate_next().map_err(|e| e.to_string())?;
        recs.insert(r.submission_id.clone(), r);
    }
    let secs = started.elapsed().as_secs_f64();

    let copy = &recs["copy"];
    let (acc, mean, sc) = (copy.accuracy, copy.mean_time, copy.score);
    let copy_ok = copy.qualification == Qualification::Qualified
        && acc == Some(1.0)
        && mean.is_some_and(|m| (m - 108.1).abs() < 1e-9)
        && sc.is_some_and(|s| (s - 9.25).abs() <= 1e-6);
    let q = |id: &str| recs[id].qualification;
    let ok = copy_ok
        && q("599") == Qualification::DisqualifiedWrongOutputCount
        && q("crash") == Qualification::DisqualifiedRunFailure
        && q("background") == Qualification::DisqualifiedBelowReferenceAccuracy
        && secs < 300.0;
    check(
        ok,
        format!(
            "600x512x512: copy {:?} acc={:?} mean={:?} score={:?} (want 9.25+-1e-6, off by {:.1e}; accuracy 1.0 at 108.1 ms gives exactly 1/0.1081); 599 {:?}; crash {:?}; background {:?} acc={:.3}; {secs:.1} s (< 300 s)",
            copy.qualification,
            acc,
            mean,
            sc.map(|s| format!("{s:.9}")),
            sc.map_or(f64::NAN, |s| (s - 9.25).abs()),
            q("599"),
            q("crash"),
            q("background"),
            recs["background"].accuracy.unwrap_or(f64::NAN),
        ),
    )
}

fn throughput() -> Outcome {
    let side = 512;
    let gts: Vec<LabelMap> = (0..600).map(|i| ground_truth(7, i, side, side)).collect();
    let preds: Vec<LabelMap> = (0..600).map(|i| ground_truth(8, i, side, side)).collect();
    let started = Instant::now();
    let scores = score_pairs_sequential(&preds, &gts).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    check(
        scores.len() == 600 && secs < 10.0,
        format!("600 pre-decoded 512x512 pairs, single thread, {secs:.2} s (< 10 s)"),
    )
}

fn small_map() -> impl Strategy<Value = LabelMap> {
    (1..=24u32, 1..=24u32, 1..=NUM_CLASSES as u8).prop_flat_map(|(w, h, k)| {
        proptest::collection::vec(0..k, (w * h) as usize).prop_map(move |px| LabelMap::new(w, h, px).unwrap())
    })
}

fn map_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1..=24u32, 1..=24u32, 1..=NUM_CLASSES as u8).prop_flat_map(|(w, h, k)| {
        let n = (w * h) as usize;
        (
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(move |(p, g)| (LabelMap::new(w, h, p).unwrap(), LabelMap::new(w, h, g).unwrap()))
    })
}

struct IntakeFails;

impl WorkerClient for IntakeFails {
    fn evaluate(&self, _: &EvaluateRequest, _: &[u8]) -> Result<EvaluationOutcome, DispatchError> {
        Ok(EvaluationOutcome {
            intake_error: Some("no archive".into()),
            run: None,
            outputs: OutputStatus::NotCollected,
            outputs_digest: None,
            predictions: vec![],
        })
    }
}

fn fifo_under_concurrency(threads: usize, per: usize) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let referee = Arc::new(
        lpref_core::referee::Referee::open(
            dir.path(),
            RefereeConfig::published_baseline("t", 1),
            dir.path(),
            Arc::new(IntakeFails),
        )
        .unwrap(),
    );
    let barrier = Arc::new(Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let (r, b) = (referee.clone(), barrier.clone());
            thread::spawn(move || {
                b.wait();
                (0..per)
                    .map(|i| {
                        let id = format!("t{t}-{i}");
                        (common::submit(&r, &id, &format!("team{t}"), id.as_bytes()), id)
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let mut arrivals: Vec<(usize, String)> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    arrivals.sort();
    let positions: Vec<usize> = arrivals.iter().map(|a| a.0).collect();
    prop_assert_eq!(positions, (0..threads * per).collect::<Vec<_>>());
    // Each producer's own submissions keep their relative order.
    for t in 0..threads {
        let mine: Vec<usize> = arrivals
            .iter()
            .filter(|a| a.1.starts_with(&format!("t{t}-")))
            .map(|a| a.1.rsplit('-').next().unwrap().parse().unwrap())
            .collect();
        prop_assert_eq!(mine, (0..per).collect::<Vec<_>>());
    }
    let mut served = Vec::new();
    while let Ok(rec) = referee.evaluate_next() {
        served.push(rec.submission_id);
    }
    let expected: Vec<String> = arrivals.into_iter().map(|a| a.1).collect();
    prop_assert_eq!(served, expected);
    Ok(())
}

fn invariant_suite() -> Outcome {
    let mut done = Vec::new();
    let mut run = |name: &str, cases: u32, f: &mut dyn FnMut(&mut TestRunner) -> Result<(), String>| {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        f(&mut runner).map_err(|e| format!("{name}: {e}"))?;
        done.push(format!("{name} ({cases})"));
        Ok::<_, String>(())
    };

    run("mdsc symmetry", 500, &mut |r| {
        r.run(&map_pair(), |(p, g)| {
            prop_assert_eq!(image_mdsc(&p, &g).unwrap().mdsc, image_mdsc(&g, &p).unwrap().mdsc);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;
    run("label permutation invariance", 500, &mut |r| {
        let perm = Just((0..NUM_CLASSES as u8).collect::<Vec<_>>()).prop_shuffle();
        r.run(&(map_pair(), perm), |((p, g), perm)| {
            let remap = |m: &LabelMap| {
                LabelMap::new(m.width(), m.height(), m.pixels().iter().map(|&x| perm[x as usize]).collect()).unwrap()
            };
            let a = image_mdsc(&p, &g).unwrap().mdsc;
            let b = image_mdsc(&remap(&p), &remap(&g)).unwrap().mdsc;
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;
    run("count conservation", 500, &mut |r| {
        r.run(&map_pair(), |(p, g)| {
            let c = confusion_counts(&p, &g).unwrap();
            let n = p.len() as u64;
            let (tp, fp, fn_) = c.iter().fold((0, 0, 0), |a, (_, k)| (a.0 + k.tp, a.1 + k.fp, a.2 + k.fn_));
            prop_assert_eq!(tp + fp, n);
            prop_assert_eq!(tp + fn_, n);
            let union: BTreeSet<ClassId> = p.pixels().iter().chain(g.pixels()).map(|&x| ClassId::new(x as i64).unwrap()).collect();
            prop_assert_eq!(c.classes().collect::<BTreeSet<_>>(), union);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;
    run("monotone daily series", 300, &mut |r| {
        let rec = (0..5usize, 1..=28u32, 0..24u32, 0.0..1.0f64, 0.5..300.0f64, any::<bool>());
        r.run(&proptest::collection::vec(rec, 0..40), |v| {
            let records: Vec<EvaluationRecord> = v
                .into_iter()
                .enumerate()
                .map(|(i, (team, day, hour, acc, ms, ok))| EvaluationRecord {
                    submission_id: format!("s{i}"),
                    team: format!("T{team}"),
                    submitted_at: Utc.with_ymd_and_hms(2023, 7, day, hour, 0, 0).unwrap(),
                    accuracy: Some(acc),
                    mean_time: Some(ms),
                    score: Some(acc / (ms / 1000.0)),
                    qualification: if ok { Qualification::Qualified } else { Qualification::DisqualifiedAboveReferenceTime },
                    suspect_timing: false,
                    per_image_report_ref: None,
                    detail: None,
                })
                .collect();
            let from = NaiveDate::from_ymd_opt(2023, 6, 28).unwrap();
            let to = NaiveDate::from_ymd_opt(2023, 8, 2).unwrap();
            let s = daily_series(&records, from, to).unwrap();
            for w in s.days.windows(2) {
                prop_assert!(w[1].best_score >= w[0].best_score);
                prop_assert!(w[1].best_accuracy >= w[0].best_accuracy);
                prop_assert!(w[0].lowest_time_ms.is_none() || w[1].lowest_time_ms <= w[0].lowest_time_ms);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;
    run("FIFO under concurrent enqueue", 24, &mut |r| {
        r.run(&(1..=8usize, 1..=12usize), |(t, per)| fifo_under_concurrency(t, per))
            .map_err(|e| e.to_string())
    })?;
    run("PNG round trip", 500, &mut |r| {
        r.run(&small_map(), |m| {
            prop_assert_eq!(decode_label_map(&encode_label_map(&m)).unwrap(), m);
            Ok(())
        })
        .map_err(|e| e.to_string())
    })?;
    Ok(done.join(", "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 6] = [
        ("spurious-class penalty", spurious_class_penalty),
        ("oracle equivalence", oracle_equivalence),
        ("published score reconstruction", published_scores),
        ("end-to-end pipeline", end_to_end),
        ("metric throughput", throughput),
        ("invariant suite", invariant_suite),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("NOTE competition accuracies are not reproducible without the hidden test set; not checked");
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
