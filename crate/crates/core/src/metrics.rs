//! Evaluation mathematics: class union, per-class Dice, per-image mean Dice
//! (mDSC), dataset accuracy, mean inference time and the accuracy/latency
//! score.
//!
//! Counting is exact integer arithmetic from a single pass over the pixels.
//! Each Dice term is divided once; the per-image mean and the dataset mean are
//! summed in a fixed order, so results do not depend on thread scheduling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelmap::{class_set, ClassId, LabelMap, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: prediction {pred_width}x{pred_height}, ground truth {gt_width}x{gt_height}")]
    DimensionMismatch {
        pred_width: u32,
        pred_height: u32,
        gt_width: u32,
        gt_height: u32,
    },
    #[error("class {0} is not in the class union")]
    ClassNotInUnion(ClassId),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image count must be positive")]
    ZeroImages,
    #[error("total inference time must be finite and non-negative, got {0}")]
    NegativeTime(f64),
    #[error("mean inference time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("accuracy must lie in [0, 1], got {0}")]
    AccuracyOutOfRange(f64),
    #[error("{preds} predictions but {gts} ground-truth maps")]
    CountMismatch { preds: usize, gts: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// True-positive, false-positive and false-negative pixel tallies for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn dice(&self) -> f64 {
        let num = 2 * self.tp;
        let den = num + self.fn_ + self.fp;
        debug_assert!(den > 0);
        num as f64 / den as f64
    }
}

/// Per-class confusion tallies over the class union of one image pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    classes: BTreeMap<ClassId, ClassCounts>,
}

impl ConfusionCounts {
    pub fn get(&self, class: ClassId) -> Option<ClassCounts> {
        self.classes.get(&class).copied()
    }

    /// The class union this tally covers.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, ClassCounts)> + '_ {
        self.classes.iter().map(|(c, k)| (*c, *k))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Per-image result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub class_union: BTreeSet<ClassId>,
    pub per_class_dice: BTreeMap<ClassId, f64>,
    pub mdsc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub accuracy: f64,
    pub mean_inference_time: f64,
    pub score: f64,
    pub image_count: usize,
}

fn check_dims(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(MetricsError::DimensionMismatch {
            pred_width: pred.width(),
            pred_height: pred.height(),
            gt_width: gt.width(),
            gt_height: gt.height(),
        });
    }
    Ok(())
}

pub fn class_union(pred: &LabelMap, gt: &LabelMap) -> Result<BTreeSet<ClassId>> {
    check_dims(pred, gt)?;
    let mut union = class_set(pred);
    union.extend(class_set(gt));
    Ok(union)
}

/// Full 14x14 joint histogram, `matrix[gt][pred]`.
fn joint_histogram(pred: &[u8], gt: &[u8]) -> [[u64; NUM_CLASSES]; NUM_CLASSES] {
    let mut matrix = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &g) in pred.iter().zip(gt) {
        matrix[g as usize][p as usize] += 1;
    }
    matrix
}

pub fn confusion_counts(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let matrix = joint_histogram(pred.pixels(), gt.pixels());
    let mut classes = BTreeMap::new();
    for c in 0..NUM_CLASSES {
        let tp = matrix[c][c];
        let gt_total: u64 = matrix[c].iter().sum();
        let pred_total: u64 = matrix.iter().map(|row| row[c]).sum();
        if gt_total == 0 && pred_total == 0 {
            continue;
        }
        let class = ClassId::new(c as i64).expect("index below NUM_CLASSES");
        classes.insert(
            class,
            ClassCounts {
                tp,
                fp: pred_total - tp,
                fn_: gt_total - tp,
            },
        );
    }
    Ok(ConfusionCounts { classes })
}

pub fn dice_per_class(counts: &ConfusionCounts, class: ClassId) -> Result<f64> {
    counts
        .get(class)
        .map(|k| k.dice())
        .ok_or(MetricsError::ClassNotInUnion(class))
}

pub fn image_mdsc(pred: &LabelMap, gt: &LabelMap) -> Result<ImageScore> {
    let counts = confusion_counts(pred, gt)?;
    Ok(score_from_counts(&counts))
}

fn score_from_counts(counts: &ConfusionCounts) -> ImageScore {
    let per_class_dice: BTreeMap<ClassId, f64> =
        counts.iter().map(|(c, k)| (c, k.dice())).collect();
    let sum: f64 = per_class_dice.values().sum();
    ImageScore {
        class_union: per_class_dice.keys().copied().collect(),
        mdsc: sum / per_class_dice.len() as f64,
        per_class_dice,
    }
}

/// Unweighted mean of per-image mDSC, summed in input order.
pub fn dataset_accuracy(image_scores: &[ImageScore]) -> Result<f64> {
    if image_scores.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let sum: f64 = image_scores.iter().map(|s| s.mdsc).sum();
    Ok(sum / image_scores.len() as f64)
}

/// Mean per-image inference time in milliseconds.
pub fn mean_inference_time(total_time_ms: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(MetricsError::ZeroImages);
    }
    if !total_time_ms.is_finite() || total_time_ms < 0.0 {
        return Err(MetricsError::NegativeTime(total_time_ms));
    }
    Ok(total_time_ms / n as f64)
}

/// Accuracy (fraction) per second of mean inference time.
pub fn score(accuracy: f64, mean_time_ms: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(MetricsError::AccuracyOutOfRange(accuracy));
    }
    if !mean_time_ms.is_finite() || mean_time_ms <= 0.0 {
        return Err(MetricsError::NonPositiveTime(mean_time_ms));
    }
    Ok(accuracy / (mean_time_ms / 1000.0))
}

fn check_pair_counts(preds: &[LabelMap], gts: &[LabelMap]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(MetricsError::CountMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    Ok(())
}

/// Scores each (prediction, ground truth) pair on the calling thread.
pub fn score_pairs_sequential(preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<ImageScore>> {
    check_pair_counts(preds, gts)?;
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| image_mdsc(p, g))
        .collect()
}

/// Scores pairs across the rayon pool. Output order matches input order.
#[cfg(feature = "parallel")]
pub fn score_pairs_parallel(preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<ImageScore>> {
    use rayon::prelude::*;

    check_pair_counts(preds, gts)?;
    preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| image_mdsc(p, g))
        .collect()
}

/// Scores pairs with the parallel path when the `parallel` feature is on.
pub fn score_pairs(preds: &[LabelMap], gts: &[LabelMap]) -> Result<Vec<ImageScore>> {
    #[cfg(feature = "parallel")]
    {
        score_pairs_parallel(preds, gts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        score_pairs_sequential(preds, gts)
    }
}

/// Accuracy, mean time and score for a whole test set.
pub fn dataset_score(image_scores: &[ImageScore], total_time_ms: f64) -> Result<DatasetScore> {
    let accuracy = dataset_accuracy(image_scores)?;
    let mean = mean_inference_time(total_time_ms, image_scores.len())?;
    Ok(DatasetScore {
        accuracy,
        mean_inference_time: mean,
        score: score(accuracy, mean)?,
        image_count: image_scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub mdsc: f64,
    pub class_union: BTreeSet<ClassId>,
    pub per_class_dice: BTreeMap<ClassId, f64>,
}

/// The JSON scoring report written by the referee and the offline scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub accuracy: f64,
    pub mean_inference_time_ms: f64,
    pub score: f64,
    pub per_image: Vec<ImageReport>,
}

impl ScoringReport {
    pub fn build(names: &[String], scores: Vec<ImageScore>, total_time_ms: f64) -> Result<Self> {
        if names.len() != scores.len() {
            return Err(MetricsError::CountMismatch {
                preds: scores.len(),
                gts: names.len(),
            });
        }
        let summary = dataset_score(&scores, total_time_ms)?;
        let per_image = names
            .iter()
            .zip(scores)
            .map(|(name, s)| ImageReport {
                name: name.clone(),
                mdsc: s.mdsc,
                class_union: s.class_union,
                per_class_dice: s.per_class_dice,
            })
            .collect();
        Ok(ScoringReport {
            accuracy: summary.accuracy,
            mean_inference_time_ms: summary.mean_inference_time,
            score: summary.score,
            per_image,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: u32, h: u32, px: Vec<u8>) -> LabelMap {
        LabelMap::new(w, h, px).unwrap()
    }

    fn cid(v: u8) -> ClassId {
        ClassId::new(v as i64).unwrap()
    }

    /// Set-definition oracle: for each class, count over every pixel.
    fn oracle_counts(pred: &LabelMap, gt: &LabelMap) -> BTreeMap<ClassId, ClassCounts> {
        let mut out = BTreeMap::new();
        for class in ClassId::all() {
            let c = class.get();
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..pred.len() {
                let (p, g) = (pred.pixels()[i], gt.pixels()[i]);
                if p == c && g == c {
                    tp += 1;
                } else if p == c {
                    fp += 1;
                } else if g == c {
                    fn_ += 1;
                }
            }
            if tp + fp + fn_ > 0 {
                out.insert(class, ClassCounts { tp, fp, fn_ });
            }
        }
        out
    }

    /// 4x4: rows 0-1 class 0, rows 2-3 class 1, two class-1 pixels predicted as 2.
    fn four_by_four() -> (LabelMap, LabelMap) {
        let gt: Vec<u8> = (0..16).map(|i| if i < 8 { 0 } else { 1 }).collect();
        let mut pred = gt.clone();
        pred[8] = 2;
        pred[9] = 2;
        (map(4, 4, pred), map(4, 4, gt))
    }

    #[test]
    fn union_examples() {
        let pred = map(2, 1, vec![0, 1]);
        let gt = map(2, 1, vec![0, 2]);
        assert_eq!(
            class_union(&pred, &gt).unwrap(),
            BTreeSet::from([cid(0), cid(1), cid(2)])
        );
        let same = map(2, 1, vec![3, 7]);
        assert_eq!(
            class_union(&same, &same).unwrap(),
            BTreeSet::from([cid(3), cid(7)])
        );
        let gt3 = map(4, 1, vec![0, 1, 2, 2]);
        let pred4 = map(4, 1, vec![0, 1, 2, 9]);
        assert_eq!(class_union(&pred4, &gt3).unwrap().len(), 4);
    }

    #[test]
    fn union_rejects_mismatched_dims() {
        let a = map(2, 1, vec![0, 0]);
        let b = map(1, 2, vec![0, 0]);
        assert!(matches!(
            class_union(&a, &b),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(confusion_counts(&a, &b).is_err());
        assert!(image_mdsc(&a, &b).is_err());
    }

    #[test]
    fn counts_identical_maps() {
        let m = LabelMap::filled(4, 4, cid(5)).unwrap();
        let counts = confusion_counts(&m, &m).unwrap();
        assert_eq!(counts.len(), 1);
        assert_eq!(
            counts.get(cid(5)).unwrap(),
            ClassCounts {
                tp: 16,
                fp: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn counts_four_by_four() {
        let (pred, gt) = four_by_four();
        let counts = confusion_counts(&pred, &gt).unwrap();
        let expect = [
            (0, ClassCounts { tp: 8, fp: 0, fn_: 0 }),
            (1, ClassCounts { tp: 6, fp: 0, fn_: 2 }),
            (2, ClassCounts { tp: 0, fp: 2, fn_: 0 }),
        ];
        for (c, k) in expect {
            assert_eq!(counts.get(cid(c)).unwrap(), k);
        }
        assert_eq!(counts.iter().collect::<BTreeMap<_, _>>(), oracle_counts(&pred, &gt));
    }

    #[test]
    fn dice_examples() {
        let (pred, gt) = four_by_four();
        let counts = confusion_counts(&pred, &gt).unwrap();
        assert!((dice_per_class(&counts, cid(1)).unwrap() - 12.0 / 14.0).abs() < 1e-15);
        assert_eq!(dice_per_class(&counts, cid(2)).unwrap(), 0.0);
        assert_eq!(dice_per_class(&counts, cid(0)).unwrap(), 1.0);
        assert_eq!(
            dice_per_class(&counts, cid(9)),
            Err(MetricsError::ClassNotInUnion(cid(9)))
        );
    }

    #[test]
    fn mdsc_four_by_four() {
        let (pred, gt) = four_by_four();
        let s = image_mdsc(&pred, &gt).unwrap();
        assert!((s.mdsc - 13.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn mdsc_identity_is_one() {
        let m = map(3, 1, vec![4, 5, 6]);
        assert_eq!(image_mdsc(&m, &m).unwrap().mdsc, 1.0);
    }

    #[test]
    fn spurious_class_penalty() {
        // 100 px class 0, 100 px class 1, 56 px class 2.
        let gt: Vec<u8> = (0..256)
            .map(|i| match i {
                0..100 => 0,
                100..200 => 1,
                _ => 2,
            })
            .collect();
        let mut pred = gt.clone();
        pred[0] = 3;
        let s = image_mdsc(&map(16, 16, pred), &map(16, 16, gt)).unwrap();
        assert_eq!(s.class_union.len(), 4);
        assert_eq!(s.per_class_dice[&cid(3)], 0.0);
        assert!((s.per_class_dice[&cid(0)] - 198.0 / 199.0).abs() < 1e-15);
        let expected = (198.0 / 199.0 + 2.0) / 4.0;
        assert!((s.mdsc - expected).abs() < 1e-15);
        assert!((0.745..=0.752).contains(&s.mdsc));
    }

    #[test]
    fn dataset_accuracy_examples() {
        let mk = |m: f64| ImageScore {
            class_union: BTreeSet::new(),
            per_class_dice: BTreeMap::new(),
            mdsc: m,
        };
        assert_eq!(dataset_accuracy(&[mk(1.0), mk(1.0), mk(1.0)]).unwrap(), 1.0);
        assert_eq!(dataset_accuracy(&[mk(0.75), mk(0.25)]).unwrap(), 0.5);
        assert_eq!(dataset_accuracy(&[]), Err(MetricsError::EmptyDataset));
    }

    #[test]
    fn mean_time_examples() {
        assert_eq!(mean_inference_time(120_000.0, 600).unwrap(), 200.0);
        assert_eq!(mean_inference_time(0.0, 600).unwrap(), 0.0);
        assert!((mean_inference_time(64_860.0, 600).unwrap() - 108.1).abs() < 1e-12);
        assert_eq!(mean_inference_time(1.0, 0), Err(MetricsError::ZeroImages));
        assert!(mean_inference_time(-1.0, 3).is_err());
    }

    #[test]
    fn score_examples() {
        assert!((score(0.50, 108.1).unwrap() - 4.625).abs() < 1e-3);
        assert!((score(0.601, 67.0).unwrap() - 8.970).abs() < 1e-3);
        assert_eq!(score(1.0, 1000.0).unwrap(), 1.0);
        assert_eq!(score(0.5, 0.0), Err(MetricsError::NonPositiveTime(0.0)));
        assert!(score(1.5, 10.0).is_err());
    }

    #[test]
    fn report_serializes_expected_fields() {
        let (pred, gt) = four_by_four();
        let scores = vec![image_mdsc(&pred, &gt).unwrap()];
        let report = ScoringReport::build(&["a".into()], scores, 50.0).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in ["accuracy", "mean_inference_time_ms", "score", "per_image"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let img = &json["per_image"][0];
        assert_eq!(img["name"], "a");
        assert_eq!(img["class_union"], serde_json::json!([0, 1, 2]));
        assert_eq!(img["per_class_dice"]["2"], 0.0);
        let back: ScoringReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let (pred, gt) = four_by_four();
        let preds = vec![pred.clone(), gt.clone(), pred];
        let gts = vec![gt.clone(), gt.clone(), gt];
        assert_eq!(
            score_pairs_parallel(&preds, &gts).unwrap(),
            score_pairs_sequential(&preds, &gts).unwrap()
        );
        assert!(score_pairs(&preds[..1], &gts).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (1u32..=16, 1u32..=16, 1u8..=14).prop_flat_map(|(w, h, k)| {
            let n = (w * h) as usize;
            (
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(0..k, n),
            )
                .prop_map(move |(p, g)| (map(w, h, p), map(w, h, g)))
        })
    }

    proptest! {
        #[test]
        fn counts_match_oracle((pred, gt) in arb_pair()) {
            let counts = confusion_counts(&pred, &gt).unwrap();
            prop_assert_eq!(counts.iter().collect::<BTreeMap<_, _>>(), oracle_counts(&pred, &gt));
        }

        #[test]
        fn values_in_unit_range((pred, gt) in arb_pair()) {
            let s = image_mdsc(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.mdsc));
            for d in s.per_class_dice.values() {
                prop_assert!((0.0..=1.0).contains(d));
            }
        }
    }
}
