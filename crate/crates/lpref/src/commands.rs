//! Offline operator commands.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context};
use lpref_core::labelmap::decode_label_map;
use lpref_core::metrics::{score_pairs, ScoringReport};
use lpref_core::runner::read_dir_files;

fn png_files(dir: &Path) -> anyhow::Result<Vec<(String, Vec<u8>)>> {
    let files = read_dir_files(dir).with_context(|| format!("reading {}", dir.display()))?;
    Ok(files.into_iter().filter(|(n, _)| n.ends_with(".png")).collect())
}

/// Scores every prediction in `pred_dir` against the same-named map in
/// `gt_dir` and writes the report to `out_path`.
pub fn score(pred_dir: &Path, gt_dir: &Path, total_time_ms: f64, out_path: &Path) -> anyhow::Result<ScoringReport> {
    let preds = png_files(pred_dir)?;
    let gts = png_files(gt_dir)?;
    let pred_names: BTreeSet<&String> = preds.iter().map(|(n, _)| n).collect();
    let gt_names: BTreeSet<&String> = gts.iter().map(|(n, _)| n).collect();
    if let Some(missing) = gt_names.difference(&pred_names).next() {
        bail!("missing prediction {missing} in {}", pred_dir.display());
    }
    if let Some(extra) = pred_names.difference(&gt_names).next() {
        bail!("prediction {extra} has no ground truth in {}", gt_dir.display());
    }
    if gts.is_empty() {
        bail!("no .png label maps in {}", gt_dir.display());
    }

    let decode = |files: &[(String, Vec<u8>)], what: &str| {
        files
            .iter()
            .map(|(n, b)| decode_label_map(b).with_context(|| format!("{what} {n}")))
            .collect::<anyhow::Result<Vec<_>>>()
    };
    let pred_maps = decode(&preds, "prediction")?;
    let gt_maps = decode(&gts, "ground truth")?;
    let names: Vec<String> = gts.into_iter().map(|(n, _)| n).collect();
    let scores = score_pairs(&pred_maps, &gt_maps)?;
    let report = ScoringReport::build(&names, scores, total_time_ms)?;
    std::fs::write(out_path, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing {}", out_path.display()))?;
    Ok(report)
}
