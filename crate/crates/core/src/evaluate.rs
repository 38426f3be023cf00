//! Scoring directories of probability maps against ground-truth masks.
//!
//! Files are paired by [`dataset_id`], so `21_training_prob_vessel.png`,
//! `21_manual1.png` and `21_training_mask.png` all belong to image `21`.
//!
//! Binary tasks read `*_prob_vessel` or `*_prob_centerline`. The joint task
//! reads `*_prob_class1` and `*_prob_class2` and reports the macro average of
//! two one-vs-rest problems: vessel-but-not-centerline, and centerline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::dataset::{centerline_for, dataset_id, CachePolicy};
use crate::imaging::raster::{load_mask, load_real_map, SUPPORTED_EXTENSIONS};
use crate::map::BinaryMap;
use crate::metrics::{ImageScores, MetricsReport};
use crate::model::Task;

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Files of `dir` keyed by id; `keep` filters by file name.
fn index(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for path in image_files(dir)? {
        let name = file_name(&path);
        if !keep(&name) {
            continue;
        }
        if let Some(prev) = out.insert(dataset_id(&name), path.clone()) {
            return Err(Error::Data(format!(
                "{} and {} in {} map to the same image id",
                file_name(&prev),
                name,
                dir.display()
            )));
        }
    }
    Ok(out)
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Probability-map suffixes read for a task.
pub fn prediction_suffixes(task: Task) -> &'static [&'static str] {
    match task {
        Task::Vessel => &["_prob_vessel"],
        Task::Centerline => &["_prob_centerline"],
        Task::Both => &["_prob_class1", "_prob_class2"],
    }
}

fn missing(what: &str, ids: Vec<&String>) -> Error {
    let list: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    Error::Data(format!("{what}: {}", list.join(", ")))
}

/// Scores every prediction in `pred_dir` against `gt_dir`, restricted to the
/// matching mask of `fov_dir` when given, thresholding at `threshold`.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    fov_dir: Option<&Path>,
    task: Task,
    threshold: f32,
) -> Result<MetricsReport> {
    let suffixes = prediction_suffixes(task);
    let preds: Vec<BTreeMap<String, PathBuf>> =
        suffixes.iter().map(|suffix| index(pred_dir, |n| stem(n).ends_with(suffix))).collect::<Result<_>>()?;
    let gts = index(gt_dir, |n| !stem(n).ends_with(".centerline"))?;
    let fovs = fov_dir.map(|d| index(d, |_| true)).transpose()?;

    if preds[0].is_empty() {
        return Err(Error::Data(format!("no {} maps found in {}", suffixes.join(" / "), pred_dir.display())));
    }
    for (suffix, map) in suffixes.iter().zip(&preds) {
        let lacking: Vec<&String> = preds[0].keys().filter(|id| !map.contains_key(*id)).collect();
        if !lacking.is_empty() {
            return Err(missing(&format!("no {suffix} map for ids"), lacking));
        }
    }
    let no_gt: Vec<&String> = preds[0].keys().filter(|id| !gts.contains_key(*id)).collect();
    if !no_gt.is_empty() {
        return Err(missing(&format!("no ground truth in {} for ids", gt_dir.display()), no_gt));
    }
    if let Some(fovs) = &fovs {
        let no_fov: Vec<&String> = preds[0].keys().filter(|id| !fovs.contains_key(*id)).collect();
        if !no_fov.is_empty() {
            return Err(missing("no field-of-view mask for ids", no_fov));
        }
    }

    let mut scores = Vec::with_capacity(preds[0].len());
    for id in preds[0].keys() {
        let gt_path = &gts[id];
        let vessel = load_mask(gt_path)?;
        let fov = fovs.as_ref().map(|f| load_mask(&f[id])).transpose()?;
        let centre = || centerline_for(gt_path, &vessel, CachePolicy::ReadOnly).map(|(c, _)| c);
        let targets: Vec<BinaryMap> = match task {
            Task::Vessel => vec![vessel.clone()],
            Task::Centerline => vec![centre()?],
            Task::Both => {
                let c = centre()?;
                let thick = BinaryMap::from_vec(
                    vessel.height(),
                    vessel.width(),
                    vessel.data().iter().zip(c.data()).map(|(&v, &c)| v && !c).collect(),
                )?;
                vec![thick, c]
            }
        };
        let per_class = preds
            .iter()
            .zip(&targets)
            .map(|(map, gt)| {
                let prob = load_real_map(&map[id])?;
                ImageScores::compute(id.clone(), &prob, gt, fov.as_ref(), threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        scores.push(if per_class.len() == 1 {
            per_class.into_iter().next().expect("one class")
        } else {
            ImageScores::mean(id.clone(), &per_class)?
        });
    }
    MetricsReport::new(task.as_str(), threshold, scores)
}
