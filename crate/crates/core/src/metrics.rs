//! Pixel scores: precision, recall, F1, average maximum Dice, Cohen's kappa.
//!
//! Binarization is `p >= threshold` everywhere. Empty denominators follow fixed
//! conventions instead of erroring: precision (recall) is 1 when nothing was
//! predicted (nothing was there to find), F1 is 0 when both are 0, and kappa is
//! 1 for perfect single-class agreement and 0 otherwise when chance agreement is 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{BinaryMap, RealMap};

/// Number of points on the Dice threshold grid `0.01, 0.02, …, 0.99`.
pub const DICE_GRID_POINTS: usize = 99;
/// Default binarization threshold for precision, recall, F1 and kappa.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// `k / 100` for `k = 1..=99`.
pub fn dice_grid() -> impl Iterator<Item = f64> {
    (1..=DICE_GRID_POINTS).map(|k| k as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        precision_recall_f1(*self).2
    }

    /// `2|A∩B| / (|A| + |B|)`; 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

fn ratio_or_one(num: u64, denom: u64) -> f64 {
    if denom == 0 {
        1.0
    } else {
        num as f64 / denom as f64
    }
}

/// Counts over pixels inside `fov` (all pixels when absent).
pub fn confusion(pred: &BinaryMap, gt: &BinaryMap, fov: Option<&BinaryMap>) -> Result<ConfusionCounts> {
    pred.ensure_same_dims(gt, "prediction and ground truth differ in size")?;
    if let Some(f) = fov {
        pred.ensure_same_dims(f, "prediction and field-of-view mask differ in size")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if fov.is_some_and(|f| !f.data()[i]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision_recall_f1(c: ConfusionCounts) -> (f64, f64, f64) {
    let p = c.precision();
    let r = c.recall();
    (p, r, harmonic(p, r))
}

/// `2pr / (p + r)`, or 0 when both are 0.
pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn cohens_kappa(c: ConfusionCounts) -> Result<f64> {
    let n = c.total();
    if n == 0 {
        return Err(Error::Data("kappa of zero pixels".into()));
    }
    let n = n as f64;
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let p_o = (tp + tn) / n;
    let p_e = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    if p_e >= 1.0 {
        return Ok(if p_o >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Index of the last grid threshold `t_k = k/100` with `t_k <= p` (0 when none).
fn grid_rank(p: f32) -> usize {
    let p = p as f64;
    let mut k = ((p * 100.0).floor().max(0.0) as usize).min(DICE_GRID_POINTS);
    while k < DICE_GRID_POINTS && (k + 1) as f64 / 100.0 <= p {
        k += 1;
    }
    while k > 0 && k as f64 / 100.0 > p {
        k -= 1;
    }
    k
}

/// Dice at every grid threshold; entry `k - 1` is threshold `k / 100`.
pub fn dice_curve(prob: &RealMap, gt: &BinaryMap, fov: Option<&BinaryMap>) -> Result<Vec<f64>> {
    prob.ensure_same_dims(gt, "probability map and ground truth differ in size")?;
    if let Some(f) = fov {
        prob.ensure_same_dims(f, "probability map and field-of-view mask differ in size")?;
    }
    // positives[k] / negatives[k]: in-FOV pixels of each gt class whose rank is exactly k.
    let mut positives = vec![0u64; DICE_GRID_POINTS + 1];
    let mut negatives = vec![0u64; DICE_GRID_POINTS + 1];
    let mut gt_total = 0u64;
    for (i, (&p, &g)) in prob.data().iter().zip(gt.data()).enumerate() {
        if fov.is_some_and(|f| !f.data()[i]) {
            continue;
        }
        let k = grid_rank(p);
        if g {
            positives[k] += 1;
            gt_total += 1;
        } else {
            negatives[k] += 1;
        }
    }
    // A pixel of rank r is predicted positive at every threshold k <= r.
    let mut curve = vec![0.0; DICE_GRID_POINTS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (1..=DICE_GRID_POINTS).rev() {
        tp += positives[k];
        fp += negatives[k];
        let c = ConfusionCounts { tp, fp, fn_: gt_total - tp, tn: 0 };
        curve[k - 1] = c.dice();
    }
    Ok(curve)
}

/// Best Dice over the threshold grid and the (lowest) threshold achieving it.
pub fn max_dice(prob: &RealMap, gt: &BinaryMap, fov: Option<&BinaryMap>) -> Result<(f64, f64)> {
    let curve = dice_curve(prob, gt, fov)?;
    let (best_k, best) = curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
    Ok((best, (best_k + 1) as f64 / 100.0))
}

/// Mean over images of each image's maximum grid Dice, plus the per-image best thresholds.
pub fn average_max_dice(
    probs: &[RealMap],
    gts: &[BinaryMap],
    fovs: Option<&[Option<BinaryMap>]>,
) -> Result<(f64, Vec<f64>)> {
    if probs.is_empty() {
        return Err(Error::Data("average max Dice of an empty image list".into()));
    }
    if probs.len() != gts.len() || fovs.is_some_and(|f| f.len() != probs.len()) {
        return Err(Error::Data("probability, ground-truth and FOV lists differ in length".into()));
    }
    let mut sum = 0.0;
    let mut thresholds = Vec::with_capacity(probs.len());
    for (i, (p, g)) in probs.iter().zip(gts).enumerate() {
        let fov = fovs.and_then(|f| f[i].as_ref());
        let (best, t) = max_dice(p, g, fov)?;
        sum += best;
        thresholds.push(t);
    }
    Ok((sum / probs.len() as f64, thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub max_dice: f64,
    pub best_threshold: f64,
    pub kappa: f64,
}

impl ImageScores {
    /// All scores of one probability map against its ground truth.
    pub fn compute(
        id: impl Into<String>,
        prob: &RealMap,
        gt: &BinaryMap,
        fov: Option<&BinaryMap>,
        threshold: f32,
    ) -> Result<Self> {
        let counts = confusion(&prob.threshold(threshold), gt, fov)?;
        let (precision, recall, f1) = precision_recall_f1(counts);
        let (max_dice, best_threshold) = max_dice(prob, gt, fov)?;
        Ok(ImageScores { id: id.into(), precision, recall, f1, max_dice, best_threshold, kappa: cohens_kappa(counts)? })
    }

    /// Field-wise mean, except that F1 is the harmonic mean of the averaged
    /// precision and recall, as in published summary tables.
    pub fn mean(id: impl Into<String>, scores: &[ImageScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("no scores to average".into()));
        }
        let n = scores.len() as f64;
        let avg = |f: fn(&ImageScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let (precision, recall) = (avg(|s| s.precision), avg(|s| s.recall));
        Ok(ImageScores {
            id: id.into(),
            precision,
            recall,
            f1: harmonic(precision, recall),
            max_dice: avg(|s| s.max_dice),
            best_threshold: avg(|s| s.best_threshold),
            kappa: avg(|s| s.kappa),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub threshold_used: f64,
    pub per_image: Vec<ImageScores>,
    pub aggregate: ImageScores,
}

impl MetricsReport {
    /// Sorts images by id and averages them.
    pub fn new(task: impl Into<String>, threshold: f32, mut per_image: Vec<ImageScores>) -> Result<Self> {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregate = ImageScores::mean("aggregate", &per_image)?;
        Ok(MetricsReport { task: task.into(), threshold_used: threshold as f64, per_image, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed metrics report: {e}")))
    }

    /// Fixed-width table with one row per image and a final aggregate row.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>17} {:>9}\n",
            "Image", "Precision", "Recall", "F1 Score", "Average Max. Dice", "Kappa"
        );
        let row = |s: &ImageScores| {
            format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>17.4} {:>9.4}\n",
                s.id, s.precision, s.recall, s.f1, s.max_dice, s.kappa
            )
        };
        for s in &self.per_image {
            out.push_str(&row(s));
        }
        out.push_str(&"-".repeat(82));
        out.push('\n');
        out.push_str(&row(&self.aggregate));
        out
    }
}
