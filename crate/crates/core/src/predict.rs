//! Turning class probabilities into output files, and fusing several models.
//!
//! Binary models write `<stem>_prob_vessel.png` (or `_prob_centerline`) and
//! `<stem>_mask.png`. Three-class models additionally write the per-class
//! maps `<stem>_prob_class{0,1,2}.png` and the argmax image `<stem>_labels.png`;
//! their vessel probability is `P(vessel) + P(centerline)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::raster::{save_labels, save_mask, save_real_map};
use crate::map::{BinaryMap, Map, RealMap};
use crate::model::{Model, Task};
use crate::tensor::Tensor;

/// Sample depth of written probability maps.
pub const PROBABILITY_BITS: u8 = 16;

/// A structure a model can emit a probability for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Vessel,
    Centerline,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Vessel => "vessel",
            Target::Centerline => "centerline",
        }
    }

    pub fn suffix(self) -> String {
        format!("_prob_{}", self.as_str())
    }
}

/// Targets a task provides, in output order.
pub fn targets(task: Task) -> &'static [Target] {
    match task {
        Task::Vessel => &[Target::Vessel],
        Task::Centerline => &[Target::Centerline],
        Task::Both => &[Target::Vessel, Target::Centerline],
    }
}

/// Probability of `target` from per-class maps of a `task` model.
pub fn target_probability(task: Task, classes: &[RealMap], target: Target) -> Result<RealMap> {
    if classes.len() != task.num_classes() {
        return Err(Error::Shape(format!("{} class maps for task {task}", classes.len())));
    }
    match (task, target) {
        (Task::Vessel, Target::Vessel) | (Task::Centerline, Target::Centerline) => Ok(classes[1].clone()),
        (Task::Both, Target::Centerline) => Ok(classes[2].clone()),
        (Task::Both, Target::Vessel) => {
            let data = classes[1].data().iter().zip(classes[2].data()).map(|(a, b)| (a + b).min(1.0)).collect();
            RealMap::from_vec(classes[1].height(), classes[1].width(), data)
        }
        _ => Err(Error::Config(format!("a {task} model has no {} probability", target.as_str()))),
    }
}

/// Pixelwise arithmetic mean.
pub fn mean_map(maps: &[RealMap]) -> Result<RealMap> {
    let first = maps.first().ok_or_else(|| Error::Config("nothing to average".into()))?;
    for m in &maps[1..] {
        first.ensure_same_dims(m, "fused map")?;
    }
    let n = maps.len() as f64;
    let data = (0..first.len()).map(|i| (maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32).collect();
    RealMap::from_vec(first.height(), first.width(), data)
}

/// `p ≥ threshold`, restricted to the field of view when given.
pub fn threshold_within(map: &RealMap, threshold: f32, fov: Option<&BinaryMap>) -> Result<BinaryMap> {
    let mut mask = map.threshold(threshold);
    if let Some(fov) = fov {
        mask.ensure_same_dims(fov, "FOV mask")?;
        for (m, &inside) in mask.data_mut().iter_mut().zip(fov.data()) {
            *m &= inside;
        }
    }
    Ok(mask)
}

/// Index of the most probable class per pixel; ties go to the lower class.
pub fn argmax_labels(classes: &[RealMap]) -> Result<Map<u8>> {
    let first = classes.first().ok_or_else(|| Error::Shape("no class maps".into()))?;
    let data = (0..first.len())
        .map(|i| {
            let mut best = 0;
            for (k, m) in classes.iter().enumerate().skip(1) {
                if m.data()[i] > classes[best].data()[i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Map::from_vec(first.height(), first.width(), data)
}

/// Names of the files [`write_prediction`] produces for `stem`.
pub fn output_names(stem: &str, task: Task) -> Vec<String> {
    let mut names: Vec<String> = targets(task).iter().map(|t| format!("{stem}{}.png", t.suffix())).collect();
    names.push(format!("{stem}_mask.png"));
    if task == Task::Both {
        names.extend((0..3).map(|k| format!("{stem}_prob_class{k}.png")));
        names.push(format!("{stem}_labels.png"));
    }
    names
}

/// Runs `model` on a `(C, H, W)` image and writes every output under `dir`.
pub fn write_prediction(
    model: &Model,
    image: &Tensor,
    dir: &Path,
    stem: &str,
    threshold: f32,
    fov: Option<&BinaryMap>,
) -> Result<()> {
    let classes = model.predict_maps(image)?;
    let task = model.task();
    let mut primary = None;
    for &target in targets(task) {
        let p = target_probability(task, &classes, target)?;
        save_real_map(dir.join(format!("{stem}{}.png", target.suffix())), &p, PROBABILITY_BITS)?;
        primary.get_or_insert(p);
    }
    let primary = primary.expect("every task has a target");
    save_mask(dir.join(format!("{stem}_mask.png")), &threshold_within(&primary, threshold, fov)?)?;
    if task == Task::Both {
        for (k, m) in classes.iter().enumerate() {
            save_real_map(dir.join(format!("{stem}_prob_class{k}.png")), m, PROBABILITY_BITS)?;
        }
        save_labels(dir.join(format!("{stem}_labels.png")), &argmax_labels(&classes)?)?;
    }
    Ok(())
}

/// Targets every member provides; an empty intersection is a configuration error.
pub fn shared_targets(tasks: &[Task]) -> Result<Vec<Target>> {
    if tasks.len() < 2 {
        return Err(Error::Config(format!("fusion needs at least two models, got {}", tasks.len())));
    }
    let shared: Vec<Target> =
        targets(tasks[0]).iter().copied().filter(|t| tasks.iter().all(|&task| targets(task).contains(t))).collect();
    if shared.is_empty() {
        let names: Vec<&str> = tasks.iter().map(|t| t.as_str()).collect();
        return Err(Error::Config(format!("models with tasks [{}] share no output class to fuse", names.join(", "))));
    }
    Ok(shared)
}

/// Mean-probability ensemble of `models` on one image, one map per shared target.
pub fn fuse_models(models: &[Model], image: &Tensor) -> Result<Vec<(Target, RealMap)>> {
    let tasks: Vec<Task> = models.iter().map(Model::task).collect();
    let shared = shared_targets(&tasks)?;
    let per_model: Vec<Vec<RealMap>> = models.iter().map(|m| m.predict_maps(image)).collect::<Result<_>>()?;
    shared
        .into_iter()
        .map(|target| {
            let maps: Vec<RealMap> = per_model
                .iter()
                .zip(&tasks)
                .map(|(classes, &task)| target_probability(task, classes, target))
                .collect::<Result<_>>()?;
            Ok((target, mean_map(&maps)?))
        })
        .collect()
}

/// Fuses `models` on an image and writes `<stem>_prob_<target>.png` per shared
/// target plus `<stem>_mask.png` from the first of them.
pub fn write_fusion(
    models: &[Model],
    image: &Tensor,
    dir: &Path,
    stem: &str,
    threshold: f32,
    fov: Option<&BinaryMap>,
) -> Result<()> {
    let fused = fuse_models(models, image)?;
    for (target, map) in &fused {
        save_real_map(dir.join(format!("{stem}{}.png", target.suffix())), map, PROBABILITY_BITS)?;
    }
    save_mask(dir.join(format!("{stem}_mask.png")), &threshold_within(&fused[0].1, threshold, fov)?)
}
