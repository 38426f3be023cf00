//! End-to-end training of the extraction network and mesh head.
//!
//! Each step samples square patches, zeroes loss weights outside the field of
//! view and near patch edges that cut through the image, scales the rest by
//! inverse class frequency, classifies a random subset of the remaining pixels,
//! and applies one optimizer update. The whole trajectory is a function of the
//! seed, the configuration and the data.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::imaging::checkpoint::{save_checkpoint, Checkpoint};
use crate::imaging::dataset::LabeledImage;
use crate::map::BinaryMap;
use crate::model::{Model, Normalization, Task};
use crate::tensor::Tensor;

/// Loss above this multiple of the first loss counts as diverging.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverging steps tolerated before aborting.
const DIVERGENCE_PATIENCE: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub momentum: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Pixels classified (and back-propagated) per step.
    pub batch_pixels: usize,
    pub patch_size: usize,
    pub patches_per_step: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    /// Overrides `epochs × patches_per_epoch / patches_per_step`.
    pub max_steps: Option<u64>,
    /// Per-class loss weights; inverse class frequency of the training split when absent.
    pub class_weights: Option<Vec<f32>>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Loss-free band along patch edges that lie inside the image.
    pub border: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_pixels: 1024,
            patch_size: 64,
            patches_per_step: 4,
            patches_per_epoch: 2000,
            epochs: 40,
            max_steps: None,
            class_weights: None,
            checkpoint_every: 1000,
            border: 11,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if self.patch_size < 23 {
            return fail(format!("patch_size must be at least 23, got {}", self.patch_size));
        }
        if self.batch_pixels == 0 || self.patches_per_step == 0 {
            return fail("batch_pixels and patches_per_step must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return fail("momentum and betas must lie in [0, 1)".into());
        }
        if self.total_steps() == 0 {
            return fail("configuration trains for zero steps".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.max_steps.unwrap_or((self.epochs * self.patches_per_epoch / self.patches_per_step.max(1)) as u64)
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Config("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Per-parameter optimizer moments, flattened in parameter declaration order.
///
/// SGD keeps its velocity in `first`; Adam uses both buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => OptimizerState { first: vec![0.0; params], second: Vec::new() },
            OptimizerKind::Adam => OptimizerState { first: vec![0.0; params], second: vec![0.0; params] },
        }
    }

    pub fn len(&self) -> usize {
        self.first.len() + self.second.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub running_loss: f64,
    pub initial_loss: Option<f64>,
    pub diverging_steps: u64,
    pub optimizer: OptimizerKind,
    pub rng: RngState,
    #[serde(skip)]
    pub moments: OptimizerState,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, params: usize) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            running_loss: 0.0,
            initial_loss: None,
            diverging_steps: 0,
            optimizer: cfg.optimizer,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(cfg.seed)),
            moments: OptimizerState::new(cfg.optimizer, params),
        }
    }
}

/// One optimizer update from the gradients held in `params`.
///
/// SGD with momentum: `v ← μv − ηg`, `p ← p + v`. Adam: bias-corrected first
/// and second moments, `p ← p − η·m̂ / (√v̂ + ε)`, with `step` counting from 1.
pub fn apply_optimizer_step(
    params: &mut ParamStore,
    moments: &mut OptimizerState,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let expected = params.scalar_count();
    let needs_second = cfg.optimizer == OptimizerKind::Adam;
    if moments.first.len() != expected || (needs_second && moments.second.len() != expected) {
        return Err(Error::State(format!(
            "optimizer state holds {} moments for {expected} parameters",
            moments.first.len()
        )));
    }
    let lr = cfg.learning_rate;
    let mut offset = 0;
    for p in params.iter_mut() {
        let len = p.value.len();
        let grad: Vec<f32> = p.value.grad().map_or_else(|| vec![0.0; len], <[f32]>::to_vec);
        let values = p.value.values_mut();
        match cfg.optimizer {
            OptimizerKind::SgdMomentum => {
                let vel = &mut moments.first[offset..offset + len];
                for ((v, x), g) in vel.iter_mut().zip(values.iter_mut()).zip(&grad) {
                    *v = cfg.momentum * *v - lr * g;
                    *x += *v;
                }
            }
            OptimizerKind::Adam => {
                let t = step.max(1) as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                let m = &mut moments.first[offset..offset + len];
                let s = &mut moments.second[offset..offset + len];
                for i in 0..len {
                    let g = grad[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[i] / c1;
                    let shat = s[i] / c2;
                    values[i] -= lr * mhat / (shat.sqrt() + cfg.epsilon);
                }
            }
        }
        offset += len;
    }
    Ok(())
}

/// A training image prepared for sampling.
#[derive(Debug, Clone)]
struct Example {
    /// Normalized `(3, H, W)`.
    image: Tensor,
    labels: Vec<u8>,
    fov: Option<BinaryMap>,
    height: usize,
    width: usize,
}

/// Class index per pixel for a task; centerline wins over vessel in the joint task.
pub fn task_labels(item: &LabeledImage, task: Task) -> Vec<u8> {
    let vessel = item.vessel_mask.data();
    match task {
        Task::Vessel => vessel.iter().map(|&v| v as u8).collect(),
        Task::Centerline => item.centerline().data().iter().map(|&v| v as u8).collect(),
        Task::Both => {
            let center = item.centerline();
            vessel
                .iter()
                .zip(center.data())
                .map(|(&v, &c)| {
                    if c {
                        2
                    } else if v {
                        1
                    } else {
                        0
                    }
                })
                .collect()
        }
    }
}

/// Inverse-frequency weights `N / (K · n_k)` over field-of-view pixels; absent classes get 0.
pub fn inverse_frequency_weights(images: &[LabeledImage], task: Task) -> Vec<f32> {
    let k = task.num_classes();
    let mut counts = vec![0u64; k];
    for item in images {
        let labels = task_labels(item, task);
        for (i, &l) in labels.iter().enumerate() {
            if item.fov_mask.as_ref().is_none_or(|f| f.data()[i]) {
                counts[l as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| if c == 0 { 0.0 } else { (total as f64 / (k as f64 * c as f64)) as f32 }).collect()
}

/// A batch of patches with per-pixel labels and loss weights, pixels indexed
/// `(patch * P + y) * P + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `(B, 3, P, P)`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
}

impl PatchBatch {
    /// Indices of pixels with nonzero loss weight.
    pub fn active_pixels(&self) -> Vec<usize> {
        self.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    task: Task,
    examples: Vec<Example>,
    class_weights: Vec<f32>,
}

impl TrainingSet {
    /// Normalizes images with `norm` and derives labels for `task`.
    pub fn new(
        images: &[LabeledImage],
        task: Task,
        norm: &Normalization,
        class_weights: Option<Vec<f32>>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let class_weights = match class_weights {
            Some(w) if w.len() != task.num_classes() => {
                return Err(Error::Config(format!("{} class weights for {} classes", w.len(), task.num_classes())))
            }
            Some(w) => w,
            None => inverse_frequency_weights(images, task),
        };
        let examples = images
            .iter()
            .map(|item| {
                let (height, width) = item.dims();
                Ok(Example {
                    image: norm.apply(&item.image)?.reshape(&[3, height, width])?,
                    labels: task_labels(item, task),
                    fov: item.fov_mask.clone(),
                    height,
                    width,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet { task, examples, class_weights })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn class_weights(&self) -> &[f32] {
        &self.class_weights
    }

    /// Draws `cfg.patches_per_step` patches uniformly over images and positions.
    pub fn sample_patches<R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Result<PatchBatch> {
        let p = cfg.patch_size;
        let b = cfg.patches_per_step;
        let mut images = Vec::with_capacity(b * 3 * p * p);
        let mut labels = Vec::with_capacity(b * p * p);
        let mut weights = Vec::with_capacity(b * p * p);
        for _ in 0..b {
            let ex = &self.examples[rng.random_range(0..self.examples.len())];
            if p > ex.height || p > ex.width {
                return Err(Error::Config(format!(
                    "patch_size {p} exceeds a {}×{} training image",
                    ex.height, ex.width
                )));
            }
            let y0 = rng.random_range(0..=ex.height - p);
            let x0 = rng.random_range(0..=ex.width - p);
            for c in 0..3 {
                let plane = ex.image.plane(0, c);
                for y in 0..p {
                    images.extend_from_slice(&plane[(y0 + y) * ex.width + x0..][..p]);
                }
            }
            let band = cfg.border;
            // Bands apply only along edges that cut through the image.
            let (top, bottom) = (if y0 > 0 { band } else { 0 }, if y0 + p < ex.height { band } else { 0 });
            let (left, right) = (if x0 > 0 { band } else { 0 }, if x0 + p < ex.width { band } else { 0 });
            for y in 0..p {
                for x in 0..p {
                    let idx = (y0 + y) * ex.width + x0 + x;
                    let label = ex.labels[idx] as usize;
                    let inside = y >= top && y + bottom < p && x >= left && x + right < p;
                    let in_fov = ex.fov.as_ref().is_none_or(|f| f.data()[idx]);
                    labels.push(label);
                    weights.push(if inside && in_fov { self.class_weights[label] } else { 0.0 });
                }
            }
        }
        Ok(PatchBatch { images: Tensor::new(&[b, 3, p, p], images)?, labels, weights })
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f32,
    pub elapsed_ms: u128,
}

pub struct Trainer {
    model: Model,
    data: TrainingSet,
    cfg: TrainConfig,
    state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fits input normalization on `images`, stores it in the model, and starts from step 0.
    pub fn new(mut model: Model, images: &[LabeledImage], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let norm = Normalization::fit(images.iter().map(|i| &i.image))?;
        model.set_normalization(norm)?;
        let state = TrainState::new(&cfg, model.params().scalar_count());
        Self::assemble(model, images, cfg, state)
    }

    /// Continues from a saved state; the model keeps its stored normalization.
    pub fn resume(model: Model, images: &[LabeledImage], cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.optimizer != cfg.optimizer {
            return Err(Error::Config("checkpoint optimizer differs from the configuration".into()));
        }
        Self::assemble(model, images, cfg, state)
    }

    fn assemble(model: Model, images: &[LabeledImage], cfg: TrainConfig, state: TrainState) -> Result<Self> {
        let data = TrainingSet::new(images, model.task(), model.normalization(), cfg.class_weights.clone())?;
        let rng = state.rng.restore()?;
        Ok(Trainer { model, data, cfg, state, rng })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn into_parts(mut self) -> (Model, TrainState) {
        self.state.rng = RngState::capture(&self.rng);
        (self.model, self.state)
    }

    /// Model and full training state as a checkpoint.
    pub fn checkpoint(&self, tag: Option<&str>) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        Checkpoint { model: self.model.clone(), state: Some(state), tag: tag.map(str::to_string) }
    }

    /// Weighted loss of a fixed batch under the current weights.
    pub fn batch_loss(&self, batch: &PatchBatch) -> Result<f64> {
        let pixels = batch.active_pixels();
        if pixels.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(batch.images.clone());
        let labels: Vec<usize> = pixels.iter().map(|&i| batch.labels[i]).collect();
        let weights: Vec<f32> = pixels.iter().map(|&i| batch.weights[i]).collect();
        let logits = self.model.forward_logits(&mut g, x, Some(pixels))?;
        let loss = g.softmax_cross_entropy(logits, &labels, Some(&weights))?;
        Ok(g.value(loss).values()[0] as f64)
    }

    /// Samples a batch and applies one optimizer update; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.data.sample_patches(&self.cfg, &mut self.rng)?;
        let mut pixels = batch.active_pixels();
        if pixels.len() > self.cfg.batch_pixels {
            let mut chosen = index::sample(&mut self.rng, pixels.len(), self.cfg.batch_pixels).into_vec();
            chosen.sort_unstable();
            pixels = chosen.into_iter().map(|i| pixels[i]).collect();
        }
        let params = self.model.params_mut();
        params.zero_grads();
        let loss = if pixels.is_empty() {
            0.0
        } else {
            let labels: Vec<usize> = pixels.iter().map(|&i| batch.labels[i]).collect();
            let weights: Vec<f32> = pixels.iter().map(|&i| batch.weights[i]).collect();
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let logits = self.model.forward_logits(&mut g, x, Some(pixels))?;
            let loss_node = g.softmax_cross_entropy(logits, &labels, Some(&weights))?;
            let loss = g.value(loss_node).values()[0] as f64;
            if !loss.is_finite() {
                return Err(self.abort(format!("loss became {loss}")));
            }
            g.backward(loss_node, self.model.params_mut())?;
            loss
        };
        let next = self.state.step + 1;
        apply_optimizer_step(self.model.params_mut(), &mut self.state.moments, next, &self.cfg)?;
        self.state.step = next;
        self.state.epoch = next * self.cfg.patches_per_step as u64 / self.cfg.patches_per_epoch.max(1) as u64;
        let initial = *self.state.initial_loss.get_or_insert(loss);
        self.state.running_loss = if next == 1 { loss } else { 0.98 * self.state.running_loss + 0.02 * loss };
        if initial > 0.0 && loss > DIVERGENCE_FACTOR * initial {
            self.state.diverging_steps += 1;
            if self.state.diverging_steps >= DIVERGENCE_PATIENCE {
                return Err(self.abort(format!(
                    "loss {loss:.4} exceeded {DIVERGENCE_FACTOR}× the initial {initial:.4} for {DIVERGENCE_PATIENCE} consecutive steps"
                )));
            }
        } else {
            self.state.diverging_steps = 0;
        }
        Ok(loss)
    }

    fn abort(&self, reason: String) -> Error {
        Error::TrainingAborted { step: self.state.step + 1, lr: self.cfg.learning_rate, reason }
    }

    /// Trains until the configured step count or until `observer` breaks.
    ///
    /// With an output directory, appends `step loss lr elapsed_ms` lines to
    /// `train.log`, writes `checkpoint_<step>.dfxt` every `checkpoint_every`
    /// steps, and finishes with `final.dfxt` tagged `final`.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut observer: impl FnMut(&StepReport, &Model) -> ControlFlow<()>,
    ) -> Result<()> {
        let started = Instant::now();
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train.log");
                Some((OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let total = self.cfg.total_steps();
        while self.state.step < total {
            let loss = self.step()?;
            let report = StepReport {
                step: self.state.step,
                loss,
                learning_rate: self.cfg.learning_rate,
                elapsed_ms: started.elapsed().as_millis(),
            };
            if let Some((file, path)) = log.as_mut() {
                let mut line = String::new();
                let _ =
                    writeln!(line, "{} {:.6} {} {}", report.step, report.loss, report.learning_rate, report.elapsed_ms);
                file.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.state.step.is_multiple_of(self.cfg.checkpoint_every) {
                    save_checkpoint(
                        &self.checkpoint(None),
                        dir.join(format!("checkpoint_{:06}.dfxt", self.state.step)),
                    )?;
                }
            }
            if observer(&report, &self.model).is_break() {
                break;
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(Some("final")), dir.join("final.dfxt"))?;
        }
        Ok(())
    }
}
