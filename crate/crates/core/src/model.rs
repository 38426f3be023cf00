//! The full pixel classifier: input normalization, feature extraction, mesh head.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::fext::{build_fext_network, FextNetwork, FextNetworkSpec};
use crate::head::{build_mesh_head, MeshHead, MeshHeadSpec};
use crate::map::RealMap;
use crate::ops;
use crate::tensor::Tensor;

/// Pixels classified per head invocation during inference.
const INFERENCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Background vs vessel.
    Vessel,
    /// Background vs centerline.
    Centerline,
    /// Background (0), vessel (1), centerline (2); centerline wins where masks overlap.
    Both,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Vessel | Task::Centerline => 2,
            Task::Both => 3,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Vessel => &["background", "vessel"],
            Task::Centerline => &["background", "centerline"],
            Task::Both => &["background", "vessel", "centerline"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vessel => "vessel",
            Task::Centerline => "centerline",
            Task::Both => "both",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(Task::Vessel),
            "centerline" => Ok(Task::Centerline),
            "both" => Ok(Task::Both),
            other => Err(Error::Config(format!("unknown task {other:?} (vessel, centerline, both)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over every pixel of the given `(C, H, W)` images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sums: Vec<(f64, f64)> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let [_, c, h, w] = img.dims4();
            if sums.is_empty() {
                sums = vec![(0.0, 0.0); c];
            } else if sums.len() != c {
                return Err(Error::Data(format!("images mix {} and {c} channels", sums.len())));
            }
            let hw = h * w;
            for (ch, acc) in sums.iter_mut().enumerate() {
                for b in 0..img.dims4()[0] {
                    for &v in &img.values()[(b * c + ch) * hw..][..hw] {
                        acc.0 += v as f64;
                        acc.1 += v as f64 * v as f64;
                    }
                }
            }
            count += img.dims4()[0] * hw;
        }
        if count == 0 {
            return Err(Error::Data("cannot fit normalization on zero images".into()));
        }
        let n = count as f64;
        let (mean, std) = sums
            .iter()
            .map(|&(s, sq)| {
                let m = s / n;
                let var = (sq / n - m * m).max(0.0);
                let sd = var.sqrt();
                (m as f32, if sd > 1e-6 { sd as f32 } else { 1.0 })
            })
            .unzip();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = image.dims4();
        if c != self.mean.len() {
            return Err(Error::Shape(format!("normalization fitted for {} channels, image has {c}", self.mean.len())));
        }
        let hw = h * w;
        let mut out = image.clone();
        for (idx, plane) in out.values_mut().chunks_mut(hw).enumerate() {
            let ch = idx % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out.reshape(&[n, c, h, w])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub fext: FextNetworkSpec,
    pub head: MeshHeadSpec,
}

impl ModelSpec {
    pub fn new(fext: FextNetworkSpec, task: Task) -> Self {
        ModelSpec { task, fext, head: MeshHeadSpec::standard(task.num_classes()) }
    }

    pub fn preset(name: &str, task: Task) -> Result<Self> {
        Ok(Self::new(FextNetworkSpec::preset(name)?, task))
    }

    /// Smallest image edge the network accepts: the largest branch scale.
    pub fn min_image_size(&self) -> usize {
        self.fext.layers.iter().flat_map(|l| l.branches.iter().map(|b| b.scale)).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    fext: FextNetwork,
    head: MeshHead,
    params: ParamStore,
    normalization: Normalization,
}

impl Model {
    /// Freshly initialized weights; the same seed always gives the same model.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.head.num_classes != spec.task.num_classes() {
            return Err(Error::Config(format!(
                "task {} has {} classes, head emits {}",
                spec.task,
                spec.task.num_classes(),
                spec.head.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fext = build_fext_network(&spec.fext, &mut params, &mut rng)?;
        let head = build_mesh_head(&spec.head, fext.output_channels(), &mut params, &mut rng)?;
        let normalization = Normalization::identity(spec.fext.input_channels());
        Ok(Model { spec, fext, head, params, normalization })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn fext(&self) -> &FextNetwork {
        &self.fext
    }

    pub fn head(&self) -> &MeshHead {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, normalization: Normalization) -> Result<()> {
        if normalization.mean.len() != self.spec.fext.input_channels()
            || normalization.std.len() != normalization.mean.len()
        {
            return Err(Error::Config("normalization channel count does not match the network input".into()));
        }
        self.normalization = normalization;
        Ok(())
    }

    /// Records the logits `(M, K, 1, 1)` of the selected pixels of an already
    /// normalized `(N, C, H, W)` input node.
    pub fn forward_logits(&self, g: &mut Graph, input: NodeId, pixels: Option<Vec<usize>>) -> Result<NodeId> {
        let feats = self.fext.forward(g, &self.params, input)?;
        let mesh = g.to_mesh(feats, self.spec.head.mesh_h, self.spec.head.mesh_w, pixels)?;
        self.head.forward(g, &self.params, mesh)
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let [_, c, h, w] = image.dims4();
        let min = self.spec.min_image_size();
        if h < min || w < min {
            return Err(Error::Data(format!(
                "image is {h}×{w}, smaller than the {min}×{min} largest filter scale; pad it to at least {min}×{min}"
            )));
        }
        if c != self.spec.fext.input_channels() {
            return Err(Error::Data(format!(
                "image has {c} channels, the model expects {}",
                self.spec.fext.input_channels()
            )));
        }
        Ok(())
    }

    /// Class probabilities `(K, H, W)` of a raw `(C, H, W)` image.
    pub fn predict_probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let [n, _, h, w] = image.dims4();
        if n != 1 {
            return Err(Error::Shape(format!("prediction takes one image, got batch of {n}")));
        }
        self.check_image(image)?;
        let normalized = self.normalization.apply(image)?;
        let feats = self.fext.features(&self.params, &normalized)?;
        let k = self.spec.head.num_classes;
        let hw = h * w;
        let mut probs = vec![0.0f32; k * hw];
        let all: Vec<usize> = (0..hw).collect();
        for chunk in all.chunks(INFERENCE_CHUNK) {
            let mesh = ops::to_mesh(&feats, self.spec.head.mesh_h, self.spec.head.mesh_w, Some(chunk))?;
            let logits = self.head.infer(&self.params, &mesh)?;
            let p = ops::softmax_channels(&logits.reshape(&[1, chunk.len(), k])?.transposed_classes(k)?);
            for (j, &pix) in chunk.iter().enumerate() {
                for class in 0..k {
                    probs[class * hw + pix] = p.values()[class * chunk.len() + j];
                }
            }
        }
        Tensor::new(&[k, h, w], probs)
    }

    /// Probability maps, one per class.
    pub fn predict_maps(&self, image: &Tensor) -> Result<Vec<RealMap>> {
        let probs = self.predict_probabilities(image)?;
        let [_, k, h, w] = probs.dims4();
        (0..k).map(|c| RealMap::from_vec(h, w, probs.plane(0, c).to_vec())).collect()
    }
}

trait TransposeClasses {
    fn transposed_classes(self, k: usize) -> Result<Tensor>;
}

impl TransposeClasses for Tensor {
    /// `(1, M, K)` logits laid out pixel-major into `(1, K, M, 1)` channel-major.
    fn transposed_classes(self, k: usize) -> Result<Tensor> {
        let m = self.len() / k;
        let src = self.values();
        let mut out = vec![0.0f32; src.len()];
        for j in 0..m {
            for c in 0..k {
                out[c * m + j] = src[j * k + c];
            }
        }
        Tensor::new(&[1, k, m, 1], out)
    }
}
