//! Multi-scale feature extraction built from factorized convolution chains.
//!
//! A square `s×s` filter is emulated by a chain of `(s - 1) / 2` stacked 3×3
//! convolutions, each optionally split further into a 1×3 followed by a 3×1.
//! A layer runs one such chain per scale on the same input and concatenates the
//! results; a network stacks layers and concatenates every layer's output (and,
//! optionally, the raw input) into the per-pixel feature vector. No operation
//! changes the spatial size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::map::RealMap;
use crate::ops;
use crate::tensor::Tensor;

/// Name of the built-in five-layer, 100-feature network.
pub const PRESET_FEXT5_100: &str = "fext5-100";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear network; used to check kernel-composition identities.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub scale: usize,
    pub out_features: usize,
}

impl ScaleSpec {
    pub fn new(scale: usize, out_features: usize) -> Self {
        ScaleSpec { scale, out_features }
    }
}

/// One convolution of a mini-network chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl StageSpec {
    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniNetwork {
    pub target_scale: usize,
    pub stages: Vec<StageSpec>,
}

impl MiniNetwork {
    pub fn weight_count(&self) -> usize {
        self.stages.iter().map(StageSpec::weight_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageSpec::param_count).sum()
    }

    pub fn receptive_field(&self) -> (usize, usize) {
        receptive_field(self)
    }
}

/// Replaces a `target_scale × target_scale` convolution by a chain of small kernels.
///
/// Scale 3 stays a single 3×3 unless `refactor_3x3` is set, in which case every
/// 3×3 of the chain becomes 1×3 then 3×1. Only the first stage reads `in_ch`
/// channels; the rest of the chain runs at `out_ch`.
pub fn factorize(target_scale: usize, in_ch: usize, out_ch: usize, refactor_3x3: bool) -> Result<MiniNetwork> {
    if target_scale < 3 || target_scale.is_multiple_of(2) {
        return Err(Error::Config(format!("mini-network scale must be odd and at least 3, got {target_scale}")));
    }
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::Config("mini-network channel counts must be positive".into()));
    }
    let mut stages = Vec::new();
    let mut channels = in_ch;
    for _ in 0..(target_scale - 1) / 2 {
        let kernels: &[(usize, usize)] = if refactor_3x3 { &[(1, 3), (3, 1)] } else { &[(3, 3)] };
        for &(kernel_h, kernel_w) in kernels {
            stages.push(StageSpec { in_channels: channels, out_channels: out_ch, kernel_h, kernel_w });
            channels = out_ch;
        }
    }
    Ok(MiniNetwork { target_scale, stages })
}

/// Composed receptive field `(Σ(kh - 1) + 1, Σ(kw - 1) + 1)` of a stage chain.
pub fn receptive_field(net: &MiniNetwork) -> (usize, usize) {
    net.stages.iter().fold((1, 1), |(h, w), s| (h + s.kernel_h - 1, w + s.kernel_w - 1))
}

/// Parameters of a single `scale × scale` convolution with bias.
pub fn direct_param_count(scale: usize, in_ch: usize, out_ch: usize) -> usize {
    in_ch * out_ch * scale * scale + out_ch
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FextLayerSpec {
    pub in_channels: usize,
    pub branches: Vec<ScaleSpec>,
}

impl FextLayerSpec {
    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_features).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FextNetworkSpec {
    pub layers: Vec<FextLayerSpec>,
    pub include_input_passthrough: bool,
    #[serde(default)]
    pub activation: Activation,
    /// Split the 3×3 of scale-3 branches into 1×3 then 3×1.
    #[serde(default)]
    pub refactor_scale3: bool,
    /// Split every 3×3 inside the chains of larger scales.
    #[serde(default)]
    pub refactor_chains: bool,
}

impl FextNetworkSpec {
    /// The five-layer network producing 97 learned features plus the RGB input.
    pub fn fext5_100() -> Self {
        let wide = [(3, 5), (5, 5), (7, 5), (9, 3), (11, 3)];
        let mid = [(3, 5), (5, 4), (7, 4), (9, 3), (11, 3)];
        let narrow = [(3, 4), (5, 4), (7, 4), (9, 3), (11, 3)];
        let rows: [&[(usize, usize)]; 5] = [&wide, &wide, &mid, &narrow, &narrow];
        let mut layers = Vec::new();
        let mut in_channels = 3;
        for row in rows {
            let layer =
                FextLayerSpec { in_channels, branches: row.iter().map(|&(s, f)| ScaleSpec::new(s, f)).collect() };
            in_channels = layer.out_channels();
            layers.push(layer);
        }
        FextNetworkSpec {
            layers,
            include_input_passthrough: true,
            activation: Activation::Relu,
            refactor_scale3: false,
            refactor_chains: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            PRESET_FEXT5_100 => Ok(Self::fext5_100()),
            other => Err(Error::Config(format!("unknown network preset {other:?} (available: {PRESET_FEXT5_100})"))),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    /// Channel counts of the output blocks in concatenation order: input (when
    /// passed through) then each layer.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut blocks = Vec::with_capacity(self.layers.len() + 1);
        if self.include_input_passthrough {
            blocks.push(self.input_channels());
        }
        blocks.extend(self.layers.iter().map(FextLayerSpec::out_channels));
        blocks
    }

    pub fn output_channels(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    /// Receptive field edge of the whole stack.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.branches.iter().map(|b| b.scale - 1).max().unwrap_or(0)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("feature network has no layers".into()));
        }
        let mut expected = self.input_channels();
        if expected == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != expected {
                return Err(Error::Config(format!(
                    "layer {} consumes {} channels but receives {expected}",
                    k + 1,
                    layer.in_channels
                )));
            }
            if layer.branches.is_empty() {
                return Err(Error::Config(format!("layer {} has no branches", k + 1)));
            }
            for b in &layer.branches {
                if b.scale < 3 || b.scale % 2 == 0 || b.out_features == 0 {
                    return Err(Error::Config(format!(
                        "layer {} branch scale {} with {} features is invalid",
                        k + 1,
                        b.scale,
                        b.out_features
                    )));
                }
            }
            expected = layer.out_channels();
        }
        Ok(())
    }

    fn refactor_for(&self, scale: usize) -> bool {
        if scale == 3 {
            self.refactor_scale3
        } else {
            self.refactor_chains
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvStage {
    spec: StageSpec,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Branch {
    net: MiniNetwork,
    stages: Vec<ConvStage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FextLayer {
    spec: FextLayerSpec,
    activation: Activation,
    branches: Vec<Branch>,
}

/// Allocates one mini-network per branch of `spec` in `params`.
pub fn build_fext_layer<R: Rng>(
    spec: &FextLayerSpec,
    activation: Activation,
    refactor: impl Fn(usize) -> bool,
    params: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
) -> Result<FextLayer> {
    let mut branches = Vec::with_capacity(spec.branches.len());
    for b in &spec.branches {
        let net = factorize(b.scale, spec.in_channels, b.out_features, refactor(b.scale))?;
        let mut stages = Vec::with_capacity(net.stages.len());
        for (i, st) in net.stages.iter().enumerate() {
            let name = format!("{prefix}.s{}.{i}", b.scale);
            let weight = params.add_he_uniform(
                format!("{name}.weight"),
                [st.out_channels, st.in_channels, st.kernel_h, st.kernel_w],
                rng,
            )?;
            let bias =
                params.add(format!("{name}.bias"), Tensor::new(&[st.out_channels, 1, 1], vec![0.0; st.out_channels])?);
            stages.push(ConvStage { spec: *st, weight, bias });
        }
        branches.push(Branch { net, stages });
    }
    Ok(FextLayer { spec: spec.clone(), activation, branches })
}

impl FextLayer {
    pub fn spec(&self) -> &FextLayerSpec {
        &self.spec
    }

    pub fn mini_networks(&self) -> impl Iterator<Item = &MiniNetwork> {
        self.branches.iter().map(|b| &b.net)
    }

    /// `(N, in, H, W)` to `(N, Σ out_features, H, W)`.
    ///
    /// Every stage is followed by the activation; the activation after the
    /// branch concatenation is then the identity (ReLU is idempotent) and is
    /// not materialized.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, input: NodeId) -> Result<NodeId> {
        let channels = g.value(input).dims4()[1];
        if channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "feature layer expects {} channels, got {channels}",
                self.spec.in_channels
            )));
        }
        let mut outputs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut h = input;
            for stage in &branch.stages {
                let w = g.param(params, stage.weight);
                let b = g.param(params, stage.bias);
                h = g.conv2d_same(h, w, b)?;
                if self.activation == Activation::Relu {
                    h = g.relu(h);
                }
            }
            outputs.push(h);
        }
        if outputs.len() == 1 {
            return Ok(outputs[0]);
        }
        g.concat_channels(&outputs)
    }

    /// Forward pass without recording a graph; intermediate activations are dropped.
    pub fn infer(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let channels = input.dims4()[1];
        if channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "feature layer expects {} channels, got {channels}",
                self.spec.in_channels
            )));
        }
        let mut outputs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut h: Option<Tensor> = None;
            for stage in &branch.stages {
                let x = h.as_ref().unwrap_or(input);
                let mut y = conv_with_params(params, stage.weight, stage.bias, x)?;
                if self.activation == Activation::Relu {
                    y.values_mut().iter_mut().for_each(|v| *v = crate::ops::relu_scalar(*v));
                }
                h = Some(y);
            }
            outputs.push(h.expect("mini-networks have at least one stage"));
        }
        if outputs.len() == 1 {
            return Ok(outputs.pop().expect("one output"));
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        ops::concat_channels(&refs)
    }
}

/// Same convolution with weights and bias read straight from the parameter store.
pub(crate) fn conv_with_params(params: &ParamStore, weight: ParamId, bias: ParamId, input: &Tensor) -> Result<Tensor> {
    let wt = params.get(weight);
    let dims = input.dims4();
    let wdims = wt.dims4();
    ops::check_conv_shapes(dims, wdims)?;
    let out = ops::conv_forward(input.values(), dims, wt.values(), wdims, params.get(bias).values());
    Tensor::new(&[dims[0], wdims[0], dims[2], dims[3]], out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FextNetwork {
    spec: FextNetworkSpec,
    layers: Vec<FextLayer>,
}

pub fn build_fext_network<R: Rng>(spec: &FextNetworkSpec, params: &mut ParamStore, rng: &mut R) -> Result<FextNetwork> {
    spec.validate()?;
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(k, l)| {
            build_fext_layer(l, spec.activation, |s| spec.refactor_for(s), params, rng, &format!("fext.l{}", k + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FextNetwork { spec: spec.clone(), layers })
}

impl FextNetwork {
    pub fn spec(&self) -> &FextNetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[FextLayer] {
        &self.layers
    }

    pub fn output_channels(&self) -> usize {
        self.spec.output_channels()
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, input: NodeId) -> Result<NodeId> {
        let mut blocks = Vec::with_capacity(self.layers.len() + 1);
        if self.spec.include_input_passthrough {
            blocks.push(input);
        }
        let mut h = input;
        for layer in &self.layers {
            h = layer.forward(g, params, h)?;
            blocks.push(h);
        }
        if blocks.len() == 1 {
            return Ok(blocks[0]);
        }
        g.concat_channels(&blocks)
    }

    /// Runs the network outside of training; accepts `(C, H, W)` or `(N, C, H, W)`.
    pub fn features(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = input.dims4();
        let x = input.clone().reshape(&[n, c, h, w])?;
        let mut blocks = Vec::with_capacity(self.layers.len() + 1);
        let mut current: Option<Tensor> = None;
        for layer in &self.layers {
            let next = layer.infer(params, current.as_ref().unwrap_or(&x))?;
            if let Some(prev) = current.replace(next) {
                blocks.push(prev);
            }
        }
        blocks.push(current.expect("validated networks have layers"));
        if self.spec.include_input_passthrough {
            blocks.insert(0, x);
        }
        if blocks.len() == 1 {
            return Ok(blocks.pop().expect("one block"));
        }
        let refs: Vec<&Tensor> = blocks.iter().collect();
        ops::concat_channels(&refs)
    }
}

/// Every output feature of a single image as a min-max normalized grayscale map.
///
/// A constant channel maps to an all-zero image.
pub fn export_feature_maps(network: &FextNetwork, params: &ParamStore, image: &Tensor) -> Result<Vec<RealMap>> {
    let [n, _, h, w] = image.dims4();
    if n != 1 {
        return Err(Error::Shape(format!("feature export takes one image, got batch of {n}")));
    }
    let feats = network.features(params, image)?;
    let c = feats.dims4()[1];
    (0..c)
        .map(|ch| {
            let plane = feats.plane(0, ch);
            let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            let data = if range > 0.0 {
                plane.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
            } else {
                vec![0.0; plane.len()]
            };
            RealMap::from_vec(h, w, data)
        })
        .collect()
}
