//! Per-pixel classifier over the feature mesh.
//!
//! Each pixel's feature vector is laid out row-major as a small single-channel
//! image and classified by a three-layer convolutional network whose last layer
//! has one channel per class, averaged over the mesh into class scores. Meshes
//! are processed independently; features never mix across image pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::fext::{conv_with_params, StageSpec};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshHeadSpec {
    pub mesh_h: usize,
    pub mesh_w: usize,
    pub conv_layers: Vec<StageSpec>,
    pub num_classes: usize,
}

impl MeshHeadSpec {
    /// 10×10 mesh; 3×3 convolutions 1→8, 8→8, 8→`num_classes`.
    pub fn standard(num_classes: usize) -> Self {
        let conv = |i, o| StageSpec { in_channels: i, out_channels: o, kernel_h: 3, kernel_w: 3 };
        MeshHeadSpec {
            mesh_h: 10,
            mesh_w: 10,
            conv_layers: vec![conv(1, 8), conv(8, 8), conv(8, num_classes)],
            num_classes,
        }
    }

    pub fn features(&self) -> usize {
        self.mesh_h * self.mesh_w
    }

    pub fn validate(&self, upstream_features: usize) -> Result<()> {
        if self.features() != upstream_features {
            return Err(Error::Config(format!(
                "{}×{} mesh needs {} features, the extraction network produces {upstream_features}",
                self.mesh_h,
                self.mesh_w,
                self.features()
            )));
        }
        if self.conv_layers.len() != 3 {
            return Err(Error::Config(format!("mesh head has exactly 3 conv layers, got {}", self.conv_layers.len())));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        let mut channels = 1;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.in_channels != channels
                || layer.kernel_h % 2 == 0
                || layer.kernel_w % 2 == 0
                || layer.out_channels == 0
            {
                return Err(Error::Config(format!("mesh head layer {} is inconsistent: {layer:?}", i + 1)));
            }
            channels = layer.out_channels;
        }
        if channels != self.num_classes {
            return Err(Error::Config(format!(
                "last mesh head layer emits {channels} channels for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshHead {
    spec: MeshHeadSpec,
    convs: Vec<(ParamId, ParamId)>,
}

pub fn build_mesh_head<R: Rng>(
    spec: &MeshHeadSpec,
    upstream_features: usize,
    params: &mut ParamStore,
    rng: &mut R,
) -> Result<MeshHead> {
    spec.validate(upstream_features)?;
    let mut convs = Vec::with_capacity(3);
    for (i, st) in spec.conv_layers.iter().enumerate() {
        let weight = params.add_he_uniform(
            format!("head.{i}.weight"),
            [st.out_channels, st.in_channels, st.kernel_h, st.kernel_w],
            rng,
        )?;
        let bias =
            params.add(format!("head.{i}.bias"), Tensor::new(&[st.out_channels, 1, 1], vec![0.0; st.out_channels])?);
        convs.push((weight, bias));
    }
    Ok(MeshHead { spec: spec.clone(), convs })
}

impl MeshHead {
    pub fn spec(&self) -> &MeshHeadSpec {
        &self.spec
    }

    /// Meshes `(M, 1, mh, mw)` to logits `(M, num_classes, 1, 1)`.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, mesh: NodeId) -> Result<NodeId> {
        let mut h = mesh;
        let last = self.convs.len() - 1;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let wn = g.param(params, w);
            let bn = g.param(params, b);
            h = g.conv2d_same(h, wn, bn)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(g.global_avg_pool(h))
    }

    /// Same computation as [`MeshHead::forward`] without recording a graph.
    pub fn infer(&self, params: &ParamStore, mesh: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        let mut h: Option<Tensor> = None;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let mut y = conv_with_params(params, w, b, h.as_ref().unwrap_or(mesh))?;
            if i < last {
                y.values_mut().iter_mut().for_each(|v| *v = crate::ops::relu_scalar(*v));
            }
            h = Some(y);
        }
        Ok(ops::global_avg_pool(&h.expect("three layers")))
    }
}
