//! Property decoding, residual Gaussian refinement, and the per-block stage
//! pipeline that updates Gaussians and their queries.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    image_cross_attention_all, temporal_self_attention, AttentionWeights, CameraRig, ValueSampling,
};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, SemanticGaussian, MIN_SCALE};
use crate::geometry::UnitQuaternion;
use crate::io::TensorStore;
use crate::nn::{sigmoid, softplus, Activation, Mlp};
use crate::splatter::{scatter_features, sparse_conv3d, voxelize_means, SparseConvKernel, VoxelGridSpec};
use crate::tensor::QueryMatrix;

/// Quaternions shorter than this decode to the identity rotation.
pub const ROTATION_FALLBACK_NORM: f64 = 1e-9;

/// MLP from a query row to `3 + 3 + 4 + C` raw Gaussian properties.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineHead {
    mlp: Mlp,
}

impl RefineHead {
    pub fn random(
        dim: usize,
        hidden: [usize; 2],
        num_classes: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::random(&[dim, hidden[0], hidden[1], 10 + num_classes], activation, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: [usize; 2], num_classes: usize, activation: Activation) -> Self {
        Self {
            mlp: Mlp::zeros(&[dim, hidden[0], hidden[1], 10 + num_classes], activation),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.layers().len() != 3 {
            return Err(Error::config(format!(
                "refine head needs two hidden layers, got {}",
                mlp.layers().len() - 1
            )));
        }
        if mlp.out_dim() < 10 {
            return Err(Error::config(format!(
                "refine head emits {} values, need at least 10",
                mlp.out_dim()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.out_dim() - 10
    }

    pub fn export(&self, prefix: &str, store: &mut TensorStore) {
        self.mlp.export(prefix, store);
    }

    pub fn import(prefix: &str, store: &TensorStore, activation: Activation) -> Result<Self> {
        Self::from_mlp(Mlp::import(prefix, store, activation)?)
    }
}

/// Properties decoded from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedProperties {
    pub mean_delta: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub logits: Vec<f64>,
}

impl DecodedProperties {
    /// `[m̂, ŝ, r̂ (w, x, y, z), ĉ]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(10 + self.logits.len());
        v.extend(self.mean_delta.iter());
        v.extend(self.scale.iter());
        v.extend(self.rotation.to_array());
        v.extend(&self.logits);
        v
    }
}

fn split_raw(raw: &[f64]) -> DecodedProperties {
    let mean_delta = Vector3::new(raw[0], raw[1], raw[2]);
    let scale = Vector3::new(raw[3], raw[4], raw[5]).map(|x| softplus(x) + MIN_SCALE);
    let q = [raw[6], raw[7], raw[8], raw[9]];
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rotation = if norm < ROTATION_FALLBACK_NORM {
        UnitQuaternion::IDENTITY
    } else {
        UnitQuaternion::from_array(q).unwrap_or(UnitQuaternion::IDENTITY)
    };
    DecodedProperties {
        mean_delta,
        scale,
        rotation,
        logits: raw[10..].to_vec(),
    }
}

/// Runs the head and maps raw outputs to valid properties: softplus plus the
/// scale floor, unit-normalized rotation (identity when degenerate), raw logits.
pub fn decode_properties(query: &[f64], head: &RefineHead) -> DecodedProperties {
    split_raw(&head.mlp.forward(query))
}

/// Value of [`decode_properties`] flattened, and the gradient of
/// `gradᵀ·flat` with respect to the query.
pub fn decode_properties_vjp(query: &[f64], head: &RefineHead, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (raw, trace) = head.mlp.forward_trace(query);
    let decoded = split_raw(&raw);
    let mut d_raw = grad.to_vec();
    for a in 3..6 {
        d_raw[a] = grad[a] * sigmoid(raw[a]);
    }
    let q = &raw[6..10];
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ROTATION_FALLBACK_NORM {
        d_raw[6..10].fill(0.0);
    } else {
        let r = decoded.rotation.to_array();
        let g = &grad[6..10];
        let dot: f64 = r.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..4 {
            d_raw[6 + i] = (g[i] - r[i] * dot) / norm;
        }
    }
    (decoded.to_flat(), head.mlp.backward(&trace, &d_raw))
}

/// Mean moves by the decoded residual; scale, rotation and logits are replaced.
pub fn refine_gaussian(g: &SemanticGaussian, decoded: &DecodedProperties) -> SemanticGaussian {
    SemanticGaussian {
        mean: g.mean + decoded.mean_delta,
        scale: decoded.scale,
        rotation: decoded.rotation,
        logits: decoded.logits.clone(),
    }
}

/// Which attention stage runs first inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    #[default]
    TemporalFirst,
    ImageFirst,
}

/// Non-learned settings shared by every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOptions {
    /// Lattice used for self-encoding.
    pub grid: VoxelGridSpec,
    pub sampling: ValueSampling,
    pub num_refs: usize,
    pub alpha: f64,
    pub order: StageOrder,
}

/// Learned parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub conv: SparseConvKernel,
    pub tsa: AttentionWeights,
    pub ica: AttentionWeights,
    pub head: RefineHead,
}

/// Layer sizes for a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub dim: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub attn_hidden: usize,
    pub head_hidden: [usize; 2],
    pub activation: Activation,
}

impl BlockWeights {
    pub fn random(shape: &BlockShape, rng: &mut impl Rng) -> Self {
        let d = shape.dim;
        let h = [shape.attn_hidden];
        Self {
            conv: SparseConvKernel::random(d, d, rng),
            tsa: AttentionWeights::random(2 * d, 3, shape.num_samples, &h, shape.activation, rng),
            ica: AttentionWeights::random(d, 2, shape.num_samples, &h, shape.activation, rng),
            head: RefineHead::random(d, shape.head_hidden, shape.num_classes, shape.activation, rng),
        }
    }

    pub fn zeros(shape: &BlockShape) -> Self {
        let d = shape.dim;
        let h = [shape.attn_hidden];
        Self {
            conv: SparseConvKernel::zeros(d, d),
            tsa: AttentionWeights::zeros(2 * d, 3, shape.num_samples, &h, shape.activation),
            ica: AttentionWeights::zeros(d, 2, shape.num_samples, &h, shape.activation),
            head: RefineHead::zeros(d, shape.head_hidden, shape.num_classes, shape.activation),
        }
    }

    pub fn export(&self, prefix: &str, store: &mut TensorStore) {
        let (d_in, d_out) = (self.conv.d_in(), self.conv.d_out());
        store.insert(
            format!("{prefix}.conv"),
            vec![27, d_in, d_out],
            self.conv.as_slice().to_vec(),
        );
        self.tsa.export(&format!("{prefix}.tsa"), store);
        self.ica.export(&format!("{prefix}.ica"), store);
        self.head.export(&format!("{prefix}.head"), store);
    }

    pub fn import(prefix: &str, store: &TensorStore, activation: Activation) -> Result<Self> {
        let conv = store.require(&format!("{prefix}.conv"))?;
        let [27, d_in, d_out] = conv.shape[..] else {
            return Err(Error::Format(format!("{} must have shape [27, in, out]", conv.name)));
        };
        Ok(Self {
            conv: SparseConvKernel::from_vec(d_in, d_out, conv.data.clone())?,
            tsa: AttentionWeights::import(&format!("{prefix}.tsa"), store, 3, activation)?,
            ica: AttentionWeights::import(&format!("{prefix}.ica"), store, 2, activation)?,
            head: RefineHead::import(&format!("{prefix}.head"), store, activation)?,
        })
    }
}

/// Sparse-convolution self-encoding, added to the queries. Gaussians whose
/// mean lies outside the lattice receive no update.
pub fn self_encode(
    set: &GaussianSet,
    queries: &QueryMatrix,
    kernel: &SparseConvKernel,
    grid: &VoxelGridSpec,
) -> Result<QueryMatrix> {
    if kernel.d_in() != queries.dim() || kernel.d_out() != queries.dim() {
        return Err(Error::config(format!(
            "convolution maps {}->{} but queries have dim {}",
            kernel.d_in(),
            kernel.d_out(),
            queries.dim()
        )));
    }
    let voxels = voxelize_means(set, queries, grid)?;
    let encoded = sparse_conv3d(&voxels.grid, kernel)?;
    let mut update = scatter_features(&encoded, set, &QueryMatrix::zeros(queries.rows(), queries.dim()))?;
    update.add_assign(queries);
    Ok(update)
}

/// Decodes every query and refines the matching Gaussian.
pub fn refine_all(set: &GaussianSet, queries: &QueryMatrix, head: &RefineHead) -> Result<GaussianSet> {
    if queries.rows() != set.len() || queries.dim() != head.in_dim() {
        return Err(Error::config(format!(
            "{}x{} queries for {} gaussians and a head taking {} inputs",
            queries.rows(),
            queries.dim(),
            set.len(),
            head.in_dim()
        )));
    }
    if head.num_classes() != set.num_classes() {
        return Err(Error::config(format!(
            "head decodes {} classes, gaussians carry {}",
            head.num_classes(),
            set.num_classes()
        )));
    }
    let gaussians = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| refine_gaussian(g, &decode_properties(queries.row(i), head)))
        .collect();
    GaussianSet::new(gaussians, set.num_classes(), set.timestamp, set.ego_pose)
}

/// History seen by temporal self-attention inside a block.
#[derive(Debug, Clone, Copy)]
pub enum TemporalHistory<'a> {
    /// No history: the current queries stand in for it.
    None,
    /// The current Gaussians and the queries entering attention, passed
    /// explicitly as history.
    DuplicateCurrent,
    /// Ego-aligned previous Gaussians and their queries.
    Aligned(&'a GaussianSet, &'a QueryMatrix),
}

fn add(mut a: QueryMatrix, b: &QueryMatrix) -> QueryMatrix {
    a.add_assign(b);
    a
}

/// One refinement block: self-encoding, temporal and image attention (each
/// added to the queries), then property decoding and refinement.
pub fn run_block(
    set: &GaussianSet,
    queries: &QueryMatrix,
    rig: &CameraRig,
    history: TemporalHistory<'_>,
    weights: &BlockWeights,
    opts: &BlockOptions,
) -> Result<(GaussianSet, QueryMatrix)> {
    if queries.rows() != set.len() {
        return Err(Error::config(format!(
            "{} queries for {} gaussians",
            queries.rows(),
            set.len()
        )));
    }
    let mut q = self_encode(set, queries, &weights.conv, &opts.grid)?;
    let temporal = |q: QueryMatrix| -> Result<QueryMatrix> {
        let hist = match history {
            TemporalHistory::None => None,
            TemporalHistory::DuplicateCurrent => Some((set, &q)),
            TemporalHistory::Aligned(g, h) => Some((g, h)),
        };
        let t = temporal_self_attention(&q, set, hist, &weights.tsa, &opts.sampling)?;
        Ok(add(q, &t))
    };
    let image = |q: QueryMatrix| -> Result<QueryMatrix> {
        let c = image_cross_attention_all(set, &q, rig, &weights.ica, opts.num_refs, opts.alpha)?;
        Ok(add(q, &c))
    };
    q = match opts.order {
        StageOrder::TemporalFirst => image(temporal(q)?)?,
        StageOrder::ImageFirst => temporal(image(q)?)?,
    };
    let refined = refine_all(set, &q, &weights.head)?;
    Ok((refined, q))
}
