//! Ego-motion alignment of the previous frame and the per-frame schedule that
//! threads Gaussian history through a sequence.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CameraRig;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, SemanticGaussian};
use crate::geometry::{RigidPose, UnitQuaternion};
use crate::io::TensorStore;
use crate::nn::Activation;
use crate::refinement::{run_block, BlockOptions, BlockShape, BlockWeights, TemporalHistory};
use crate::splatter::{splat, SemanticVoxelGrid, SplatOptions, VoxelGridSpec};
use crate::tensor::QueryMatrix;

/// Everything observed at one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub rig: CameraRig,
    /// Ego → world.
    pub ego_pose: RigidPose,
    pub timestamp: u64,
}

/// The refined state of the previous keyframe, in that frame's ego coordinates
/// until aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState {
    pub gaussians: GaussianSet,
    pub queries: QueryMatrix,
    pub ego_pose: RigidPose,
}

impl HistoryState {
    pub fn new(gaussians: GaussianSet, queries: QueryMatrix, ego_pose: RigidPose) -> Result<Self> {
        if gaussians.len() != queries.rows() {
            return Err(Error::config(format!(
                "history has {} gaussians but {} query rows",
                gaussians.len(),
                queries.rows()
            )));
        }
        Ok(Self {
            gaussians,
            queries,
            ego_pose,
        })
    }
}

/// Re-expresses the history in the ego frame at `pose_t` via
/// `Δ = pose_t⁻¹ ∘ pose_{t−1}`. Means and rotations move; scales, logits
/// and query features do not.
pub fn align_history(hist: &HistoryState, pose_t: &RigidPose) -> HistoryState {
    let delta = pose_t.inverse().compose(&hist.ego_pose);
    let mut gaussians = hist.gaussians.clone();
    for g in &mut gaussians.gaussians {
        *g = g.transformed(&delta);
    }
    gaussians.ego_pose = *pose_t;
    HistoryState {
        gaussians,
        queries: hist.queries.clone(),
        ego_pose: *pose_t,
    }
}

/// Which history the temporal attention sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// The aligned previous keyframe when available.
    #[default]
    Previous,
    /// Never use history; every frame attends to itself twice.
    Degenerate,
    /// Pass each block's current Gaussians and queries explicitly as history.
    DuplicateCurrent,
}

/// How history is produced across a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Each frame's history is the previous keyframe processed on its own,
    /// without history.
    #[default]
    TwoPass,
    /// Each frame's history is the previous frame's full output.
    Recurrent,
}

/// Initial Gaussians, initial queries and the per-block weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub init_gaussians: Vec<SemanticGaussian>,
    pub init_queries: QueryMatrix,
    pub blocks: Vec<BlockWeights>,
    pub activation: Activation,
}

/// Means on a jittered lattice spanning `spec`, scales of two voxels,
/// identity rotations and zero logits.
pub fn init_gaussians(
    spec: &VoxelGridSpec,
    count: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Vec<SemanticGaussian> {
    if count == 0 {
        return Vec::new();
    }
    let extent = spec.upper_corner() - Vector3::from(spec.origin);
    let volume = extent.iter().product::<f64>();
    let density = (count as f64 / volume).cbrt();
    let n = [0, 1, 2].map(|a| ((extent[a] * density).ceil() as usize).max(1));
    let total = n[0] * n[1] * n[2];
    let (mut n, mut total) = (n, total);
    while total < count {
        n.iter_mut().for_each(|v| *v += 1);
        total = n[0] * n[1] * n[2];
    }
    let step = [0, 1, 2].map(|a| extent[a] / n[a] as f64);
    let scale = Vector3::repeat(2.0 * spec.voxel_size);
    (0..count)
        .map(|i| {
            let cell = i * total / count;
            let idx = [cell / (n[1] * n[2]), (cell / n[2]) % n[1], cell % n[2]];
            let mean =
                Vector3::from_fn(|a, _| spec.origin[a] + (idx[a] as f64 + 0.5 + rng.gen_range(-0.5..0.5)) * step[a]);
            SemanticGaussian {
                mean,
                scale,
                rotation: UnitQuaternion::IDENTITY,
                logits: vec![0.0; num_classes],
            }
        })
        .collect()
}

/// Sizes of a whole model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_gaussians: usize,
    pub num_blocks: usize,
    pub block: BlockShape,
}

impl ModelWeights {
    /// Seeded model: initial Gaussians on `spec`, queries uniform in `±1`,
    /// block weights from [`BlockWeights::random`].
    pub fn random(shape: &ModelShape, spec: &VoxelGridSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_gaussians = init_gaussians(spec, shape.num_gaussians, shape.block.num_classes, &mut rng);
        let (p, d) = (shape.num_gaussians, shape.block.dim);
        let init_queries = QueryMatrix::from_vec(p, d, (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("shape is consistent");
        let blocks = (0..shape.num_blocks)
            .map(|_| BlockWeights::random(&shape.block, &mut rng))
            .collect();
        Self {
            init_gaussians,
            init_queries,
            blocks,
            activation: shape.block.activation,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.blocks
            .first()
            .map(|b| b.head.num_classes())
            .or_else(|| self.init_gaussians.first().map(|g| g.num_classes()))
            .unwrap_or(0)
    }

    pub fn export(&self) -> TensorStore {
        let mut store = TensorStore::default();
        let p = self.init_gaussians.len();
        let c = self.num_classes();
        let flat =
            |f: &dyn Fn(&SemanticGaussian) -> Vec<f64>| self.init_gaussians.iter().flat_map(f).collect::<Vec<_>>();
        store.insert("init.means", vec![p, 3], flat(&|g| g.mean.iter().copied().collect()));
        store.insert("init.scales", vec![p, 3], flat(&|g| g.scale.iter().copied().collect()));
        store.insert("init.rotations", vec![p, 4], flat(&|g| g.rotation.to_array().to_vec()));
        store.insert("init.logits", vec![p, c], flat(&|g| g.logits.clone()));
        store.insert(
            "init.queries",
            vec![p, self.init_queries.dim()],
            self.init_queries.as_slice().to_vec(),
        );
        for (b, w) in self.blocks.iter().enumerate() {
            w.export(&format!("block{b}"), &mut store);
        }
        store
    }

    pub fn import(store: &TensorStore, activation: Activation) -> Result<Self> {
        let rows = |name: &str, width: Option<usize>| -> Result<(usize, usize, &[f64])> {
            let t = store.require(name)?;
            match t.shape[..] {
                [p, w] if width.is_none_or(|x| x == w) => Ok((p, w, &t.data)),
                _ => Err(Error::Format(format!("{name} has unexpected shape {:?}", t.shape))),
            }
        };
        let (p, _, means) = rows("init.means", Some(3))?;
        let (_, _, scales) = rows("init.scales", Some(3))?;
        let (_, _, rotations) = rows("init.rotations", Some(4))?;
        let (_, c, logits) = rows("init.logits", None)?;
        let (qp, d, queries) = rows("init.queries", None)?;
        if [scales.len() / 3, rotations.len() / 4, qp].iter().any(|&n| n != p) || logits.len() != p * c {
            return Err(Error::Format(
                "initial gaussian tensors disagree on the gaussian count".into(),
            ));
        }
        let init_gaussians = (0..p)
            .map(|i| {
                let r = UnitQuaternion::from_array([0, 1, 2, 3].map(|k| rotations[4 * i + k]))?;
                SemanticGaussian::new(
                    Vector3::from_column_slice(&means[3 * i..3 * i + 3]),
                    Vector3::from_column_slice(&scales[3 * i..3 * i + 3]),
                    r,
                    logits[c * i..c * (i + 1)].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::new();
        while store.get(&format!("block{}.conv", blocks.len())).is_some() {
            blocks.push(BlockWeights::import(
                &format!("block{}", blocks.len()),
                store,
                activation,
            )?);
        }
        Ok(Self {
            init_gaussians,
            init_queries: QueryMatrix::from_vec(p, d, queries.to_vec())?,
            blocks,
            activation,
        })
    }
}

/// Non-learned settings of the per-frame pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Output occupancy grid, also used for self-encoding.
    pub grid: VoxelGridSpec,
    pub block: BlockOptions,
    pub splat: SplatOptions,
    pub history: HistoryMode,
    #[serde(default)]
    pub schedule: Schedule,
}

/// Result of one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub gaussians: GaussianSet,
    pub queries: QueryMatrix,
    pub grid: SemanticVoxelGrid,
}

impl FrameOutput {
    /// History for the next keyframe.
    pub fn to_history(&self) -> HistoryState {
        HistoryState {
            gaussians: self.gaussians.clone(),
            queries: self.queries.clone(),
            ego_pose: self.gaussians.ego_pose,
        }
    }
}

/// Initializes Gaussians and queries, aligns the history, runs every block
/// and splats the result into the output grid.
pub fn process_frame(
    input: &FrameInput,
    hist: Option<&HistoryState>,
    model: &ModelWeights,
    cfg: &PipelineConfig,
) -> Result<FrameOutput> {
    let c = model.num_classes();
    if model.init_queries.rows() != model.init_gaussians.len() {
        return Err(Error::config(format!(
            "{} initial queries for {} initial gaussians",
            model.init_queries.rows(),
            model.init_gaussians.len()
        )));
    }
    if input.rig.feature_dim() != model.init_queries.dim() {
        return Err(Error::config(format!(
            "camera features have dim {}, queries {}",
            input.rig.feature_dim(),
            model.init_queries.dim()
        )));
    }
    let mut set = GaussianSet::new(model.init_gaussians.clone(), c, input.timestamp, input.ego_pose)?;
    let mut queries = model.init_queries.clone();
    let aligned = match (cfg.history, hist) {
        (HistoryMode::Previous, Some(h)) => Some(align_history(h, &input.ego_pose)),
        _ => None,
    };
    let history = match (cfg.history, &aligned) {
        (HistoryMode::DuplicateCurrent, _) => TemporalHistory::DuplicateCurrent,
        (_, Some(h)) => TemporalHistory::Aligned(&h.gaussians, &h.queries),
        (_, None) => TemporalHistory::None,
    };
    for block in &model.blocks {
        (set, queries) = run_block(&set, &queries, &input.rig, history, block, &cfg.block)?;
    }
    let grid = splat(&set, &cfg.grid, &cfg.splat);
    Ok(FrameOutput {
        gaussians: set,
        queries,
        grid,
    })
}

/// The two-pass keyframe scheme: the previous keyframe is processed without
/// history, and its output becomes the history of the current one.
pub fn process_keyframe_pair(
    previous: &FrameInput,
    current: &FrameInput,
    model: &ModelWeights,
    cfg: &PipelineConfig,
) -> Result<(FrameOutput, FrameOutput)> {
    let first = process_frame(previous, None, model, cfg)?;
    let second = process_frame(current, Some(&first.to_history()), model, cfg)?;
    Ok((first, second))
}

/// Storage of the Gaussian representation against the dense semantic grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub grid_dims: [usize; 3],
    /// `P·(10 + C)`.
    pub gaussian_floats: usize,
    /// `X·Y·Z·C`.
    pub dense_floats: usize,
    pub gaussian_bytes: usize,
    pub dense_bytes: usize,
    pub ratio: f64,
}

pub fn memory_report(num_gaussians: usize, num_classes: usize, grid_dims: [usize; 3]) -> MemoryReport {
    let gaussian_floats = num_gaussians * (10 + num_classes);
    let dense_floats = grid_dims.iter().product::<usize>() * num_classes;
    MemoryReport {
        num_gaussians,
        num_classes,
        grid_dims,
        gaussian_floats,
        dense_floats,
        gaussian_bytes: 4 * gaussian_floats,
        dense_bytes: 4 * dense_floats,
        ratio: gaussian_floats as f64 / dense_floats as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub output: FrameOutput,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub frames: Vec<FrameResult>,
    pub memory: MemoryReport,
}

/// Runs every frame in order. Under [`Schedule::TwoPass`] the history of
/// frame `t` is frame `t−1` processed without history; under
/// [`Schedule::Recurrent`] it is frame `t−1`'s own output.
pub fn run_sequence(frames: &[FrameInput], model: &ModelWeights, cfg: &PipelineConfig) -> Result<SequenceOutput> {
    if frames.is_empty() {
        return Err(Error::Usage("a sequence needs at least one frame".into()));
    }
    if let Some(w) = frames.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::Usage(format!(
            "timestamps must increase, got {} after {}",
            w[1].timestamp, w[0].timestamp
        )));
    }
    let mut results = Vec::with_capacity(frames.len());
    let mut history: Option<HistoryState> = None;
    for frame in frames {
        let start = Instant::now();
        let output = process_frame(frame, history.as_ref(), model, cfg)?;
        let next = match cfg.schedule {
            _ if history.is_none() => output.to_history(),
            Schedule::Recurrent => output.to_history(),
            Schedule::TwoPass => process_frame(frame, None, model, cfg)?.to_history(),
        };
        let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        history = Some(next);
        results.push(FrameResult { output, wall_time_ms });
    }
    Ok(SequenceOutput {
        frames: results,
        memory: memory_report(model.init_gaussians.len(), model.num_classes(), cfg.grid.dims),
    })
}
