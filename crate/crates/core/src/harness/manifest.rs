use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{CameraRig, CameraView};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, SemanticGaussian};
use crate::geometry::{CameraModel, RigidPose};
use crate::io::{load_label_grid, save_label_grid, TensorStore};
use crate::splatter::{LabelGrid, VoxelGridSpec};
use crate::temporal::FrameInput;
use crate::tensor::FeatureMap;

/// Name of the tensor holding a feature map, shaped `[height, width, dim]`.
pub const FEATURE_TENSOR: &str = "features";

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-frame cameras, ego poses and file references of a recorded sequence.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub timestamp: u64,
    /// Ego → world.
    pub ego_pose: RigidPose,
    pub cameras: Vec<ManifestCamera>,
    /// Optional label grid in the ego frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    /// Extrinsics map world points into the camera.
    pub camera: CameraModel,
    pub features: PathBuf,
}

/// Frames read back from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSequence {
    pub frames: Vec<FrameInput>,
    /// Present only when every frame lists a ground-truth grid.
    pub ground_truth: Option<Vec<LabelGrid>>,
}

pub fn feature_map_to_store(map: &FeatureMap) -> TensorStore {
    let mut store = TensorStore::default();
    store.insert(
        FEATURE_TENSOR,
        vec![map.height(), map.width(), map.dim()],
        map.as_slice().to_vec(),
    );
    store
}

pub fn feature_map_from_store(store: &TensorStore) -> Result<FeatureMap> {
    let t = store.require(FEATURE_TENSOR)?;
    let &[h, w, d] = t.shape.as_slice() else {
        return Err(Error::Format(format!(
            "feature tensor must have shape [height, width, dim], got {:?}",
            t.shape
        )));
    };
    FeatureMap::from_vec(w, h, d, t.data.clone())
}

pub fn load_sequence(path: &Path) -> Result<LoadedSequence> {
    let manifest: SequenceManifest = serde_json::from_slice(&fs::read(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut truth = Vec::new();
    for (t, f) in manifest.frames.iter().enumerate() {
        let views = f
            .cameras
            .iter()
            .map(|c| {
                let features = feature_map_from_store(&TensorStore::load(&base.join(&c.features))?)?;
                Ok(CameraView {
                    camera: c.camera.rebased(&f.ego_pose),
                    features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rig = CameraRig::new(views).map_err(|e| Error::Config(format!("manifest frame {t}: {e}")))?;
        frames.push(FrameInput {
            rig,
            ego_pose: f.ego_pose,
            timestamp: f.timestamp,
        });
        if let Some(gt) = &f.ground_truth {
            truth.push(load_label_grid(&base.join(gt))?);
        }
    }
    let ground_truth = (!truth.is_empty() && truth.len() == frames.len()).then_some(truth);
    Ok(LoadedSequence { frames, ground_truth })
}

/// Writes feature maps, optional ground truth and a manifest into `dir`;
/// returns the manifest path.
pub fn save_sequence(dir: &Path, frames: &[FrameInput], ground_truth: Option<&[LabelGrid]>) -> Result<PathBuf> {
    if let Some(gt) = ground_truth {
        if gt.len() != frames.len() {
            return Err(Error::Usage(format!(
                "{} ground-truth grids for {} frames",
                gt.len(),
                frames.len()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let world_to_ego = frame.ego_pose.inverse();
        let cameras = frame
            .rig
            .views()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let name = PathBuf::from(format!("frame{t:03}_cam{i}.bin"));
                feature_map_to_store(&v.features).save(&dir.join(&name))?;
                Ok(ManifestCamera {
                    camera: v.camera.rebased(&world_to_ego),
                    features: name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gt = match ground_truth {
            Some(g) => {
                let name = PathBuf::from(format!("frame{t:03}_gt.labels"));
                save_label_grid(&g[t], &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestFrame {
            timestamp: frame.timestamp,
            ego_pose: frame.ego_pose,
            cameras,
            ground_truth: gt,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&SequenceManifest { frames: entries })?)?;
    Ok(path)
}

/// Input of the `splat` subcommand: a Gaussian set and the grid to splat it on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSetFile {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub gaussians: Vec<SemanticGaussian>,
    /// Splat cutoff; absent or `null` splats exactly.
    #[serde(default)]
    pub k_sigma: Option<f64>,
}

impl GaussianSetFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_slice(&fs::read(path)?)?;
        file.set()?;
        Ok(file)
    }

    pub fn set(&self) -> Result<GaussianSet> {
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| SemanticGaussian::new(g.mean, g.scale, g.rotation, g.logits.clone()))
            .collect::<Result<Vec<_>>>()?;
        GaussianSet::new(gaussians, self.num_classes, 0, RigidPose::IDENTITY)
    }
}
