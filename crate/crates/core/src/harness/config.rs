use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::ValueSampling;
use crate::error::{Error, Result};
use crate::gaussian::DEFAULT_OCCUPANCY_THRESHOLD;
use crate::nn::Activation;
use crate::refinement::{BlockOptions, BlockShape, StageOrder};
use crate::splatter::{SplatOptions, VoxelGridSpec};
use crate::temporal::{HistoryMode, ModelShape, PipelineConfig, Schedule};

/// Environment variable that replaces [`RunConfig::seed`].
pub const SEED_ENV: &str = "GAUSSOCC_SEED";

/// Output grid geometry. A missing origin centers the grid on the ego.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    #[serde(default)]
    pub origin: Option<[f64; 3]>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 8],
            voxel_size: 0.5,
            origin: None,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<VoxelGridSpec> {
        match self.origin {
            Some(origin) => VoxelGridSpec::new(origin, self.voxel_size, self.dims),
            None => VoxelGridSpec::centered(self.voxel_size, self.dims),
        }
    }
}

/// Cameras evenly spaced in yaw around the ego, looking outward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraLayout {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    /// Height of the optical centers above the ego origin, meters.
    pub mount_height: f64,
}

impl Default for CameraLayout {
    fn default() -> Self {
        Self {
            count: 6,
            width: 48,
            height: 32,
            hfov_deg: 75.0,
            mount_height: 0.0,
        }
    }
}

/// Object population of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub objects: usize,
    /// Horizontal semi-axis range, meters.
    pub horizontal_axes: [f64; 2],
    /// Vertical semi-axis range, meters.
    pub vertical_axes: [f64; 2],
    /// Upper bound on object speed, meters per frame. Zero keeps every object still.
    pub max_speed: f64,
    /// Ego forward speed, meters per frame.
    pub ego_speed: f64,
    /// Ego yaw rate, radians per frame.
    pub ego_yaw_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: 5,
            horizontal_axes: [1.0, 2.5],
            vertical_axes: [0.6, 1.4],
            max_speed: 0.0,
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
        }
    }
}

/// Everything `run` needs. Every field has a default, so `{}` is a valid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    /// Gaussians per frame.
    pub num_gaussians: usize,
    pub num_classes: usize,
    /// Query and image feature width.
    pub dim: usize,
    pub num_blocks: usize,
    /// Sigma-point reference points per Gaussian.
    pub num_refs: usize,
    /// Deformable sampling points per query.
    pub num_samples: usize,
    /// Neighbors gathered per temporal sample.
    pub knn: usize,
    /// Splat cutoff in standard deviations; `null` disables truncation.
    pub k_sigma: Option<f64>,
    /// Sigma-point spread.
    pub alpha: f64,
    pub tau_occ: f64,
    pub seed: u64,
    pub cameras: CameraLayout,
    pub scene: SceneConfig,
    pub frames: usize,
    /// Worker threads; zero picks one per core.
    pub workers: usize,
    pub deterministic: bool,
    pub attn_hidden: usize,
    pub head_hidden: [usize; 2],
    pub activation: Activation,
    pub history: HistoryMode,
    pub schedule: Schedule,
    pub order: StageOrder,
    /// Load frames from this sequence manifest instead of generating them.
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            num_gaussians: 512,
            num_classes: 16,
            dim: 64,
            num_blocks: 2,
            num_refs: 7,
            num_samples: 4,
            knn: 4,
            k_sigma: Some(3.0),
            alpha: 1.0,
            tau_occ: DEFAULT_OCCUPANCY_THRESHOLD,
            seed: 0,
            cameras: CameraLayout::default(),
            scene: SceneConfig::default(),
            frames: 3,
            workers: 0,
            deterministic: true,
            attn_hidden: 32,
            head_hidden: [64, 64],
            activation: Activation::default(),
            history: HistoryMode::default(),
            schedule: Schedule::default(),
            order: StageOrder::default(),
            manifest: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON config. A relative `manifest` path is
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies [`SEED_ENV`] when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_gaussians", self.num_gaussians),
            ("num_classes", self.num_classes),
            ("dim", self.dim),
            ("num_blocks", self.num_blocks),
            ("num_refs", self.num_refs),
            ("num_samples", self.num_samples),
            ("knn", self.knn),
            ("frames", self.frames),
            ("attn_hidden", self.attn_hidden),
            ("head_hidden[0]", self.head_hidden[0]),
            ("head_hidden[1]", self.head_hidden[1]),
            ("cameras.count", self.cameras.count),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(Error::Config(format!(
                "num_classes {} exceeds {}",
                self.num_classes,
                u16::MAX
            )));
        }
        if let Some(k) = self.k_sigma {
            if !(k > 0.0) {
                return Err(Error::Config(format!("k_sigma must be positive, got {k}")));
            }
        }
        if !(self.tau_occ > 0.0 && self.tau_occ < 1.0) {
            return Err(Error::Config(format!(
                "tau_occ must lie in (0, 1), got {}",
                self.tau_occ
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.cameras.hfov_deg > 0.0 && self.cameras.hfov_deg < 180.0) {
            return Err(Error::Config(format!(
                "hfov_deg must lie in (0, 180), got {}",
                self.cameras.hfov_deg
            )));
        }
        let [lo, hi] = self.scene.horizontal_axes;
        let [vlo, vhi] = self.scene.vertical_axes;
        if !(lo > 0.0 && lo <= hi && vlo > 0.0 && vlo <= vhi) {
            return Err(Error::Config(
                "scene semi-axis ranges must be positive and ordered".into(),
            ));
        }
        if !(self.scene.max_speed >= 0.0) {
            return Err(Error::Config("scene.max_speed must be non-negative".into()));
        }
        self.grid.spec()?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<VoxelGridSpec> {
        self.grid.spec()
    }

    pub fn splat_options(&self) -> SplatOptions {
        SplatOptions {
            k_sigma: self.k_sigma.unwrap_or(f64::INFINITY),
            workers: self.workers.max(1),
            deterministic: self.deterministic,
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let grid = self.grid_spec()?;
        Ok(PipelineConfig {
            grid,
            block: BlockOptions {
                grid,
                sampling: ValueSampling::Knn {
                    k: self.knn,
                    floor: ValueSampling::DEFAULT_FLOOR,
                },
                num_refs: self.num_refs,
                alpha: self.alpha,
                order: self.order,
            },
            splat: self.splat_options(),
            history: self.history,
            schedule: self.schedule,
        })
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            num_gaussians: self.num_gaussians,
            num_blocks: self.num_blocks,
            block: BlockShape {
                dim: self.dim,
                num_classes: self.num_classes,
                num_samples: self.num_samples,
                attn_hidden: self.attn_hidden,
                head_hidden: self.head_hidden,
                activation: self.activation,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_spec().unwrap().dims, [64, 64, 8]);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig {
            k_sigma: None,
            frames: 2,
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.splat_options().k_sigma.is_infinite());
    }

    #[test]
    fn zero_counts_and_unknown_fields_rejected() {
        let cfg = RunConfig {
            num_blocks: 0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("num_blocks")));
        assert!(serde_json::from_str::<RunConfig>(r#"{"num_blocs": 2}"#).is_err());
        let bad_tau = RunConfig {
            tau_occ: 1.0,
            ..RunConfig::default()
        };
        assert!(bad_tau.validate().is_err());
    }
}
