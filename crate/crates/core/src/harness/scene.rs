use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CameraLayout, RunConfig, SceneConfig};
use crate::attention::{CameraRig, CameraView};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, Label, SemanticGaussian};
use crate::geometry::{CameraModel, Intrinsics, RigidPose, UnitQuaternion};
use crate::splatter::{splat, LabelGrid, SplatOptions, VoxelGridSpec};
use crate::temporal::FrameInput;
use crate::tensor::FeatureMap;
use crate::verification::ConfusionAccumulator;

/// A solid ellipsoid carrying one class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub orientation: UnitQuaternion,
    pub label: u16,
    /// Constant world-frame velocity, meters per frame.
    #[serde(default)]
    pub velocity: Option<Vector3<f64>>,
}

impl SceneObject {
    pub fn center_at(&self, frame: u64) -> Vector3<f64> {
        match self.velocity {
            Some(v) => self.center + v * frame as f64,
            None => self.center,
        }
    }

    /// `Σ (lᵢ / aᵢ)²` for the point in object coordinates; at most one inside.
    pub fn level(&self, p: &Vector3<f64>, frame: u64) -> f64 {
        let local = self.orientation.conjugate().rotate(&(p - self.center_at(frame)));
        local.component_div(&self.semi_axes).norm_squared()
    }

    pub fn contains(&self, p: &Vector3<f64>, frame: u64) -> bool {
        self.level(p, frame) <= 1.0
    }

    /// Smallest positive ray parameter where `origin + s·dir` meets the surface.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: u64) -> Option<f64> {
        let inv = self.orientation.conjugate();
        let o = inv
            .rotate(&(origin - self.center_at(frame)))
            .component_div(&self.semi_axes);
        let d = inv.rotate(dir).component_div(&self.semi_axes);
        let a = d.norm_squared();
        let b = 2.0 * o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if a == 0.0 || disc < 0.0 {
            return None;
        }
        let root = disc.sqrt();
        [(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)]
            .into_iter()
            .find(|s| *s > 0.0)
    }

    /// Gaussian whose `tau` level set is this ellipsoid's surface.
    pub fn oracle_gaussian(&self, frame: u64, tau: f64, num_classes: usize) -> Result<SemanticGaussian> {
        let shrink = (2.0 * (1.0 / tau).ln()).sqrt();
        let mut logits = vec![0.0; num_classes];
        logits[self.label as usize] = 1.0;
        SemanticGaussian::new(self.center_at(frame), self.semi_axes / shrink, self.orientation, logits)
    }
}

/// Ellipsoidal objects inside axis-aligned world bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    /// `[min, max]` corners, meters.
    pub bounds: [[f64; 3]; 2],
    pub num_classes: usize,
}

impl SyntheticScene {
    pub fn new(objects: Vec<SceneObject>, bounds: [[f64; 3]; 2], num_classes: usize) -> Result<Self> {
        for (i, o) in objects.iter().enumerate() {
            if !o.semi_axes.iter().all(|a| *a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("object {i}: semi-axes must be positive")));
            }
            if o.label as usize >= num_classes {
                return Err(Error::Config(format!(
                    "object {i}: label {} not below class count {num_classes}",
                    o.label
                )));
            }
        }
        Ok(Self {
            objects,
            bounds,
            num_classes,
        })
    }

    /// Class of the object containing `p`; overlaps go to the nearest center.
    pub fn label_at(&self, p: &Vector3<f64>, frame: u64) -> Label {
        let mut best: Option<(f64, u16)> = None;
        for o in &self.objects {
            if o.contains(p, frame) {
                let d = (p - o.center_at(frame)).norm_squared();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, o.label));
                }
            }
        }
        best.map_or(Label::Empty, |(_, l)| Label::Class(l))
    }

    /// Labels of voxel centers given in the ego frame at `ego_pose`.
    pub fn ground_truth(&self, spec: &VoxelGridSpec, ego_pose: &RigidPose, frame: u64) -> LabelGrid {
        let labels = spec
            .indices()
            .map(|idx| self.label_at(&ego_pose.apply(&spec.center(idx)), frame))
            .collect();
        LabelGrid { spec: *spec, labels }
    }

    /// One level-set-fitted Gaussian per object, in the ego frame at `ego_pose`.
    pub fn oracle_gaussians(&self, tau: f64, ego_pose: &RigidPose, frame: u64) -> Result<GaussianSet> {
        let to_ego = ego_pose.inverse();
        let gaussians = self
            .objects
            .iter()
            .map(|o| Ok(o.oracle_gaussian(frame, tau, self.num_classes)?.transformed(&to_ego)))
            .collect::<Result<Vec<_>>>()?;
        GaussianSet::new(gaussians, self.num_classes, frame, *ego_pose)
    }

    /// Class-coded view: each pixel holds the embedding of the nearest object
    /// along its ray, or zeros. `camera` maps world points.
    pub fn render(&self, camera: &CameraModel, frame: u64, dim: usize) -> FeatureMap {
        let (w, h) = (camera.width() as usize, camera.height() as usize);
        let mut map = FeatureMap::zeros(w, h, dim);
        if self.objects.is_empty() {
            return map;
        }
        let ext = camera.extrinsics();
        let back = ext.rotation.conjugate();
        let origin = back.rotate(&(-ext.translation_vector()));
        let k = camera.intrinsics();
        let embeddings: Vec<Vec<f64>> = self
            .objects
            .iter()
            .map(|o| class_embedding(o.label, self.num_classes, dim))
            .collect();
        for v in 0..h {
            for u in 0..w {
                let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let dir = back.rotate(&ray);
                let hit = self
                    .objects
                    .iter()
                    .enumerate()
                    .filter_map(|(i, o)| o.ray_hit(&origin, &dir, frame).map(|s| (s, i)))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((_, i)) = hit {
                    map.pixel_mut(u, v).copy_from_slice(&embeddings[i]);
                }
            }
        }
        map
    }
}

/// Feature of a class: ones at every channel congruent to the label modulo
/// the class count.
pub fn class_embedding(label: u16, num_classes: usize, dim: usize) -> Vec<f64> {
    let label = label as usize;
    let mut e: Vec<f64> = (0..dim)
        .map(|j| f64::from(u8::from(j % num_classes.max(1) == label)))
        .collect();
    if label >= dim && dim > 0 {
        e[label % dim] = 1.0;
    }
    e
}

/// Ego-mounted cameras evenly spaced in yaw, extrinsics ego → camera.
pub fn camera_ring(layout: &CameraLayout) -> Result<Vec<CameraModel>> {
    let fx = 0.5 * layout.width as f64 / (0.5 * layout.hfov_deg.to_radians()).tan();
    let intrinsics = Intrinsics {
        fx,
        fy: fx,
        cx: 0.5 * (layout.width as f64 - 1.0),
        cy: 0.5 * (layout.height as f64 - 1.0),
    };
    let optical_center = Vector3::new(0.0, 0.0, layout.mount_height);
    (0..layout.count)
        .map(|i| {
            let yaw = std::f64::consts::TAU * i as f64 / layout.count as f64;
            let (s, c) = yaw.sin_cos();
            // Columns are the camera's right, down and forward axes in the ego frame.
            let cam_to_ego = Matrix3::new(s, 0.0, c, -c, 0.0, s, 0.0, -1.0, 0.0);
            let rotation = UnitQuaternion::from_rotation_matrix(&cam_to_ego.transpose());
            let translation = -rotation.rotate(&optical_center);
            CameraModel::new(
                intrinsics,
                RigidPose::new(rotation, translation),
                layout.width,
                layout.height,
            )
        })
        .collect()
}

/// Ego → world at `frame`, driving forward while yawing at a constant rate.
pub fn ego_pose_at(scene: &SceneConfig, frame: u64) -> RigidPose {
    let mut position = Vector3::zeros();
    for i in 0..frame {
        let yaw = scene.ego_yaw_rate * i as f64;
        position += scene.ego_speed * Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    }
    RigidPose::new(UnitQuaternion::from_yaw(scene.ego_yaw_rate * frame as f64), position)
}

/// Non-overlapping ellipsoids inside `bounds`, kept clear of the ego origin.
pub fn random_objects(
    cfg: &SceneConfig,
    bounds: [[f64; 3]; 2],
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SceneObject>> {
    const ATTEMPTS: usize = 10_000;
    const GAP: f64 = 0.5;
    let mut labels: Vec<u16> = (0..num_classes as u16).collect();
    labels.shuffle(rng);
    let [lo, hi] = bounds;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.objects);
    for n in 0..cfg.objects {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let semi_axes = Vector3::new(
                rng.gen_range(cfg.horizontal_axes[0]..=cfg.horizontal_axes[1]),
                rng.gen_range(cfg.horizontal_axes[0]..=cfg.horizontal_axes[1]),
                rng.gen_range(cfg.vertical_axes[0]..=cfg.vertical_axes[1]),
            );
            let radius = semi_axes.max();
            let reach = semi_axes.x.max(semi_axes.y);
            let (x_lo, x_hi) = (lo[0] + reach, hi[0] - reach);
            let (y_lo, y_hi) = (lo[1] + reach, hi[1] - reach);
            let (z_lo, z_hi) = (lo[2] + semi_axes.z, hi[2] - semi_axes.z);
            if x_lo >= x_hi || y_lo >= y_hi {
                continue;
            }
            let z = if z_lo < z_hi {
                rng.gen_range(z_lo..z_hi)
            } else {
                0.5 * (lo[2] + hi[2])
            };
            let center = Vector3::new(rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi), z);
            if center.xy().norm() < reach + 1.5 {
                continue;
            }
            let clear = objects
                .iter()
                .all(|o| (o.center - center).norm() >= o.semi_axes.max() + radius + GAP);
            if !clear {
                continue;
            }
            let velocity = (cfg.max_speed > 0.0).then(|| {
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                rng.gen_range(0.0..=cfg.max_speed) * Vector3::new(heading.cos(), heading.sin(), 0.0)
            });
            let label = labels
                .get(n)
                .copied()
                .unwrap_or_else(|| rng.gen_range(0..num_classes as u16));
            placed = Some(SceneObject {
                center,
                semi_axes,
                orientation: UnitQuaternion::from_yaw(rng.gen_range(0.0..std::f64::consts::TAU)),
                label,
                velocity,
            });
            break;
        }
        objects.push(placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place {} objects without overlap in the grid",
                cfg.objects
            ))
        })?);
    }
    Ok(objects)
}

/// A scene plus everything the pipeline and the metrics consume per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub scene: SyntheticScene,
    /// Ego-frame labels of the output grid, one per frame.
    pub ground_truth: Vec<LabelGrid>,
    pub frames: Vec<FrameInput>,
}

/// Renders `scene` for `cfg.frames` frames with the configured ring and ego motion.
pub fn build_sequence(scene: SyntheticScene, cfg: &RunConfig) -> Result<GeneratedSequence> {
    let spec = cfg.grid_spec()?;
    let cameras = camera_ring(&cfg.cameras)?;
    let mut ground_truth = Vec::with_capacity(cfg.frames);
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames as u64 {
        let ego_pose = ego_pose_at(&cfg.scene, t);
        let world_to_ego = ego_pose.inverse();
        let views = cameras
            .iter()
            .map(|cam| CameraView {
                camera: *cam,
                features: scene.render(&cam.rebased(&world_to_ego), t, cfg.dim),
            })
            .collect();
        ground_truth.push(scene.ground_truth(&spec, &ego_pose, t));
        frames.push(FrameInput {
            rig: CameraRig::new(views)?,
            ego_pose,
            timestamp: t,
        });
    }
    Ok(GeneratedSequence {
        scene,
        ground_truth,
        frames,
    })
}

/// Seeded scene over the configured grid, rendered for every frame.
pub fn generate_scene(cfg: &RunConfig, seed: u64) -> Result<GeneratedSequence> {
    cfg.validate()?;
    let spec = cfg.grid_spec()?;
    let bounds = [spec.origin, spec.upper_corner().into()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = random_objects(&cfg.scene, bounds, cfg.num_classes, &mut rng)?;
    build_sequence(SyntheticScene::new(objects, bounds, cfg.num_classes)?, cfg)
}

/// How well splatting the oracle-fitted Gaussians reproduces the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub occupied_voxels: usize,
    /// Fraction of ground-truth occupied voxels given the right class.
    pub occupied_agreement: f64,
    pub miou: f64,
    pub sc_iou: f64,
}

pub fn oracle_fidelity(
    scene: &SyntheticScene,
    spec: &VoxelGridSpec,
    tau: f64,
    opts: &SplatOptions,
    ego_pose: &RigidPose,
    frame: u64,
) -> Result<FidelityReport> {
    let gt = scene.ground_truth(spec, ego_pose, frame);
    let set = scene.oracle_gaussians(tau, ego_pose, frame)?;
    let pred = splat(&set, spec, opts).classify(tau);
    let occupied = gt.labels.iter().filter(|l| l.is_occupied()).count();
    let agree = gt
        .labels
        .iter()
        .zip(&pred.labels)
        .filter(|(g, p)| g.is_occupied() && g == p)
        .count();
    let mut acc = ConfusionAccumulator::new(scene.num_classes);
    acc.add(&pred, &gt)?;
    let classes: Vec<usize> = (0..scene.num_classes).collect();
    Ok(FidelityReport {
        occupied_voxels: occupied,
        occupied_agreement: if occupied == 0 {
            1.0
        } else {
            agree as f64 / occupied as f64
        },
        miou: acc.miou(&classes),
        sc_iou: acc.sc_iou(),
    })
}
