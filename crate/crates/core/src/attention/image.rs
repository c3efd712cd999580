//! Image cross-attention: Gaussians gather multi-camera features at projected
//! sigma points.

use nalgebra::{Cholesky, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttentionWeights, SamplingPlan};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, SemanticGaussian};
use crate::geometry::{CameraModel, RigidPose};
use crate::tensor::{FeatureMap, QueryMatrix};

/// One camera and its feature map, which shares the camera's pixel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub camera: CameraModel,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    views: Vec<CameraView>,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(Error::config("a camera rig needs at least one camera"));
        };
        let dim = first.features.dim();
        for (i, v) in views.iter().enumerate() {
            if v.features.width() != v.camera.width() as usize || v.features.height() != v.camera.height() as usize {
                return Err(Error::config(format!(
                    "camera {i}: feature map {}x{} does not match image {}x{}",
                    v.features.width(),
                    v.features.height(),
                    v.camera.width(),
                    v.camera.height()
                )));
            }
            if v.features.dim() != dim {
                return Err(Error::config(format!(
                    "camera {i}: feature dim {} differs from camera 0 ({dim})",
                    v.features.dim()
                )));
            }
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.views[0].features.dim()
    }

    /// Cameras re-expressed to project points given in the `frame_to_world` frame.
    pub fn rebased(&self, frame_to_world: &RigidPose) -> Self {
        Self {
            views: self
                .views
                .iter()
                .map(|v| CameraView {
                    camera: v.camera.rebased(frame_to_world),
                    features: v.features.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    u: usize,
    v: usize,
    w: f64,
    dw_du: f64,
    dw_dv: f64,
}

/// The up-to-four in-bounds lattice neighbors of `(u, v)` with bilinear weights.
fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> [Option<Tap>; 4] {
    let mut taps = [None; 4];
    if !(u.is_finite() && v.is_finite()) || u <= -1.0 || v <= -1.0 || u >= width as f64 || v >= height as f64 {
        return taps;
    }
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ];
    for (slot, (dx, dy, w, dw_du, dw_dv)) in taps.iter_mut().zip(corners) {
        let (x, y) = (x0 + dx, y0 + dy);
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            *slot = Some(Tap {
                u: x as usize,
                v: y as usize,
                w,
                dw_du,
                dw_dv,
            });
        }
    }
    taps
}

/// Bilinear sample with zero padding; pixel centers at integer coordinates.
pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.dim()];
    for tap in bilinear_taps(map.width(), map.height(), u, v).into_iter().flatten() {
        for (o, f) in out.iter_mut().zip(map.pixel(tap.u, tap.v)) {
            *o += tap.w * f;
        }
    }
    out
}

fn accumulate_2d(plan: &SamplingPlan, reference: [f64; 2], map: &FeatureMap, out: &mut [f64], scale: f64) {
    for s in 0..plan.num_samples() {
        let off = plan.offset(s);
        let a = plan.weights[s] * scale;
        let (u, v) = (reference[0] + off[0], reference[1] + off[1]);
        for tap in bilinear_taps(map.width(), map.height(), u, v).into_iter().flatten() {
            let w = a * tap.w;
            for (o, f) in out.iter_mut().zip(map.pixel(tap.u, tap.v)) {
                *o += w * f;
            }
        }
    }
}

/// Deformable attention over one feature map around pixel `reference`.
pub fn deformable_attn_2d(
    query: &[f64],
    reference: [f64; 2],
    map: &FeatureMap,
    weights: &AttentionWeights,
) -> Vec<f64> {
    let plan = weights.plan(query);
    let mut out = vec![0.0; map.dim()];
    accumulate_2d(&plan, reference, map, &mut out, 1.0);
    out
}

/// Value and gradients of `gradᵀ·deformable_attn_2d(..)`.
#[derive(Debug, Clone)]
pub struct Da2dGradient {
    pub value: Vec<f64>,
    pub d_query: Vec<f64>,
    pub d_features: FeatureMap,
}

/// Accumulates gradients of one reference's samples into `d_offsets` /
/// `d_weights`, and into `d_features` when given.
fn backward_2d(
    plan: &SamplingPlan,
    reference: [f64; 2],
    map: &FeatureMap,
    grad: &[f64],
    scale: f64,
    d_offsets: &mut [f64],
    d_weights: &mut [f64],
    mut d_features: Option<&mut FeatureMap>,
) {
    for s in 0..plan.num_samples() {
        let off = plan.offset(s);
        let (u, v) = (reference[0] + off[0], reference[1] + off[1]);
        let a = plan.weights[s] * scale;
        let (mut g_sample, mut g_u, mut g_v) = (0.0, 0.0, 0.0);
        for tap in bilinear_taps(map.width(), map.height(), u, v).into_iter().flatten() {
            let f = map.pixel(tap.u, tap.v);
            let gf: f64 = f.iter().zip(grad).map(|(a, b)| a * b).sum();
            g_sample += tap.w * gf;
            g_u += tap.dw_du * gf;
            g_v += tap.dw_dv * gf;
            if let Some(df) = d_features.as_deref_mut() {
                for (d, g) in df.pixel_mut(tap.u, tap.v).iter_mut().zip(grad) {
                    *d += a * tap.w * g;
                }
            }
        }
        d_weights[s] += scale * g_sample;
        d_offsets[2 * s] += a * g_u;
        d_offsets[2 * s + 1] += a * g_v;
    }
}

pub fn deformable_attn_2d_vjp(
    query: &[f64],
    reference: [f64; 2],
    map: &FeatureMap,
    weights: &AttentionWeights,
    grad: &[f64],
) -> Da2dGradient {
    let plan = weights.plan(query);
    let mut value = vec![0.0; map.dim()];
    accumulate_2d(&plan, reference, map, &mut value, 1.0);
    let mut d_offsets = vec![0.0; plan.offsets.len()];
    let mut d_weights = vec![0.0; plan.num_samples()];
    let mut d_features = FeatureMap::zeros(map.width(), map.height(), map.dim());
    backward_2d(
        &plan,
        reference,
        map,
        grad,
        1.0,
        &mut d_offsets,
        &mut d_weights,
        Some(&mut d_features),
    );
    Da2dGradient {
        value,
        d_query: weights.backward(&plan, &d_offsets, &d_weights),
        d_features,
    }
}

/// Sigma points: the mean, then `m ± α·L eᵢ` for the Cholesky factor `L` of
/// `Σ`, cycled to exactly `count` points.
pub fn gen_reference_points(g: &SemanticGaussian, count: usize, alpha: f64) -> Vec<Vector3<f64>> {
    let sigma = g.covariance();
    let l = match Cholesky::new(sigma) {
        Some(c) => c.l(),
        None => crate::geometry::quat_to_rot(&g.rotation) * nalgebra::Matrix3::from_diagonal(&g.scale),
    };
    let mut base = Vec::with_capacity(7);
    base.push(g.mean);
    for i in 0..3 {
        let col = l.column(i) * alpha;
        base.push(g.mean + col);
        base.push(g.mean - col);
    }
    (0..count).map(|k| base[k % base.len()]).collect()
}

/// `(1/N) Σₙ Σᵢ DA(q, π(refᵢ; camera n), Fₙ)`; references a camera cannot
/// see contribute nothing to that camera's term.
pub fn image_cross_attention(
    refs: &[Vector3<f64>],
    query: &[f64],
    rig: &CameraRig,
    weights: &AttentionWeights,
) -> Vec<f64> {
    let plan = weights.plan(query);
    let scale = 1.0 / rig.len() as f64;
    let mut out = vec![0.0; rig.feature_dim()];
    for view in rig.views() {
        for r in refs {
            if let Some(px) = view.camera.project(r) {
                accumulate_2d(&plan, [px.u, px.v], &view.features, &mut out, scale);
            }
        }
    }
    out
}

/// Value of [`image_cross_attention`] and its gradient with respect to the query.
pub fn image_cross_attention_vjp(
    refs: &[Vector3<f64>],
    query: &[f64],
    rig: &CameraRig,
    weights: &AttentionWeights,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plan = weights.plan(query);
    let scale = 1.0 / rig.len() as f64;
    let mut value = vec![0.0; rig.feature_dim()];
    let mut d_offsets = vec![0.0; plan.offsets.len()];
    let mut d_weights = vec![0.0; plan.num_samples()];
    for view in rig.views() {
        for r in refs {
            if let Some(px) = view.camera.project(r) {
                let reference = [px.u, px.v];
                accumulate_2d(&plan, reference, &view.features, &mut value, scale);
                backward_2d(
                    &plan,
                    reference,
                    &view.features,
                    grad,
                    scale,
                    &mut d_offsets,
                    &mut d_weights,
                    None,
                );
            }
        }
    }
    (value, weights.backward(&plan, &d_offsets, &d_weights))
}

/// Cross-attention output for every Gaussian (to be added to its query).
pub fn image_cross_attention_all(
    set: &GaussianSet,
    queries: &QueryMatrix,
    rig: &CameraRig,
    weights: &AttentionWeights,
    num_refs: usize,
    alpha: f64,
) -> Result<QueryMatrix> {
    if queries.rows() != set.len() {
        return Err(Error::config(format!(
            "{} queries for {} gaussians",
            queries.rows(),
            set.len()
        )));
    }
    if queries.dim() != weights.cond_dim() || rig.feature_dim() != queries.dim() {
        return Err(Error::config(format!(
            "query dim {}, attention input {}, image features {} must agree",
            queries.dim(),
            weights.cond_dim(),
            rig.feature_dim()
        )));
    }
    if weights.offset_dims() != 2 {
        return Err(Error::config("image attention needs 2D offsets"));
    }
    let rows: Vec<Vec<f64>> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let refs = gen_reference_points(g, num_refs, alpha);
            image_cross_attention(&refs, queries.row(i), rig, weights)
        })
        .collect();
    QueryMatrix::from_rows(queries.dim(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, UnitQuaternion};
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(extrinsics: RigidPose, w: u32, h: u32) -> CameraModel {
        let k = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        };
        CameraModel::new(k, extrinsics, w, h).unwrap()
    }

    fn random_map(rng: &mut impl Rng, w: usize, h: usize, d: usize) -> FeatureMap {
        FeatureMap::from_vec(w, h, d, (0..w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bilinear_hits_lattice_exactly_and_pads_with_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 5, 4, 3);
        assert_eq!(bilinear_sample(&map, 2.0, 3.0), map.pixel(2, 3));
        assert_eq!(bilinear_sample(&map, -1.0, 0.0), vec![0.0; 3]);
        assert_eq!(bilinear_sample(&map, 5.0, 0.0), vec![0.0; 3]);
        // Halfway past the last column: half the edge pixel.
        let half = bilinear_sample(&map, 4.5, 1.0);
        for (a, b) in half.iter().zip(map.pixel(4, 1)) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_map_returns_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = [0.5, -1.25, 2.0, 0.0];
        let map = FeatureMap::constant(40, 30, &f);
        let w = AttentionWeights::random(4, 2, 4, &[8], Activation::Silu, &mut rng);
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = deformable_attn_2d(&q, [19.3, 14.8], &map, &w);
            for (a, b) in out.iter().zip(&f) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_offset_single_sample_reads_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 6, 6, 2);
        let w = AttentionWeights::zeros(2, 2, 1, &[4], Activation::Silu);
        assert_eq!(deformable_attn_2d(&[0.3, 0.4], [4.0, 1.0], &map, &w), map.pixel(4, 1));
    }

    /// Step-by-step transcript: offsets and logits by explicit matrix products,
    /// softmax by hand, bilinear sampling by the four-corner formula.
    #[test]
    fn matches_step_by_step_transcript() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 7, 5, 3);
        let w = AttentionWeights::random(3, 2, 3, &[4], Activation::Tanh, &mut rng);
        let q = [0.2, -0.7, 1.1];
        let reference = [3.3, 2.1];

        let mlp = |net: &crate::nn::Mlp, x: &[f64]| {
            let mut h = x.to_vec();
            for (i, l) in net.layers().iter().enumerate() {
                let mut z = vec![0.0; l.out_dim()];
                for o in 0..l.out_dim() {
                    z[o] = l.bias()[o];
                    for j in 0..l.in_dim() {
                        z[o] += l.weight()[o * l.in_dim() + j] * h[j];
                    }
                }
                h = if i + 1 < net.layers().len() {
                    z.iter().map(|v| v.tanh()).collect()
                } else {
                    z
                };
            }
            h
        };
        let offsets = mlp(w.offset_net(), &q);
        let logits = mlp(w.weight_net(), &q);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut want = vec![0.0; 3];
        for s in 0..3 {
            let a = logits[s].exp() / z;
            let (u, v) = (reference[0] + offsets[2 * s], reference[1] + offsets[2 * s + 1]);
            let (x0, y0) = (u.floor() as i64, v.floor() as i64);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            for (dx, dy, cw) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= 0 && y >= 0 && x < 7 && y < 5 {
                    for d in 0..3 {
                        want[d] += a * cw * map.pixel(x as usize, y as usize)[d];
                    }
                }
            }
        }
        let got = deformable_attn_2d(&q, reference, &map, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_points_unit_isotropic() {
        let g = SemanticGaussian::new(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::repeat(1.0),
            UnitQuaternion::IDENTITY,
            vec![0.0],
        )
        .unwrap();
        assert_eq!(gen_reference_points(&g, 1, 1.0), vec![g.mean]);
        let pts = gen_reference_points(&g, 7, 1.0);
        let m = g.mean;
        let want = [
            m,
            m + Vector3::x(),
            m - Vector3::x(),
            m + Vector3::y(),
            m - Vector3::y(),
            m + Vector3::z(),
            m - Vector3::z(),
        ];
        for (a, b) in pts.iter().zip(&want) {
            assert!((a - b).norm() < 1e-15);
        }
        assert_eq!(gen_reference_points(&g, 9, 1.0)[7], m);
    }

    #[test]
    fn sigma_points_lie_on_alpha_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = SemanticGaussian::new(
                Vector3::zeros(),
                Vector3::from_fn(|_, _| rng.gen_range(0.1..3.0)),
                UnitQuaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    0.3,
                )
                .unwrap(),
                vec![0.0],
            )
            .unwrap();
            let alpha = rng.gen_range(0.5..2.0);
            let prepared = g.prepare();
            for p in &gen_reference_points(&g, 7, alpha)[1..] {
                assert!((prepared.mahalanobis_sq(p) - alpha * alpha).abs() < 1e-9);
            }
        }
    }

    fn forward_camera() -> CameraModel {
        // Ego x-forward to camera z-forward: camera axes (x right, y down, z fwd)
        // from world (x fwd, y left, z up).
        let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let q = nalgebra::UnitQuaternion::from_matrix(&r);
        let q = UnitQuaternion::new(q.w, q.i, q.j, q.k).unwrap();
        camera(RigidPose::new(q, Vector3::zeros()), 21, 21)
    }

    #[test]
    fn single_camera_lattice_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = forward_camera();
        // 10 m ahead, 1 m left and 0.5 m up → pixel (10 - 2, 10 - 1) = (8, 9).
        let p = Vector3::new(10.0, 1.0, 0.5);
        let px = cam.project(&p).unwrap();
        assert!((px.u - 8.0).abs() < 1e-12 && (px.v - 9.0).abs() < 1e-12);
        let map = random_map(&mut rng, 21, 21, 3);
        let rig = CameraRig::new(vec![CameraView {
            camera: cam,
            features: map.clone(),
        }])
        .unwrap();
        let w = AttentionWeights::zeros(3, 2, 1, &[4], Activation::Silu);
        let out = image_cross_attention(&[p], &[0.0; 3], &rig, &w);
        for (a, b) in out.iter().zip(map.pixel(8, 9)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn references_behind_all_cameras_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rig = CameraRig::new(vec![CameraView {
            camera: forward_camera(),
            features: random_map(&mut rng, 21, 21, 2),
        }])
        .unwrap();
        let w = AttentionWeights::random(2, 2, 4, &[4], Activation::Silu, &mut rng);
        let refs = [Vector3::new(-5.0, 0.0, 0.0), Vector3::new(-1.0, 3.0, 0.0)];
        assert_eq!(image_cross_attention(&refs, &[0.1, 0.2], &rig, &w), vec![0.0; 2]);
    }

    #[test]
    fn two_constant_cameras_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f1, f2) = ([1.0, 2.0], [3.0, -4.0]);
        let cam = forward_camera();
        let rig = CameraRig::new(vec![
            CameraView {
                camera: cam,
                features: FeatureMap::constant(21, 21, &f1),
            },
            CameraView {
                camera: cam,
                features: FeatureMap::constant(21, 21, &f2),
            },
        ])
        .unwrap();
        let w = AttentionWeights::random(2, 2, 4, &[4], Activation::Silu, &mut rng);
        let refs: Vec<_> = (0..5).map(|i| Vector3::new(10.0, 0.3 * i as f64, -0.2)).collect();
        let out = image_cross_attention(&refs, &[0.4, -0.3], &rig, &w);
        let r = refs.len() as f64;
        for d in 0..2 {
            assert!((out[d] - r * (f1[d] + f2[d]) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_camera_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let view = CameraView {
            camera: forward_camera(),
            features: random_map(&mut rng, 21, 21, 3),
        };
        let one = CameraRig::new(vec![view.clone()]).unwrap();
        let three = CameraRig::new(vec![view.clone(), view.clone(), view]).unwrap();
        let w = AttentionWeights::random(3, 2, 4, &[5], Activation::Silu, &mut rng);
        let refs = [Vector3::new(8.0, 0.5, 0.2), Vector3::new(9.0, -1.0, 1.0)];
        let q = [0.1, 0.5, -0.2];
        let a = image_cross_attention(&refs, &q, &one, &w);
        let b = image_cross_attention(&refs, &q, &three, &w);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rig_validation() {
        assert!(CameraRig::new(vec![]).is_err());
        let bad = CameraView {
            camera: forward_camera(),
            features: FeatureMap::zeros(20, 21, 2),
        };
        assert!(CameraRig::new(vec![bad]).is_err());
    }
}
