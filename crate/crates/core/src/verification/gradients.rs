//! Finite-difference checks of every analytic gradient on seeded instances.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{finite_diff, relative_error};
use crate::attention::{
    deformable_attn_2d, deformable_attn_2d_vjp, deformable_attn_3d, deformable_attn_3d_vjp, gen_reference_points,
    image_cross_attention, image_cross_attention_vjp, AttentionWeights, CameraRig, CameraView, ValueField,
    ValueSampling,
};
use crate::error::{Error, Result};
use crate::gaussian::{eval_gaussian, grad_eval_gaussian, SemanticGaussian};
use crate::geometry::{CameraModel, Intrinsics, RigidPose, UnitQuaternion};
use crate::nn::Activation;
use crate::refinement::{decode_properties, decode_properties_vjp, RefineHead};
use crate::tensor::{FeatureMap, QueryMatrix};

/// Finite-difference step factor used by every suite.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-6;
/// Samples closer than this to a point where the function is not smooth are
/// redrawn, since a central difference straddling the kink is meaningless.
pub const KINK_MARGIN: f64 = 1e-3;
/// Largest relative error a gradient suite may report.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientOp {
    /// Kernel-weighted logits with respect to mean, scale, rotation, logits and point.
    EvalGaussian,
    Da2dQuery,
    Da2dFeatures,
    Da3dQuery,
    Da3dFeatures,
    ImageCrossAttentionQuery,
    DecodeProperties,
}

impl GradientOp {
    pub const ALL: [GradientOp; 7] = [
        GradientOp::EvalGaussian,
        GradientOp::Da2dQuery,
        GradientOp::Da2dFeatures,
        GradientOp::Da3dQuery,
        GradientOp::Da3dFeatures,
        GradientOp::ImageCrossAttentionQuery,
        GradientOp::DecodeProperties,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradientOp::EvalGaussian => "eval_gaussian",
            GradientOp::Da2dQuery => "deformable_attn_2d/query",
            GradientOp::Da2dFeatures => "deformable_attn_2d/features",
            GradientOp::Da3dQuery => "deformable_attn_3d/query",
            GradientOp::Da3dFeatures => "deformable_attn_3d/features",
            GradientOp::ImageCrossAttentionQuery => "image_cross_attention/query",
            GradientOp::DecodeProperties => "decode_properties",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub op: String,
    pub cases: usize,
    /// Draws discarded for lying within [`KINK_MARGIN`] of a non-smooth point.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

impl GradientReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// One drawn case: analytic gradient and central-difference estimate, or
/// `None` when the draw sits too close to a kink.
type Case = Option<(Vec<f64>, Vec<f64>)>;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn activation(rng: &mut impl Rng) -> Activation {
    if rng.gen_bool(0.5) {
        Activation::Silu
    } else {
        Activation::Tanh
    }
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion {
    loop {
        let q = uniform(rng, 4, 1.0);
        if q.iter().map(|x| x * x).sum::<f64>() > 0.05 {
            return UnitQuaternion::from_array([q[0], q[1], q[2], q[3]]).expect("norm checked");
        }
    }
}

/// Distance from the nearest integer: bilinear weights bend on lattice lines.
fn lattice_margin(x: f64) -> f64 {
    (x - x.round()).abs()
}

fn eval_gaussian_case(rng: &mut impl Rng) -> Result<Case> {
    let c = 3;
    let mean = Vector3::from_vec(uniform(rng, 3, 2.0));
    let scale = Vector3::from_fn(|_, _| rng.gen_range(0.3..2.0));
    let rotation = random_rotation(rng);
    let logits = uniform(rng, c, 1.0);
    let g = SemanticGaussian::new(mean, scale, rotation, logits)?;
    let dir = Vector3::from_vec(uniform(rng, 3, 1.0)).normalize();
    let radius = rng.gen_range(0.3..2.5);
    let p = mean + rotation.to_rotation_matrix() * Matrix3::from_diagonal(&scale) * dir * radius;
    let w = uniform(rng, c, 1.0);

    let grad = grad_eval_gaussian(&g, &p);
    let wc = dot(&w, &g.logits);
    let mut analytic = Vec::with_capacity(13 + c);
    analytic.extend((grad.d_mean * wc).iter());
    analytic.extend((grad.d_scale * wc).iter());
    analytic.extend(grad.d_rotation.iter().map(|d| d * wc));
    analytic.extend(w.iter().map(|wi| wi * grad.kernel));
    analytic.extend((grad.d_point * wc).iter());

    let mut x = Vec::with_capacity(13 + c);
    x.extend(g.mean.iter());
    x.extend(g.scale.iter());
    x.extend(g.rotation.to_array());
    x.extend(&g.logits);
    x.extend(p.iter());
    let f = |x: &[f64]| -> f64 {
        let r = UnitQuaternion::from_array([x[6], x[7], x[8], x[9]]).expect("near unit");
        let g = SemanticGaussian {
            mean: Vector3::new(x[0], x[1], x[2]),
            scale: Vector3::new(x[3], x[4], x[5]),
            rotation: r,
            logits: x[10..10 + c].to_vec(),
        };
        let p = Vector3::new(x[10 + c], x[11 + c], x[12 + c]);
        dot(&w, &eval_gaussian(&g, &p))
    };
    Ok(Some((analytic, finite_diff(f, &x, FD_STEP)?)))
}

struct Da2dSetup {
    map: FeatureMap,
    weights: AttentionWeights,
    query: Vec<f64>,
    reference: [f64; 2],
    w: Vec<f64>,
}

fn da2d_setup(rng: &mut impl Rng) -> Option<Da2dSetup> {
    let (width, height, d) = (10, 8, 3);
    let map = FeatureMap::from_vec(width, height, d, uniform(rng, width * height * d, 1.0)).expect("sized");
    let act = activation(rng);
    let weights = AttentionWeights::random(d, 2, 4, &[8], act, rng);
    let query = uniform(rng, d, 1.0);
    let reference = [
        rng.gen_range(0.0..(width - 1) as f64),
        rng.gen_range(0.0..(height - 1) as f64),
    ];
    let plan = weights.plan(&query);
    for s in 0..plan.num_samples() {
        let off = plan.offset(s);
        if lattice_margin(reference[0] + off[0]).min(lattice_margin(reference[1] + off[1])) < KINK_MARGIN {
            return None;
        }
    }
    let w = uniform(rng, d, 1.0);
    Some(Da2dSetup {
        map,
        weights,
        query,
        reference,
        w,
    })
}

fn da2d_query_case(rng: &mut impl Rng) -> Result<Case> {
    let Some(s) = da2d_setup(rng) else { return Ok(None) };
    let analytic = deformable_attn_2d_vjp(&s.query, s.reference, &s.map, &s.weights, &s.w).d_query;
    let f = |q: &[f64]| dot(&s.w, &deformable_attn_2d(q, s.reference, &s.map, &s.weights));
    Ok(Some((analytic, finite_diff(f, &s.query, FD_STEP)?)))
}

fn da2d_features_case(rng: &mut impl Rng) -> Result<Case> {
    let Some(s) = da2d_setup(rng) else { return Ok(None) };
    let analytic = deformable_attn_2d_vjp(&s.query, s.reference, &s.map, &s.weights, &s.w).d_features;
    let (width, height, d) = (s.map.width(), s.map.height(), s.map.dim());
    let f = |x: &[f64]| {
        let map = FeatureMap::from_vec(width, height, d, x.to_vec()).expect("sized");
        dot(&s.w, &deformable_attn_2d(&s.query, s.reference, &map, &s.weights))
    };
    Ok(Some((
        analytic.as_slice().to_vec(),
        finite_diff(f, s.map.as_slice(), FD_STEP)?,
    )))
}

struct Da3dSetup {
    positions: Vec<Vector3<f64>>,
    features: QueryMatrix,
    sampling: ValueSampling,
    weights: AttentionWeights,
    query: Vec<f64>,
    point: Vector3<f64>,
    w: Vec<f64>,
}

fn da3d_setup(rng: &mut impl Rng) -> Result<Option<Da3dSetup>> {
    let (n, d) = (16, 3);
    let positions: Vec<_> = (0..n).map(|_| Vector3::from_vec(uniform(rng, 3, 2.0))).collect();
    let features = QueryMatrix::from_vec(n, d, uniform(rng, n * d, 1.0))?;
    let sampling = ValueSampling::default();
    let field = ValueField::new(positions.clone(), features.clone(), &sampling)?;
    let act = activation(rng);
    let weights = AttentionWeights::random(d, 3, 4, &[8], act, rng);
    let query = uniform(rng, d, 1.0);
    let point = Vector3::from_vec(uniform(rng, 3, 1.5));
    let plan = weights.plan(&query);
    for s in 0..plan.num_samples() {
        let off = plan.offset(s);
        if field.kink_margin(&(point + Vector3::new(off[0], off[1], off[2]))) < KINK_MARGIN {
            return Ok(None);
        }
    }
    let w = uniform(rng, d, 1.0);
    Ok(Some(Da3dSetup {
        positions,
        features,
        sampling,
        weights,
        query,
        point,
        w,
    }))
}

fn da3d_query_case(rng: &mut impl Rng) -> Result<Case> {
    let Some(s) = da3d_setup(rng)? else { return Ok(None) };
    let field = ValueField::new(s.positions.clone(), s.features.clone(), &s.sampling)?;
    let analytic = deformable_attn_3d_vjp(&s.query, &s.point, &field, &s.weights, &s.w)?.d_cond;
    let f = |q: &[f64]| {
        dot(
            &s.w,
            &deformable_attn_3d(q, &s.point, &field, &s.weights).expect("3D weights"),
        )
    };
    Ok(Some((analytic, finite_diff(f, &s.query, FD_STEP)?)))
}

fn da3d_features_case(rng: &mut impl Rng) -> Result<Case> {
    let Some(s) = da3d_setup(rng)? else { return Ok(None) };
    let field = ValueField::new(s.positions.clone(), s.features.clone(), &s.sampling)?;
    let analytic = deformable_attn_3d_vjp(&s.query, &s.point, &field, &s.weights, &s.w)?.d_features;
    let (n, d) = (s.features.rows(), s.features.dim());
    let f = |x: &[f64]| {
        let feats = QueryMatrix::from_vec(n, d, x.to_vec()).expect("sized");
        let field = ValueField::new(s.positions.clone(), feats, &s.sampling).expect("valid field");
        dot(
            &s.w,
            &deformable_attn_3d(&s.query, &s.point, &field, &s.weights).expect("3D weights"),
        )
    };
    Ok(Some((
        analytic.as_slice().to_vec(),
        finite_diff(f, s.features.as_slice(), FD_STEP)?,
    )))
}

fn forward_camera(yaw: f64, width: u32, height: u32) -> Result<CameraModel> {
    // Ego axes (x forward, y left, z up) to camera axes (x right, y down, z forward).
    let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let r = base * UnitQuaternion::from_yaw(-yaw).to_rotation_matrix();
    let q = nalgebra::UnitQuaternion::from_matrix(&r);
    let q = UnitQuaternion::new(q.w, q.i, q.j, q.k)?;
    let k = Intrinsics {
        fx: width as f64 / 2.0,
        fy: width as f64 / 2.0,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
    };
    CameraModel::new(k, RigidPose::new(q, Vector3::zeros()), width, height)
}

fn ica_query_case(rng: &mut impl Rng) -> Result<Case> {
    let (width, height, d) = (16u32, 12u32, 4);
    let views = [-0.4, 0.4]
        .into_iter()
        .map(|yaw| {
            let features = FeatureMap::from_vec(
                width as usize,
                height as usize,
                d,
                uniform(rng, (width * height) as usize * d, 1.0),
            )?;
            Ok(CameraView {
                camera: forward_camera(yaw, width, height)?,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rig = CameraRig::new(views)?;
    let g = SemanticGaussian::new(
        Vector3::new(
            rng.gen_range(4.0..8.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..1.0),
        ),
        Vector3::from_fn(|_, _| rng.gen_range(0.2..0.8)),
        random_rotation(rng),
        vec![0.0],
    )?;
    let refs = gen_reference_points(&g, 7, 1.0);
    let act = activation(rng);
    let weights = AttentionWeights::random(d, 2, 4, &[8], act, rng);
    let query = uniform(rng, d, 1.0);
    let plan = weights.plan(&query);
    for view in rig.views() {
        for r in &refs {
            if let Some(px) = view.camera.project(r) {
                for s in 0..plan.num_samples() {
                    let off = plan.offset(s);
                    if lattice_margin(px.u + off[0]).min(lattice_margin(px.v + off[1])) < KINK_MARGIN {
                        return Ok(None);
                    }
                }
            }
        }
    }
    let w = uniform(rng, d, 1.0);
    let (_, analytic) = image_cross_attention_vjp(&refs, &query, &rig, &weights, &w);
    let f = |q: &[f64]| dot(&w, &image_cross_attention(&refs, q, &rig, &weights));
    Ok(Some((analytic, finite_diff(f, &query, FD_STEP)?)))
}

fn decode_case(rng: &mut impl Rng) -> Result<Case> {
    let (d, c) = (6, 3);
    let act = activation(rng);
    let head = RefineHead::random(d, [8, 8], c, act, rng);
    let query = uniform(rng, d, 1.0);
    let w = uniform(rng, 10 + c, 1.0);
    let (_, analytic) = decode_properties_vjp(&query, &head, &w);
    let f = |q: &[f64]| dot(&w, &decode_properties(q, &head).to_flat());
    Ok(Some((analytic, finite_diff(f, &query, FD_STEP)?)))
}

/// Draws seeded cases until `trials` are accepted and reports the worst
/// relative error between analytic and central-difference gradients.
pub fn gradient_suite(op: GradientOp, trials: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let draw = match op {
        GradientOp::EvalGaussian => eval_gaussian_case,
        GradientOp::Da2dQuery => da2d_query_case,
        GradientOp::Da2dFeatures => da2d_features_case,
        GradientOp::Da3dQuery => da3d_query_case,
        GradientOp::Da3dFeatures => da3d_features_case,
        GradientOp::ImageCrossAttentionQuery => ica_query_case,
        GradientOp::DecodeProperties => decode_case,
    } as fn(&mut ChaCha8Rng) -> Result<Case>;
    let (mut cases, mut rejected) = (0, 0);
    let (mut max_err, mut sum_err) = (0.0f64, 0.0);
    while cases < trials {
        if rejected > 10 * trials.max(10) {
            return Err(Error::Usage(format!(
                "{}: too many draws rejected near kinks",
                op.name()
            )));
        }
        match draw(&mut rng)? {
            None => rejected += 1,
            Some((analytic, numeric)) => {
                let e = relative_error(&analytic, &numeric, ERROR_FLOOR);
                max_err = max_err.max(e);
                sum_err += e;
                cases += 1;
            }
        }
    }
    Ok(GradientReport {
        op: op.name().to_string(),
        cases,
        rejected,
        max_rel_error: max_err,
        mean_rel_error: if cases > 0 { sum_err / cases as f64 } else { 0.0 },
    })
}

/// Every suite in [`GradientOp::ALL`], run in parallel.
pub fn run_gradient_suites(trials: usize, seed: u64) -> Result<Vec<GradientReport>> {
    GradientOp::ALL
        .par_iter()
        .map(|&op| gradient_suite(op, trials, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_suite() {
        for report in run_gradient_suites(50, 3).unwrap() {
            assert_eq!(report.cases, 50);
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn suites_are_reproducible() {
        let a = gradient_suite(GradientOp::Da3dQuery, 20, 9).unwrap();
        let b = gradient_suite(GradientOp::Da3dQuery, 20, 9).unwrap();
        assert_eq!(a, b);
    }
}
