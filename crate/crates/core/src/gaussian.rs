//! Semantic Gaussian primitives and their occupancy field.
//!
//! A Gaussian contributes `exp(-½ (p-m)ᵀ Σ⁻¹ (p-m)) · c` at point `p`, with
//! `Σ = R diag(s)² Rᵀ`. Logits `c` enter raw; a mixture is the plain sum of
//! its members and is classified by thresholded argmax afterwards.

use nalgebra::{Cholesky, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rot, quat_to_rot_partials, RigidPose, UnitQuaternion};

/// Lower bound on every scale component, in meters.
pub const MIN_SCALE: f64 = 1e-3;

/// Squared Mahalanobis distance past which a kernel is exactly zero
/// (distance 40; `exp(-800)` already underflows f64).
pub const MAHALANOBIS_SQ_CUTOFF: f64 = 1600.0;

/// Default occupancy threshold applied by [`classify`].
pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGaussian {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub logits: Vec<f64>,
}

impl SemanticGaussian {
    /// Fails when a scale component is below [`MIN_SCALE`] or a logit is not finite.
    pub fn new(mean: Vector3<f64>, scale: Vector3<f64>, rotation: UnitQuaternion, logits: Vec<f64>) -> Result<Self> {
        check_scale(&scale)?;
        if let Some(bad) = logits.iter().find(|c| !c.is_finite()) {
            return Err(Error::config(format!("non-finite logit {bad}")));
        }
        Ok(Self {
            mean,
            scale,
            rotation,
            logits,
        })
    }

    /// Like [`new`](Self::new) but raises small scales to [`MIN_SCALE`].
    pub fn with_clamped_scale(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion,
        logits: Vec<f64>,
    ) -> Self {
        Self {
            mean,
            scale: scale.map(|s| if s.is_nan() { MIN_SCALE } else { s.max(MIN_SCALE) }),
            rotation,
            logits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(&self.scale, &self.rotation)
    }

    pub fn prepare(&self) -> PreparedGaussian<'_> {
        PreparedGaussian::new(self)
    }

    /// The same Gaussian seen through a rigid motion.
    pub fn transformed(&self, pose: &RigidPose) -> Self {
        Self {
            mean: pose.apply(&self.mean),
            scale: self.scale,
            rotation: pose.rotation.mul(&self.rotation),
            logits: self.logits.clone(),
        }
    }
}

fn check_scale(s: &Vector3<f64>) -> Result<()> {
    match s.iter().find(|v| !(**v >= MIN_SCALE) || !v.is_finite()) {
        Some(&value) => Err(Error::DegenerateScale { value, min: MIN_SCALE }),
        None => Ok(()),
    }
}

fn covariance_unchecked(s: &Vector3<f64>, r: &UnitQuaternion) -> Matrix3<f64> {
    let rot = quat_to_rot(r);
    let rs = rot * Matrix3::from_diagonal(s);
    let sigma = rs * rs.transpose();
    // Symmetrize away rounding in the off-diagonals.
    (sigma + sigma.transpose()) * 0.5
}

/// `Σ = R·diag(s)·diag(s)ᵀ·Rᵀ`.
pub fn compose_covariance(s: &Vector3<f64>, r: &UnitQuaternion) -> Result<Matrix3<f64>> {
    check_scale(s)?;
    Ok(covariance_unchecked(s, r))
}

/// A Gaussian with its precision matrix factored once for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedGaussian<'a> {
    pub source: &'a SemanticGaussian,
    pub covariance: Matrix3<f64>,
    pub precision: Matrix3<f64>,
}

impl<'a> PreparedGaussian<'a> {
    pub fn new(g: &'a SemanticGaussian) -> Self {
        let covariance = g.covariance();
        let precision = Cholesky::new(covariance)
            .map(|c| c.inverse())
            // Only reachable with scales at MIN_SCALE next to huge ones.
            .unwrap_or_else(|| {
                let r = quat_to_rot(&g.rotation);
                let inv_s2 = g.scale.map(|s| 1.0 / (s * s));
                r * Matrix3::from_diagonal(&inv_s2) * r.transpose()
            });
        Self {
            source: g,
            covariance,
            precision,
        }
    }

    pub fn mahalanobis_sq(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.source.mean;
        d.dot(&(self.precision * d))
    }

    /// The scalar kernel `exp(-½ d²)`, zero past the cutoff.
    #[inline]
    pub fn kernel(&self, p: &Vector3<f64>) -> f64 {
        let d2 = self.mahalanobis_sq(p);
        if d2 > MAHALANOBIS_SQ_CUTOFF {
            0.0
        } else {
            (-0.5 * d2).exp()
        }
    }

    pub fn eval(&self, p: &Vector3<f64>) -> Vec<f64> {
        let k = self.kernel(p);
        self.source.logits.iter().map(|c| k * c).collect()
    }
}

/// Semantic contribution of one Gaussian at `p`.
pub fn eval_gaussian(g: &SemanticGaussian, p: &Vector3<f64>) -> Vec<f64> {
    g.prepare().eval(p)
}

/// Ordered collection of Gaussians describing one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub gaussians: Vec<SemanticGaussian>,
    pub timestamp: u64,
    /// Ego → world.
    pub ego_pose: RigidPose,
    num_classes: usize,
}

impl GaussianSet {
    pub fn new(
        gaussians: Vec<SemanticGaussian>,
        num_classes: usize,
        timestamp: u64,
        ego_pose: RigidPose,
    ) -> Result<Self> {
        if let Some((i, g)) = gaussians
            .iter()
            .enumerate()
            .find(|(_, g)| g.num_classes() != num_classes)
        {
            return Err(Error::config(format!(
                "gaussian {i} has {} logits, expected {num_classes}",
                g.num_classes()
            )));
        }
        Ok(Self {
            gaussians,
            timestamp,
            ego_pose,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            timestamp: 0,
            ego_pose: RigidPose::IDENTITY,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SemanticGaussian> {
        self.gaussians.iter()
    }

    pub fn means(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.gaussians.iter().map(|g| &g.mean)
    }
}

/// Sum of every member's contribution at `p`, accumulated in list order.
pub fn eval_mixture(set: &GaussianSet, p: &Vector3<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; set.num_classes()];
    for g in set.iter() {
        let k = g.prepare().kernel(p);
        for (a, c) in acc.iter_mut().zip(&g.logits) {
            *a += k * c;
        }
    }
    acc
}

/// Partial derivatives of the scalar kernel `E = exp(-½ d²)`.
///
/// Output component `k` equals `E·c_k`, so its gradient with respect to
/// mean, scale, rotation and point is `c_k` times the fields here, and its
/// gradient with respect to `c` is `E` on entry `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGradient {
    pub kernel: f64,
    pub d_mean: Vector3<f64>,
    pub d_scale: Vector3<f64>,
    /// Projected onto the tangent space of the unit sphere at `r`.
    pub d_rotation: [f64; 4],
    pub d_point: Vector3<f64>,
}

/// Gradient of one output component, flattened for finite-difference checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGradient {
    pub d_mean: Vector3<f64>,
    pub d_scale: Vector3<f64>,
    pub d_rotation: [f64; 4],
    pub d_logits: Vec<f64>,
    pub d_point: Vector3<f64>,
}

impl KernelGradient {
    pub fn component(&self, g: &SemanticGaussian, k: usize) -> ComponentGradient {
        let c = g.logits[k];
        let mut d_logits = vec![0.0; g.num_classes()];
        d_logits[k] = self.kernel;
        ComponentGradient {
            d_mean: self.d_mean * c,
            d_scale: self.d_scale * c,
            d_rotation: self.d_rotation.map(|v| v * c),
            d_logits,
            d_point: self.d_point * c,
        }
    }
}

/// Analytic partials of [`eval_gaussian`] with respect to every property and the point.
pub fn grad_eval_gaussian(g: &SemanticGaussian, p: &Vector3<f64>) -> KernelGradient {
    let rot = quat_to_rot(&g.rotation);
    let delta = p - g.mean;
    let local = rot.transpose() * delta;
    let inv_s2 = g.scale.map(|s| 1.0 / (s * s));
    let weighted = local.component_mul(&inv_s2);
    let d2 = local.dot(&weighted);
    if d2 > MAHALANOBIS_SQ_CUTOFF {
        return KernelGradient {
            kernel: 0.0,
            d_mean: Vector3::zeros(),
            d_scale: Vector3::zeros(),
            d_rotation: [0.0; 4],
            d_point: Vector3::zeros(),
        };
    }
    let e = (-0.5 * d2).exp();

    // Σ⁻¹ δ expressed in world axes.
    let precision_delta = rot * weighted;
    let d_point = -e * precision_delta;
    let d_mean = e * precision_delta;
    let d_scale = Vector3::from_fn(|i, _| e * local[i] * local[i] * inv_s2[i] / g.scale[i]);

    let partials = quat_to_rot_partials(&g.rotation);
    let mut ambient = [0.0; 4];
    for (a, dr) in ambient.iter_mut().zip(&partials) {
        *a = -e * weighted.dot(&(dr.transpose() * delta));
    }
    let q = g.rotation.to_array();
    let radial: f64 = ambient.iter().zip(&q).map(|(a, b)| a * b).sum();
    let d_rotation = [0, 1, 2, 3].map(|i| ambient[i] - radial * q[i]);

    KernelGradient {
        kernel: e,
        d_mean,
        d_scale,
        d_rotation,
        d_point,
    }
}

/// Discrete voxel label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(u16),
    Empty,
    /// Excluded from scoring.
    Unknown,
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(k) => Some(*k as usize),
            _ => None,
        }
    }

    pub fn is_occupied(&self) -> bool {
        matches!(self, Label::Class(_))
    }
}

/// Thresholded argmax; ties resolve to the lowest class index.
pub fn classify(o: &[f64], threshold: f64) -> Label {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in o.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    match best {
        Some((k, v)) if v >= threshold => Label::Class(k as u16),
        _ => Label::Empty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn unit_gaussian(logits: Vec<f64>) -> SemanticGaussian {
        SemanticGaussian::new(Vector3::zeros(), Vector3::repeat(1.0), UnitQuaternion::IDENTITY, logits).unwrap()
    }

    fn random_gaussian(rng: &mut impl Rng, c: usize) -> SemanticGaussian {
        let mean = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        let scale = Vector3::from_fn(|_, _| rng.gen_range(0.3..2.0));
        let rotation = UnitQuaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .unwrap();
        let logits = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SemanticGaussian::new(mean, scale, rotation, logits).unwrap()
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let i = compose_covariance(&Vector3::repeat(1.0), &UnitQuaternion::IDENTITY).unwrap();
        assert_eq!(i, Matrix3::identity());
        let d = compose_covariance(&Vector3::new(2.0, 1.0, 0.5), &UnitQuaternion::IDENTITY).unwrap();
        assert_eq!(d, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25)));
    }

    #[test]
    fn covariance_quarter_turn_matches_scripted_product() {
        // R = [[0,-1,0],[1,0,0],[0,0,1]], S² = diag(4, 1, 0.25):
        // R S² Rᵀ swaps the x and y variances.
        let q = UnitQuaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2).unwrap();
        let sigma = compose_covariance(&Vector3::new(2.0, 1.0, 0.5), &q).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 0.25));
        assert!((sigma - expected).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_rejects_small_scale() {
        let r = compose_covariance(&Vector3::new(1.0, 1e-4, 1.0), &UnitQuaternion::IDENTITY);
        assert!(matches!(r, Err(Error::DegenerateScale { .. })));
        assert!(SemanticGaussian::new(
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 1.0),
            UnitQuaternion::IDENTITY,
            vec![]
        )
        .is_err());
        let g = SemanticGaussian::with_clamped_scale(
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, -3.0),
            UnitQuaternion::IDENTITY,
            vec![],
        );
        assert_eq!(g.scale, Vector3::new(1.0, MIN_SCALE, MIN_SCALE));
    }

    #[test]
    fn center_evaluation_returns_logits() {
        let g = SemanticGaussian::new(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.5, 2.0, 1.0),
            UnitQuaternion::new(0.2, 0.4, -0.1, 0.7).unwrap(),
            vec![0.3, -1.2, 4.0],
        )
        .unwrap();
        assert_eq!(eval_gaussian(&g, &g.mean), g.logits);
    }

    #[test]
    fn tail_decays_below_threshold() {
        let g = unit_gaussian(vec![2.0, -3.0]);
        let v = eval_gaussian(&g, &Vector3::new(20.0, 0.0, 0.0));
        assert!(v.iter().all(|x| x.abs() < 1e-80 * 3.0));
        let far = eval_gaussian(&g, &Vector3::new(41.0, 0.0, 0.0));
        assert!(far.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unit_gaussian_one_sigma() {
        // exp(-0.5) to 17 digits.
        let v = eval_gaussian(&unit_gaussian(vec![1.0]), &Vector3::new(1.0, 0.0, 0.0));
        assert!((v[0] - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn mixture_empty_and_singleton() {
        let empty = GaussianSet::empty(3);
        assert_eq!(eval_mixture(&empty, &Vector3::new(0.1, 0.2, 0.3)), vec![0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gaussian(&mut rng, 3);
        let p = Vector3::new(0.5, -0.5, 1.0);
        let set = GaussianSet::new(vec![g.clone()], 3, 0, RigidPose::IDENTITY).unwrap();
        assert_eq!(eval_mixture(&set, &p), eval_gaussian(&g, &p));
    }

    /// Independent route: Σ⁻¹ = R diag(1/s²) Rᵀ with compensated summation.
    fn oracle_mixture(gs: &[SemanticGaussian], p: &Vector3<f64>) -> Vec<f64> {
        let c = gs[0].logits.len();
        (0..c)
            .map(|k| {
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for g in gs {
                    let r = quat_to_rot(&g.rotation);
                    let inv = r * Matrix3::from_diagonal(&g.scale.map(|s| 1.0 / (s * s))) * r.transpose();
                    let d = p - g.mean;
                    let term = (-0.5 * d.dot(&(inv * d))).exp() * g.logits[k];
                    let t = sum + term;
                    comp += if sum.abs() >= term.abs() {
                        (sum - t) + term
                    } else {
                        (term - t) + sum
                    };
                    sum = t;
                }
                sum + comp
            })
            .collect()
    }

    #[test]
    fn mixture_of_three_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let gs: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 4)).collect();
            let p = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let set = GaussianSet::new(gs.clone(), 4, 0, RigidPose::IDENTITY).unwrap();
            let got = eval_mixture(&set, &p);
            let want = oracle_mixture(&gs, &p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mismatched_class_count_rejected() {
        let g = unit_gaussian(vec![1.0, 2.0]);
        assert!(GaussianSet::new(vec![g], 3, 0, RigidPose::IDENTITY).is_err());
    }

    #[test]
    fn grad_logits_is_kernel_times_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gaussian(&mut rng, 3);
        let p = g.mean + Vector3::new(0.3, -0.2, 0.1);
        let grad = grad_eval_gaussian(&g, &p);
        let e = g.prepare().kernel(&p);
        assert!((grad.kernel - e).abs() < 1e-14);
        for k in 0..3 {
            let c = grad.component(&g, k);
            for j in 0..3 {
                assert_eq!(c.d_logits[j], if j == k { grad.kernel } else { 0.0 });
            }
        }
    }

    #[test]
    fn grad_mean_vanishes_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_gaussian(&mut rng, 2);
        let grad = grad_eval_gaussian(&g, &g.mean);
        assert_eq!(grad.d_mean, Vector3::zeros());
        assert_eq!(grad.d_point, Vector3::zeros());
    }

    #[test]
    fn rotation_gradient_is_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let g = random_gaussian(&mut rng, 1);
            let p = g.mean + Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let d = grad_eval_gaussian(&g, &p).d_rotation;
            let q = g.rotation.to_array();
            let radial: f64 = d.iter().zip(&q).map(|(a, b)| a * b).sum();
            assert!(radial.abs() < 1e-12);
        }
    }

    #[test]
    fn classify_rules() {
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert_eq!(classify(&one_hot, DEFAULT_OCCUPANCY_THRESHOLD), Label::Class(3));
        assert_eq!(classify(&[0.0; 8], DEFAULT_OCCUPANCY_THRESHOLD), Label::Empty);
        let mut tie = vec![0.0; 8];
        tie[2] = 0.7;
        tie[7] = 0.7;
        assert_eq!(classify(&tie, DEFAULT_OCCUPANCY_THRESHOLD), Label::Class(2));
        assert_eq!(classify(&[0.049, 0.01], DEFAULT_OCCUPANCY_THRESHOLD), Label::Empty);
        assert_eq!(classify(&[], DEFAULT_OCCUPANCY_THRESHOLD), Label::Empty);
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            s in (0.01..5.0f64, 0.01..5.0f64, 0.01..5.0f64),
            q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
                .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3),
        ) {
            let s = Vector3::new(s.0, s.1, s.2);
            let r = UnitQuaternion::new(q.0, q.1, q.2, q.3).unwrap();
            let sigma = compose_covariance(&s, &r).unwrap();
            prop_assert!((sigma - sigma.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert_eq!(sigma, compose_covariance(&s, &r.negated()).unwrap());
        }

        #[test]
        fn evaluation_is_rigid_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gaussian(&mut rng, 3);
            let p = g.mean + Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let pose = RigidPose::new(
                UnitQuaternion::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5).unwrap(),
                Vector3::from_fn(|_, _| rng.gen_range(-10.0..10.0)),
            );
            let a = eval_gaussian(&g, &p);
            let b = eval_gaussian(&g.transformed(&pose), &pose.apply(&p));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn mixture_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..6).map(|_| random_gaussian(&mut rng, 3)).collect();
            let mut rev = gs.clone();
            rev.reverse();
            let p = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let scale: f64 = gs.iter().flat_map(|g| eval_gaussian(g, &p)).map(f64::abs).sum();
            let a = eval_mixture(&GaussianSet::new(gs, 3, 0, RigidPose::IDENTITY).unwrap(), &p);
            let b = eval_mixture(&GaussianSet::new(rev, 3, 0, RigidPose::IDENTITY).unwrap(), &p);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }
    }
}
