//! Rotations, rigid poses and pinhole projection.
//!
//! Quaternions are stored `(w, x, y, z)`. Camera extrinsics map world points
//! into the camera frame (x right, y down, z forward). Pixel centers sit at
//! integer coordinates, so an image of width `W` covers `u ∈ [-0.5, W - 0.5)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quaternions with a norm below this are rejected instead of normalized.
pub const MIN_QUATERNION_NORM: f64 = 1e-12;

/// Points closer than this to the camera plane are not visible.
pub const NEAR_PLANE: f64 = 1e-3;

/// Rotation stored as a unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. Fails on (near-)zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm < MIN_QUATERNION_NORM {
            return Err(Error::DegenerateQuaternion(norm));
        }
        Ok(Self {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < MIN_QUATERNION_NORM {
            return Err(Error::DegenerateQuaternion(n));
        }
        let half = 0.5 * angle;
        let a = axis / n * half.sin();
        Self::new(half.cos(), a.x, a.y, a.z)
    }

    /// Nearest rotation to `m`, which should already be orthonormal.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let q = nalgebra::UnitQuaternion::from_matrix(m);
        Self::new(q.w, q.i, q.j, q.k).expect("nalgebra returns a unit quaternion")
    }

    /// Rotation about +z, the yaw of a ground vehicle.
    pub fn from_yaw(angle: f64) -> Self {
        let half = 0.5 * angle;
        Self {
            w: half.cos(),
            x: 0.0,
            y: 0.0,
            z: half.sin(),
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// The same rotation through the antipodal quaternion.
    pub fn negated(&self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self ⊗ rhs`: applying the result rotates by `rhs`
    /// first, then by `self`.
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        // Renormalize to stop drift over long compositions.
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rot(self)
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        quat_to_rot(self) * p
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = Error;
    fn try_from(q: [f64; 4]) -> Result<Self> {
        Self::from_array(q)
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.to_array()
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rot(r: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (r.w, r.x, r.y, r.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the [`quat_to_rot`] polynomial with respect to
/// `(w, x, y, z)`, evaluated without any normalization.
pub fn quat_to_rot_partials(r: &UnitQuaternion) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (r.w, r.x, r.y, r.z);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: UnitQuaternion,
    pub translation: [f64; 3],
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidPose {
    pub const IDENTITY: Self = Self {
        rotation: UnitQuaternion::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: translation.into(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        pose_apply(self, p)
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Self) -> Self {
        pose_compose(self, rhs)
    }

    pub fn inverse(&self) -> Self {
        pose_inverse(self)
    }
}

pub fn pose_compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    let rotation = a.rotation.mul(&b.rotation);
    let translation = a.rotation.rotate(&b.translation_vector()) + a.translation_vector();
    RigidPose::new(rotation, translation)
}

pub fn pose_inverse(a: &RigidPose) -> RigidPose {
    let inv = a.rotation.conjugate();
    let translation = -inv.rotate(&a.translation_vector());
    RigidPose::new(inv, translation)
}

pub fn pose_apply(a: &RigidPose, p: &Vector3<f64>) -> Vector3<f64> {
    a.rotation.rotate(p) + a.translation_vector()
}

/// Focal lengths and principal point, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Pinhole camera with world→camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRaw")]
pub struct CameraModel {
    intrinsics: Intrinsics,
    extrinsics: RigidPose,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CameraModelRaw {
    intrinsics: Intrinsics,
    extrinsics: RigidPose,
    width: u32,
    height: u32,
}

impl TryFrom<CameraModelRaw> for CameraModel {
    type Error = Error;
    fn try_from(raw: CameraModelRaw) -> Result<Self> {
        Self::new(raw.intrinsics, raw.extrinsics, raw.width, raw.height)
    }
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, extrinsics: RigidPose, width: u32, height: u32) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                intrinsics.fx, intrinsics.fy
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        if !in_image(intrinsics.cx, intrinsics.cy, width, height) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                intrinsics.cx, intrinsics.cy
            )));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }
    pub fn extrinsics(&self) -> &RigidPose {
        &self.extrinsics
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Same camera with points first mapped through `frame_to_world`, so the
    /// result projects points expressed in that frame.
    pub fn rebased(&self, frame_to_world: &RigidPose) -> Self {
        Self {
            extrinsics: self.extrinsics.compose(frame_to_world),
            ..*self
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Option<Projection> {
        project_point(p, self)
    }
}

fn in_image(u: f64, v: f64, width: u32, height: u32) -> bool {
    u >= -0.5 && u < width as f64 - 0.5 && v >= -0.5 && v < height as f64 - 0.5
}

/// Pixel coordinates plus camera-frame depth of a visible point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a world point; `None` when behind the near plane or off-image.
pub fn project_point(p: &Vector3<f64>, cam: &CameraModel) -> Option<Projection> {
    let pc = cam.extrinsics.apply(p);
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let k = &cam.intrinsics;
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    in_image(u, v, cam.width, cam.height).then_some(Projection { u, v, depth: pc.z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn identity_quaternion_is_identity_matrix() {
        assert_eq!(quat_to_rot(&UnitQuaternion::IDENTITY), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = UnitQuaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(max_abs(&(quat_to_rot(&q) - expected)) < 1e-15);
    }

    #[test]
    fn matrix_round_trip() {
        let q = UnitQuaternion::new(0.3, -0.5, 0.7, 0.2).unwrap();
        let back = UnitQuaternion::from_rotation_matrix(&quat_to_rot(&q));
        assert!(max_abs(&(quat_to_rot(&back) - quat_to_rot(&q))) < 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(1e-13, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn constructor_normalizes() {
        let q = UnitQuaternion::new(2.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(q.to_array(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_translation() {
        let t = Vector3::new(1.0, -2.0, 3.5);
        let p = Vector3::new(0.25, 0.5, -1.0);
        assert_eq!(RigidPose::from_translation(t).apply(&p), p + t);
    }

    #[test]
    fn identity_compose() {
        let a = RigidPose::new(
            UnitQuaternion::new(0.3, -0.2, 0.9, 0.1).unwrap(),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let c = RigidPose::IDENTITY.compose(&a);
        assert!((c.translation_vector() - a.translation_vector()).norm() < 1e-15);
        assert!(max_abs(&(c.rotation.to_rotation_matrix() - a.rotation.to_rotation_matrix())) < 1e-15);
    }

    fn cam(extrinsics: RigidPose) -> CameraModel {
        let k = Intrinsics {
            fx: 100.0,
            fy: 120.0,
            cx: 31.5,
            cy: 23.5,
        };
        CameraModel::new(k, extrinsics, 64, 48).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let c = cam(RigidPose::IDENTITY);
        let p = c.project(&Vector3::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (31.5, 23.5, 7.0));
    }

    #[test]
    fn behind_camera_is_out_of_view() {
        let c = cam(RigidPose::IDENTITY);
        assert!(c.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(c.project(&Vector3::new(0.0, 0.0, NEAR_PLANE)).is_none());
        // Off the image plane bounds.
        assert!(c.project(&Vector3::new(10.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn general_point_matches_matrix_pinhole() {
        // Hand-computed: extrinsic rotation = 90° yaw, t = (0.5, -0.25, 2).
        // p = (1, 2, 3): R p = (-2, 1, 3); + t = (-1.5, 0.75, 5).
        // u = 100 * -1.5 / 5 + 31.5 = 1.5 ; v = 120 * 0.75 / 5 + 23.5 = 41.5
        let e = RigidPose::new(
            UnitQuaternion::from_yaw(std::f64::consts::FRAC_PI_2),
            Vector3::new(0.5, -0.25, 2.0),
        );
        let p = cam(e).project(&Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert!((p.u - 1.5).abs() < 1e-12);
        assert!((p.v - 41.5).abs() < 1e-12);
        assert!((p.depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        let k = Intrinsics {
            fx: 0.0,
            fy: 1.0,
            cx: 1.0,
            cy: 1.0,
        };
        assert!(CameraModel::new(k, RigidPose::IDENTITY, 4, 4).is_err());
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 10.0,
            cy: 1.0,
        };
        assert!(CameraModel::new(k, RigidPose::IDENTITY, 4, 4).is_err());
    }

    fn quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z).unwrap())
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn pose() -> impl Strategy<Value = RigidPose> {
        (quat(), vec3()).prop_map(|(q, t)| RigidPose::new(q, t))
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(q in quat()) {
            let r = quat_to_rot(&q);
            prop_assert!(max_abs(&(r * r.transpose() - Matrix3::identity())) < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn double_cover(q in quat()) {
            prop_assert_eq!(quat_to_rot(&q), quat_to_rot(&q.negated()));
        }

        #[test]
        fn rotation_preserves_norm(q in quat(), p in vec3()) {
            prop_assert!((q.rotate(&p).norm() - p.norm()).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_sequential_apply(a in pose(), b in pose(), p in vec3()) {
            let lhs = a.compose(&b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn inverse_round_trip(a in pose(), p in vec3()) {
            prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-9);
            let id = a.inverse().compose(&a);
            prop_assert!(id.translation_vector().norm() < 1e-9);
            prop_assert!(max_abs(&(id.rotation.to_rotation_matrix() - Matrix3::identity())) < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in pose(), b in pose(), c in pose(), p in vec3()) {
            let l = a.compose(&b).compose(&c).apply(&p);
            let r = a.compose(&b.compose(&c)).apply(&p);
            prop_assert!((l - r).norm() < 1e-9);
        }

        #[test]
        fn projection_is_scale_covariant(x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..5.0f64, lambda in 0.1..10.0f64) {
            let c = CameraModel::new(
                Intrinsics { fx: 10.0, fy: 10.0, cx: 31.5, cy: 23.5 },
                RigidPose::IDENTITY, 64, 48,
            ).unwrap();
            let p = Vector3::new(x, y, z);
            let a = c.project(&p).unwrap();
            let b = c.project(&(p * lambda)).unwrap();
            prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }
    }
}
