//! Rigid-body math shared by every stage: SE(3) transforms, rotations about
//! a unit axis, triangle meshes and the pinhole camera.
//!
//! Conventions: meters in 3D, pixels in 2D, radians everywhere. Rotations are
//! kept as 3x3 matrices; axis-angle vectors only appear as parameters.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-9;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of the axis-angle vector `w` (Rodrigues).
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-20 {
        return Mat3::identity() + k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix, angle in [0, pi].
pub fn so3_log(r: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let v = q.imag();
    let s = v.norm();
    if s < 1e-300 {
        return Vec3::zeros();
    }
    let mut angle = 2.0 * s.atan2(q.w.abs());
    if q.w < 0.0 {
        angle = -angle;
    }
    v * (angle / s)
}

/// Geodesic distance between two rotations, radians in [0, pi].
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    so3_log(&(a * b.transpose())).norm()
}

/// Element of SE(3): `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checked constructor; the rotation must be orthonormal with det +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).norm();
        if !err.is_finite() || err > ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation is not a proper orthonormal matrix (|R^T R - I| = {err:.3e})"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("translation is not finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(w: &Vec3, translation: Vec3) -> Self {
        Self {
            rotation: so3_exp(w),
            translation,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `(self ∘ inner)(x) = self(inner(x))`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Parses a row-major 4x4 matrix. A rotation block within 1e-6 of a
    /// rotation but not within 1e-12 is re-orthonormalized; tighter blocks are
    /// kept bit for bit.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || (m[15] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("last row of a rigid transform must be 0 0 0 1"));
        }
        let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vec3::new(m[3], m[7], m[11]);
        let err = (r.transpose() * r - Mat3::identity()).norm();
        if !err.is_finite() || err > 1e-6 || r.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation block is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        if err <= 1e-12 {
            return Ok(Self { rotation: r, translation: t });
        }
        Self::new(orthonormalize(&r), t)
    }

    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }
}

/// Closest rotation matrix (polar decomposition via SVD).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(d)?;
        RigidTransform::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

/// `outer ∘ inner`.
pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
    outer.compose(inner)
}

/// Direction vector of unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitAxis(Vec3);

impl UnitAxis {
    pub const X: UnitAxis = UnitAxis(Vec3::new(1.0, 0.0, 0.0));
    pub const Y: UnitAxis = UnitAxis(Vec3::new(0.0, 1.0, 0.0));
    pub const Z: UnitAxis = UnitAxis(Vec3::new(0.0, 0.0, 1.0));

    /// Accepts a vector that is already unit length (within 1e-9).
    pub fn new(direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("axis is not unit length (norm {n})")));
        }
        Ok(Self(direction))
    }

    /// Normalizes an arbitrary vector; fails when it is too short to define a direction.
    pub fn normalize(raw: Vec3) -> Result<Self> {
        let n = raw.norm();
        if !n.is_finite() || n <= 1e-8 {
            return Err(Error::DegenerateAxis(format!("cannot normalize vector of norm {n:e}")));
        }
        Ok(Self(raw / n))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_vec(self) -> Vec3 {
        self.0
    }

    pub fn neg(&self) -> UnitAxis {
        UnitAxis(-self.0)
    }

    /// Unsigned angle between the lines spanned by two axes, in [0, pi/2].
    pub fn line_angle(&self, other: &UnitAxis) -> f64 {
        let c = self.0.dot(&other.0).abs().min(1.0);
        let s = self.0.cross(&other.0).norm();
        s.atan2(c)
    }
}

impl TryFrom<[f64; 3]> for UnitAxis {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        UnitAxis::normalize(Vec3::new(v[0], v[1], v[2]))
    }
}

impl From<UnitAxis> for [f64; 3] {
    fn from(a: UnitAxis) -> Self {
        [a.0.x, a.0.y, a.0.z]
    }
}

/// Rotation by `angle` about `axis` through the origin.
pub fn rotate_about_axis(angle: f64, axis: &UnitAxis) -> RigidTransform {
    RigidTransform::from_rotation(axis_rotation(angle, axis.as_vec()))
}

/// Rodrigues rotation matrix for a unit axis.
pub(crate) fn axis_rotation(angle: f64, axis: &Vec3) -> Mat3 {
    let k = skew(axis);
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces,
            normals: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn from_points(vertices: Vec<Vec3>) -> Self {
        Mesh {
            vertices,
            faces: Vec::new(),
            normals: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some((i, f)) = self
            .faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&v| v >= n))
        {
            return Err(Error::invalid(format!(
                "face {i} references vertex {:?} but the mesh has {n} vertices",
                f
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::invalid("normal count differs from vertex count"));
            }
            if let Some(i) = normals.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("normal {i} is not unit length")));
            }
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid(format!("vertex {i} is not finite")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        self.normals = Some(normals);
        self.validate()?;
        Ok(self)
    }

    /// Attaches area-weighted vertex normals computed from the faces.
    pub fn with_vertex_normals(mut self) -> Self {
        self.normals = Some(vertex_normals(&self.vertices, &self.faces));
        self
    }

    pub fn centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Maximum pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        let v = &self.vertices;
        let mut best = 0.0f64;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                best = best.max((v[i] - v[j]).norm_squared());
            }
        }
        best.sqrt()
    }

    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| v * s).collect(),
            faces: self.faces.clone(),
            normals: self.normals.clone(),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| t.apply_point(v)).collect(),
            faces: self.faces.clone(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
        }
    }

    /// True when at least four vertices span a volume.
    pub fn is_volumetric(&self) -> bool {
        let v = &self.vertices;
        if v.len() < 4 {
            return false;
        }
        let c = self.centroid();
        let mut cov = Mat3::zeros();
        for p in v {
            let d = p - c;
            cov += d * d.transpose();
        }
        let eig = cov.symmetric_eigenvalues();
        let max = eig.max();
        max > 0.0 && eig.min() > max * 1e-12
    }
}

/// Area-weighted vertex normals; isolated vertices get +z.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        // cross product norm is twice the area, so this is already area weighted
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 1e-300 {
                n / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }
}

/// `V_oc = T_h2c(T_o2h(s * V_o))`.
pub fn object_to_camera(
    object: &Mesh,
    scale: f64,
    object_to_hand: &RigidTransform,
    hand_to_camera: &RigidTransform,
) -> Result<Mesh> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("object scale must be positive, got {scale}")));
    }
    let t = hand_to_camera.compose(object_to_hand);
    Ok(object.scaled(scale).transformed(&t))
}

/// Pinhole projection to pixel coordinates.
pub fn project(points: &[Vec3], k: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p.z > 0.0) {
                return Err(Error::BehindCamera { vertex: i, z: p.z });
            }
            Ok([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap()
    }

    #[test]
    fn zero_angle_is_identity() {
        let axis = UnitAxis::normalize(Vec3::new(0.3, -1.0, 2.0)).unwrap();
        let r = rotate_about_axis(0.0, &axis);
        assert_abs_diff_eq!(r.rotation, Mat3::identity(), epsilon = 1e-15);
        assert_eq!(r.translation, Vec3::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotate_about_axis(FRAC_PI_2, &UnitAxis::Z);
        let p = r.apply_point(&Vec3::x());
        assert_abs_diff_eq!(p, Vec3::y(), epsilon = 1e-9);
    }

    #[test]
    fn non_unit_axis_rejected() {
        assert!(matches!(
            UnitAxis::new(Vec3::new(0.0, 0.0, 2.0)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            UnitAxis::normalize(Vec3::new(1e-12, 0.0, 0.0)),
            Err(Error::DegenerateAxis(_))
        ));
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.2, -0.4, 0.9), Vec3::new(1.0, 2.0, -3.0));
        let id = RigidTransform::identity();
        assert_eq!(t.compose(&id), t);
        assert_eq!(id.compose(&t), t);
        let e = t.compose(&t.inverse());
        assert_abs_diff_eq!(e.rotation, Mat3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(e.translation, Vec3::zeros(), epsilon = 1e-9);
    }

    fn unit_cube() -> Mesh {
        let mut v = Vec::new();
        for i in 0..8 {
            v.push(Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        Mesh::new(v, vec![[0, 1, 2], [1, 3, 2]]).unwrap()
    }

    #[test]
    fn object_to_camera_examples() {
        let cube = unit_cube();
        let id = RigidTransform::identity();
        assert_eq!(object_to_camera(&cube, 1.0, &id, &id).unwrap().vertices, cube.vertices);
        let doubled = object_to_camera(&cube, 2.0, &id, &id).unwrap();
        for (a, b) in doubled.vertices.iter().zip(&cube.vertices) {
            assert_eq!(*a, b * 2.0);
        }
        let up = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let shifted = object_to_camera(&cube, 1.0, &up, &id).unwrap();
        for (a, b) in shifted.vertices.iter().zip(&cube.vertices) {
            assert_eq!(*a, b + Vec3::z());
        }
        assert_eq!(shifted.faces, cube.faces);
        assert!(object_to_camera(&cube, 0.0, &id, &id).is_err());
    }

    #[test]
    fn projection_examples() {
        let uv = project(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 2.0)], &k()).unwrap();
        assert_eq!(uv[0], [128.0, 128.0]);
        assert_eq!(uv[1][0], 178.0);
        match project(&[Vec3::z(), Vec3::new(0.0, 0.0, -1.0)], &k()) {
            Err(Error::BehindCamera { vertex, .. }) => assert_eq!(vertex, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.5, 0.1, -0.3), Vec3::new(0.1, 0.2, 0.3));
        let m = t.to_row_major();
        assert_eq!(m[3], 0.1);
        assert_eq!(m[15], 1.0);
        let back = RigidTransform::from_row_major(&m).unwrap();
        assert_abs_diff_eq!(back.rotation, t.rotation, epsilon = 1e-14);
        let json = serde_json::to_string(&t).unwrap();
        let parsed: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_abs_diff_eq!(parsed.rotation, t.rotation, epsilon = 1e-14);
    }

    #[test]
    fn log_near_pi() {
        let w = Vec3::new(0.0, 0.0, std::f64::consts::PI - 1e-9);
        let back = so3_log(&so3_exp(&w));
        assert_abs_diff_eq!(back.norm(), w.norm(), epsilon = 1e-8);
        assert_abs_diff_eq!(back.z.abs(), w.z, epsilon = 1e-8);
    }

    fn arb_vec(scale: f64) -> impl Strategy<Value = Vec3> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn axis_angle_round_trip(w in arb_vec(1.8)) {
            prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
            let r = so3_exp(&w);
            prop_assert!((so3_exp(&so3_log(&r)) - r).norm() < 1e-8);
            prop_assert!((so3_log(&r) - w).norm() < 1e-8);
        }

        #[test]
        fn same_axis_rotations_add(a in -3.0f64..3.0, b in -3.0f64..3.0, raw in arb_vec(1.0)) {
            prop_assume!(raw.norm() > 1e-3);
            let axis = UnitAxis::normalize(raw).unwrap();
            let ab = rotate_about_axis(a, &axis).compose(&rotate_about_axis(b, &axis));
            prop_assert!((ab.rotation - rotate_about_axis(a + b, &axis).rotation).norm() < 1e-9);
        }

        #[test]
        fn composition_is_associative(w1 in arb_vec(2.0), w2 in arb_vec(2.0), w3 in arb_vec(2.0), t in arb_vec(1.0)) {
            let a = RigidTransform::from_axis_angle(&w1, t);
            let b = RigidTransform::from_axis_angle(&w2, -t);
            let c = RigidTransform::from_axis_angle(&w3, t * 2.0);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).norm() < 1e-9);
            prop_assert!((l.translation - r.translation).norm() < 1e-9);
        }

        #[test]
        fn object_to_camera_is_equivariant(w in arb_vec(2.0), t in arb_vec(0.5), wq in arb_vec(2.0), tq in arb_vec(0.5)) {
            let cube = unit_cube();
            let o2h = RigidTransform::from_axis_angle(&w, t);
            let h2c = RigidTransform::from_axis_angle(&(w * 0.5), t + Vec3::z());
            let q = RigidTransform::from_axis_angle(&wq, tq);
            let base = object_to_camera(&cube, 1.3, &o2h, &h2c).unwrap();
            let moved = object_to_camera(&cube, 1.3, &o2h, &q.compose(&h2c)).unwrap();
            for (a, b) in moved.vertices.iter().zip(&base.vertices) {
                prop_assert!((a - q.apply_point(b)).norm() < 1e-12);
            }
        }

        #[test]
        fn projection_is_ray_invariant(p in arb_vec(1.0), lambda in 0.1f64..10.0) {
            let p = p + Vec3::new(0.0, 0.0, 2.0);
            let a = project(&[p], &k()).unwrap()[0];
            let b = project(&[p * lambda], &k()).unwrap()[0];
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
}
