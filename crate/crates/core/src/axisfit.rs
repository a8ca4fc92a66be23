//! Fitting the one-rotational-DoF motion model to known object-to-hand poses.
//!
//! The model pose at frame `n` is `rot(angle_n, axis) ∘ base`, a per-frame
//! rotation about a fixed axis through the hand origin applied after one
//! shared base pose. Pose discrepancy is measured on the object vertices:
//! the mean over frames of the mean squared distance between the vertex sets
//! mapped by the model pose and by the reference pose.
//!
//! Fitting runs a Levenberg-Marquardt refinement over (axis, base, angles)
//! from several axis seeds: the principal direction of the relative rotation
//! vectors and a few seeded random directions. Per-frame angles are started
//! from their closed-form optimum given the axis and base.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contact::GraspInterval;
use crate::curve::{frames_with_margin, normalized_time, Curve, CurvePoint};
use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, geodesic_angle, orthonormalize, skew, so3_exp, so3_log, Mat3, Mesh, RigidTransform, UnitAxis, Vec3};

/// Rotation angles below this are treated as "no rotation" when deciding
/// whether the axis is identifiable.
const STATIC_ANGLE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneDoFTrajectory {
    pub axis: UnitAxis,
    /// Radians, one per frame.
    pub angles: Vec<f64>,
    pub base: RigidTransform,
    pub scale: f64,
}

impl OneDoFTrajectory {
    pub fn new(axis: UnitAxis, angles: Vec<f64>, base: RigidTransform, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::invalid("trajectory scale must be positive"));
        }
        Ok(Self { axis, angles, base, scale })
    }

    /// Object-to-hand pose of frame `n`.
    pub fn pose(&self, n: usize) -> RigidTransform {
        RigidTransform::from_rotation(axis_rotation(self.angles[n], self.axis.as_vec())).compose(&self.base)
    }

    pub fn poses(&self) -> Vec<RigidTransform> {
        (0..self.angles.len()).map(|n| self.pose(n)).collect()
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// Moves the angle gauge so that frame 0 has angle 0 and the first
    /// nonzero angle is positive. Poses are unchanged.
    pub fn canonicalize(&mut self) {
        if let Some(&a0) = self.angles.first() {
            if a0 != 0.0 {
                self.base = RigidTransform::from_rotation(axis_rotation(a0, self.axis.as_vec())).compose(&self.base);
                self.base.rotation = orthonormalize(&self.base.rotation);
                for a in &mut self.angles {
                    *a -= a0;
                }
            }
        }
        if let Some(&first) = self.angles.iter().find(|a| a.abs() > 1e-12) {
            if first < 0.0 {
                self.axis = self.axis.neg();
                for a in &mut self.angles {
                    *a = -*a;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub per_frame_rotation_error_deg: Vec<f64>,
    pub mean_rotation_error_deg: f64,
    /// Mean over frames of the mean squared vertex distance, in m^2.
    pub residual: f64,
    /// Set when the reference poses carry no rotation, so no axis can be identified.
    pub degenerate_axis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisFitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for AxisFitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            max_iterations: 200,
        }
    }
}

fn check_inputs(gt_poses: &[RigidTransform], object: &Mesh) -> Result<()> {
    if gt_poses.len() < 2 {
        return Err(Error::invalid("axis fitting needs at least two frames"));
    }
    if !object.is_volumetric() {
        return Err(Error::invalid("object mesh needs at least four non-coplanar vertices"));
    }
    Ok(())
}

fn report(model: &[RigidTransform], gt: &[RigidTransform], object: &Mesh, degenerate: bool) -> FitReport {
    let errs: Vec<f64> = model
        .iter()
        .zip(gt)
        .map(|(m, g)| geodesic_angle(&m.rotation, &g.rotation).to_degrees())
        .collect();
    FitReport {
        mean_rotation_error_deg: errs.iter().sum::<f64>() / errs.len() as f64,
        per_frame_rotation_error_deg: errs,
        residual: pose_residual(model, gt, object),
        degenerate_axis: degenerate,
    }
}

/// Mean over frames of the mean squared vertex distance between two pose lists.
pub fn pose_residual(a: &[RigidTransform], b: &[RigidTransform], object: &Mesh) -> f64 {
    let nv = object.vertices.len() as f64;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(ta, tb)| {
            object
                .vertices
                .iter()
                .map(|v| (ta.apply_point(v) - tb.apply_point(v)).norm_squared())
                .sum::<f64>()
                / nv
        })
        .sum();
    total / a.len() as f64
}

/// Best single pose for all frames: Kabsch alignment of the object vertices
/// to their positions in every frame at once.
pub fn fit_static(gt_poses: &[RigidTransform], object: &Mesh) -> Result<(RigidTransform, FitReport)> {
    check_inputs(gt_poses, object)?;
    let pose = static_pose(gt_poses, object);
    let model = vec![pose; gt_poses.len()];
    Ok((pose, report(&model, gt_poses, object, false)))
}

fn static_pose(gt_poses: &[RigidTransform], object: &Mesh) -> RigidTransform {
    let src_c = object.centroid();
    let n = (gt_poses.len() * object.vertices.len()) as f64;
    let dst_c = gt_poses
        .iter()
        .flat_map(|t| object.vertices.iter().map(move |v| t.apply_point(v)))
        .sum::<Vec3>()
        / n;
    let mut h = Mat3::zeros();
    for t in gt_poses {
        for v in &object.vertices {
            h += (t.apply_point(v) - dst_c) * (v - src_c).transpose();
        }
    }
    let r = orthonormalize(&h);
    RigidTransform {
        rotation: r,
        translation: dst_c - r * src_c,
    }
}

/// Closed-form angle about `axis` that best maps `base(v)` onto `target(v)`.
fn best_angle(axis: &Vec3, base: &RigidTransform, target: &RigidTransform, object: &Mesh) -> f64 {
    let (mut c, mut s) = (0.0, 0.0);
    for v in &object.vertices {
        let a = base.apply_point(v);
        let b = target.apply_point(v);
        c += b.dot(&a) - axis.dot(&a) * axis.dot(&b);
        s += b.dot(&axis.cross(&a));
    }
    s.atan2(c)
}

/// Orthonormal basis of the plane perpendicular to `n`.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = n.cross(&helper).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

struct Lm<'a> {
    gt: &'a [RigidTransform],
    object: &'a Mesh,
}

#[derive(Clone)]
struct FitState {
    axis: Vec3,
    angles: Vec<f64>,
    base: RigidTransform,
}

impl Lm<'_> {
    fn cost(&self, s: &FitState) -> f64 {
        let poses: Vec<_> = (0..s.angles.len())
            .map(|n| RigidTransform::from_rotation(axis_rotation(s.angles[n], &s.axis)).compose(&s.base))
            .collect();
        pose_residual(&poses, self.gt, self.object)
    }

    /// Normal equations of the residual, scaled like `cost`.
    fn normal_equations(&self, s: &FitState) -> (DMatrix<f64>, DVector<f64>) {
        let n = s.angles.len();
        let dim = 8 + n;
        let mut jtj = DMatrix::zeros(dim, dim);
        let mut jtr = DVector::zeros(dim);
        let w = 1.0 / (n * self.object.vertices.len()) as f64;
        let (b1, b2) = tangent_basis(&s.axis);
        for (f, gt) in self.gt.iter().enumerate() {
            let ang = s.angles[f];
            let rot = axis_rotation(ang, &s.axis);
            let (sin, cos) = ang.sin_cos();
            for v in &self.object.vertices {
                let a = s.base.apply_point(v);
                let p = rot * a;
                let r = p - gt.apply_point(v);
                // d rot(a) / d axis
                let dax = -skew(&a) * sin + (Mat3::identity() * s.axis.dot(&a) + s.axis * a.transpose()) * (1.0 - cos);
                let mut j = nalgebra::SMatrix::<f64, 3, 9>::zeros();
                j.fixed_view_mut::<3, 1>(0, 0).copy_from(&(dax * b1));
                j.fixed_view_mut::<3, 1>(0, 1).copy_from(&(dax * b2));
                j.fixed_view_mut::<3, 3>(0, 2).copy_from(&(rot * s.base.rotation * -skew(v)));
                j.fixed_view_mut::<3, 3>(0, 5).copy_from(&rot);
                j.fixed_view_mut::<3, 1>(0, 8).copy_from(&s.axis.cross(&p));
                let idx = |k: usize| if k < 8 { k } else { 8 + f };
                let jtj_local = j.transpose() * j;
                let jtr_local = j.transpose() * r;
                for k in 0..9 {
                    jtr[idx(k)] += w * jtr_local[k];
                    for l in 0..9 {
                        jtj[(idx(k), idx(l))] += w * jtj_local[(k, l)];
                    }
                }
            }
        }
        (jtj, jtr)
    }

    fn apply(&self, s: &FitState, delta: &DVector<f64>) -> FitState {
        let (b1, b2) = tangent_basis(&s.axis);
        let axis = (s.axis + b1 * delta[0] + b2 * delta[1]).normalize();
        let xi = Vec3::new(delta[2], delta[3], delta[4]);
        let base = RigidTransform {
            rotation: orthonormalize(&(s.base.rotation * so3_exp(&xi))),
            translation: s.base.translation + Vec3::new(delta[5], delta[6], delta[7]),
        };
        let angles = s.angles.iter().enumerate().map(|(i, a)| a + delta[8 + i]).collect();
        FitState { axis, angles, base }
    }

    fn refine(&self, mut s: FitState, max_iterations: usize) -> (FitState, f64) {
        let mut cost = self.cost(&s);
        let mut lambda = 1e-4;
        for _ in 0..max_iterations {
            if cost < 1e-30 {
                break;
            }
            let (jtj, jtr) = self.normal_equations(&s);
            let mut improved = false;
            for _ in 0..20 {
                let mut a = jtj.clone();
                for k in 0..a.nrows() {
                    a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
                }
                let Some(delta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = self.apply(&s, &delta);
                let c = self.cost(&cand);
                if c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    s = cand;
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = rel > 1e-14;
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                break;
            }
        }
        (s, cost)
    }
}

/// Fits axis, per-frame angles and base pose (scale fixed to 1).
pub fn fit_one_dof(gt_poses: &[RigidTransform], object: &Mesh) -> Result<(OneDoFTrajectory, FitReport)> {
    fit_one_dof_with(gt_poses, object, &AxisFitOptions::default())
}

pub fn fit_one_dof_with(
    gt_poses: &[RigidTransform],
    object: &Mesh,
    options: &AxisFitOptions,
) -> Result<(OneDoFTrajectory, FitReport)> {
    check_inputs(gt_poses, object)?;
    let r0t = gt_poses[0].rotation.transpose();
    let rel: Vec<Vec3> = gt_poses.iter().map(|t| so3_log(&(t.rotation * r0t))).collect();
    let static_base = static_pose(gt_poses, object);

    if rel.iter().all(|w| w.norm() < STATIC_ANGLE_EPS) {
        let traj = OneDoFTrajectory {
            axis: UnitAxis::Z,
            angles: vec![0.0; gt_poses.len()],
            base: static_base,
            scale: 1.0,
        };
        let rep = report(&traj.poses(), gt_poses, object, true);
        return Ok((traj, rep));
    }

    let mut seeds = vec![principal_direction(&rel)];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    while seeds.len() < options.restarts.max(1) {
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if v.norm() > 1e-3 {
            seeds.push(v.normalize());
        }
    }

    let lm = Lm { gt: gt_poses, object };
    let mut best: Option<(FitState, f64)> = None;
    for axis in seeds {
        let angles = gt_poses
            .iter()
            .map(|g| best_angle(&axis, &static_base, g, object))
            .collect();
        let init = FitState {
            axis,
            angles,
            base: static_base,
        };
        let (s, c) = lm.refine(init, options.max_iterations);
        if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
            best = Some((s, c));
        }
    }
    let (s, _) = best.expect("at least one seed");
    let mut traj = OneDoFTrajectory {
        axis: UnitAxis::normalize(s.axis)?,
        angles: s.angles,
        base: s.base,
        scale: 1.0,
    };
    traj.canonicalize();
    let rep = report(&traj.poses(), gt_poses, object, false);
    Ok((traj, rep))
}

/// Dominant direction of a set of axis-angle vectors, sign-agnostic.
fn principal_direction(vectors: &[Vec3]) -> Vec3 {
    let mut m = Mat3::zeros();
    for w in vectors {
        m += w * w.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let i = eig.eigenvalues.imax();
    eig.eigenvectors.column(i).into_owned().normalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationCurves {
    pub static_curve: Curve,
    pub one_dof_curve: Curve,
}

/// Rotation error of the static and 1-DoF approximations over normalized
/// time. Both models are fitted on in-interval frames only; outside the
/// interval the 1-DoF error is measured off the fitted axis, with the angle
/// re-solved for that frame.
pub fn approximation_error_curve(
    gt_poses: &[RigidTransform],
    object: &Mesh,
    interval: &GraspInterval,
    margin_fraction: f64,
) -> Result<ApproximationCurves> {
    if interval.start > interval.end || interval.end >= gt_poses.len() {
        return Err(Error::invalid("interval does not fit the sequence"));
    }
    let inside = &gt_poses[interval.start..=interval.end];
    let (stat, dof) = if inside.len() >= 2 {
        let (stat, _) = fit_static(inside, object)?;
        let (dof, _) = fit_one_dof(inside, object)?;
        (stat, Some(dof))
    } else {
        (inside[0], None)
    };
    let mut static_curve = Vec::new();
    let mut one_dof_curve = Vec::new();
    for f in frames_with_margin(interval.start, interval.end, margin_fraction, gt_poses.len()) {
        let t = normalized_time(f, interval.start, interval.end);
        let gt = &gt_poses[f];
        static_curve.push(CurvePoint {
            normalized_time: t,
            value: geodesic_angle(&stat.rotation, &gt.rotation).to_degrees(),
        });
        let model = match &dof {
            Some(d) if interval.contains(f) => d.pose(f - interval.start),
            Some(d) => {
                let a = best_angle(d.axis.as_vec(), &d.base, gt, object);
                RigidTransform::from_rotation(axis_rotation(a, d.axis.as_vec())).compose(&d.base)
            }
            None => stat,
        };
        one_dof_curve.push(CurvePoint {
            normalized_time: t,
            value: geodesic_angle(&model.rotation, &gt.rotation).to_degrees(),
        });
    }
    Ok(ApproximationCurves {
        static_curve,
        one_dof_curve,
    })
}
