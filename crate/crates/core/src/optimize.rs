//! Render-and-compare optimization of the object trajectory.
//!
//! Parameter layouts (`N` frames):
//!
//! | variant        | layout                                            | size   |
//! |----------------|---------------------------------------------------|--------|
//! | `one_dof`      | axis (3), angles (N), rotation (3), translation (3), ln s | N + 10 |
//! | `static`       | rotation (3), translation (3), ln s               | 7      |
//! | `dynamic`      | N x [rotation (3), translation (3)], ln s         | 6N + 1 |
//! | `single_frame` | N independent `static` problems on one frame each | 7 each |
//!
//! Rotation entries are local increments `xi` with `R = R_ref exp(xi)`; the
//! increment is folded into `R_ref` after every step. The axis entry is an
//! unnormalized direction.
//!
//! Each initialization runs Adam with per-group step sizes, a cosine decay
//! to 5% of the initial step, and halving of a global step factor whenever
//! the energy rises. The best iterate seen is kept. All candidates run the
//! first quarter of the schedule; the lowest-energy `survivors` finish it.

use std::time::Instant;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axisfit::OneDoFTrajectory;
use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, orthonormalize, skew, so3_exp, Mat3, RigidTransform, UnitAxis, Vec3};
use crate::objective::{EnergyModel, EnergyWeights, FrameEnergy, FrameTerms};
use crate::render::RenderSettings;
use crate::sequence::GraspSequence;

const LOG_SCALE_MIN: f64 = -1.6094379124341003; // ln 0.2
const LOG_SCALE_MAX: f64 = 1.6094379124341003; // ln 5

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OneDof,
    Static,
    Dynamic,
    SingleFrame,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::OneDof => "one_dof",
            Variant::Static => "static",
            Variant::Dynamic => "dynamic",
            Variant::SingleFrame => "single_frame",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_dof" => Ok(Variant::OneDof),
            "static" => Ok(Variant::Static),
            "dynamic" => Ok(Variant::Dynamic),
            "single_frame" => Ok(Variant::SingleFrame),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizes {
    /// Axis, angles and rotation increments (radians).
    pub rotation: f64,
    /// Meters.
    pub translation: f64,
    pub log_scale: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            rotation: 1e-2,
            translation: 1e-3,
            log_scale: 1e-3,
        }
    }
}

/// Relative term weights; push and pull are multiplied by `f * render_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightFactors {
    pub mask: f64,
    pub push: f64,
    pub pull: f64,
}

impl Default for WeightFactors {
    fn default() -> Self {
        Self {
            mask: 1.0,
            push: 0.1,
            pull: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub variant: Variant,
    pub n_frames_sampled: usize,
    pub n_initializations: usize,
    pub iterations: usize,
    /// Candidates that continue past the first quarter of the schedule.
    pub survivors: usize,
    pub step_sizes: StepSizes,
    pub render_size: u32,
    pub sharpness: f64,
    pub seed: u64,
    pub weights: WeightFactors,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::OneDof,
            n_frames_sampled: 30,
            n_initializations: 50,
            iterations: 400,
            survivors: 5,
            step_sizes: StepSizes::default(),
            render_size: 256,
            sharpness: RenderSettings::default().sharpness,
            seed: 0,
            weights: WeightFactors::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames_sampled == 0 {
            return Err(Error::invalid("n_frames_sampled must be at least 1"));
        }
        if self.render_size == 0 {
            return Err(Error::invalid("render_size must be positive"));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::invalid("sharpness must be positive"));
        }
        let s = &self.step_sizes;
        if [s.rotation, s.translation, s.log_scale].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("step sizes must be non-negative"));
        }
        Ok(())
    }

    pub fn energy_model(&self, sequence: &GraspSequence) -> Result<EnergyModel> {
        self.validate()?;
        let first = sequence.frames.first().ok_or_else(|| Error::invalid("sequence has no frames"))?;
        let w = self.weights;
        let weights = EnergyWeights::from_factors(first.intrinsics.fx, self.render_size, w.mask, w.push, w.pull)?;
        let render = RenderSettings {
            sharpness: self.sharpness,
            ..RenderSettings::default()
        };
        EnergyModel::new(sequence, self.render_size, weights, render)
    }
}

/// Optimized object motion in hand coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    OneDof {
        axis: UnitAxis,
        /// Radians.
        angles: Vec<f64>,
        angles_deg: Vec<f64>,
        base: RigidTransform,
        scale: f64,
    },
    Static {
        base: RigidTransform,
        scale: f64,
    },
    Dynamic {
        poses: Vec<RigidTransform>,
        scale: f64,
    },
    SingleFrame {
        poses: Vec<RigidTransform>,
        scales: Vec<f64>,
    },
}

impl Trajectory {
    pub fn from_one_dof(t: &OneDoFTrajectory) -> Self {
        Trajectory::OneDof {
            axis: t.axis,
            angles: t.angles.clone(),
            angles_deg: t.angles.iter().map(|a| a.to_degrees()).collect(),
            base: t.base,
            scale: t.scale,
        }
    }

    pub fn one_dof(&self) -> Option<OneDoFTrajectory> {
        match self {
            Trajectory::OneDof { axis, angles, base, scale, .. } => Some(OneDoFTrajectory {
                axis: *axis,
                angles: angles.clone(),
                base: *base,
                scale: *scale,
            }),
            _ => None,
        }
    }

    /// Object-to-hand pose and scale per frame.
    pub fn poses(&self, n_frames: usize) -> Vec<(RigidTransform, f64)> {
        match self {
            Trajectory::OneDof { .. } => {
                let t = self.one_dof().expect("one_dof variant");
                let s = t.scale;
                t.poses().into_iter().map(|p| (p, s)).collect()
            }
            Trajectory::Static { base, scale } => vec![(*base, *scale); n_frames],
            Trajectory::Dynamic { poses, scale } => poses.iter().map(|p| (*p, *scale)).collect(),
            Trajectory::SingleFrame { poses, scales } => poses.iter().copied().zip(scales.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub variant: Variant,
    pub trajectory: Trajectory,
    pub object_to_hand: Vec<RigidTransform>,
    pub object_to_camera: Vec<RigidTransform>,
    pub scales: Vec<f64>,
    pub losses: Vec<FrameTerms>,
    pub total_energy: f64,
    pub initial_energy: f64,
    /// Index of the winning initialization (one per sub-problem for `single_frame`).
    pub chosen_initialization: Vec<usize>,
    /// Seconds; not serialized so outputs are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Unit axis from a raw direction.
pub fn normalize_axis_parameter(raw: &Vec3) -> Result<UnitAxis> {
    UnitAxis::normalize(*raw)
}

/// Gradient w.r.t. `raw` of a function of `raw / |raw|`, given its gradient
/// `g` w.r.t. the normalized axis.
pub fn project_axis_gradient(raw: &Vec3, g: &Vec3) -> Vec3 {
    let n = raw.norm();
    let phi = raw / n;
    (g - phi * phi.dot(g)) / n
}

/// Left Jacobian of SO(3): `exp(r + dr) = exp(J_l(r) dr) exp(r)` to first order.
fn left_jacobian(r: &Vec3) -> Mat3 {
    let t2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if t2 < 1e-12 {
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t = t2.sqrt();
        ((1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    };
    Mat3::identity() + k * a + k * k * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Rotation,
    Translation,
    LogScale,
}

/// Flat parameter vector of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    variant: Variant,
    n_frames: usize,
    values: Vec<f64>,
    /// reference rotations of the increments: one, or one per frame for dynamic
    reference: Vec<Mat3>,
}

/// Energy, gradient and per-frame terms at one parameter vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub energy: f64,
    pub gradient: Vec<f64>,
    pub terms: Vec<FrameTerms>,
}

impl Parameters {
    pub fn expected_len(variant: Variant, n_frames: usize) -> usize {
        match variant {
            Variant::OneDof => n_frames + 10,
            Variant::Static | Variant::SingleFrame => 7,
            Variant::Dynamic => 6 * n_frames + 1,
        }
    }

    /// Starts `variant` at one object-to-hand pose for every frame. The
    /// 1-DoF axis starts at the object's z-axis and all angles at 0.
    pub fn at_pose(variant: Variant, n_frames: usize, pose: &RigidTransform, scale: f64) -> Self {
        let rotation = orthonormalize(&pose.rotation);
        let t = pose.translation;
        let ls = scale.ln().clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        let (values, reference) = match variant {
            Variant::OneDof => {
                let z = rotation.column(2).into_owned();
                let mut v = vec![z.x, z.y, z.z];
                v.extend(std::iter::repeat_n(0.0, n_frames));
                v.extend([0.0, 0.0, 0.0, t.x, t.y, t.z, ls]);
                (v, vec![rotation])
            }
            Variant::Static | Variant::SingleFrame => (vec![0.0, 0.0, 0.0, t.x, t.y, t.z, ls], vec![rotation]),
            Variant::Dynamic => {
                let mut v = Vec::with_capacity(6 * n_frames + 1);
                for _ in 0..n_frames {
                    v.extend([0.0, 0.0, 0.0, t.x, t.y, t.z]);
                }
                v.push(ls);
                (v, vec![rotation; n_frames])
            }
        };
        Self {
            variant,
            n_frames,
            values,
            reference,
        }
    }

    /// Starts `variant` from an existing trajectory of equal or lower capacity.
    pub fn from_trajectory(variant: Variant, trajectory: &Trajectory, n_frames: usize) -> Result<Self> {
        match (variant, trajectory) {
            (Variant::Static | Variant::OneDof | Variant::Dynamic, Trajectory::Static { base, scale }) => {
                Ok(Self::at_pose(variant, n_frames, base, *scale))
            }
            (Variant::OneDof, Trajectory::OneDof { axis, angles, base, scale, .. }) => {
                let mut p = Self::at_pose(variant, n_frames, base, *scale);
                if angles.len() != n_frames {
                    return Err(Error::invalid("trajectory length differs from the sequence"));
                }
                p.values[..3].copy_from_slice(axis.as_vec().as_slice());
                p.values[3..3 + n_frames].copy_from_slice(angles);
                Ok(p)
            }
            (Variant::Dynamic, t @ (Trajectory::OneDof { .. } | Trajectory::Dynamic { .. })) => {
                let poses = t.poses(n_frames);
                if poses.len() != n_frames {
                    return Err(Error::invalid("trajectory length differs from the sequence"));
                }
                let mut p = Self::at_pose(variant, n_frames, &poses[0].0, poses[0].1);
                for (k, (pose, _)) in poses.iter().enumerate() {
                    p.reference[k] = orthonormalize(&pose.rotation);
                    p.values[6 * k + 3..6 * k + 6].copy_from_slice(pose.translation.as_slice());
                }
                Ok(p)
            }
            (v, t) => Err(Error::invalid(format!(
                "cannot start a {} optimization from a {} trajectory",
                v.name(),
                match t {
                    Trajectory::OneDof { .. } => "one_dof",
                    Trajectory::Static { .. } => "static",
                    Trajectory::Dynamic { .. } => "dynamic",
                    Trajectory::SingleFrame { .. } => "single_frame",
                }
            ))),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn log_scale(&self) -> f64 {
        *self.values.last().expect("layouts end with ln s")
    }

    fn group(&self, i: usize) -> Group {
        let n = self.n_frames;
        if i + 1 == self.values.len() {
            return Group::LogScale;
        }
        let translation = match self.variant {
            Variant::OneDof => (n + 6..n + 9).contains(&i),
            Variant::Static | Variant::SingleFrame => (3..6).contains(&i),
            Variant::Dynamic => i % 6 >= 3,
        };
        if translation {
            Group::Translation
        } else {
            Group::Rotation
        }
    }

    fn rotation_block(&self, k: usize) -> (Mat3, Vec3) {
        let (r, o) = match self.variant {
            Variant::OneDof => (self.reference[0], self.n_frames + 3),
            Variant::Static | Variant::SingleFrame => (self.reference[0], 0),
            Variant::Dynamic => (self.reference[k], 6 * k),
        };
        let xi = Vec3::new(self.values[o], self.values[o + 1], self.values[o + 2]);
        (r * so3_exp(&xi), xi)
    }

    fn translation_block(&self, k: usize) -> Vec3 {
        let o = match self.variant {
            Variant::OneDof => self.n_frames + 6,
            Variant::Static | Variant::SingleFrame => 3,
            Variant::Dynamic => 6 * k + 3,
        };
        Vec3::new(self.values[o], self.values[o + 1], self.values[o + 2])
    }

    fn raw_axis(&self) -> Vec3 {
        Vec3::new(self.values[0], self.values[1], self.values[2])
    }

    /// Object-to-hand pose of every frame and the scale.
    pub fn poses(&self) -> Result<(Vec<RigidTransform>, f64)> {
        let s = self.log_scale().exp();
        let poses = match self.variant {
            Variant::OneDof => {
                let axis = normalize_axis_parameter(&self.raw_axis())?;
                let (rb, _) = self.rotation_block(0);
                let base = RigidTransform {
                    rotation: rb,
                    translation: self.translation_block(0),
                };
                (0..self.n_frames)
                    .map(|n| RigidTransform::from_rotation(axis_rotation(self.values[3 + n], axis.as_vec())).compose(&base))
                    .collect()
            }
            Variant::Static | Variant::SingleFrame => {
                let (r, _) = self.rotation_block(0);
                vec![
                    RigidTransform {
                        rotation: r,
                        translation: self.translation_block(0),
                    };
                    self.n_frames
                ]
            }
            Variant::Dynamic => (0..self.n_frames)
                .map(|k| RigidTransform {
                    rotation: self.rotation_block(k).0,
                    translation: self.translation_block(k),
                })
                .collect(),
        };
        Ok((poses, s))
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        let (poses, scale) = self.poses()?;
        Ok(match self.variant {
            Variant::OneDof => {
                let (rb, _) = self.rotation_block(0);
                let mut t = OneDoFTrajectory::new(
                    normalize_axis_parameter(&self.raw_axis())?,
                    self.values[3..3 + self.n_frames].to_vec(),
                    RigidTransform {
                        rotation: rb,
                        translation: self.translation_block(0),
                    },
                    scale,
                )?;
                t.canonicalize();
                Trajectory::from_one_dof(&t)
            }
            Variant::Static | Variant::SingleFrame => Trajectory::Static { base: poses[0], scale },
            Variant::Dynamic => Trajectory::Dynamic { poses, scale },
        })
    }

    /// Total energy over all frames and its gradient w.r.t. the values.
    pub fn evaluate(&self, model: &EnergyModel) -> Result<Evaluation> {
        if model.n_frames() != self.n_frames {
            return Err(Error::invalid(format!(
                "parameters cover {} frames, model has {}",
                self.n_frames,
                model.n_frames()
            )));
        }
        let (poses, scale) = self.poses()?;
        let per_frame: Vec<Result<FrameEnergy>> = (0..self.n_frames)
            .into_par_iter()
            .map(|n| model.frame_energy(n, &poses[n], scale))
            .collect();
        let mut energy = 0.0;
        let mut g = vec![0.0; self.values.len()];
        let mut terms = Vec::with_capacity(self.n_frames);
        let last = g.len() - 1;
        let phi = match self.variant {
            Variant::OneDof => Some(normalize_axis_parameter(&self.raw_axis())?.into_vec()),
            _ => None,
        };
        let mut g_phi = Vec3::zeros();
        let mut g_rot = Vec3::zeros();
        for (n, fe) in per_frame.into_iter().enumerate() {
            let fe = fe?;
            energy += fe.terms.total;
            terms.push(fe.terms);
            g[last] += fe.log_scale;
            let pose = &poses[n];
            match self.variant {
                Variant::OneDof => {
                    let phi = phi.expect("axis");
                    let omega = self.values[3 + n];
                    let a = axis_rotation(omega, &phi);
                    let tau0 = fe.torque + pose.translation.cross(&fe.force);
                    g[3 + n] += phi.dot(&tau0);
                    g_phi += left_jacobian(&(phi * omega)).transpose() * tau0 * omega;
                    // the base rotation's increment enters every frame via R_n = A_n R_b
                    g_rot += pose.rotation.transpose() * fe.torque;
                    let gt = a.transpose() * fe.force;
                    for c in 0..3 {
                        g[self.n_frames + 6 + c] += gt[c];
                    }
                }
                Variant::Static | Variant::SingleFrame => {
                    g_rot += pose.rotation.transpose() * fe.torque;
                    for c in 0..3 {
                        g[3 + c] += fe.force[c];
                    }
                }
                Variant::Dynamic => {
                    let (_, xi) = self.rotation_block(n);
                    let gr = left_jacobian(&xi) * (pose.rotation.transpose() * fe.torque);
                    for c in 0..3 {
                        g[6 * n + c] += gr[c];
                        g[6 * n + 3 + c] += fe.force[c];
                    }
                }
            }
        }
        match self.variant {
            Variant::OneDof => {
                let ga = project_axis_gradient(&self.raw_axis(), &g_phi);
                g[..3].copy_from_slice(ga.as_slice());
                let (_, xi) = self.rotation_block(0);
                let gr = left_jacobian(&xi) * g_rot;
                g[self.n_frames + 3..self.n_frames + 6].copy_from_slice(gr.as_slice());
            }
            Variant::Static | Variant::SingleFrame => {
                let (_, xi) = self.rotation_block(0);
                let gr = left_jacobian(&xi) * g_rot;
                g[..3].copy_from_slice(gr.as_slice());
            }
            Variant::Dynamic => {}
        }
        Ok(Evaluation {
            energy,
            gradient: g,
            terms,
        })
    }

    /// Folds rotation increments into the references, renormalizes the axis
    /// and clamps the scale.
    fn retract(&mut self) {
        let blocks = match self.variant {
            Variant::Dynamic => self.n_frames,
            _ => 1,
        };
        for k in 0..blocks {
            let (r, _) = self.rotation_block(k);
            self.reference[k] = orthonormalize(&r);
            let o = match self.variant {
                Variant::OneDof => self.n_frames + 3,
                Variant::Static | Variant::SingleFrame => 0,
                Variant::Dynamic => 6 * k,
            };
            self.values[o..o + 3].fill(0.0);
        }
        if self.variant == Variant::OneDof {
            let raw = self.raw_axis();
            let n = raw.norm();
            if n > 1e-8 {
                self.values[..3].copy_from_slice((raw / n).as_slice());
            }
        }
        let last = self.values.len() - 1;
        self.values[last] = self.values[last].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
    }
}

/// Candidate object-to-hand poses: the priors when given, otherwise
/// `n` quasi-uniform rotations (the first is the identity) sharing a
/// translation that puts the object's centroid at the palm centroid.
pub fn generate_initializations(n: usize, seed: u64, model: &EnergyModel, priors: Option<&[RigidTransform]>) -> Vec<RigidTransform> {
    if let Some(p) = priors.filter(|p| !p.is_empty()) {
        return p.to_vec();
    }
    let palm = model.palm_centroid();
    let centroid = model.object.centroid();
    initial_rotations(n, seed)
        .into_iter()
        .map(|r| RigidTransform {
            rotation: r,
            translation: palm - r * centroid,
        })
        .collect()
}

/// Super-Fibonacci spiral on the unit quaternions, re-centered so the first
/// sample is the identity and rotated by a seeded conjugation.
pub fn initial_rotations(n: usize, seed: u64) -> Vec<Mat3> {
    use nalgebra::{Quaternion, UnitQuaternion};
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    let tau = std::f64::consts::TAU;
    let qs: Vec<UnitQuaternion<f64>> = (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / n as f64).sqrt();
            let big_r = (1.0 - s / n as f64).sqrt();
            let alpha = tau * s / PHI;
            let beta = tau * s / PSI;
            UnitQuaternion::from_quaternion(Quaternion::new(
                big_r * beta.cos(),
                r * alpha.sin(),
                r * alpha.cos(),
                big_r * beta.sin(),
            ))
        })
        .collect();
    let Some(q0) = qs.first().copied() else { return Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let c = UnitQuaternion::from_quaternion(Quaternion::new(w[0], w[1], w[2], w[3]));
    qs.iter()
        .map(|q| {
            let centered = q0.inverse() * q;
            (c * centered * c.inverse()).to_rotation_matrix().into_inner()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

/// One optimization run from a single initialization.
#[derive(Debug, Clone)]
struct Run {
    index: usize,
    params: Parameters,
    adam: Adam,
    initial_energy: f64,
    best_energy: f64,
    best: Parameters,
    steps_done: usize,
}

impl Run {
    fn start(index: usize, params: Parameters, model: &EnergyModel) -> Result<(Self, Evaluation)> {
        let eval = params.evaluate(model)?;
        let n = params.len();
        Ok((
            Self {
                index,
                best: params.clone(),
                params,
                adam: Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                },
                initial_energy: eval.energy,
                best_energy: eval.energy,
                steps_done: 0,
            },
            eval,
        ))
    }

    /// Advances to `until` total steps out of a `schedule`-step cosine decay.
    fn advance(&mut self, model: &EnergyModel, steps: &StepSizes, until: usize, schedule: usize, mut eval: Evaluation) -> Result<()> {
        while self.steps_done < until {
            let progress = self.steps_done as f64 / schedule.max(1) as f64;
            let decay = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            self.adam.t += 1;
            let b1 = 1.0 - BETA1.powi(self.adam.t);
            let b2 = 1.0 - BETA2.powi(self.adam.t);
            for i in 0..self.params.len() {
                let g = eval.gradient[i];
                if !g.is_finite() {
                    return Err(Error::ReconstructionFailed(format!("non-finite gradient at step {}", self.steps_done)));
                }
                self.adam.m[i] = BETA1 * self.adam.m[i] + (1.0 - BETA1) * g;
                self.adam.v[i] = BETA2 * self.adam.v[i] + (1.0 - BETA2) * g * g;
                let lr = match self.params.group(i) {
                    Group::Rotation => steps.rotation,
                    Group::Translation => steps.translation,
                    Group::LogScale => steps.log_scale,
                };
                let step = lr * decay * (self.adam.m[i] / b1) / ((self.adam.v[i] / b2).sqrt() + ADAM_EPS);
                self.params.values[i] -= step;
            }
            self.params.retract();
            self.steps_done += 1;
            eval = self.params.evaluate(model)?;
            if eval.energy < self.best_energy {
                self.best_energy = eval.energy;
                self.best = self.params.clone();
            }
        }
        Ok(())
    }
}

/// Result of optimizing one set of frames.
struct Solved {
    best: Parameters,
    energy: f64,
    initial_energy: f64,
    index: usize,
}

fn sweep(model: &EnergyModel, starts: Vec<Parameters>, config: &OptimizeConfig) -> Result<Solved> {
    let total = config.iterations;
    let coarse = total / 4;
    let started: Vec<(usize, Result<(Run, Evaluation)>)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let r = Run::start(i, p, model).and_then(|(mut run, eval)| {
                run.advance(model, &config.step_sizes, coarse, total, eval)?;
                let eval = run.params.evaluate(model)?;
                Ok((run, eval))
            });
            (i, r)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in started {
        match r {
            Ok(ok) => runs.push(ok),
            Err(e) => {
                warn!("initialization {i} failed: {e}");
                failures.push(format!("init {i}: {e}"));
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::ReconstructionFailed(format!(
            "all {} initializations failed: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    // best first, ties to the lower index
    runs.sort_by(|a, b| a.0.best_energy.total_cmp(&b.0.best_energy).then(a.0.index.cmp(&b.0.index)));
    let keep = config.survivors.max(1).min(runs.len());
    let tail = runs.split_off(keep);
    let finished: Vec<Result<Run>> = runs
        .into_par_iter()
        .map(|(mut run, eval)| {
            run.advance(model, &config.step_sizes, total, total, eval)?;
            Ok(run)
        })
        .collect();
    let mut done: Vec<Run> = Vec::new();
    for r in finished {
        match r {
            Ok(run) => done.push(run),
            Err(e) => warn!("initialization failed during refinement: {e}"),
        }
    }
    done.extend(tail.into_iter().map(|(r, _)| r));
    let best = done
        .into_iter()
        .min_by(|a, b| a.best_energy.total_cmp(&b.best_energy).then(a.index.cmp(&b.index)))
        .ok_or_else(|| Error::ReconstructionFailed("every surviving initialization failed".into()))?;
    debug!(
        "initialization {} won: energy {:.6e} -> {:.6e}",
        best.index, best.initial_energy, best.best_energy
    );
    Ok(Solved {
        energy: best.best_energy,
        initial_energy: best.initial_energy,
        index: best.index,
        best: best.best,
    })
}

fn assemble(
    variant: Variant,
    model_frames: &[(RigidTransform, f64)],
    trajectory: Trajectory,
    hand_to_camera: &[RigidTransform],
    losses: Vec<FrameTerms>,
    initial_energy: f64,
    chosen: Vec<usize>,
    started: Instant,
) -> ReconstructionResult {
    ReconstructionResult {
        variant,
        trajectory,
        object_to_hand: model_frames.iter().map(|p| p.0).collect(),
        object_to_camera: model_frames.iter().zip(hand_to_camera).map(|(p, h)| h.compose(&p.0)).collect(),
        scales: model_frames.iter().map(|p| p.1).collect(),
        total_energy: losses.iter().map(|l| l.total).sum(),
        losses,
        initial_energy,
        chosen_initialization: chosen,
        wall_time: started.elapsed().as_secs_f64(),
    }
}

fn finish(model: &EnergyModel, variant: Variant, solved: Solved, started: Instant) -> Result<ReconstructionResult> {
    let trajectory = solved.best.trajectory()?;
    let eval = solved.best.evaluate(model)?;
    let frames = trajectory.poses(model.n_frames());
    let h2c: Vec<RigidTransform> = model.targets.iter().map(|t| t.hand_to_camera).collect();
    debug_assert!((eval.energy - solved.energy).abs() <= 1e-9 * solved.energy.abs().max(1.0));
    Ok(assemble(variant, &frames, trajectory, &h2c, eval.terms, solved.initial_energy, vec![solved.index], started))
}

/// Optimizes `variant` over all frames of `sequence` from the given or
/// generated initializations. Frame sampling is the caller's job.
pub fn reconstruct(sequence: &GraspSequence, config: &OptimizeConfig, priors: Option<&[RigidTransform]>) -> Result<ReconstructionResult> {
    let started = Instant::now();
    let model = config.energy_model(sequence)?;
    let n = model.n_frames();
    let inits = generate_initializations(config.n_initializations.max(1), config.seed, &model, priors);
    info!(
        "reconstructing {} frames with {} initializations ({}, {} iterations)",
        n,
        inits.len(),
        config.variant.name(),
        config.iterations
    );
    if config.variant == Variant::SingleFrame {
        return reconstruct_single_frames(sequence, config, &inits, started);
    }
    let starts = inits.iter().map(|p| Parameters::at_pose(config.variant, n, p, 1.0)).collect();
    let solved = sweep(&model, starts, config)?;
    finish(&model, config.variant, solved, started)
}

fn reconstruct_single_frames(sequence: &GraspSequence, config: &OptimizeConfig, inits: &[RigidTransform], started: Instant) -> Result<ReconstructionResult> {
    let mut frames = Vec::new();
    let mut losses = Vec::new();
    let mut chosen = Vec::new();
    let mut initial = 0.0;
    let mut h2c = Vec::new();
    for k in 0..sequence.len() {
        let sub = sequence.subsequence(&[k]);
        let model = config.energy_model(&sub).map_err(|e| e.in_frame(k))?;
        let starts = inits.iter().map(|p| Parameters::at_pose(Variant::SingleFrame, 1, p, 1.0)).collect();
        let solved = sweep(&model, starts, config).map_err(|e| e.in_frame(k))?;
        let eval = solved.best.evaluate(&model)?;
        let (poses, scale) = solved.best.poses()?;
        frames.push((poses[0], scale));
        losses.push(eval.terms[0]);
        chosen.push(solved.index);
        initial += solved.initial_energy;
        h2c.push(sequence.frames[k].hand_to_camera);
    }
    let trajectory = Trajectory::SingleFrame {
        poses: frames.iter().map(|f| f.0).collect(),
        scales: frames.iter().map(|f| f.1).collect(),
    };
    Ok(assemble(Variant::SingleFrame, &frames, trajectory, &h2c, losses, initial, chosen, started))
}

/// Continues optimizing `variant` from an existing trajectory.
pub fn refine(sequence: &GraspSequence, config: &OptimizeConfig, start: &Trajectory) -> Result<ReconstructionResult> {
    let started = Instant::now();
    let model = config.energy_model(sequence)?;
    let params = Parameters::from_trajectory(config.variant, start, model.n_frames())?;
    let solved = sweep(
        &model,
        vec![params],
        &OptimizeConfig {
            survivors: 1,
            ..config.clone()
        },
    )?;
    finish(&model, config.variant, solved, started)
}

/// Total energy of a trajectory and its per-frame terms.
pub fn total_energy(model: &EnergyModel, trajectory: &Trajectory) -> Result<(f64, Vec<FrameTerms>)> {
    let mut energy = 0.0;
    let mut terms = Vec::new();
    for (n, (pose, scale)) in trajectory.poses(model.n_frames()).iter().enumerate() {
        let fe = model.frame_energy(n, pose, *scale)?;
        energy += fe.terms.total;
        terms.push(fe.terms);
    }
    Ok((energy, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_angle;

    #[test]
    fn axis_parameter_normalization() {
        assert_eq!(normalize_axis_parameter(&Vec3::new(0.0, 0.0, 2.0)).unwrap().into_vec(), Vec3::z());
        assert!(matches!(
            normalize_axis_parameter(&Vec3::new(1e-12, 0.0, 0.0)),
            Err(Error::DegenerateAxis(_))
        ));
        let raw = Vec3::new(0.3, -1.2, 0.7);
        let g = project_axis_gradient(&raw, &Vec3::new(1.0, 2.0, -0.5));
        assert!(g.dot(&raw).abs() < 1e-9);
        // finite differences of f(raw/|raw|) = <c, raw/|raw|>
        let c = Vec3::new(1.0, 2.0, -0.5);
        let f = |r: Vec3| c.dot(&r.normalize());
        for k in 0..3 {
            let mut p = raw;
            p[k] += 1e-6;
            let mut m = raw;
            m[k] -= 1e-6;
            assert!(((f(p) - f(m)) / 2e-6 - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn left_jacobian_is_first_order_exact() {
        let r = Vec3::new(0.4, -0.9, 0.3);
        let dr = Vec3::new(1e-6, 2e-6, -1.5e-6);
        let lhs = so3_exp(&(r + dr));
        let rhs = so3_exp(&(left_jacobian(&r) * dr)) * so3_exp(&r);
        assert!((lhs - rhs).norm() < 1e-10);
        let tiny = Vec3::new(1e-8, 0.0, 0.0);
        assert!((left_jacobian(&tiny) - Mat3::identity()).norm() < 1e-8);
    }

    #[test]
    fn initial_rotations_are_spread() {
        let one = initial_rotations(1, 3);
        assert!((one[0] - Mat3::identity()).norm() < 1e-12);
        let rs = initial_rotations(50, 11);
        assert_eq!(rs.len(), 50);
        assert!((rs[0] - Mat3::identity()).norm() < 1e-12);
        let mut min = f64::INFINITY;
        for i in 0..rs.len() {
            for j in 0..i {
                min = min.min(geodesic_angle(&rs[i], &rs[j]));
            }
        }
        assert!(min.to_degrees() > 5.0, "closest pair {}", min.to_degrees());
        assert_eq!(initial_rotations(50, 11), rs);
    }

    #[test]
    fn parameter_counts_match_layouts() {
        let p = RigidTransform::from_axis_angle(&Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.01, 0.02));
        for (v, n, len) in [
            (Variant::OneDof, 7, 17),
            (Variant::Static, 7, 7),
            (Variant::Dynamic, 7, 43),
            (Variant::SingleFrame, 1, 7),
        ] {
            let params = Parameters::at_pose(v, n, &p, 1.2);
            assert_eq!(params.len(), len);
            assert_eq!(Parameters::expected_len(v, n), len);
            let (poses, s) = params.poses().unwrap();
            assert!((s - 1.2).abs() < 1e-12);
            for q in poses {
                assert!((q.rotation - p.rotation).norm() < 1e-12);
                assert!((q.translation - p.translation).norm() < 1e-12);
            }
        }
        // the axis starts at the object's z-axis, angles at zero
        let params = Parameters::at_pose(Variant::OneDof, 4, &p, 1.0);
        let z = p.rotation.column(2).into_owned();
        assert!((Vec3::from_column_slice(&params.values()[..3]) - z).norm() < 1e-12);
        assert!(params.values()[3..7].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn retract_preserves_poses() {
        let p = RigidTransform::from_axis_angle(&Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.01, 0.02));
        let mut params = Parameters::at_pose(Variant::OneDof, 3, &p, 1.0);
        params.values_mut()[..3].copy_from_slice(&[0.2, 0.1, 2.0]);
        params.values_mut()[3..6].copy_from_slice(&[0.1, -0.2, 0.3]);
        params.values_mut()[6..9].copy_from_slice(&[0.05, 0.02, -0.04]);
        let (before, _) = params.poses().unwrap();
        params.retract();
        let (after, _) = params.poses().unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a.rotation - b.rotation).norm() < 1e-12);
        }
        assert_eq!(&params.values()[6..9], &[0.0, 0.0, 0.0]);
        assert!((Vec3::from_column_slice(&params.values()[..3]).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::OneDof, Variant::Static, Variant::Dynamic, Variant::SingleFrame] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("two_dof".parse::<Variant>().is_err());
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: OptimizeConfig = serde_json::from_str(r#"{"variant": "dynamic", "iterations": 12}"#).unwrap();
        assert_eq!(c.variant, Variant::Dynamic);
        assert_eq!(c.iterations, 12);
        assert_eq!(c.n_frames_sampled, 30);
        assert_eq!(c.n_initializations, 50);
        assert_eq!(c.render_size, 256);
        assert!(serde_json::from_str::<OptimizeConfig>(r#"{"iters": 3}"#).is_err());
    }
}
