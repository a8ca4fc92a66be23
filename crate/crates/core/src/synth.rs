//! Deterministic synthetic grasp sequences with ground truth.
//!
//! The hand proxy is built in hand coordinates: a gently curled palm plate
//! under the object (regions 6, 7, 8 from -x to +x) and five fingers, each a
//! small pad (regions 1-5) floating just off the object surface joined to a
//! knuckle on the plate edge. Pads are rigidly attached to the object, so the
//! contact set is the same in every frame. The plate keeps clear of the
//! object in all frames.
//!
//! Random streams (one ChaCha8 stream per purpose, all from `seed`):
//! 0 motion, 1 grasp pose, 2 camera, 3 mask noise, 4 category priors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axisfit::OneDoFTrajectory;
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, vertex_normals, CameraIntrinsics, Mat3, Mesh, RigidTransform, UnitAxis, Vec3};
use crate::render::{visible_layers, BinaryImage, Viewport};
use crate::sequence::{FrameObservation, GraspSequence, HandSide};

const STREAM_MOTION: u64 = 0;
const STREAM_GRASP: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_PRIORS: u64 = 4;

/// Spread of grasp rotations around the canonical upright pose, per axis.
const GRASP_ROTATION_SIGMA_DEG: f64 = 10.0;
const GRASP_TRANSLATION_SIGMA: f64 = 0.003;
const PAD_HALF: f64 = 0.003;
const FINGER_THICKNESS: f64 = 0.006;
/// Minimum distance from the palm plate to the object, above the default contact distance.
const PALM_CLEARANCE: f64 = 0.012;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Box {
        /// Edge lengths in meters.
        size: [f64; 3],
        #[serde(default = "default_box_subdivisions")]
        subdivisions: u32,
    },
    Cylinder {
        radius: f64,
        height: f64,
        #[serde(default = "default_segments")]
        segments: u32,
        #[serde(default = "default_rings")]
        rings: u32,
    },
    Icosphere {
        radius: f64,
        #[serde(default = "default_ico_subdivisions")]
        subdivisions: u32,
    },
}

fn default_box_subdivisions() -> u32 {
    4
}
fn default_segments() -> u32 {
    24
}
fn default_rings() -> u32 {
    4
}
fn default_ico_subdivisions() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionModel {
    Static,
    /// Rotation about an axis through the hand origin, ramping from 0 to
    /// `amplitude_deg`. Without `axis`, a random axis within 20 degrees of
    /// the hand z-axis is drawn.
    OneDof {
        #[serde(default)]
        axis: Option<[f64; 3]>,
        amplitude_deg: f64,
    },
    /// Smooth rotation and translation that are not restricted to one axis.
    Free6dof { rotation_deg: f64, translation_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPath {
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
    pub distance_m: f64,
    pub elevation_deg: f64,
    /// Mean azimuth; a random offset of up to 20 degrees is added.
    pub azimuth_deg: f64,
    /// Total azimuth sweep over the sequence.
    pub orbit_deg: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            focal_px: 480.0,
            distance_m: 0.5,
            elevation_deg: 45.0,
            azimuth_deg: 0.0,
            orbit_deg: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_category")]
    pub category: String,
    #[serde(default)]
    pub seed: u64,
    pub n_frames: usize,
    pub motion: MotionModel,
    pub object: Primitive,
    /// Ground-truth object scale.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub camera: CameraPath,
    /// Maximum erosion/dilation radius applied to object masks, in pixels.
    #[serde(default)]
    pub mask_noise_px: u32,
    /// Number of category prior poses to emit.
    #[serde(default = "default_priors")]
    pub n_priors: usize,
    #[serde(default = "right")]
    pub hand_side: HandSide,
}

fn default_name() -> String {
    "synthetic".into()
}
fn default_category() -> String {
    "synthetic".into()
}
fn one() -> f64 {
    1.0
}
fn default_priors() -> usize {
    10
}
fn right() -> HandSide {
    HandSide::Right
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::invalid("synthetic sequences need at least two frames"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        match &self.motion {
            MotionModel::Static => {}
            MotionModel::OneDof { axis, amplitude_deg } => {
                if !(*amplitude_deg >= 0.0) {
                    return Err(Error::invalid("motion amplitude must be non-negative"));
                }
                if let Some(a) = axis {
                    UnitAxis::normalize(Vec3::from(*a))?;
                }
            }
            MotionModel::Free6dof { rotation_deg, translation_m } => {
                if !(*rotation_deg >= 0.0 && *translation_m >= 0.0) {
                    return Err(Error::invalid("motion magnitudes must be non-negative"));
                }
            }
        }
        let c = &self.camera;
        if c.width == 0 || c.height == 0 || !(c.focal_px > 0.0) || !(c.distance_m > 0.0) {
            return Err(Error::invalid("camera needs positive size, focal length and distance"));
        }
        if !(c.elevation_deg.abs() < 85.0) {
            return Err(Error::invalid("camera elevation must stay below 85 degrees"));
        }
        primitive_mesh(&self.object).map(|_| ())
    }
}

/// Ground truth of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub object_to_hand: Vec<RigidTransform>,
    pub scale: f64,
    /// Present for static and 1-DoF motion.
    pub trajectory: Option<OneDoFTrajectory>,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub sequence: GraspSequence,
    pub gt: GroundTruth,
    /// Category prior poses for initialization.
    pub priors: Vec<RigidTransform>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Watertight triangle mesh of a primitive, centered at the origin, with
/// outward faces and area-weighted vertex normals.
pub fn primitive_mesh(p: &Primitive) -> Result<Mesh> {
    let mesh = match p {
        Primitive::Box { size, subdivisions } => {
            if size.iter().any(|s| !(*s > 0.0)) || *subdivisions == 0 {
                return Err(Error::invalid("box needs positive size and subdivisions"));
            }
            box_mesh(*size, *subdivisions as usize)
        }
        Primitive::Cylinder {
            radius,
            height,
            segments,
            rings,
        } => {
            if !(*radius > 0.0 && *height > 0.0) || *segments < 3 || *rings == 0 {
                return Err(Error::invalid("cylinder needs positive radius and height, >= 3 segments, >= 1 ring"));
            }
            cylinder_mesh(*radius, *height, *segments as usize, *rings as usize)
        }
        Primitive::Icosphere { radius, subdivisions } => {
            if !(*radius > 0.0) || *subdivisions > 5 {
                return Err(Error::invalid("icosphere needs a positive radius and at most 5 subdivisions"));
            }
            icosphere_mesh(*radius, *subdivisions as usize)
        }
    };
    Ok(mesh.with_vertex_normals())
}

fn box_mesh(size: [f64; 3], k: usize) -> Mesh {
    use std::collections::HashMap;
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |c: [usize; 3], vertices: &mut Vec<Vec3>| -> usize {
        *index.entry(c).or_insert_with(|| {
            vertices.push(Vec3::from_fn(|i, _| (c[i] as f64 / k as f64 - 0.5) * size[i]));
            vertices.len() - 1
        })
    };
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in [0, k] {
            for u in 0..k {
                for v in 0..k {
                    let mut q = [[0usize; 3]; 4];
                    for (n, (du, dv)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                        q[n][a] = side;
                        q[n][b] = u + du;
                        q[n][c] = v + dv;
                    }
                    let ids: Vec<usize> = q.iter().map(|&p| vid(p, &mut vertices)).collect();
                    if side == k {
                        faces.push([ids[0], ids[1], ids[2]]);
                        faces.push([ids[0], ids[2], ids[3]]);
                    } else {
                        faces.push([ids[0], ids[2], ids[1]]);
                        faces.push([ids[0], ids[3], ids[2]]);
                    }
                }
            }
        }
    }
    Mesh {
        vertices,
        faces,
        normals: None,
    }
}

fn cylinder_mesh(r: f64, h: f64, seg: usize, rings: usize) -> Mesh {
    let mut vertices = Vec::new();
    for l in 0..=rings {
        let z = -h / 2.0 + h * l as f64 / rings as f64;
        for i in 0..seg {
            let t = std::f64::consts::TAU * i as f64 / seg as f64;
            vertices.push(Vec3::new(r * t.cos(), r * t.sin(), z));
        }
    }
    let bottom = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, -h / 2.0));
    let top = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, h / 2.0));
    let id = |l: usize, i: usize| l * seg + i % seg;
    let mut faces = Vec::new();
    for l in 0..rings {
        for i in 0..seg {
            faces.push([id(l, i), id(l, i + 1), id(l + 1, i + 1)]);
            faces.push([id(l, i), id(l + 1, i + 1), id(l + 1, i)]);
        }
    }
    for i in 0..seg {
        faces.push([top, id(rings, i), id(rings, i + 1)]);
        faces.push([bottom, id(0, i + 1), id(0, i)]);
    }
    Mesh {
        vertices,
        faces,
        normals: None,
    }
}

fn icosphere_mesh(r: f64, subdivisions: usize) -> Mesh {
    use std::collections::HashMap;
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) / 2.0).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    Mesh {
        vertices: v.into_iter().map(|p| p * r).collect(),
        faces: f,
        normals: None,
    }
}

fn gaussian_rotation(rng: &mut ChaCha8Rng, sigma_deg: f64) -> Mat3 {
    let n = Normal::new(0.0, sigma_deg.to_radians()).expect("finite sigma");
    so3_exp(&Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
}

/// Upright grasp: object origin above the hand origin, rotation drawn around identity.
fn sample_grasp(rng: &mut ChaCha8Rng, height: f64, translation_sigma: f64) -> RigidTransform {
    let rotation = gaussian_rotation(rng, GRASP_ROTATION_SIGMA_DEG);
    let n = Normal::new(0.0, translation_sigma.max(1e-300)).expect("finite sigma");
    let jitter = if translation_sigma > 0.0 {
        Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    } else {
        Vec3::zeros()
    };
    RigidTransform {
        rotation,
        translation: Vec3::new(0.0, 0.0, height) + jitter,
    }
}

fn grasp_height(object: &Mesh, scale: f64) -> f64 {
    0.5 * object.diameter() * scale + 0.02
}

/// Ground-truth object-to-hand poses, without any rendering.
pub fn generate_motion(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let object = primitive_mesh(&spec.object)?;
    let base = sample_grasp(&mut stream(spec.seed, STREAM_GRASP), grasp_height(&object, spec.scale), GRASP_TRANSLATION_SIGMA);
    let n = spec.n_frames;
    let ramp = |k: usize| 0.5 - 0.5 * (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
    let mut rng = stream(spec.seed, STREAM_MOTION);
    let (poses, trajectory) = match &spec.motion {
        MotionModel::Static => {
            let t = OneDoFTrajectory::new(UnitAxis::Z, vec![0.0; n], base, spec.scale)?;
            (vec![base; n], Some(t))
        }
        MotionModel::OneDof { axis, amplitude_deg } => {
            let axis = match axis {
                Some(a) => UnitAxis::normalize(Vec3::from(*a))?,
                None => {
                    let tilt = rng.random_range(0.0..20f64.to_radians());
                    let az = rng.random_range(0.0..std::f64::consts::TAU);
                    UnitAxis::normalize(Vec3::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), tilt.cos()))?
                }
            };
            let angles: Vec<f64> = (0..n).map(|k| amplitude_deg.to_radians() * ramp(k)).collect();
            let t = OneDoFTrajectory::new(axis, angles, base, spec.scale)?;
            (t.poses(), Some(t))
        }
        MotionModel::Free6dof { rotation_deg, translation_m } => {
            let mut dir = || {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v / v.norm().max(1e-9)
            };
            let (a, b, c) = (dir(), dir(), dir());
            let poses = (0..n)
                .map(|k| {
                    let u = k as f64 / (n - 1) as f64;
                    let s1 = (std::f64::consts::PI * u).sin();
                    let s2 = (std::f64::consts::TAU * u).sin();
                    let w = (a * s1 + b * (0.5 * s2)) * rotation_deg.to_radians();
                    RigidTransform {
                        rotation: so3_exp(&w),
                        translation: c * (translation_m * s1),
                    }
                    .compose(&base)
                })
                .collect();
            (poses, None)
        }
    };
    Ok(GroundTruth {
        object_to_hand: poses,
        scale: spec.scale,
        trajectory,
    })
}

/// Hand geometry for every frame and its region labels.
struct HandBuild {
    frames: Vec<Mesh>,
    labels: Vec<u8>,
}

fn tangent_pair(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    (t1, n.cross(&t1))
}

fn build_hand(object: &Mesh, gt: &GroundTruth) -> Result<HandBuild> {
    let s = gt.scale;
    let normals = object.normals.clone().expect("primitives carry normals");
    let posed: Vec<Vec<Vec3>> = gt
        .object_to_hand
        .iter()
        .map(|t| object.vertices.iter().map(|v| t.apply_point(&(v * s))).collect())
        .collect();
    let all = posed.iter().flatten();
    let (mut x_max, mut y_max, mut z_min) = (0.0f64, 0.0f64, f64::INFINITY);
    for p in all {
        x_max = x_max.max(p.x.abs());
        y_max = y_max.max(p.y.abs());
        z_min = z_min.min(p.z);
    }
    let half_x = x_max + 0.01;
    let half_y = y_max + 0.015;
    let curl = 0.01 / (half_y * half_y);

    // palm plate, lowered until it clears the object in every frame
    let (nx, ny) = (9usize, 7usize);
    let mut z_palm = z_min - PALM_CLEARANCE;
    let plate = |z0: f64| -> Vec<Vec3> {
        let mut v = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = -half_x + 2.0 * half_x * i as f64 / (nx - 1) as f64;
                let y = -half_y + 2.0 * half_y * j as f64 / (ny - 1) as f64;
                v.push(Vec3::new(x, y, z0 + curl * y * y));
            }
        }
        v
    };
    let clearance = |pts: &[Vec3]| {
        posed
            .iter()
            .flatten()
            .flat_map(|o| pts.iter().map(move |p| (o - p).norm()))
            .fold(f64::INFINITY, f64::min)
    };
    let mut palm = plate(z_palm);
    while clearance(&palm) < PALM_CLEARANCE {
        z_palm -= 0.005;
        palm = plate(z_palm);
    }
    let mut labels: Vec<u8> = palm
        .iter()
        .map(|p| {
            if p.x < -half_x / 3.0 {
                6
            } else if p.x <= half_x / 3.0 {
                7
            } else {
                8
            }
        })
        .collect();
    let palm_normals: Vec<Vec3> = palm.iter().map(|p| Vec3::new(0.0, -2.0 * curl * p.y, 1.0).normalize()).collect();
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            faces.push([a, a + 1, a + nx + 1]);
            faces.push([a, a + nx + 1, a + nx]);
        }
    }

    // fingertip sites, chosen on the frame-0 pose: thumb on -y, fingers on +y
    let t0 = &gt.object_to_hand[0];
    let center = posed[0].iter().sum::<Vec3>() / posed[0].len() as f64;
    let ext = posed[0].iter().fold(Vec3::zeros(), |m, p| m.sup(&(p - center).abs()));
    let sites: [(f64, f64, f64); 5] = [(0.0, -1.0, 0.25), (-0.45, 1.0, 0.35), (-0.15, 1.0, 0.4), (0.15, 1.0, 0.35), (0.45, 1.0, 0.25)];
    let mut used: Vec<usize> = Vec::new();
    let mut tips = Vec::new();
    for &(fx, side, fz) in &sites {
        let dir = Vec3::new(0.0, side, 0.0);
        let aligned: Vec<f64> = normals.iter().map(|n| t0.apply_vector(n).dot(&dir)).collect();
        let best = aligned.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let target = center + Vec3::new(fx * ext.x, side * ext.y, fz * ext.z);
        // coarse meshes have few well-aligned vertices; widen the tolerance until one is free
        let pick = [0.1, 0.4, 1.0, 3.0]
            .iter()
            .find_map(|tol| {
                (0..object.vertices.len())
                    .filter(|&i| aligned[i] >= best - tol && !used.contains(&i))
                    .min_by(|&a, &b| (posed[0][a] - target).norm().total_cmp(&(posed[0][b] - target).norm()))
            })
            .ok_or_else(|| Error::invalid("object has too few vertices for five fingertips"))?;
        used.push(pick);
        let knuckle = Vec3::new(target.x.clamp(-half_x, half_x), side * half_y, z_palm + 0.01);
        tips.push((pick, knuckle));
    }

    // finger topology: pad (4, labelled), back (4), knuckle (4)
    let mut finger_faces = Vec::new();
    let quad = |f: &mut Vec<[usize; 3]>, a: usize, b: usize, c: usize, d: usize| {
        f.push([a, b, c]);
        f.push([a, c, d]);
    };
    let n_palm = palm.len();
    for k in 0..5 {
        let o = n_palm + 12 * k;
        quad(&mut finger_faces, o, o + 1, o + 2, o + 3);
        for ring in [0, 4] {
            for e in 0..4 {
                let (a, b) = (o + ring + e, o + ring + (e + 1) % 4);
                quad(&mut finger_faces, a, b, b + 4, a + 4);
            }
        }
        quad(&mut finger_faces, o + 8, o + 11, o + 10, o + 9);
        labels.extend(std::iter::repeat_n(k as u8 + 1, 4));
        labels.extend(std::iter::repeat_n(0, 8));
    }
    faces.extend(finger_faces);

    let offsets = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let frames = gt
        .object_to_hand
        .iter()
        .map(|t| {
            let mut v = palm.clone();
            let mut nrm = palm_normals.clone();
            let mut pad_normals = Vec::new();
            for &(pick, knuckle) in &tips {
                let n_obj = normals[pick];
                let (t1, t2) = tangent_pair(&n_obj);
                let c = object.vertices[pick] * s;
                for depth in [0.0, FINGER_THICKNESS] {
                    for (a, b) in offsets {
                        v.push(t.apply_point(&(c + n_obj * depth + (t1 * a + t2 * b) * PAD_HALF)));
                    }
                }
                for (a, b) in offsets {
                    v.push(knuckle + Vec3::new(a, 0.0, b) * 0.004);
                }
                pad_normals.push(-t.apply_vector(&n_obj));
            }
            let computed = vertex_normals(&v, &faces);
            for (k, pn) in pad_normals.iter().enumerate() {
                let o = n_palm + 12 * k;
                nrm.extend(std::iter::repeat_n(*pn, 4));
                nrm.extend_from_slice(&computed[o + 4..o + 12]);
            }
            Mesh::new(v, faces.clone())?.with_normals(nrm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HandBuild { frames, labels })
}

fn camera_poses(spec: &SynthSpec, look_at: Vec3) -> Vec<RigidTransform> {
    let c = &spec.camera;
    let mut rng = stream(spec.seed, STREAM_CAMERA);
    let az0 = c.azimuth_deg + rng.random_range(-20.0..20.0);
    let n = spec.n_frames;
    (0..n)
        .map(|k| {
            let u = k as f64 / (n - 1) as f64;
            let az = (az0 + c.orbit_deg * (u - 0.5)).to_radians();
            let el = (c.elevation_deg + 5.0 * (std::f64::consts::TAU * u).sin()).to_radians();
            let pos = look_at + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * c.distance_m;
            let z = (look_at - pos).normalize();
            let x = z.cross(&Vec3::z()).normalize();
            let y = z.cross(&x);
            let r_c2h = Mat3::from_columns(&[x, y, z]);
            RigidTransform {
                rotation: r_c2h.transpose(),
                translation: -(r_c2h.transpose() * pos),
            }
        })
        .collect()
}

/// Category prior poses: independent draws from the grasp distribution at
/// nominal (unit) scale, without translation jitter.
fn category_priors(spec: &SynthSpec, object: &Mesh) -> Vec<RigidTransform> {
    let mut rng = stream(spec.seed, STREAM_PRIORS);
    let h = grasp_height(object, 1.0);
    (0..spec.n_priors).map(|_| sample_grasp(&mut rng, h, 0.0)).collect()
}

/// Generates a full synthetic sequence with masks.
pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    let gt = generate_motion(spec)?;
    let object = primitive_mesh(&spec.object)?;
    let hand = build_hand(&object, &gt)?;
    let look_at = gt.object_to_hand[0].translation;
    let cams = camera_poses(spec, look_at);
    let c = &spec.camera;
    let k = CameraIntrinsics::new(c.focal_px, c.focal_px, c.width as f64 / 2.0, c.height as f64 / 2.0, c.width, c.height)?;
    let vp = Viewport::full_image(&k);
    let scaled = object.scaled(gt.scale);
    let layers: Vec<(BinaryImage, BinaryImage)> = (0..spec.n_frames)
        .into_par_iter()
        .map(|n| {
            let obj_cam = scaled.transformed(&cams[n].compose(&gt.object_to_hand[n]));
            let hand_cam = hand.frames[n].transformed(&cams[n]);
            visible_layers(&obj_cam, &hand_cam, &k, &vp).map_err(|e| e.in_frame(n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (object_masks, hand_masks): (Vec<_>, Vec<_>) = layers.into_iter().unzip();
    let object_masks = corrupt_masks(&object_masks, spec.mask_noise_px, spec.seed);
    let frames = (0..spec.n_frames)
        .map(|n| FrameObservation {
            hand_vertices: hand.frames[n].clone(),
            hand_to_camera: cams[n],
            intrinsics: k,
            object_mask: object_masks[n].clone(),
            hand_mask: hand_masks[n].clone(),
        })
        .collect();
    let sequence = GraspSequence {
        frames,
        object_mesh: object.clone(),
        region_labels: hand.labels,
        hand_side: spec.hand_side,
    };
    Ok(SynthScene {
        priors: category_priors(spec, &object),
        spec: spec.clone(),
        sequence,
        gt,
    })
}

/// One 4-neighbour erosion (`grow == false`) or dilation step. Pixels
/// outside the image count as background.
pub fn morph_step(m: &BinaryImage, grow: bool) -> BinaryImage {
    let (w, h) = (m.width as i64, m.height as i64);
    let at = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as u32, y as u32);
    let mut out = m.clone();
    for y in 0..h {
        for x in 0..w {
            let n = [at(x - 1, y), at(x + 1, y), at(x, y - 1), at(x, y + 1)];
            let v = if grow {
                at(x, y) || n.iter().any(|&b| b)
            } else {
                at(x, y) && n.iter().all(|&b| b)
            };
            out.set(x as u32, y as u32, v);
        }
    }
    out
}

/// Per frame, erodes or dilates by a random radius in `1..=radius`.
pub fn corrupt_masks(masks: &[BinaryImage], radius: u32, seed: u64) -> Vec<BinaryImage> {
    if radius == 0 {
        return masks.to_vec();
    }
    let mut rng = stream(seed, STREAM_NOISE);
    let plan: Vec<(bool, u32)> = masks.iter().map(|_| (rng.random_bool(0.5), rng.random_range(1..=radius))).collect();
    masks
        .par_iter()
        .zip(plan)
        .map(|(m, (grow, r))| {
            let mut out = m.clone();
            for _ in 0..r {
                out = morph_step(&out, grow);
            }
            out
        })
        .collect()
}
