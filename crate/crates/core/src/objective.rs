//! Energy terms of the reconstruction: silhouette mismatch, penetration of
//! the hand contact surface, and fingertip attraction.
//!
//! Nearest-neighbour matches are recomputed on every evaluation and held
//! fixed when differentiating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vertex_normals, CameraIntrinsics, Mesh, RigidTransform, Vec3};
use crate::render::{render_soft, resample_mask, resample_occlusion, BinaryImage, OcclusionMask, RenderSettings, SilhouetteImage, Viewport};
use crate::sequence::GraspSequence;
use crate::spatial::PointIndex;

pub const N_REGIONS: u8 = 8;
pub const N_FINGERTIPS: u8 = 5;

/// Crop inflation around the object mask's bounding box.
pub const CROP_INFLATE: f64 = 0.3;
/// Subsamples per axis when resampling masks onto the render grid.
const MASK_SUPERSAMPLE: u32 = 3;

#[derive(Debug, Clone)]
struct HandFrame {
    vertices: Vec<Vec3>,
    normals: Vec<Vec3>,
    /// over all vertices labelled 1-8
    contact: PointIndex,
    contact_ids: Vec<usize>,
}

/// Hand geometry per frame with per-vertex contact regions.
#[derive(Debug, Clone)]
pub struct HandContactModel {
    labels: Vec<u8>,
    fingertips: [Vec<usize>; N_FINGERTIPS as usize],
    frames: Vec<HandFrame>,
}

impl HandContactModel {
    /// `frames` are hand meshes in hand coordinates sharing one topology.
    /// Missing normals are computed from the faces.
    pub fn new(frames: &[Mesh], labels: Vec<u8>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("hand model needs at least one frame"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > N_REGIONS) {
            return Err(Error::invalid(format!("region label {bad} outside 0..=8")));
        }
        let fingertips: [Vec<usize>; 5] = std::array::from_fn(|r| {
            (0..labels.len()).filter(|&i| labels[i] == r as u8 + 1).collect()
        });
        if let Some(r) = fingertips.iter().position(|v| v.is_empty()) {
            return Err(Error::invalid(format!("fingertip region {} has no vertices", r + 1)));
        }
        let contact_ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
        let frames = frames
            .iter()
            .enumerate()
            .map(|(n, mesh)| {
                if mesh.vertices.len() != labels.len() {
                    return Err(Error::invalid(format!(
                        "{} hand vertices but {} region labels",
                        mesh.vertices.len(),
                        labels.len()
                    ))
                    .in_frame(n));
                }
                let normals = match &mesh.normals {
                    Some(n) => n.clone(),
                    None if !mesh.faces.is_empty() => vertex_normals(&mesh.vertices, &mesh.faces),
                    None => return Err(Error::invalid("hand mesh has neither normals nor faces").in_frame(n)),
                };
                let pts: Vec<Vec3> = contact_ids.iter().map(|&i| mesh.vertices[i]).collect();
                Ok(HandFrame {
                    vertices: mesh.vertices.clone(),
                    normals,
                    contact: PointIndex::new(&pts).expect("fingertips are non-empty"),
                    contact_ids: contact_ids.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            fingertips,
            frames,
        })
    }

    pub fn from_sequence(sequence: &GraspSequence) -> Result<Self> {
        let meshes: Vec<Mesh> = sequence.frames.iter().map(|f| f.hand_vertices.clone()).collect();
        Self::new(&meshes, sequence.region_labels.clone())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn frame(&self, n: usize) -> Result<&HandFrame> {
        self.frames
            .get(n)
            .ok_or_else(|| Error::invalid(format!("hand model has {} frames, asked for {n}", self.frames.len())))
    }
}

/// Term weights. Push and pull weights already include the focal scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub lambda_mask: f64,
    pub lambda_push: f64,
    pub lambda_pull: f64,
    pub focal_scale: f64,
}

impl EnergyWeights {
    /// `lambda_mask = mask`, `lambda_push = push * f * render_size`, and
    /// likewise for pull, with `f` the focal length in pixels.
    pub fn from_factors(focal_px: f64, render_size: u32, mask: f64, push: f64, pull: f64) -> Result<Self> {
        if [mask, push, pull].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("energy weights must be non-negative"));
        }
        let focal_scale = focal_px * render_size as f64;
        Ok(Self {
            lambda_mask: mask,
            lambda_push: push * focal_scale,
            lambda_pull: pull * focal_scale,
            focal_scale,
        })
    }

    pub fn standard(focal_px: f64, render_size: u32) -> Self {
        Self::from_factors(focal_px, render_size, 1.0, 0.1, 0.1).expect("constant weights are valid")
    }
}

/// `sum c_o (gt - rendered)^2` over pixels, with the gradient w.r.t. the rendered occupancy.
pub fn e_mask(rendered: &SilhouetteImage, gt_mask: &BinaryImage, c_o: &OcclusionMask) -> Result<(f64, Vec<f64>)> {
    if rendered.width != gt_mask.width || rendered.height != gt_mask.height || rendered.width != c_o.width || rendered.height != c_o.height {
        return Err(Error::invalid(format!(
            "mask loss inputs differ in size: rendered {}x{}, gt {}x{}, occlusion {}x{}",
            rendered.width, rendered.height, gt_mask.width, gt_mask.height, c_o.width, c_o.height
        )));
    }
    let gt: Vec<f64> = gt_mask.data.iter().map(|&v| v as f64).collect();
    Ok(weighted_square_error(&rendered.occupancy, &gt, &c_o.weight))
}

fn weighted_square_error(occ: &[f64], gt: &[f64], weight: &[u8]) -> (f64, Vec<f64>) {
    let mut e = 0.0;
    let mut grad = vec![0.0; occ.len()];
    for i in 0..occ.len() {
        if weight[i] != 0 {
            let r = gt[i] - occ[i];
            e += r * r;
            grad[i] = -2.0 * r;
        }
    }
    (e, grad)
}

/// Penetration penalty `sum_v max(0, -<v - h*, n*>)` with `h*` the nearest
/// hand vertex in any contact region. Returns the gradient per object vertex.
pub fn e_push(object_in_hand: &Mesh, hand: &HandContactModel, frame: usize) -> Result<(f64, Vec<Vec3>)> {
    push_term(&object_in_hand.vertices, hand.frame(frame)?)
}

fn push_term(vertices: &[Vec3], hf: &HandFrame) -> Result<(f64, Vec<Vec3>)> {
    let mut e = 0.0;
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (v, g) in vertices.iter().zip(&mut grad) {
        let (k, _) = hf.contact.nearest(v);
        let h = hf.contact_ids[k];
        let n = hf.normals[h];
        let d = (v - hf.vertices[h]).dot(&n);
        if d < 0.0 {
            e -= d;
            *g = -n;
        }
    }
    Ok((e, grad))
}

/// Gradient of the pull term w.r.t. object vertices and object normals.
#[derive(Debug, Clone)]
pub struct PullGradient {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

/// Mean over fingertip regions of `<h - v, n_v>` for the region's closest
/// (Euclidean) hand-object vertex pair.
pub fn e_pull(object_in_hand: &Mesh, hand: &HandContactModel, frame: usize) -> Result<(f64, PullGradient)> {
    let normals = match &object_in_hand.normals {
        Some(n) => n.clone(),
        None => vertex_normals(&object_in_hand.vertices, &object_in_hand.faces),
    };
    pull_term(&object_in_hand.vertices, &normals, hand, hand.frame(frame)?)
}

fn pull_term(vertices: &[Vec3], normals: &[Vec3], hand: &HandContactModel, hf: &HandFrame) -> Result<(f64, PullGradient)> {
    let index = PointIndex::new(vertices).ok_or_else(|| Error::invalid("object has no vertices"))?;
    let mut grad = PullGradient {
        vertices: vec![Vec3::zeros(); vertices.len()],
        normals: vec![Vec3::zeros(); vertices.len()],
    };
    let w = 1.0 / N_FINGERTIPS as f64;
    let mut e = 0.0;
    for region in &hand.fingertips {
        let mut best = (f64::INFINITY, 0, 0);
        for &h in region {
            let (o, dist) = index.nearest(&hf.vertices[h]);
            if dist < best.0 {
                best = (dist, h, o);
            }
        }
        let (_, h, o) = best;
        let diff = hf.vertices[h] - vertices[o];
        e += w * diff.dot(&normals[o]);
        grad.vertices[o] -= normals[o] * w;
        grad.normals[o] += diff * w;
    }
    Ok((e, grad))
}

/// Per-frame term values, unweighted, plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTerms {
    pub mask: f64,
    pub push: f64,
    pub pull: f64,
    pub total: f64,
}

/// Energy of one frame and its gradient w.r.t. a left perturbation of the
/// object-to-hand pose: `force` for translation, `torque` for rotation about
/// the pose's origin (both hand frame), and `log_scale` for `ln s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEnergy {
    pub terms: FrameTerms,
    pub force: Vec3,
    pub torque: Vec3,
    pub log_scale: f64,
}

/// Mask target of one frame on its render grid.
#[derive(Debug, Clone)]
pub struct FrameTarget {
    pub viewport: Viewport,
    pub intrinsics: CameraIntrinsics,
    pub hand_to_camera: RigidTransform,
    /// Covered fraction of each render pixel by the observed object mask.
    pub object: Vec<f64>,
    pub occlusion: OcclusionMask,
}

impl FrameTarget {
    pub fn new(intrinsics: CameraIntrinsics, hand_to_camera: RigidTransform, object_mask: &BinaryImage, hand_mask: &BinaryImage, render_size: u32) -> Self {
        let viewport = Viewport::crop_around(object_mask, CROP_INFLATE, render_size);
        Self {
            object: resample_mask(object_mask, &viewport, MASK_SUPERSAMPLE),
            occlusion: resample_occlusion(hand_mask, &viewport, MASK_SUPERSAMPLE),
            viewport,
            intrinsics,
            hand_to_camera,
        }
    }
}

/// Everything needed to evaluate the energy of object poses over a sequence.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub object: Mesh,
    object_normals: Vec<Vec3>,
    pub hand: HandContactModel,
    pub targets: Vec<FrameTarget>,
    pub weights: EnergyWeights,
    pub render: RenderSettings,
}

impl EnergyModel {
    pub fn new(sequence: &GraspSequence, render_size: u32, weights: EnergyWeights, render: RenderSettings) -> Result<Self> {
        sequence.validate()?;
        if render_size == 0 {
            return Err(Error::invalid("render size must be positive"));
        }
        let targets = sequence
            .frames
            .iter()
            .map(|f| FrameTarget::new(f.intrinsics, f.hand_to_camera, &f.object_mask, &f.hand_mask, render_size))
            .collect();
        let object = sequence.object_mesh.clone();
        let object_normals = match &object.normals {
            Some(n) => n.clone(),
            None => vertex_normals(&object.vertices, &object.faces),
        };
        Ok(Self {
            hand: HandContactModel::from_sequence(sequence)?,
            object,
            object_normals,
            targets,
            weights,
            render,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.targets.len()
    }

    /// Mean of the palm-region (6-8) hand vertices over all frames.
    pub fn palm_centroid(&self) -> Vec3 {
        let mut sum = Vec3::zeros();
        let mut count = 0usize;
        for f in &self.hand.frames {
            for (v, &l) in f.vertices.iter().zip(&self.hand.labels) {
                if l > N_FINGERTIPS {
                    sum += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            // no palm labels: fall back to all contact vertices
            for f in &self.hand.frames {
                for &i in &f.contact_ids {
                    sum += f.vertices[i];
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Energy of frame `n` with the object at `pose` and `scale`, and its gradient.
    pub fn frame_energy(&self, n: usize, pose: &RigidTransform, scale: f64) -> Result<FrameEnergy> {
        self.frame_energy_inner(n, pose, scale).map_err(|e| e.in_frame(n))
    }

    fn frame_energy_inner(&self, n: usize, pose: &RigidTransform, scale: f64) -> Result<FrameEnergy> {
        let target = &self.targets[n];
        let w = &self.weights;
        let rel: Vec<Vec3> = self.object.vertices.iter().map(|v| pose.rotation * (v * scale)).collect();
        let in_hand: Vec<Vec3> = rel.iter().map(|r| r + pose.translation).collect();
        let normals: Vec<Vec3> = self.object_normals.iter().map(|m| pose.rotation * m).collect();
        let h2c = &target.hand_to_camera;
        let cam = Mesh {
            vertices: in_hand.iter().map(|p| h2c.apply_point(p)).collect(),
            faces: self.object.faces.clone(),
            normals: None,
        };
        let soft = render_soft(&cam, &target.intrinsics, &target.viewport, &self.render)?;
        let (mask, d_occ) = weighted_square_error(&soft.image.occupancy, &target.object, &target.occlusion.weight);
        let g_cam = soft.backward(&d_occ);

        let hf = self.hand.frame(n)?;
        let (push, g_push) = push_term(&in_hand, hf)?;
        let (pull, g_pull) = pull_term(&in_hand, &normals, &self.hand, hf)?;

        let mut force = Vec3::zeros();
        let mut torque = Vec3::zeros();
        let mut log_scale = 0.0;
        let rt = h2c.rotation.transpose();
        for i in 0..in_hand.len() {
            let g = rt * g_cam[i] * w.lambda_mask + g_push[i] * w.lambda_push + g_pull.vertices[i] * w.lambda_pull;
            force += g;
            torque += rel[i].cross(&g) + normals[i].cross(&(g_pull.normals[i] * w.lambda_pull));
            log_scale += g.dot(&rel[i]);
        }
        Ok(FrameEnergy {
            terms: FrameTerms {
                mask,
                push,
                pull,
                total: w.lambda_mask * mask + w.lambda_push * push + w.lambda_pull * pull,
            },
            force,
            torque,
            log_scale,
        })
    }
}
