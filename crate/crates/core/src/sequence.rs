//! Per-frame observations of a grasp and frame subsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mesh, RigidTransform};
use crate::render::BinaryImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct FrameObservation {
    /// Hand mesh in hand coordinates.
    pub hand_vertices: Mesh,
    pub hand_to_camera: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub object_mask: BinaryImage,
    pub hand_mask: BinaryImage,
}

#[derive(Debug, Clone)]
pub struct GraspSequence {
    pub frames: Vec<FrameObservation>,
    pub object_mesh: Mesh,
    /// Contact region per hand vertex: 0 none, 1-5 fingertips, 6-8 palm.
    pub region_labels: Vec<u8>,
    pub hand_side: HandSide,
}

impl GraspSequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("sequence has no frames"));
        }
        self.object_mesh.validate()?;
        let n_hand = self.frames[0].hand_vertices.vertices.len();
        if self.region_labels.len() != n_hand {
            return Err(Error::invalid(format!(
                "{} region labels for {} hand vertices",
                self.region_labels.len(),
                n_hand
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let check = || -> Result<()> {
                f.intrinsics.validate()?;
                f.hand_vertices.validate()?;
                if f.hand_vertices.vertices.len() != n_hand {
                    return Err(Error::invalid("hand vertex count differs from frame 0"));
                }
                let (w, h) = (f.intrinsics.width, f.intrinsics.height);
                for (name, m) in [("object_mask", &f.object_mask), ("hand_mask", &f.hand_mask)] {
                    if m.width != w || m.height != h {
                        return Err(Error::invalid(format!(
                            "{name} is {}x{}, intrinsics say {w}x{h}",
                            m.width, m.height
                        )));
                    }
                }
                Ok(())
            };
            check().map_err(|e| e.in_frame(i))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn subsequence(&self, indices: &[usize]) -> GraspSequence {
        GraspSequence {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            object_mesh: self.object_mesh.clone(),
            region_labels: self.region_labels.clone(),
            hand_side: self.hand_side,
        }
    }
}

/// `n` linearly spaced, rounded, deduplicated indices over `[0, total - 1]`.
pub fn sample_frame_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::invalid("cannot sample from an empty sequence"));
    }
    if n == 0 {
        return Err(Error::invalid("number of sampled frames must be at least 1"));
    }
    if total <= n {
        return Ok((0..total).collect());
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let step = (total - 1) as f64 / (n - 1) as f64;
    let mut idx: Vec<usize> = (0..n).map(|k| (k as f64 * step).round() as usize).collect();
    idx.dedup();
    Ok(idx)
}

pub fn sample_frames(sequence: &GraspSequence, n: usize) -> Result<(GraspSequence, Vec<usize>)> {
    let idx = sample_frame_indices(sequence.len(), n)?;
    Ok((sequence.subsequence(&idx), idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_spacing() {
        assert_eq!(sample_frame_indices(30, 30).unwrap(), (0..30).collect::<Vec<_>>());
        let idx = sample_frame_indices(90, 30).unwrap();
        assert_eq!(idx.len(), 30);
        assert_eq!(&idx[..4], &[0, 3, 6, 9]);
        assert_eq!(*idx.last().unwrap(), 89);
        assert_eq!(sample_frame_indices(10, 40).unwrap().len(), 10);
        assert_eq!(sample_frame_indices(10, 1).unwrap(), vec![0]);
        assert!(sample_frame_indices(0, 3).is_err());
    }

    #[test]
    fn indices_are_strictly_increasing() {
        for total in 1..60 {
            for n in 1..45 {
                let idx = sample_frame_indices(total, n).unwrap();
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(idx.len() <= n && *idx.last().unwrap() < total);
            }
        }
    }
}
