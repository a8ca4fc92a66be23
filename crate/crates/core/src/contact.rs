//! Hand-object contact sets and stable-grasp segmentation.
//!
//! A contact set is the sorted list of object vertex indices touching the
//! hand in one frame. Because the object is rigid, indices are comparable
//! across frames and contact similarity is plain set IOU.

use serde::{Deserialize, Serialize};

use crate::curve::{frames_with_margin, normalized_time, Curve, CurvePoint};
use crate::error::{Error, Result};
use crate::geometry::{vertex_normals, Mesh};
use crate::spatial::PointIndex;

/// Default contact distance for noisy data (1 cm).
pub const DEFAULT_CONTACT_DELTA: f64 = 0.01;
/// Default IOU threshold of the stable-grasp definition.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactSet {
    pub frame_index: usize,
    pub object_vertex_indices: Vec<usize>,
}

impl ContactSet {
    /// Sorts and deduplicates the indices.
    pub fn new(frame_index: usize, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            frame_index,
            object_vertex_indices: indices,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.object_vertex_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.object_vertex_indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspInterval {
    pub start: usize,
    pub end: usize,
    pub tau: f64,
}

impl GraspInterval {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

/// Object vertices within `delta` of the hand. With `delta == 0` a vertex is
/// in contact when its signed distance along the nearest hand vertex normal
/// is non-positive.
pub fn contact_set(
    frame_index: usize,
    object_in_hand: &Mesh,
    hand: &Mesh,
    delta: f64,
) -> Result<ContactSet> {
    if object_in_hand.is_empty() || hand.is_empty() {
        return Err(Error::invalid("contact set needs non-empty object and hand meshes"));
    }
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("contact distance must be >= 0, got {delta}")));
    }
    let index = PointIndex::new(&hand.vertices).expect("hand is non-empty");
    let computed;
    let normals = match &hand.normals {
        Some(n) => n,
        None => {
            computed = vertex_normals(&hand.vertices, &hand.faces);
            &computed
        }
    };
    let indices = object_in_hand
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            let (h, dist) = index.nearest(v);
            if delta > 0.0 {
                dist <= delta
            } else {
                (*v - hand.vertices[h]).dot(&normals[h]) <= 0.0
            }
        })
        .map(|(i, _)| i)
        .collect();
    Ok(ContactSet::new(frame_index, indices))
}

/// |a ∩ b| / |a ∪ b|, zero when both are empty.
pub fn contact_iou(a: &ContactSet, b: &ContactSet) -> f64 {
    let (x, y) = (&a.object_vertex_indices, &b.object_vertex_indices);
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = x.len() + y.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Longest interval whose frame pairs all have contact IOU above `tau`.
///
/// Validity is hereditary, so for every right end the smallest admissible
/// left end only moves forward; the scan keeps it up to date by checking the
/// new frame against the current window. Ties go to the earliest start.
pub fn segment_stable_grasp(contact_sets: &[ContactSet], tau: f64) -> Result<GraspInterval> {
    if contact_sets.is_empty() {
        return Err(Error::invalid("cannot segment an empty sequence"));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1), got {tau}")));
    }
    let mut left = 0;
    let mut best = (0usize, 0usize);
    for right in 0..contact_sets.len() {
        // the latest frame in the window that conflicts with `right` bounds the new left end
        if let Some(conflict) = (left..right)
            .rev()
            .find(|&i| contact_iou(&contact_sets[i], &contact_sets[right]) <= tau)
        {
            left = conflict + 1;
        }
        if right - left > best.1 - best.0 {
            best = (left, right);
        }
    }
    Ok(GraspInterval {
        start: best.0,
        end: best.1,
        tau,
    })
}

/// Mean pairwise contact IOU, in percent.
pub fn stable_contact_area(contact_sets: &[ContactSet]) -> Result<f64> {
    let n = contact_sets.len();
    if n < 2 {
        return Err(Error::invalid("stable contact area needs at least two frames"));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += contact_iou(&contact_sets[i], &contact_sets[j]);
        }
    }
    Ok(100.0 * sum / (n * (n - 1) / 2) as f64)
}

/// Per-frame mean IOU against every in-interval frame, on normalized time.
pub fn contact_iou_curve(
    contact_sets: &[ContactSet],
    interval: &GraspInterval,
    margin_fraction: f64,
) -> Result<Curve> {
    if interval.start > interval.end || interval.end >= contact_sets.len() {
        return Err(Error::invalid("interval does not fit the sequence"));
    }
    let inside = &contact_sets[interval.start..=interval.end];
    Ok(frames_with_margin(interval.start, interval.end, margin_fraction, contact_sets.len())
        .map(|f| {
            let mean = inside
                .iter()
                .map(|s| contact_iou(&contact_sets[f], s))
                .sum::<f64>()
                / inside.len() as f64;
            CurvePoint {
                normalized_time: normalized_time(f, interval.start, interval.end),
                value: mean,
            }
        })
        .collect())
}
