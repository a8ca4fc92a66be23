//! Pose and silhouette metrics per sequence, gated stable-contact scores,
//! and per-category aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contact::{contact_set, stable_contact_area, ContactSet};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, RigidTransform};
use crate::render::{depth_order_visibility, render_hard, BinaryImage, OcclusionMask, Viewport};
use crate::sequence::GraspSequence;

/// A sequence passes ADD when the mean vertex error is below this fraction of the diameter.
pub const ADD_FRACTION: f64 = 0.1;
pub const DEFAULT_IOU_THRESHOLDS: [f64; 2] = [0.8, 0.6];

/// Mean over frames of the mean vertex distance between `T_pred(s_pred v)`
/// and `T_gt(s_gt v)`, and whether it is below 10% of the object's diameter at GT scale.
pub fn add_metric(pred: &[RigidTransform], gt: &[RigidTransform], object: &Mesh, s_pred: f64, s_gt: f64) -> Result<(f64, bool)> {
    add_metric_scaled(pred, &vec![s_pred; pred.len()], gt, object, s_gt)
}

/// As [`add_metric`] with one predicted scale per frame.
pub fn add_metric_scaled(pred: &[RigidTransform], s_pred: &[f64], gt: &[RigidTransform], object: &Mesh, s_gt: f64) -> Result<(f64, bool)> {
    if pred.len() != gt.len() || pred.len() != s_pred.len() {
        return Err(Error::invalid(format!(
            "{} predicted poses ({} scales) for {} ground-truth poses",
            pred.len(),
            s_pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() || object.is_empty() {
        return Err(Error::invalid("ADD needs at least one frame and one vertex"));
    }
    let mut total = 0.0;
    for ((p, &sp), g) in pred.iter().zip(s_pred).zip(gt) {
        let frame: f64 = object
            .vertices
            .iter()
            .map(|v| (p.apply_point(&(v * sp)) - g.apply_point(&(v * s_gt))).norm())
            .sum();
        total += frame / object.vertices.len() as f64;
    }
    let mean = total / gt.len() as f64;
    Ok((mean, mean < ADD_FRACTION * object.diameter() * s_gt))
}

/// Contact sets of the object at the given poses and scales.
pub fn contact_sets(poses: &[RigidTransform], scales: &[f64], object: &Mesh, hands: &[Mesh], delta: f64) -> Result<Vec<ContactSet>> {
    if poses.len() != hands.len() || poses.len() != scales.len() {
        return Err(Error::invalid("poses, scales and hand meshes differ in length"));
    }
    poses
        .iter()
        .zip(scales)
        .zip(hands)
        .enumerate()
        .map(|(i, ((p, &s), h))| contact_set(i, &object.scaled(s).transformed(p), h, delta))
        .collect()
}

/// Stable contact area of the predicted poses, or 0 when ADD fails.
#[allow(clippy::too_many_arguments)]
pub fn sca_add(pred: &[RigidTransform], gt: &[RigidTransform], object: &Mesh, s_pred: f64, s_gt: f64, hands: &[Mesh], delta: f64) -> Result<f64> {
    let (_, ok) = add_metric(pred, gt, object, s_pred, s_gt)?;
    if !ok {
        return Ok(0.0);
    }
    stable_contact_area(&contact_sets(pred, &vec![s_pred; pred.len()], object, hands, delta)?)
}

/// Percent IOU over pixels with visibility 1. Two empty masks score 100.
pub fn mask_iou(pred: &BinaryImage, gt: &BinaryImage, visibility: &OcclusionMask) -> Result<f64> {
    if !pred.same_size(gt) || pred.width != visibility.width || pred.height != visibility.height {
        return Err(Error::invalid(format!(
            "IOU inputs differ in size: {}x{}, {}x{}, visibility {}x{}",
            pred.width, pred.height, gt.width, gt.height, visibility.width, visibility.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..pred.data.len() {
        if visibility.weight[i] == 0 {
            continue;
        }
        let (a, b) = (pred.data[i] != 0, gt.data[i] != 0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 })
}

/// SCA of the predicted contact sets when `sequence_iou >= threshold`, else 0. Both in percent.
pub fn sca_iou(sequence_iou: f64, threshold: f64, contact_sets_pred: &[ContactSet]) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 100.0) {
        return Err(Error::invalid(format!("IOU threshold must lie in (0, 100), got {threshold}")));
    }
    if sequence_iou < threshold {
        return Ok(0.0);
    }
    stable_contact_area(contact_sets_pred)
}

/// Column label for a threshold given as a fraction, e.g. `SCA@0.8`.
pub fn threshold_label(fraction: f64) -> String {
    format!("SCA@{fraction}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub category: String,
    /// Meters.
    pub add_distance: f64,
    pub add: bool,
    /// Percent, ungated.
    pub sca: f64,
    pub sca_add: f64,
    /// Mean visible-region mask IOU over frames, percent.
    pub iou: f64,
    pub per_frame_iou: Vec<f64>,
    /// Keyed by `SCA@<fraction>`.
    pub sca_iou: BTreeMap<String, f64>,
}

/// Inputs for scoring one predicted sequence.
pub struct SequenceEvaluation<'a> {
    pub name: &'a str,
    pub category: &'a str,
    /// Frames the prediction covers, with their observations.
    pub sequence: &'a GraspSequence,
    pub pred_poses: &'a [RigidTransform],
    pub pred_scales: &'a [f64],
    pub gt_poses: &'a [RigidTransform],
    pub gt_scale: f64,
    pub contact_delta: f64,
    /// Fractions in (0, 1).
    pub thresholds: &'a [f64],
}

/// Hard render of the predicted object with the observed hand mask as visibility.
pub fn frame_iou(sequence: &GraspSequence, frame: usize, pose: &RigidTransform, scale: f64) -> Result<f64> {
    let f = &sequence.frames[frame];
    let mesh = sequence.object_mesh.scaled(scale).transformed(&f.hand_to_camera.compose(pose));
    let pred = render_hard(&mesh, &f.intrinsics, &Viewport::full_image(&f.intrinsics))?;
    let visibility = crate::render::occlusion_mask(&f.hand_mask, f.intrinsics.width, f.intrinsics.height)?;
    mask_iou(&pred, &f.object_mask, &visibility)
}

/// Predicted object silhouette with nearer hand geometry removed.
pub fn visible_prediction(sequence: &GraspSequence, frame: usize, pose: &RigidTransform, scale: f64) -> Result<BinaryImage> {
    let f = &sequence.frames[frame];
    let mesh = sequence.object_mesh.scaled(scale).transformed(&f.hand_to_camera.compose(pose));
    let hand = f.hand_vertices.transformed(&f.hand_to_camera);
    depth_order_visibility(&mesh, &hand, &f.intrinsics, &Viewport::full_image(&f.intrinsics))
}

pub fn evaluate_sequence(e: &SequenceEvaluation) -> Result<SequenceMetrics> {
    let n = e.sequence.len();
    if e.pred_poses.len() != n || e.gt_poses.len() != n || e.pred_scales.len() != n {
        return Err(Error::invalid(format!(
            "sequence has {n} frames but {} predicted and {} ground-truth poses",
            e.pred_poses.len(),
            e.gt_poses.len()
        )));
    }
    let object = &e.sequence.object_mesh;
    let (add_distance, add) = add_metric_scaled(e.pred_poses, e.pred_scales, e.gt_poses, object, e.gt_scale)?;
    let hands: Vec<Mesh> = e.sequence.frames.iter().map(|f| f.hand_vertices.clone()).collect();
    let sets = contact_sets(e.pred_poses, e.pred_scales, object, &hands, e.contact_delta)?;
    let sca = stable_contact_area(&sets)?;
    let per_frame_iou = (0..n)
        .map(|i| frame_iou(e.sequence, i, &e.pred_poses[i], e.pred_scales[i]).map_err(|err| err.in_frame(i)))
        .collect::<Result<Vec<f64>>>()?;
    let iou = per_frame_iou.iter().sum::<f64>() / n as f64;
    let mut gated = BTreeMap::new();
    for &t in e.thresholds {
        gated.insert(threshold_label(t), if iou < 100.0 * t { 0.0 } else { sca });
    }
    Ok(SequenceMetrics {
        name: e.name.to_string(),
        category: e.category.to_string(),
        add_distance,
        add,
        sca,
        sca_add: if add { sca } else { 0.0 },
        iou,
        per_frame_iou,
        sca_iou: gated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub category: String,
    pub n_sequences: usize,
    pub iou: f64,
    pub sca_iou_at: BTreeMap<String, f64>,
    /// Percent of sequences passing ADD.
    pub add: f64,
    pub sca_add: f64,
}

/// Unweighted means per category, in first-appearance order, then an `All`
/// row averaged over sequences.
pub fn aggregate(per_sequence: &[SequenceMetrics]) -> Result<Vec<MetricReport>> {
    if per_sequence.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut order: Vec<&str> = Vec::new();
    for s in per_sequence {
        if !order.contains(&s.category.as_str()) {
            order.push(&s.category);
        }
    }
    let mean_of = |name: &str, rows: &[&SequenceMetrics]| {
        let n = rows.len() as f64;
        let mut sca_iou_at = BTreeMap::new();
        for key in rows[0].sca_iou.keys() {
            sca_iou_at.insert(key.clone(), rows.iter().map(|r| r.sca_iou.get(key).copied().unwrap_or(0.0)).sum::<f64>() / n);
        }
        MetricReport {
            category: name.to_string(),
            n_sequences: rows.len(),
            iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
            sca_iou_at,
            add: 100.0 * rows.iter().filter(|r| r.add).count() as f64 / n,
            sca_add: rows.iter().map(|r| r.sca_add).sum::<f64>() / n,
        }
    };
    let mut out: Vec<MetricReport> = order
        .iter()
        .map(|c| {
            let rows: Vec<&SequenceMetrics> = per_sequence.iter().filter(|s| s.category == *c).collect();
            mean_of(c, &rows)
        })
        .collect();
    let all: Vec<&SequenceMetrics> = per_sequence.iter().collect();
    out.push(mean_of("All", &all));
    Ok(out)
}

/// CSV with columns `category,IOU,SCA@t...,ADD,SCA-ADD`, thresholds as given.
pub fn report_csv(reports: &[MetricReport], thresholds: &[f64]) -> String {
    let mut s = String::from("category,IOU");
    for &t in thresholds {
        s.push(',');
        s.push_str(&threshold_label(t));
    }
    s.push_str(",ADD,SCA-ADD\n");
    for r in reports {
        s.push_str(&format!("{},{:.4}", r.category, r.iou));
        for &t in thresholds {
            s.push_str(&format!(",{:.4}", r.sca_iou_at.get(&threshold_label(t)).copied().unwrap_or(0.0)));
        }
        s.push_str(&format!(",{:.4},{:.4}\n", r.add, r.sca_add));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn cube() -> Mesh {
        let mut v = Vec::new();
        for x in [-0.05, 0.05] {
            for y in [-0.05, 0.05] {
                for z in [-0.05, 0.05] {
                    v.push(Vec3::new(x, y, z));
                }
            }
        }
        Mesh::from_points(v)
    }

    fn poses() -> Vec<RigidTransform> {
        (0..4)
            .map(|i| RigidTransform::from_axis_angle(&Vec3::new(0.0, 0.1 * i as f64, 0.2), Vec3::new(0.01 * i as f64, 0.0, 0.1)))
            .collect()
    }

    #[test]
    fn add_fixed_point_and_failure() {
        let gt = poses();
        let (d, ok) = add_metric(&gt, &gt, &cube(), 1.0, 1.0).unwrap();
        assert_eq!(d, 0.0);
        assert!(ok);
        let diam = cube().diameter();
        let shifted: Vec<_> = gt
            .iter()
            .map(|p| RigidTransform::from_translation(Vec3::new(0.2 * diam, 0.0, 0.0)).compose(p))
            .collect();
        let (d, ok) = add_metric(&shifted, &gt, &cube(), 1.0, 1.0).unwrap();
        assert!((d - 0.2 * diam).abs() < 1e-12);
        assert!(!ok);
        assert!(add_metric(&gt[..2], &gt, &cube(), 1.0, 1.0).is_err());
    }

    #[test]
    fn add_is_invariant_to_common_rigid_motion() {
        let gt = poses();
        let pred: Vec<_> = gt
            .iter()
            .map(|p| RigidTransform::from_axis_angle(&Vec3::new(0.02, 0.0, 0.01), Vec3::new(0.003, 0.0, 0.0)).compose(p))
            .collect();
        let q = RigidTransform::from_axis_angle(&Vec3::new(0.5, -1.0, 0.2), Vec3::new(0.3, 0.1, -0.2));
        let (a, _) = add_metric(&pred, &gt, &cube(), 1.1, 1.0).unwrap();
        let move_all = |v: &[RigidTransform]| v.iter().map(|p| q.compose(p)).collect::<Vec<_>>();
        let (b, _) = add_metric(&move_all(&pred), &move_all(&gt), &cube(), 1.1, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let mut a = BinaryImage::new(4, 4);
        a.set(0, 0, true);
        a.set(1, 0, true);
        let full = OcclusionMask::all_visible(4, 4);
        assert_eq!(mask_iou(&a, &a, &full).unwrap(), 100.0);
        let mut b = BinaryImage::new(4, 4);
        b.set(3, 3, true);
        assert_eq!(mask_iou(&a, &b, &full).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b, &full).unwrap(), mask_iou(&b, &a, &full).unwrap());
        // prediction hidden behind the hand, gt visible elsewhere
        let mut vis = OcclusionMask::all_visible(4, 4);
        vis.weight[0] = 0;
        vis.weight[1] = 0;
        assert_eq!(mask_iou(&a, &b, &vis).unwrap(), 0.0);
        assert_eq!(mask_iou(&BinaryImage::new(4, 4), &BinaryImage::new(4, 4), &full).unwrap(), 100.0);
        assert!(mask_iou(&a, &BinaryImage::new(3, 4), &full).is_err());
    }

    #[test]
    fn sca_iou_gating() {
        let sets = vec![ContactSet::new(0, vec![1, 2]), ContactSet::new(1, vec![1, 2])];
        assert_eq!(sca_iou(59.0, 60.0, &sets).unwrap(), 0.0);
        assert_eq!(sca_iou(100.0, 80.0, &sets).unwrap(), 100.0);
        assert_eq!(sca_iou(60.0, 60.0, &sets).unwrap(), 100.0);
        assert!(sca_iou(70.0, 0.0, &sets).is_err());
        // lowering the threshold never lowers the score
        for iou in [10.0, 59.9, 60.0, 79.9, 80.0, 95.0] {
            assert!(sca_iou(iou, 60.0, &sets).unwrap() >= sca_iou(iou, 80.0, &sets).unwrap());
        }
    }

    fn row(category: &str, sca: f64, add: bool) -> SequenceMetrics {
        SequenceMetrics {
            name: "x".into(),
            category: category.into(),
            add_distance: 0.0,
            add,
            sca,
            sca_add: if add { sca } else { 0.0 },
            iou: 90.0,
            per_frame_iou: vec![90.0],
            sca_iou: [(threshold_label(0.8), sca), (threshold_label(0.6), sca)].into_iter().collect(),
        }
    }

    #[test]
    fn aggregation_means() {
        let one = aggregate(&[row("mug", 40.0, true)]).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].sca_add, 40.0);
        assert_eq!(one[1].sca_add, 40.0);
        let two = aggregate(&[row("mug", 0.0, true), row("mug", 100.0, true)]).unwrap();
        assert_eq!(two[0].sca_add, 50.0);
        // "All" weights sequences, not categories
        let mixed = aggregate(&[row("a", 0.0, false), row("a", 0.0, false), row("b", 90.0, true)]).unwrap();
        assert_eq!(mixed[2].category, "All");
        assert!((mixed[2].sca_add - 30.0).abs() < 1e-12);
        assert!((mixed[2].add - 100.0 / 3.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_header_is_fixed() {
        let reports = aggregate(&[row("mug", 40.0, true)]).unwrap();
        let csv = report_csv(&reports, &DEFAULT_IOU_THRESHOLDS);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "category,IOU,SCA@0.8,SCA@0.6,ADD,SCA-ADD");
        assert_eq!(lines.next().unwrap(), "mug,90.0000,40.0000,40.0000,100.0000,40.0000");
        assert!(lines.next().unwrap().starts_with("All,"));
    }

    fn arb_vec(scale: f64) -> impl Strategy<Value = Vec3> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn lower_thresholds_never_gate_more(iou in 0.0f64..=100.0, t1 in 1.0f64..99.0, t2 in 1.0f64..99.0) {
            let sets = vec![ContactSet::new(0, vec![1, 2, 3]), ContactSet::new(1, vec![2, 3])];
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            prop_assert!(sca_iou(iou, lo, &sets).unwrap() >= sca_iou(iou, hi, &sets).unwrap());
        }

        #[test]
        fn mask_iou_is_symmetric(a in prop::collection::vec(0u8..=1, 25), b in prop::collection::vec(0u8..=1, 25)) {
            let a = BinaryImage { width: 5, height: 5, data: a };
            let b = BinaryImage { width: 5, height: 5, data: b };
            let full = OcclusionMask::all_visible(5, 5);
            let ab = mask_iou(&a, &b, &full).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a, &full).unwrap());
            prop_assert!((0.0..=100.0).contains(&ab));
        }

        #[test]
        fn add_ignores_a_common_rigid_motion(wq in arb_vec(3.0), tq in arb_vec(1.0), w in arb_vec(0.3), t in arb_vec(0.02), s in 0.8f64..1.2) {
            let gt = poses();
            let pred: Vec<_> = gt.iter().map(|p| RigidTransform::from_axis_angle(&w, t).compose(p)).collect();
            let q = RigidTransform::from_axis_angle(&wq, tq);
            let move_all = |v: &[RigidTransform]| v.iter().map(|p| q.compose(p)).collect::<Vec<_>>();
            let (a, ok_a) = add_metric(&pred, &gt, &cube(), s, 1.0).unwrap();
            let (b, ok_b) = add_metric(&move_all(&pred), &move_all(&gt), &cube(), s, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(ok_a, ok_b);
        }
    }
}