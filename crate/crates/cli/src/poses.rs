use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stablegrasp::bundle::{Bundle, GroundTruthFile};
use stablegrasp::geometry::RigidTransform;
use stablegrasp::io::read_json;
use stablegrasp::optimize::{OptimizeConfig, ReconstructionResult};
use stablegrasp::sequence::GraspSequence;
use stablegrasp::{Error, Result};

pub const RESULT_FILE: &str = "result.json";

/// What `reconstruct` writes per bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionOutput {
    pub bundle: PathBuf,
    pub name: String,
    pub category: String,
    /// Bundle frames the optimization ran on, in order.
    pub frame_indices: Vec<usize>,
    pub config: OptimizeConfig,
    #[serde(flatten)]
    pub result: ReconstructionResult,
}

/// Object poses for some frames of a bundle.
#[derive(Debug, Clone)]
pub struct PoseSet {
    /// The bundle restricted to `frame_indices`.
    pub sequence: GraspSequence,
    pub frame_indices: Vec<usize>,
    pub poses: Vec<RigidTransform>,
    pub scales: Vec<f64>,
}

/// Poses from `file` (a ground-truth file or a reconstruct result), or the
/// bundle's own ground truth when `file` is `None`.
pub fn load_poses(bundle: &Bundle, file: Option<&Path>) -> Result<PoseSet> {
    let n = bundle.sequence.len();
    let all = |gt: GroundTruthFile| PoseSet {
        sequence: bundle.sequence.clone(),
        frame_indices: (0..n).collect(),
        scales: gt.scales(),
        poses: gt.object_to_hand,
    };
    let Some(path) = file else {
        return match bundle.ground_truth()? {
            Some(gt) => Ok(all(gt)),
            None => Err(Error::invalid(format!(
                "{}: bundle has no ground truth; pass --poses",
                bundle.dir.display()
            ))),
        };
    };
    let value: serde_json::Value = read_json(path)?;
    if value.get("frame_indices").is_some() {
        let out: ReconstructionOutput = serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?;
        let idx = out.frame_indices;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::parse(path, format!("frame index {bad} outside a {n}-frame bundle")));
        }
        if out.result.object_to_hand.len() != idx.len() || out.result.scales.len() != idx.len() {
            return Err(Error::parse(path, "pose count differs from frame_indices"));
        }
        Ok(PoseSet {
            sequence: bundle.sequence.subsequence(&idx),
            frame_indices: idx,
            poses: out.result.object_to_hand,
            scales: out.result.scales,
        })
    } else {
        let gt: GroundTruthFile = serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?;
        if gt.object_to_hand.len() != n {
            return Err(Error::parse(
                path,
                format!("object_to_hand has {} poses for {n} frames", gt.object_to_hand.len()),
            ));
        }
        if !(gt.scale > 0.0) {
            return Err(Error::parse(path, "scale must be positive"));
        }
        Ok(all(gt))
    }
}

/// Reads a result file, or `result.json` inside a directory.
pub(crate) fn read_result(path: &Path) -> Result<ReconstructionOutput> {
    let file = if path.is_dir() { path.join(RESULT_FILE) } else { path.to_path_buf() };
    read_json(&file)
}
