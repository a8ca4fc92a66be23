//! On-disk sequence bundles: a JSON manifest plus mesh, mask and pose files
//! referenced by paths relative to the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mesh, RigidTransform};
use crate::io::{read_json, read_mask, read_mesh, write_atomic, write_json, write_obj, mask_png};
use crate::optimize::Trajectory;
use crate::sequence::{FrameObservation, GraspSequence, HandSide};
use crate::synth::SynthScene;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GT_FILE: &str = "gt.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    /// Row-major 4x4.
    pub hand_to_camera: [f64; 16],
    pub hand_vertices: String,
    pub object_mask: String,
    pub hand_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub category: String,
    pub hand_side: HandSide,
    pub object_mesh: String,
    /// JSON file with the hand faces and per-vertex region labels.
    pub hand_topology: String,
    pub frames: Vec<FrameEntry>,
    /// Optional JSON list of object-to-hand poses used as initializations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_priors: Option<String>,
    /// Optional ground-truth file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandTopology {
    pub faces: Vec<[usize; 3]>,
    /// 0 none, 1-5 fingertips, 6-8 palm.
    pub region_labels: Vec<u8>,
}

/// Object poses in hand coordinates, one per frame, with the object scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub object_to_hand: Vec<RigidTransform>,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
}

impl GroundTruthFile {
    pub fn scales(&self) -> Vec<f64> {
        vec![self.scale; self.object_to_hand.len()]
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub sequence: GraspSequence,
    pub priors: Option<Vec<RigidTransform>>,
}

impl Bundle {
    pub fn name(&self) -> String {
        if self.manifest.name.is_empty() {
            self.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            self.manifest.name.clone()
        }
    }

    pub fn category(&self) -> String {
        if self.manifest.category.is_empty() {
            "uncategorized".into()
        } else {
            self.manifest.category.clone()
        }
    }

    /// Ground truth named by the manifest, or `gt.json` beside it if present.
    pub fn ground_truth(&self) -> Result<Option<GroundTruthFile>> {
        let path = match &self.manifest.ground_truth {
            Some(p) => self.dir.join(p),
            None => {
                let p = self.dir.join(GT_FILE);
                if !p.exists() {
                    return Ok(None);
                }
                p
            }
        };
        let gt: GroundTruthFile = read_json(&path)?;
        if gt.object_to_hand.len() != self.sequence.len() {
            return Err(Error::parse(
                &path,
                format!("object_to_hand has {} poses for {} frames", gt.object_to_hand.len(), self.sequence.len()),
            ));
        }
        if !(gt.scale > 0.0) {
            return Err(Error::parse(&path, "scale must be positive"));
        }
        Ok(Some(gt))
    }
}

/// Accepts a bundle directory or a manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and validates a bundle. Errors name the offending field and frame.
pub fn load_bundle(path: &Path) -> Result<Bundle> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let manifest: Manifest = read_json(&mpath)?;
    let bad = |field: &str, msg: String| Error::parse(&mpath, format!("{field}: {msg}"));
    if manifest.version != MANIFEST_VERSION {
        return Err(bad("version", format!("expected {MANIFEST_VERSION}, found {}", manifest.version)));
    }
    if manifest.frames.is_empty() {
        return Err(bad("frames", "at least one frame is required".into()));
    }
    let object_mesh = read_mesh(&dir.join(&manifest.object_mesh)).map_err(|e| bad("object_mesh", e.to_string()))?;
    object_mesh.validate().map_err(|e| bad("object_mesh", e.to_string()))?;
    if object_mesh.faces.is_empty() {
        return Err(bad("object_mesh", "mesh has no faces".into()));
    }
    let topo: HandTopology = read_json(&dir.join(&manifest.hand_topology)).map_err(|e| bad("hand_topology", e.to_string()))?;
    if let Some(l) = topo.region_labels.iter().find(|&&l| l > 8) {
        return Err(bad("hand_topology.region_labels", format!("label {l} is outside 0..=8")));
    }
    for region in 1..=5u8 {
        if !topo.region_labels.contains(&region) {
            return Err(bad("hand_topology.region_labels", format!("fingertip region {region} has no vertices")));
        }
    }
    let n_hand = topo.region_labels.len();
    if let Some(f) = topo.faces.iter().find(|f| f.iter().any(|&i| i >= n_hand)) {
        return Err(bad("hand_topology.faces", format!("face {f:?} indexes past {n_hand} vertices")));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, fe) in manifest.frames.iter().enumerate() {
        let field = |name: &str| format!("frames[{i}].{name}");
        let k = &fe.intrinsics;
        let intrinsics = CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, fe.width, fe.height).map_err(|e| bad(&field("intrinsics"), e.to_string()))?;
        let hand_to_camera = RigidTransform::from_row_major(&fe.hand_to_camera).map_err(|e| bad(&field("hand_to_camera"), e.to_string()))?;
        let hand = read_mesh(&dir.join(&fe.hand_vertices)).map_err(|e| bad(&field("hand_vertices"), e.to_string()))?;
        if hand.vertices.len() != n_hand {
            return Err(bad(
                &field("hand_vertices"),
                format!("{} vertices but {} region labels", hand.vertices.len(), n_hand),
            ));
        }
        let mut hand_mesh = Mesh::new(hand.vertices, topo.faces.clone()).map_err(|e| bad(&field("hand_vertices"), e.to_string()))?;
        if let Some(n) = hand.normals {
            hand_mesh = hand_mesh.with_normals(n).map_err(|e| bad(&field("hand_vertices"), e.to_string()))?;
        } else if !topo.faces.is_empty() {
            hand_mesh = hand_mesh.with_vertex_normals();
        }
        let mut masks = Vec::with_capacity(2);
        for (name, rel) in [("object_mask", &fe.object_mask), ("hand_mask", &fe.hand_mask)] {
            let m = read_mask(&dir.join(rel)).map_err(|e| bad(&field(name), e.to_string()))?;
            if m.width != fe.width || m.height != fe.height {
                return Err(bad(
                    &field(name),
                    format!("mask is {}x{} but the frame is {}x{}", m.width, m.height, fe.width, fe.height),
                ));
            }
            masks.push(m);
        }
        let hand_mask = masks.pop().unwrap();
        let object_mask = masks.pop().unwrap();
        frames.push(FrameObservation {
            hand_vertices: hand_mesh,
            hand_to_camera,
            intrinsics,
            object_mask,
            hand_mask,
        });
    }
    let sequence = GraspSequence {
        frames,
        object_mesh,
        region_labels: topo.region_labels,
        hand_side: manifest.hand_side,
    };
    sequence.validate().map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let priors = match &manifest.init_priors {
        Some(p) => {
            let priors: Vec<RigidTransform> = read_json(&dir.join(p)).map_err(|e| bad("init_priors", e.to_string()))?;
            if priors.is_empty() {
                return Err(bad("init_priors", "list is empty".into()));
            }
            Some(priors)
        }
        None => None,
    };
    Ok(Bundle {
        dir,
        manifest,
        sequence,
        priors,
    })
}

/// Writes a synthetic scene as a bundle with `gt.json` and `priors.json`.
pub fn write_synth_bundle(dir: &Path, scene: &SynthScene) -> Result<()> {
    let seq = &scene.sequence;
    write_obj(&dir.join("object.obj"), &seq.object_mesh)?;
    let topo = HandTopology {
        faces: seq.frames[0].hand_vertices.faces.clone(),
        region_labels: seq.region_labels.clone(),
    };
    write_json(&dir.join("hand_topology.json"), &topo)?;
    let mut frames = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let hand_file = format!("hand/{i:04}.obj");
        let points = Mesh {
            vertices: f.hand_vertices.vertices.clone(),
            faces: Vec::new(),
            normals: f.hand_vertices.normals.clone(),
        };
        write_obj(&dir.join(&hand_file), &points)?;
        let object_mask = format!("masks/object_{i:04}.png");
        let hand_mask = format!("masks/hand_{i:04}.png");
        write_atomic(&dir.join(&object_mask), &mask_png(&f.object_mask)?)?;
        write_atomic(&dir.join(&hand_mask), &mask_png(&f.hand_mask)?)?;
        let k = &f.intrinsics;
        frames.push(FrameEntry {
            width: k.width,
            height: k.height,
            intrinsics: Intrinsics {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
            },
            hand_to_camera: f.hand_to_camera.to_row_major(),
            hand_vertices: hand_file,
            object_mask,
            hand_mask,
        });
    }
    write_json(&dir.join("priors.json"), &scene.priors)?;
    let gt = GroundTruthFile {
        object_to_hand: scene.gt.object_to_hand.clone(),
        scale: scene.gt.scale,
        trajectory: scene.gt.trajectory.as_ref().map(Trajectory::from_one_dof),
    };
    write_json(&dir.join(GT_FILE), &gt)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        name: scene.spec.name.clone(),
        category: scene.spec.category.clone(),
        hand_side: seq.hand_side,
        object_mesh: "object.obj".into(),
        hand_topology: "hand_topology.json".into(),
        frames,
        init_priors: Some("priors.json".into()),
        ground_truth: Some(GT_FILE.into()),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn scene() -> SynthScene {
        let spec: SynthSpec = serde_json::from_str(
            r#"{"n_frames": 3, "seed": 4, "motion": {"type": "one_dof", "amplitude_deg": 20},
                "object": {"type": "box", "size": [0.1, 0.06, 0.05], "subdivisions": 2},
                "camera": {"width": 96, "height": 80, "focal_px": 150}}"#,
        )
        .unwrap();
        generate(&spec).unwrap()
    }

    #[test]
    fn synth_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene();
        write_synth_bundle(dir.path(), &s).unwrap();
        let b = load_bundle(dir.path()).unwrap();
        assert_eq!(b.sequence.len(), 3);
        assert_eq!(b.sequence.object_mesh.vertices, s.sequence.object_mesh.vertices);
        assert_eq!(b.sequence.region_labels, s.sequence.region_labels);
        for (a, o) in b.sequence.frames.iter().zip(&s.sequence.frames) {
            assert_eq!(a.object_mask, o.object_mask);
            assert_eq!(a.hand_mask, o.hand_mask);
            assert_eq!(a.hand_vertices.vertices, o.hand_vertices.vertices);
            assert_eq!(a.hand_vertices.faces, o.hand_vertices.faces);
            let (na, no) = (a.hand_vertices.normals.as_ref().unwrap(), o.hand_vertices.normals.as_ref().unwrap());
            assert!(na.iter().zip(no).all(|(x, y)| (x - y).norm() < 1e-12));
            assert_eq!(a.hand_to_camera, o.hand_to_camera);
        }
        let gt = b.ground_truth().unwrap().unwrap();
        assert_eq!(gt.object_to_hand, s.gt.object_to_hand);
        assert_eq!(b.priors.as_ref().unwrap().len(), s.priors.len());
    }

    #[test]
    fn validation_names_field_and_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_bundle(dir.path(), &scene()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let original: Manifest = read_json(&mpath).unwrap();

        let mut m = original.clone();
        m.frames[1].object_mask = "missing.png".into();
        write_json(&mpath, &m).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("frames[1].object_mask"), "{msg}");

        let mut m = original.clone();
        m.frames[2].width = 50;
        write_json(&mpath, &m).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("frames[2]"), "{msg}");

        let mut m = original.clone();
        m.frames.clear();
        write_json(&mpath, &m).unwrap();
        assert!(load_bundle(dir.path()).unwrap_err().to_string().contains("frames"));

        let topo_path = dir.path().join("hand_topology.json");
        let mut topo: HandTopology = read_json(&topo_path).unwrap();
        for l in &mut topo.region_labels {
            if *l == 3 {
                *l = 0;
            }
        }
        write_json(&mpath, &original).unwrap();
        write_json(&topo_path, &topo).unwrap();
        let msg = load_bundle(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("region 3"), "{msg}");
    }

    #[test]
    fn synth_bundle_bytes_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_synth_bundle(a.path(), &scene()).unwrap();
        write_synth_bundle(b.path(), &scene()).unwrap();
        for rel in ["manifest.json", "gt.json", "object.obj", "hand/0002.obj", "masks/object_0001.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }
}
