use stablegrasp::bundle::{load_bundle, write_synth_bundle};
use stablegrasp::contact::{segment_stable_grasp, stable_contact_area, DEFAULT_CONTACT_DELTA, DEFAULT_TAU};
use stablegrasp::metrics::{add_metric, contact_sets};
use stablegrasp::synth::{generate, CameraPath, MotionModel, Primitive, SynthSpec};

fn spec(motion: MotionModel, object: Primitive, seed: u64) -> SynthSpec {
    SynthSpec {
        name: format!("pipe{seed}"),
        category: "mixed".into(),
        seed,
        n_frames: 8,
        motion,
        object,
        scale: 0.95,
        camera: CameraPath { width: 96, height: 96, focal_px: 150.0, ..Default::default() },
        mask_noise_px: 1,
        n_priors: 3,
        hand_side: stablegrasp::sequence::HandSide::Left,
    }
}

#[test]
fn synthetic_bundles_survive_disk_and_keep_constant_contact() {
    let cases = [
        spec(MotionModel::Static, Primitive::Box { size: [0.1, 0.06, 0.05], subdivisions: 2 }, 1),
        spec(MotionModel::OneDof { axis: None, amplitude_deg: 35.0 }, Primitive::Cylinder { radius: 0.035, height: 0.12, segments: 16, rings: 2 }, 2),
        spec(MotionModel::OneDof { axis: Some([0.0, 0.0, 1.0]), amplitude_deg: 60.0 }, Primitive::Icosphere { radius: 0.045, subdivisions: 2 }, 3),
    ];
    for s in cases {
        let scene = generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth_bundle(dir.path(), &scene).unwrap();
        let bundle = load_bundle(dir.path()).unwrap();
        let gt = bundle.ground_truth().unwrap().unwrap();

        let (a, b) = (&scene.sequence, &bundle.sequence);
        assert_eq!(a.len(), b.len());
        assert_eq!(a.region_labels, b.region_labels);
        assert_eq!(a.hand_side, b.hand_side);
        assert_eq!(a.object_mesh.vertices, b.object_mesh.vertices);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.object_mask, y.object_mask);
            assert_eq!(x.hand_mask, y.hand_mask);
            assert_eq!(x.hand_to_camera, y.hand_to_camera);
            assert_eq!(x.hand_vertices.vertices, y.hand_vertices.vertices);
        }
        assert_eq!(gt.object_to_hand, scene.gt.object_to_hand);
        assert_eq!(bundle.priors.as_deref(), Some(&scene.priors[..]));

        // pads move with the object, so the whole sequence is one stable grasp
        let hands: Vec<_> = b.frames.iter().map(|f| f.hand_vertices.clone()).collect();
        let scales = vec![gt.scale; b.len()];
        let sets = contact_sets(&gt.object_to_hand, &scales, &b.object_mesh, &hands, DEFAULT_CONTACT_DELTA).unwrap();
        assert!(sets.iter().all(|c| !c.is_empty()));
        let interval = segment_stable_grasp(&sets, DEFAULT_TAU).unwrap();
        assert_eq!((interval.start, interval.end), (0, b.len() - 1));
        assert_eq!(stable_contact_area(&sets).unwrap(), 100.0);

        let (d, ok) = add_metric(&gt.object_to_hand, &gt.object_to_hand, &b.object_mesh, gt.scale, gt.scale).unwrap();
        assert_eq!(d, 0.0);
        assert!(ok);
    }
}
