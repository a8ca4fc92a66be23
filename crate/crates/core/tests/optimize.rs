use stablegrasp::geometry::{RigidTransform, Vec3};
use stablegrasp::optimize::{reconstruct, refine, total_energy, OptimizeConfig, Parameters, Trajectory, Variant};
use stablegrasp::synth::{generate, CameraPath, MotionModel, Primitive, SynthScene, SynthSpec};

fn scene(n_frames: usize, seed: u64) -> SynthScene {
    generate(&SynthSpec {
        name: "opt".into(),
        category: "box".into(),
        seed,
        n_frames,
        motion: MotionModel::OneDof { axis: None, amplitude_deg: 25.0 },
        object: Primitive::Box { size: [0.09, 0.06, 0.05], subdivisions: 1 },
        scale: 1.04,
        camera: CameraPath { width: 128, height: 128, focal_px: 200.0, ..Default::default() },
        mask_noise_px: 0,
        n_priors: 4,
        hand_side: stablegrasp::sequence::HandSide::Right,
    })
    .unwrap()
}

fn config(variant: Variant, iterations: usize) -> OptimizeConfig {
    OptimizeConfig {
        variant,
        iterations,
        n_initializations: 4,
        survivors: 2,
        render_size: 48,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_return_the_best_start_unmodified() {
    let s = scene(3, 1);
    let cfg = config(Variant::OneDof, 0);
    let model = cfg.energy_model(&s.sequence).unwrap();
    let energies: Vec<f64> = s
        .priors
        .iter()
        .map(|p| Parameters::at_pose(Variant::OneDof, 3, p, 1.0).evaluate(&model).unwrap().energy)
        .collect();
    let best = (0..energies.len()).min_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
    let r = reconstruct(&s.sequence, &cfg, Some(&s.priors)).unwrap();
    assert_eq!(r.chosen_initialization, vec![best]);
    assert_eq!(r.initial_energy, energies[best]);
    assert!((r.total_energy - energies[best]).abs() <= 1e-9 * energies[best]);
    for pose in &r.object_to_hand {
        assert!((pose.rotation - s.priors[best].rotation).abs().max() < 1e-12);
        assert!((pose.translation - s.priors[best].translation).norm() < 1e-15);
    }
    assert!((r.scales[0] - 1.0).abs() < 1e-15);
}

#[test]
fn axis_starts_at_the_object_z_axis_with_zero_angles() {
    let pose = RigidTransform::from_axis_angle(&Vec3::new(0.3, -0.2, 0.5), Vec3::new(0.01, 0.02, 0.1));
    let p = Parameters::at_pose(Variant::OneDof, 5, &pose, 1.0);
    let z = pose.rotation.column(2);
    assert!((Vec3::from_column_slice(&p.values()[..3]) - z).norm() < 1e-12);
    assert!(p.values()[3..8].iter().all(|&w| w == 0.0));
}

#[test]
fn descent_never_ends_above_the_start() {
    let s = scene(4, 2);
    for variant in [Variant::OneDof, Variant::Static, Variant::Dynamic, Variant::SingleFrame] {
        let r = reconstruct(&s.sequence, &config(variant, 12), Some(&s.priors)).unwrap();
        assert!(r.total_energy <= r.initial_energy, "{variant:?}: {} > {}", r.total_energy, r.initial_energy);
    }
}

#[test]
fn identical_inputs_give_identical_results_on_any_thread_count() {
    let s = scene(4, 3);
    let cfg = config(Variant::OneDof, 8);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let r = pool.install(|| reconstruct(&s.sequence, &cfg, None).unwrap());
        serde_json::to_string(&r).unwrap()
    };
    let first = run(1);
    assert_eq!(first, run(1));
    assert_eq!(first, run(3));
}

#[test]
fn more_capacity_never_raises_the_energy_when_started_from_the_smaller_optimum() {
    let s = scene(4, 4);
    let stat = reconstruct(&s.sequence, &config(Variant::Static, 16), Some(&s.priors)).unwrap();
    let one = refine(&s.sequence, &config(Variant::OneDof, 16), &stat.trajectory).unwrap();
    let dynamic = refine(&s.sequence, &config(Variant::Dynamic, 16), &one.trajectory).unwrap();
    assert!(one.total_energy <= stat.total_energy * (1.0 + 1e-6));
    assert!(dynamic.total_energy <= one.total_energy * (1.0 + 1e-6));
}

#[test]
fn result_transforms_follow_the_trajectory() {
    let s = scene(4, 5);
    let r = reconstruct(&s.sequence, &config(Variant::OneDof, 4), Some(&s.priors)).unwrap();
    let t = r.trajectory.one_dof().unwrap();
    for (n, f) in s.sequence.frames.iter().enumerate() {
        let expected = t.pose(n);
        assert!((r.object_to_hand[n].rotation - expected.rotation).abs().max() < 1e-9);
        assert!((r.object_to_hand[n].translation - expected.translation).norm() < 1e-12);
        let cam = f.hand_to_camera.compose(&r.object_to_hand[n]);
        assert!((r.object_to_camera[n].rotation - cam.rotation).abs().max() < 1e-12);
        assert!((r.object_to_camera[n].translation - cam.translation).norm() < 1e-12);
    }
}

/// Full energy with all three terms against central differences, per variant.
#[test]
fn total_energy_gradient_matches_finite_differences() {
    let s = scene(3, 6);
    let cfg = config(Variant::OneDof, 0);
    let model = cfg.energy_model(&s.sequence).unwrap();
    let gt = Trajectory::from_one_dof(s.gt.trajectory.as_ref().unwrap());
    for variant in [Variant::OneDof, Variant::Static, Variant::Dynamic] {
        let start = match variant {
            Variant::Static => Trajectory::Static {
                base: s.gt.object_to_hand[1],
                scale: s.gt.scale,
            },
            _ => gt.clone(),
        };
        let mut p = Parameters::from_trajectory(variant, &start, 3).unwrap();
        // move off the optimum so every term is active
        let last = p.len() - 1;
        p.values_mut()[last] += 0.04;
        let eval = p.evaluate(&model).unwrap();
        let (e_check, _) = total_energy(&model, &p.trajectory().unwrap()).unwrap();
        assert!((e_check - eval.energy).abs() <= 1e-9 * eval.energy);
        assert!(eval.terms.iter().any(|t| t.push > 0.0));
        let h = 1e-7;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fd = (plus.evaluate(&model).unwrap().energy - minus.evaluate(&model).unwrap().energy) / (2.0 * h);
            let g = eval.gradient[i];
            assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{variant:?} parameter {i}: {g} vs {fd}");
        }
    }
}
