use gaussocc_core::harness::{
    build_sequence, execute_run, generate_scene, load_sequence, oracle_fidelity, save_sequence, write_run, RunConfig,
    SceneConfig, SceneObject, SyntheticScene,
};
use gaussocc_core::splatter::SplatOptions;
use gaussocc_core::temporal::HistoryMode;
use gaussocc_core::{Label, RigidPose, UnitQuaternion, Vector3, VoxelGridSpec};

fn small_config() -> RunConfig {
    RunConfig {
        num_gaussians: 64,
        num_classes: 6,
        dim: 8,
        frames: 2,
        attn_hidden: 8,
        head_hidden: [8, 8],
        grid: gaussocc_core::harness::GridConfig {
            dims: [32, 32, 8],
            voxel_size: 1.0,
            origin: None,
        },
        scene: SceneConfig {
            objects: 3,
            ..SceneConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn empty_scene_has_empty_truth_and_blank_features() {
    let cfg = RunConfig {
        frames: 1,
        ..small_config()
    };
    let spec = cfg.grid_spec().unwrap();
    let scene = SyntheticScene::new(vec![], [spec.origin, spec.upper_corner().into()], cfg.num_classes).unwrap();
    let seq = build_sequence(scene, &cfg).unwrap();
    assert!(seq.ground_truth[0].labels.iter().all(|l| *l == Label::Empty));
    for v in seq.frames[0].rig.views() {
        assert!(v.features.as_slice().iter().all(|x| *x == 0.0));
    }
}

#[test]
fn axis_aligned_ellipsoid_matches_exhaustive_count() {
    let cfg = small_config();
    let spec = cfg.grid_spec().unwrap();
    let axes = [5.3, 3.1, 2.2];
    let scene = SyntheticScene::new(
        vec![SceneObject {
            center: Vector3::zeros(),
            semi_axes: Vector3::from(axes),
            orientation: UnitQuaternion::IDENTITY,
            label: 2,
            velocity: None,
        }],
        [spec.origin, spec.upper_corner().into()],
        cfg.num_classes,
    )
    .unwrap();
    let gt = scene.ground_truth(&spec, &RigidPose::IDENTITY, 0);
    let got = gt.labels.iter().filter(|l| **l == Label::Class(2)).count();

    // Voxel centers sit at half-integers on a unit grid centered at zero.
    let mut expected = 0;
    for i in -16..16 {
        for j in -16..16 {
            for k in -4..4 {
                let (x, y, z) = (i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                if (x / axes[0]).powi(2) + (y / axes[1]).powi(2) + (z / axes[2]).powi(2) <= 1.0 {
                    expected += 1;
                }
            }
        }
    }
    assert!(expected > 100);
    assert_eq!(got, expected);
}

#[test]
fn moving_object_truth_shifts_with_velocity() {
    let cfg = small_config();
    let spec = cfg.grid_spec().unwrap();
    let v = Vector3::new(2.0, -1.0, 0.0);
    let scene = SyntheticScene::new(
        vec![SceneObject {
            center: Vector3::new(-3.0, 2.0, 0.0),
            semi_axes: Vector3::new(4.0, 2.5, 1.8),
            orientation: UnitQuaternion::from_yaw(0.4),
            label: 1,
            velocity: Some(v),
        }],
        [spec.origin, spec.upper_corner().into()],
        cfg.num_classes,
    )
    .unwrap();
    let g0 = scene.ground_truth(&spec, &RigidPose::IDENTITY, 0);
    for t in 1..4u64 {
        let gt = scene.ground_truth(&spec, &RigidPose::IDENTITY, t);
        let shift = [2 * t as i64, -(t as i64), 0];
        let mut checked = 0;
        for idx in spec.indices() {
            let src: Vec<i64> = (0..3).map(|a| idx[a] as i64 - shift[a]).collect();
            if (0..3).any(|a| src[a] < 0 || src[a] >= spec.dims[a] as i64) {
                continue;
            }
            let src = [src[0] as usize, src[1] as usize, src[2] as usize];
            assert_eq!(gt.labels[spec.linear_index(idx)], g0.labels[spec.linear_index(src)]);
            checked += 1;
        }
        assert!(checked > 1000);
    }
}

#[test]
fn oracle_fit_reproduces_generated_truth() {
    let cfg = RunConfig::default();
    let spec = cfg.grid_spec().unwrap();
    for seed in 0..5 {
        let seq = generate_scene(
            &RunConfig {
                frames: 1,
                ..cfg.clone()
            },
            seed,
        )
        .unwrap();
        let r = oracle_fidelity(
            &seq.scene,
            &spec,
            cfg.tau_occ,
            &cfg.splat_options(),
            &RigidPose::IDENTITY,
            0,
        )
        .unwrap();
        assert!(r.occupied_voxels > 0);
        assert!(r.occupied_agreement >= 0.9, "seed {seed}: {r:?}");
        assert!(r.miou >= 0.75, "seed {seed}: {r:?}");
    }
}

#[test]
fn oracle_fit_follows_ego_motion() {
    let cfg = RunConfig {
        frames: 3,
        scene: SceneConfig {
            ego_speed: 1.5,
            ego_yaw_rate: 0.2,
            ..SceneConfig::default()
        },
        ..RunConfig::default()
    };
    let seq = generate_scene(&cfg, 3).unwrap();
    let spec = cfg.grid_spec().unwrap();
    for (t, frame) in seq.frames.iter().enumerate() {
        let r = oracle_fidelity(
            &seq.scene,
            &spec,
            cfg.tau_occ,
            &SplatOptions::exact(),
            &frame.ego_pose,
            t as u64,
        )
        .unwrap();
        assert!(r.occupied_agreement >= 0.9, "frame {t}: {r:?}");
    }
}

#[test]
fn manifest_round_trip_reproduces_run() {
    let cfg = small_config();
    let seq = generate_scene(&cfg, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_sequence(dir.path(), &seq.frames, Some(&seq.ground_truth)).unwrap();
    let loaded = load_sequence(&path).unwrap();
    assert_eq!(loaded.ground_truth.as_deref(), Some(seq.ground_truth.as_slice()));
    for (a, b) in loaded.frames.iter().zip(&seq.frames) {
        assert_eq!((a.timestamp, a.ego_pose), (b.timestamp, b.ego_pose));
        for (va, vb) in a.rig.views().iter().zip(b.rig.views()) {
            assert_eq!(va.features, vb.features);
            assert_eq!(va.camera.intrinsics(), vb.camera.intrinsics());
            let (ea, eb) = (va.camera.extrinsics(), vb.camera.extrinsics());
            let dq: f64 = (0..4)
                .map(|i| (ea.rotation.to_array()[i] - eb.rotation.to_array()[i]).abs())
                .sum();
            assert!(dq < 1e-12 && (ea.translation_vector() - eb.translation_vector()).norm() < 1e-12);
        }
    }

    let direct = execute_run(&cfg).unwrap();
    let via_manifest = execute_run(&RunConfig {
        manifest: Some(path),
        ..cfg
    })
    .unwrap();
    for (a, b) in direct.sequence.frames.iter().zip(&via_manifest.sequence.frames) {
        assert!(a.output.grid.max_abs_diff(&b.output.grid) < 1e-9);
    }
}

#[test]
fn run_outputs_are_byte_identical_across_runs() {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_run(a.path(), &execute_run(&cfg).unwrap()).unwrap();
    write_run(b.path(), &execute_run(&cfg).unwrap()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "metrics.json")
        .collect();
    names.sort();
    assert!(names.len() >= 9);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn single_frame_run_equals_degenerate_history() {
    let cfg = RunConfig {
        frames: 1,
        ..small_config()
    };
    let plain = execute_run(&cfg).unwrap();
    let forced = execute_run(&RunConfig {
        history: HistoryMode::Degenerate,
        ..cfg
    })
    .unwrap();
    assert_eq!(plain.sequence.frames[0].output, forced.sequence.frames[0].output);
}

#[test]
fn metrics_are_reported_per_frame() {
    let out = execute_run(&small_config()).unwrap();
    let metrics = out.metrics.unwrap();
    assert_eq!(metrics.len(), 2);
    for m in metrics {
        assert_eq!(m.per_class_iou.len(), 6);
        assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.sc_iou));
        assert_eq!(m.gaussian_count, 64);
    }
}

#[test]
fn spec_stays_valid_for_fractional_voxels() {
    let spec = VoxelGridSpec::centered(0.25, [8, 8, 4]).unwrap();
    assert_eq!(spec.origin, [-1.0, -1.0, -0.5]);
}
