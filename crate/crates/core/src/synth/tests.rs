use super::*;

fn empty_spec() -> SceneSpec {
    SceneSpec {
        seed: 0,
        world_min: [-5.0, -5.0, 0.0],
        world_max: [5.0, 5.0, 2.0],
        primitives: vec![],
        ground_class: 1,
    }
}

#[test]
fn empty_scene_is_ground_layer_plus_free() {
    let grid = voxelize(&empty_spec(), [20, 20, 4]);
    for x in 0..20 {
        for y in 0..20 {
            for z in 0..4 {
                let expect = if z == 0 { 1 } else { 0 };
                assert_eq!(grid.at(x, y, z), expect);
            }
        }
    }
}

#[test]
fn unit_box_labels_exactly_one_voxel() {
    // voxel pitch 0.5; a box with half extents 0.25 centered on a voxel
    // center covers only that voxel's center
    let mut spec = empty_spec();
    spec.ground_class = FREE_CLASS;
    spec.primitives = vec![Primitive::Box {
        center: [-5.0 + 7.5 * 0.5, -5.0 + 3.5 * 0.5, 1.5 * 0.5],
        half_extents: [0.25, 0.25, 0.25],
        class_id: 3,
    }];
    let grid = voxelize(&spec, [20, 20, 4]);
    let occupied: Vec<(usize, usize, usize)> = (0..20)
        .flat_map(|x| (0..20).flat_map(move |y| (0..4).map(move |z| (x, y, z))))
        .filter(|&(x, y, z)| grid.at(x, y, z) != FREE_CLASS)
        .collect();
    assert_eq!(occupied, vec![(7, 3, 1)]);
    assert_eq!(grid.at(7, 3, 1), 3);
}

#[test]
fn later_primitives_win_overlaps() {
    let mut spec = empty_spec();
    spec.primitives = vec![
        Primitive::Box { center: [2.0, 2.0, 0.5], half_extents: [0.6, 0.6, 0.5], class_id: 2 },
        Primitive::Sphere { center: [2.0, 2.0, 0.75], radius: 0.6, class_id: 4 },
    ];
    let grid = voxelize(&spec, [20, 20, 4]);
    // the sphere center voxel belongs to the later primitive
    let x = ((2.0 - -5.0) / 0.5) as usize;
    let z = (0.75 / 0.5) as usize;
    assert_eq!(grid.at(x, x, z), 4);
}

#[test]
fn voxelization_is_deterministic() {
    let spec = random_scene_spec(42, [-5.0, -5.0, 0.0], [5.0, 5.0, 2.0], &GenParams::default());
    let a = voxelize(&spec, [20, 20, 4]);
    let b = voxelize(&spec, [20, 20, 4]);
    assert_eq!(a, b);
    let spec2 = random_scene_spec(42, [-5.0, -5.0, 0.0], [5.0, 5.0, 2.0], &GenParams::default());
    assert_eq!(spec, spec2);
}

#[test]
fn rig_covers_360_and_cameras_are_valid() {
    let rig = RigSpec::default();
    let cams: Vec<CameraModel<f64>> = rig.cameras().unwrap();
    assert_eq!(cams.len(), 6);
    // constructor already enforces orthonormality; sanity-check placement
    for (i, cam) in cams.iter().enumerate() {
        let c = cam.center_world();
        let yaw = 2.0 * std::f64::consts::PI * i as f64 / 6.0;
        assert!((c[0] - 0.6 * yaw.cos()).abs() < 1e-9);
        assert!((c[1] - 0.6 * yaw.sin()).abs() < 1e-9);
        assert!((c[2] - 1.2).abs() < 1e-9);
    }
}

#[test]
fn rig_rejects_uncovered_ring() {
    let rig = RigSpec { n_cameras: 2, ..RigSpec::default() };
    assert!(rig.validate().is_err());
}

#[test]
fn camera_facing_free_space_renders_uniform_background() {
    let mut spec = empty_spec();
    spec.ground_class = FREE_CLASS;
    let labels = voxelize(&spec, [20, 20, 4]);
    let embed = FeatureEmbed::new(7, 6, 8);
    let rig = RigSpec { feature_dim: 8, ..RigSpec::default() };
    let cam = &rig.cameras::<f64>().unwrap()[0];
    let map: DenseGrid<f64> =
        render_features(&labels, &spec.world_min, &spec.world_max, cam, (8, 12), &embed);
    let bg = embed.background();
    for px in 0..8 * 12 {
        for c in 0..8 {
            assert_eq!(map.data()[px * 8 + c], bg[c]);
        }
    }
}

#[test]
fn single_voxel_renders_class_embedding_at_projected_pixel() {
    // one occupied voxel straight ahead of camera 0 (yaw 0 looks along +x)
    let mut spec = empty_spec();
    spec.ground_class = FREE_CLASS;
    let rig = RigSpec { feature_dim: 8, pitch_down_deg: 0.0, ..RigSpec::default() };
    let voxel_center = [3.25, 0.25, 1.25]; // voxel (16, 10, 2)
    spec.primitives = vec![Primitive::Box {
        center: voxel_center,
        half_extents: [0.25, 0.25, 0.25],
        class_id: 2,
    }];
    let labels = voxelize(&spec, [20, 20, 4]);
    let embed = FeatureEmbed::new(9, 6, 8);
    let cam = &rig.cameras::<f64>().unwrap()[0];
    let level = (16usize, 24usize);
    let map: DenseGrid<f64> =
        render_features(&labels, &spec.world_min, &spec.world_max, cam, level, &embed);

    // geometry consistency: the projection of the voxel center lands on a
    // pixel whose rendered features carry the voxel's class
    let proj = geometry::project(&geometry::world_to_camera(&voxel_center, cam), cam);
    assert!(proj.valid);
    let px = (proj.u * level.1 as f64).floor() as usize;
    let py = (proj.v * level.0 as f64).floor() as usize;
    let got: Vec<f64> = map.data()[(py * level.1 + px) * 8..(py * level.1 + px) * 8 + 8].to_vec();
    assert_ne!(&got[..], embed.background(), "projected pixel must not be background");
    // the hit features depend on depth/direction; check the class channel by
    // re-embedding with the renderer's own inputs is circular, so instead
    // verify the hit voxel via an independent raycast through that pixel
    let u = (px as f64 + 0.5) / level.1 as f64;
    let v = (py as f64 + 0.5) / level.0 as f64;
    let d_cam = geometry::unproject(u, v, 1.0, cam);
    let rot = &cam.rotation;
    let mut d_world = [0.0; 3];
    for a in 0..3 {
        d_world[a] = rot[0][a] * d_cam[0] + rot[1][a] * d_cam[1] + rot[2][a] * d_cam[2];
    }
    let n = (d_world[0] * d_world[0] + d_world[1] * d_world[1] + d_world[2] * d_world[2]).sqrt();
    for a in 0..3 {
        d_world[a] /= n;
    }
    let hit = raycast(&labels, &spec.world_min, &spec.world_max, &cam.center_world(), &d_world);
    assert_eq!(hit.map(|(c, _, idx)| (c, idx)), Some((2, [16, 10, 2])));
}

#[test]
fn rendering_is_bit_deterministic() {
    let spec = random_scene_spec(5, [-5.0, -5.0, 0.0], [5.0, 5.0, 2.0], &GenParams::default());
    let labels = voxelize(&spec, [20, 20, 4]);
    let embed = FeatureEmbed::new(11, 6, 16);
    let rig = RigSpec { feature_dim: 16, ..RigSpec::default() };
    let cam = &rig.cameras::<f64>().unwrap()[2];
    let a: DenseGrid<f64> = render_features(&labels, &spec.world_min, &spec.world_max, cam, (16, 24), &embed);
    let b: DenseGrid<f64> = render_features(&labels, &spec.world_min, &spec.world_max, cam, (16, 24), &embed);
    assert_eq!(a.data(), b.data());
}

#[test]
fn dataset_len_and_disjoint_splits() {
    let rig = RigSpec { n_cameras: 4, fx: 180.0, fy: 180.0, ..RigSpec::default() };
    let gen = GenParams::default();
    let train: Vec<SceneSample<f32>> = build_dataset(
        7,
        Split::Train,
        3,
        &rig,
        &gen,
        [20, 20, 4],
        [-5.0, -5.0, 0.0],
        [5.0, 5.0, 2.0],
        99,
    )
    .unwrap();
    let val: Vec<SceneSample<f32>> = build_dataset(
        7,
        Split::Val,
        3,
        &rig,
        &gen,
        [20, 20, 4],
        [-5.0, -5.0, 0.0],
        [5.0, 5.0, 2.0],
        99,
    )
    .unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(val.len(), 3);
    for t in &train {
        for v in &val {
            assert_ne!(t.spec.seed, v.spec.seed);
            assert_ne!(t.spec, v.spec);
        }
    }
    assert_eq!(train[0].features.len(), 4);
    assert_eq!(train[0].features[0].len(), 2);
    assert_eq!(train[0].features[0][0].shape(), &[32, 48, 32]);
}

#[test]
fn label_pyramid_consistent_across_scales() {
    let spec = random_scene_spec(13, [-5.0, -5.0, 0.0], [5.0, 5.0, 2.0], &GenParams::default());
    let fine = voxelize(&spec, [20, 20, 4]);
    let pyr = fine.pyramid().unwrap();
    assert_eq!(pyr[2], fine);
    assert_eq!(pyr[1].dims, [10, 10, 2]);
    assert_eq!(pyr[0].dims, [5, 5, 1]);
    assert_eq!(pyr[1], fine.downsample().unwrap());
    assert_eq!(pyr[0], fine.downsample().unwrap().downsample().unwrap());
}

#[test]
fn corrupt_extrinsics_changes_rotation_keeps_validity() {
    let rig = RigSpec::default();
    let cams: Vec<CameraModel<f64>> = rig.cameras().unwrap();
    let bad = corrupt_extrinsics(&cams, 30.0, 3);
    assert_eq!(bad.len(), cams.len());
    for (a, b) in cams.iter().zip(&bad) {
        assert_ne!(a.rotation, b.rotation);
        assert_eq!(a.translation, b.translation);
    }
}

#[test]
fn raycast_hits_ground_from_above() {
    let labels = voxelize(&empty_spec(), [20, 20, 4]);
    let hit = raycast(
        &labels,
        &[-5.0, -5.0, 0.0],
        &[5.0, 5.0, 2.0],
        &[0.0, 0.0, 1.5],
        &[0.6, 0.0, -0.8],
    );
    let (class, _, idx) = hit.expect("downward ray must hit the ground layer");
    assert_eq!(class, 1);
    assert_eq!(idx[2], 0);
}
