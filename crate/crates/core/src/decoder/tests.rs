use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::grad_check;
use crate::geometry::mat3_identity;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_grid(r: &mut ChaCha8Rng, shape: &[usize]) -> DenseGrid<f64> {
    DenseGrid::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

fn micro_cfg() -> HeadConfig {
    HeadConfig {
        scales: standard_scales([4, 4, 4], [8, 8, 4]).unwrap(),
        world_min: [-2.0, -2.0, 0.0],
        world_max: [2.0, 2.0, 2.0],
        n_classes: 3,
        pada: PadaConfig {
            n_heads: 2,
            n_points: 2,
            n_levels: 1,
            query_dim: 8,
            feature_dim: 3,
            ..PadaConfig::default()
        },
        fusion: FusionVariant::ChannelGateDw,
        fuse_s0_s1: true,
    }
}

fn micro_cameras() -> Vec<CameraModel<f64>> {
    vec![
        CameraModel::new(60.0, 60.0, 30.0, 20.0, 60, 40, mat3_identity(), [0.0, 0.0, 4.0]).unwrap(),
        CameraModel::new(60.0, 60.0, 30.0, 20.0, 60, 40, mat3_identity(), [0.8, 0.3, 5.0]).unwrap(),
    ]
}

fn micro_features(r: &mut ChaCha8Rng, n_cams: usize) -> Vec<Vec<DenseGrid<f64>>> {
    (0..n_cams).map(|_| vec![rand_grid(r, &[4, 6, 3])]).collect()
}

#[test]
fn patch_split_doubles_dims() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let split = SplitParams {
        w: store.register("w", init_uniform(&mut r, vec![8 * 3, 5], 5)),
        b: store.register("b", DenseGrid::zeros(vec![8 * 3])),
    };
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let grid = g.constant(rand_grid(&mut r, &[2, 3, 2, 5]));
    let out = patch_split(&mut g, grid, &split, &bound, 3).unwrap();
    assert_eq!(g.value(out).shape(), &[4, 6, 4, 3]);
}

#[test]
fn patch_split_identity_blocks_replicate_parent() {
    // Weight rows arranged so every child block reproduces the parent vector.
    let c = 3;
    let mut w = DenseGrid::<f64>::zeros(vec![8 * c, c]);
    for block in 0..8 {
        for ch in 0..c {
            w.data_mut()[(block * c + ch) * c + ch] = 1.0;
        }
    }
    let mut store = ParamStore::<f64>::new();
    let split = SplitParams {
        w: store.register("w", w),
        b: store.register("b", DenseGrid::zeros(vec![8 * c])),
    };
    let mut r = rng(2);
    let parent = rand_grid(&mut r, &[2, 2, 1, c]);
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let grid = g.constant(parent.clone());
    let out = patch_split(&mut g, grid, &split, &bound, c).unwrap();
    for x in 0..4usize {
        for y in 0..4usize {
            for z in 0..2usize {
                for ch in 0..c {
                    let child = g.value(out).data()[(((x * 4) + y) * 2 + z) * c + ch];
                    let par = parent.data()[(((x / 2) * 2 + y / 2) * 1 + z / 2) * c + ch];
                    assert_eq!(child, par);
                }
            }
        }
    }
}

#[test]
fn patch_split_gradients_match_fd() {
    let mut r = rng(3);
    let grid = rand_grid(&mut r, &[2, 2, 1, 4]);
    let w = init_uniform::<f64>(&mut r, vec![8 * 2, 4], 4);
    let b = rand_grid(&mut r, &[8 * 2]);
    let report = grad_check(
        |g, p| {
            let proj = g.linear(p[0], p[1], p[2])?;
            let out = expand_children(g, proj, 2)?;
            let wts = DenseGrid::from_fn(g.value(out).shape().to_vec(), |i| ((i % 7) as f64) * 0.3 - 1.0);
            g.dot_const(out, wts)
        },
        &[grid, w, b],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
}

#[test]
fn conv_block_identity_at_init() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let params = ConvBlockParams::init(&mut store, "b", 4, &mut r);
    let input = rand_grid(&mut r, &[3, 3, 2, 4]);
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let x = g.constant(input.clone());
    let y = conv_block(&mut g, x, &params, &bound).unwrap();
    assert!(g.value(y).max_abs_diff(&input) < 1e-15);
}

#[test]
fn conv_block_translation_equivariant_interior() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let params = ConvBlockParams::init(&mut store, "b", 2, &mut r);
    // randomize the zero-initialized pointwise head so the block does work
    *store.value_mut(params.pw2_w) = rand_grid(&mut r, &[2, 8]);
    *store.value_mut(params.pw2_b) = rand_grid(&mut r, &[2]);
    let dims = [6usize, 5, 5];
    let base = rand_grid(&mut r, &[dims[0], dims[1], dims[2], 2]);
    // shift by one voxel along x with wraparound
    let shifted = DenseGrid::from_fn(base.shape().to_vec(), |i| {
        let c = i % 2;
        let z = (i / 2) % dims[2];
        let y = (i / (2 * dims[2])) % dims[1];
        let x = i / (2 * dims[2] * dims[1]);
        let sx = (x + dims[0] - 1) % dims[0];
        base.data()[(((sx * dims[1]) + y) * dims[2] + z) * 2 + c]
    });
    let run = |inp: DenseGrid<f64>| {
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let x = g.constant(inp);
        let y = conv_block(&mut g, x, &params, &bound).unwrap();
        g.value(y).clone()
    };
    let y1 = run(base);
    let y2 = run(shifted);
    for x in 2..dims[0] - 1 {
        for y in 1..dims[1] - 1 {
            for z in 1..dims[2] - 1 {
                for ch in 0..2 {
                    let a = y2.data()[(((x * dims[1]) + y) * dims[2] + z) * 2 + ch];
                    let b = y1.data()[((((x - 1) * dims[1]) + y) * dims[2] + z) * 2 + ch];
                    assert!((a - b).abs() < 1e-12, "at ({x},{y},{z},{ch})");
                }
            }
        }
    }
}

#[test]
fn conv_block_gradients_match_fd() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let params = ConvBlockParams::init(&mut store, "b", 2, &mut r);
    *store.value_mut(params.pw2_w) = rand_grid(&mut r, &[2, 8]).map(|v| v * 0.3);
    let input = rand_grid(&mut r, &[2, 2, 2, 2]);
    let mut leaves: Vec<DenseGrid<f64>> = store.iter().map(|(_, _, v)| v.clone()).collect();
    leaves.push(input);
    let report = grad_check(
        |g, p| {
            let n = p.len();
            let bound = Binding::from_nodes(p[..n - 1].to_vec());
            let y = conv_block(g, p[n - 1], &params, &bound)?;
            let wts = DenseGrid::from_fn(g.value(y).shape().to_vec(), |i| ((i % 5) as f64) * 0.4 - 0.9);
            g.dot_const(y, wts)
        },
        &leaves,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
}

fn fusion_fixture(
    variant: FusionVariant,
    seed: u64,
) -> (ParamStore<f64>, Option<FusionParams>, DenseGrid<f64>, DenseGrid<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::init(&mut store, "f", 4, 2, variant, &mut r);
    let h_prev = rand_grid(&mut r, &[2, 2, 1, 4]);
    let h_curr = rand_grid(&mut r, &[4, 4, 2, 2]);
    (store, params, h_prev, h_curr)
}

#[test]
fn fusion_saturated_gate_returns_upsampled_projection() {
    let (mut store, params, h_prev, h_curr) = fusion_fixture(FusionVariant::ChannelGate, 7);
    let p = params.unwrap();
    // saturate the gate: sigmoid(+-60) is 1/0 to machine precision
    *store.value_mut(p.gate_w2) = DenseGrid::zeros(store.value(p.gate_w2).shape().to_vec());
    for sign in [60.0, -60.0] {
        *store.value_mut(p.gate_b2) = DenseGrid::full(vec![2], sign);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let prev = g.constant(h_prev.clone());
        let curr = g.constant(h_curr.clone());
        let out = coarse_gated_fuse(&mut g, prev, curr, Some(&p), &bound, FusionVariant::ChannelGate)
            .unwrap();
        let expect = if sign > 0.0 {
            let proj = g.linear(prev, bound.node(p.proj_w), bound.node(p.proj_b)).unwrap();
            let up = g.trilinear_upsample(proj).unwrap();
            g.value(up).clone()
        } else {
            h_curr.clone()
        };
        assert!(g.value(out.node).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn fusion_output_between_endpoints() {
    for seed in 0..10u64 {
        let (store, params, h_prev, h_curr) = fusion_fixture(FusionVariant::ChannelGate, 100 + seed);
        let p = params.unwrap();
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let prev = g.constant(h_prev);
        let curr = g.constant(h_curr.clone());
        let out =
            coarse_gated_fuse(&mut g, prev, curr, Some(&p), &bound, FusionVariant::ChannelGate).unwrap();
        let proj = g.linear(prev, bound.node(p.proj_w), bound.node(p.proj_b)).unwrap();
        let up = g.trilinear_upsample(proj).unwrap();
        let upv = g.value(up).clone();
        for i in 0..h_curr.numel() {
            let lo = upv.data()[i].min(h_curr.data()[i]);
            let hi = upv.data()[i].max(h_curr.data()[i]);
            let v = g.value(out.node).data()[i];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "entry {i}: {v} not in [{lo}, {hi}]");
        }
    }
}

#[test]
fn fusion_dimension_mismatch_rejected() {
    let (store, params, h_prev, _) = fusion_fixture(FusionVariant::ChannelGate, 8);
    let p = params.unwrap();
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let prev = g.constant(h_prev);
    let bad_curr = g.constant(DenseGrid::zeros(vec![3, 4, 2, 2]));
    assert!(coarse_gated_fuse(&mut g, prev, bad_curr, Some(&p), &bound, FusionVariant::ChannelGate).is_err());
}

#[test]
fn head_output_shapes_and_schedule_counters() {
    let cfg = micro_cfg();
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let params = OccHeadParams::init(&mut store, &cfg, &mut r);
    let cams = micro_cameras();
    let features = micro_features(&mut r, cams.len());
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let out = head_forward(
        &mut g,
        &cfg,
        &params,
        &bound,
        &SceneInputs { features: &features, cameras: &cams },
        HeadBias::Live,
    )
    .unwrap();
    assert_eq!(g.value(out.logits[0]).shape(), &[1, 1, 1, 3]);
    assert_eq!(g.value(out.logits[1]).shape(), &[2, 2, 2, 3]);
    assert_eq!(g.value(out.logits[2]).shape(), &[4, 4, 4, 3]);
    // Table-7 schedule: cross,conv,cross,conv / cross,conv,conv / conv,conv
    assert_eq!(out.cross_calls, vec![2, 1, 0]);
}

#[test]
fn head_uniform_logits_with_zero_features_and_zero_projections() {
    let cfg = micro_cfg();
    let mut r = rng(10);
    let mut store = ParamStore::<f64>::new();
    let params = OccHeadParams::init(&mut store, &cfg, &mut r);
    // constant embedding row, zeroed patch-split projections
    let s0 = &cfg.scales[0];
    *store.value_mut(params.embedding) = DenseGrid::from_fn(
        vec![s0.dims[0], s0.dims[1], s0.dims[2], s0.channels],
        |i| ((i % s0.channels) as f64) * 0.25 - 0.5,
    );
    for t in 0..2 {
        let sh = store.value(params.splits[t].w).shape().to_vec();
        *store.value_mut(params.splits[t].w) = DenseGrid::zeros(sh);
    }
    let cams = micro_cameras();
    let features: Vec<Vec<DenseGrid<f64>>> =
        (0..cams.len()).map(|_| vec![DenseGrid::zeros(vec![4, 6, 3])]).collect();
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let out = head_forward(
        &mut g,
        &cfg,
        &params,
        &bound,
        &SceneInputs { features: &features, cameras: &cams },
        HeadBias::Live,
    )
    .unwrap();
    for (si, &logit) in out.logits.iter().enumerate() {
        let v = g.value(logit);
        let ncls = cfg.n_classes;
        let first: Vec<f64> = v.data()[..ncls].to_vec();
        for row in 1..v.numel() / ncls {
            for c in 0..ncls {
                assert!(
                    (v.data()[row * ncls + c] - first[c]).abs() < 1e-9,
                    "scale {si} row {row} differs"
                );
            }
        }
    }
}

#[test]
fn head_sequential_dependency_s0_to_s2() {
    let cfg = micro_cfg();
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let params = OccHeadParams::init(&mut store, &cfg, &mut r);
    let cams = micro_cameras();
    let features = micro_features(&mut r, cams.len());
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g);
    let out = head_forward(
        &mut g,
        &cfg,
        &params,
        &bound,
        &SceneInputs { features: &features, cameras: &cams },
        HeadBias::Live,
    )
    .unwrap();
    let loss = g.sum_all(out.logits[2]).unwrap();
    let grads = g.backward(loss).unwrap();
    let ge = grads.grad(bound.node(params.embedding)).expect("embedding must receive gradient");
    assert!(ge.data().iter().any(|&v| v != 0.0), "S0 embedding must influence S2 logits");
}

#[test]
fn head_end_to_end_gradients_match_fd() {
    let cfg = HeadConfig {
        scales: standard_scales([4, 4, 4], [4, 4, 4]).unwrap(),
        world_min: [-2.0, -2.0, 0.0],
        world_max: [2.0, 2.0, 2.0],
        n_classes: 3,
        pada: PadaConfig {
            n_heads: 2,
            n_points: 2,
            n_levels: 1,
            query_dim: 4,
            feature_dim: 3,
            ..PadaConfig::default()
        },
        fusion: FusionVariant::ChannelGateDw,
        fuse_s0_s1: true,
    };
    let mut r = rng(12);
    let mut store = ParamStore::<f64>::new();
    let params = OccHeadParams::init(&mut store, &cfg, &mut r);
    // push the zero-initialized heads off zero so every path carries signal
    for (id, name, v) in store.iter().map(|(i, n, v)| (i, n.to_string(), v.clone())).collect::<Vec<_>>() {
        if v.data().iter().all(|&x| x == 0.0) && !name.ends_with(".b") {
            let mut rr = rng(13);
            let _ = name;
            *store.value_mut(id) = v.map(|_| rr.gen_range(-0.2..0.2));
        }
    }
    let cams = micro_cameras();
    let features = micro_features(&mut r, cams.len());
    let leaves: Vec<DenseGrid<f64>> = store.iter().map(|(_, _, v)| v.clone()).collect();

    // Freeze the sigma tables: the bias is detached, so the FD oracle must
    // differentiate the same frozen-bias function.
    let traces = {
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        head_forward(
            &mut g,
            &cfg,
            &params,
            &bound,
            &SceneInputs { features: &features, cameras: &cams },
            HeadBias::Live,
        )
        .unwrap()
        .sigma_traces
    };
    let report = grad_check(
        |g, p| {
            let bound = Binding::from_nodes(p.to_vec());
            let out = head_forward(
                g,
                &cfg,
                &params,
                &bound,
                &SceneInputs { features: &features, cameras: &cams },
                HeadBias::Frozen(&traces),
            )?;
            let mut total: Option<NodeId> = None;
            for (si, &l) in out.logits.iter().enumerate() {
                let w = DenseGrid::from_fn(g.value(l).shape().to_vec(), |i| {
                    (((i + si) % 9) as f64) * 0.23 - 1.0
                });
                let term = g.dot_const(l, w)?;
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term)?,
                });
            }
            Ok(total.unwrap())
        },
        &leaves,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "max rel err {} at {:?}", report.max_rel_err, report.worst);
}

#[test]
fn head_rejects_cross_in_fine_scale() {
    let mut cfg = micro_cfg();
    cfg.scales[2].blocks = vec![BlockKind::Cross];
    assert!(cfg.validate().is_err());
}

#[test]
fn head_rejects_unet_for_training() {
    let mut cfg = micro_cfg();
    cfg.fusion = FusionVariant::Unet;
    assert!(cfg.validate().is_err());
}
