use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn labels1d(data: Vec<u8>) -> LabelGrid {
    let n = data.len();
    LabelGrid::new([n, 1, 1], data).unwrap()
}

fn eval_scalar(f: impl FnOnce(&mut Graph<f64>) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let n = f(&mut g);
    g.value(n).item()
}

#[test]
fn ce_perfect_prediction_tends_to_zero() {
    let v = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0]).unwrap());
        ce_smoothed(g, logits, &labels1d(vec![0, 1]), 3, 0.0).unwrap()
    });
    assert!(v.abs() < 1e-12, "got {v}");
}

#[test]
fn ce_uniform_logits_is_ln_c() {
    for alpha in [0.0, 0.1, 0.3] {
        let v = eval_scalar(|g| {
            let logits = g.constant(DenseGrid::zeros(vec![4, 5]));
            ce_smoothed(g, logits, &labels1d(vec![0, 2, 4, 1]), 5, alpha).unwrap()
        });
        assert!((v - (5.0f64).ln()).abs() < 1e-12, "alpha {alpha}: {v}");
    }
}

#[test]
fn ce_smoothed_hand_value() {
    // C = 2, p_correct = 0.6, alpha = 0.1:
    // loss = -0.95 ln 0.6 - 0.05 ln 0.4 = 0.5311...
    let v = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![1, 2], vec![0.6f64.ln(), 0.4f64.ln()]).unwrap());
        ce_smoothed(g, logits, &labels1d(vec![0]), 2, 0.1).unwrap()
    });
    let expect = -0.95 * 0.6f64.ln() - 0.05 * 0.4f64.ln();
    assert!((v - expect).abs() < 1e-12);
    assert!((v - 0.5311).abs() < 1e-4);
}

#[test]
fn geo_scal_perfect_prediction_is_zero() {
    let v = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![2, 2], vec![60.0, 0.0, 0.0, 60.0]).unwrap());
        geo_scal(g, logits, &labels1d(vec![0, 1]), 2).unwrap()
    });
    assert!(v.abs() < 1e-10, "got {v}");
}

#[test]
fn geo_scal_half_probability_is_ln2() {
    let v = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::zeros(vec![3, 2]));
        geo_scal(g, logits, &labels1d(vec![0, 1, 1]), 2).unwrap()
    });
    assert!((v - 2.0f64.ln()).abs() < 1e-9, "got {v}");
}

#[test]
fn geo_scal_invariant_to_occupied_mass_permutation() {
    // Swapping logits among occupied classes keeps p_free and thus the loss.
    let labels = labels1d(vec![0, 1, 2, 3]);
    let run = |perm: bool| {
        eval_scalar(|g| {
            let rows: Vec<f64> = (0..4)
                .flat_map(|r| {
                    let base = [0.3, 1.2, -0.7, 0.9];
                    let mut row = base;
                    row[0] += r as f64 * 0.1;
                    if perm {
                        row.swap(1, 3);
                    }
                    row.to_vec()
                })
                .collect();
            let logits = g.constant(DenseGrid::new(vec![4, 4], rows).unwrap());
            geo_scal(g, logits, &labels, 4).unwrap()
        })
    };
    assert!((run(false) - run(true)).abs() < 1e-12);
}

#[test]
fn sem_scal_uniform_weights_equals_plain_ce() {
    let labels = labels1d(vec![2, 0, 1]);
    let logits_data = vec![0.4, -0.3, 1.1, 0.0, 0.9, -0.4, 0.2, 0.1, -1.0];
    let sem = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![3, 3], logits_data.clone()).unwrap());
        sem_scal(g, logits, &labels, 3, &[1.0, 1.0, 1.0]).unwrap()
    });
    let ce = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![3, 3], logits_data.clone()).unwrap());
        ce_smoothed(g, logits, &labels, 3, 0.0).unwrap()
    });
    assert!((sem - ce).abs() < 1e-12);
}

#[test]
fn sem_scal_single_voxel_hand_weighted() {
    let w = [1.0, 2.5, 0.5];
    let v = eval_scalar(|g| {
        let logits = g.constant(DenseGrid::new(vec![1, 3], vec![0.2, 1.4, -0.3]).unwrap());
        sem_scal(g, logits, &labels1d(vec![1]), 3, &w).unwrap()
    });
    let z: f64 = [0.2f64, 1.4, -0.3].iter().map(|x| x.exp()).sum();
    let p1 = 1.4f64.exp() / z;
    assert!((v - (-2.5 * p1.ln())).abs() < 1e-12);
}

#[test]
fn class_frequency_weights_inverse_and_clipped() {
    // class 1 appears 4x as often as class 2: weight ratio w2/w1 = 4
    let grid = labels1d(vec![1, 1, 1, 1, 2, 0, 0, 0]);
    let w = class_frequency_weights([grid].iter(), 3);
    assert!((w[2] / w[1] - 4.0).abs() < 1e-12);
    let mean = w.iter().sum::<f64>() / 3.0;
    // mean stays 1 unless clipping engaged (it does not here)
    assert!((mean - 1.0).abs() < 1e-12);
    for v in w {
        assert!((0.1..=10.0).contains(&v));
    }
}

#[test]
fn lovasz_perfect_one_hot_is_zero() {
    let v = eval_scalar(|g| {
        let probs = g.constant(
            DenseGrid::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
        );
        lovasz_softmax(g, probs, &labels1d(vec![0, 1, 0]), 2).unwrap()
    });
    assert_eq!(v, 0.0);
}

#[test]
fn lovasz_single_voxel_equals_error() {
    let v = eval_scalar(|g| {
        let probs = g.constant(DenseGrid::new(vec![1, 2], vec![0.4, 0.6]).unwrap());
        lovasz_softmax(g, probs, &labels1d(vec![1]), 2).unwrap()
    });
    assert!((v - 0.4).abs() < 1e-12);
}

/// Independent Lovász-extension oracle: exact integral of the Jaccard set
/// function over thresholds, with |M| / |gt union M| counted per prefix
/// subset from scratch.
pub fn lovasz_oracle(m: &[f64], fg: &[f64]) -> f64 {
    let n = m.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| m[b].partial_cmp(&m[a]).unwrap().then(a.cmp(&b)));
    let gt_count = fg.iter().filter(|&&v| v == 1.0).count();
    let delta = |subset: &[usize]| -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let in_gt = subset.iter().filter(|&&i| fg[i] == 1.0).count();
        let union = gt_count + subset.len() - in_gt;
        subset.len() as f64 / union as f64
    };
    let mut total = 0.0;
    for i in 0..n {
        let hi = m[idx[i]];
        let lo = if i + 1 < n { m[idx[i + 1]] } else { 0.0 };
        total += (hi - lo) * delta(&idx[..=i]);
    }
    total
}

#[test]
fn lovasz_matches_subset_enumeration_oracle() {
    let mut r = rng(5);
    for _ in 0..300 {
        let v = r.gen_range(1..=6);
        let n_classes = r.gen_range(2..=3);
        let labels: Vec<u8> = (0..v).map(|_| r.gen_range(0..n_classes) as u8).collect();
        // random probability rows
        let mut probs = vec![0.0; v * n_classes];
        for row in 0..v {
            let raw: Vec<f64> = (0..n_classes).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..n_classes {
                probs[row * n_classes + c] = raw[c] / s;
            }
        }
        let got = eval_scalar(|g| {
            let p = g.constant(DenseGrid::new(vec![v, n_classes], probs.clone()).unwrap());
            lovasz_softmax(g, p, &labels1d(labels.clone()), n_classes).unwrap()
        });
        // oracle: average over present classes
        let mut sum = 0.0;
        let mut n_present = 0;
        for c in 0..n_classes {
            if !labels.iter().any(|&y| y as usize == c) {
                continue;
            }
            let fg: Vec<f64> = labels.iter().map(|&y| if y as usize == c { 1.0 } else { 0.0 }).collect();
            let m: Vec<f64> = (0..v)
                .map(|i| {
                    let p = probs[i * n_classes + c];
                    if fg[i] == 1.0 {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            sum += lovasz_oracle(&m, &fg);
            n_present += 1;
        }
        let expect = sum / n_present as f64;
        assert!((got - expect).abs() < 1e-12, "got {got}, oracle {expect}");
    }
}

#[test]
fn lovasz_monotone_toward_true_class() {
    let mut r = rng(6);
    for _ in 0..100 {
        let v = r.gen_range(2..=6);
        let n_classes = 3;
        let labels: Vec<u8> = (0..v).map(|_| r.gen_range(0..n_classes) as u8).collect();
        let mut probs = vec![0.0; v * n_classes];
        for row in 0..v {
            let raw: Vec<f64> = (0..n_classes).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..n_classes {
                probs[row * n_classes + c] = raw[c] / s;
            }
        }
        let loss_of = |p: &[f64]| {
            eval_scalar(|g| {
                let pn = g.constant(DenseGrid::new(vec![v, n_classes], p.to_vec()).unwrap());
                lovasz_softmax(g, pn, &labels1d(labels.clone()), n_classes).unwrap()
            })
        };
        let base = loss_of(&probs);
        // move a fraction of off-class mass onto the true class of one voxel
        let row = r.gen_range(0..v);
        let y = labels[row] as usize;
        let t = r.gen_range(0.1..0.9);
        let mut moved = probs.clone();
        for c in 0..n_classes {
            let p = probs[row * n_classes + c];
            moved[row * n_classes + c] = if c == y { p + t * (1.0 - p) } else { p * (1.0 - t) };
        }
        let after = loss_of(&moved);
        assert!(after <= base + 1e-12, "moving mass toward truth increased loss: {base} -> {after}");
    }
}

fn toy_pyramid(seed: u64) -> ([LabelGrid; 3], Vec<DenseGrid<f64>>) {
    let mut r = rng(seed);
    let fine = LabelGrid::new(
        [4, 4, 4],
        (0..64).map(|_| r.gen_range(0..3u8)).collect(),
    )
    .unwrap();
    let labels = fine.pyramid().unwrap();
    let logits: Vec<DenseGrid<f64>> = labels
        .iter()
        .map(|l| DenseGrid::from_fn(vec![l.dims[0], l.dims[1], l.dims[2], 3], |_| r.gen_range(-1.0..1.0)))
        .collect();
    (labels, logits)
}

#[test]
fn total_loss_bookkeeping() {
    let (labels, logits) = toy_pyramid(7);
    let cfg = ObjectiveConfig::with_uniform_weights(3);
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = logits.iter().map(|l| g.constant(l.clone())).collect();
    let breakdown = total_loss(&mut g, &nodes, &labels, &cfg).unwrap();
    let sum = breakdown.ce + breakdown.sem_scal + breakdown.geo_scal + breakdown.lovasz;
    assert!((breakdown.total - sum).abs() < 1e-12);
    assert!(breakdown.total > 0.0);
    // zeroing a scale weight removes that scale's contribution
    let mut cfg0 = cfg.clone();
    cfg0.scale_weights = [0.0, 0.75, 1.0];
    let mut g2 = Graph::new();
    let nodes2: Vec<NodeId> = logits.iter().map(|l| g2.constant(l.clone())).collect();
    let b0 = total_loss(&mut g2, &nodes2, &labels, &cfg0).unwrap();
    let expect = breakdown.total - 0.5 * breakdown.per_scale[0].total();
    assert!((b0.total - expect).abs() < 1e-12);
}

#[test]
fn total_loss_toggles_zero_components() {
    let (labels, logits) = toy_pyramid(8);
    let mut cfg = ObjectiveConfig::with_uniform_weights(3);
    cfg.toggles = LossToggles { ce: true, sem_scal: false, geo_scal: false, lovasz: false };
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = logits.iter().map(|l| g.constant(l.clone())).collect();
    let b = total_loss(&mut g, &nodes, &labels, &cfg).unwrap();
    assert_eq!(b.sem_scal, 0.0);
    assert_eq!(b.geo_scal, 0.0);
    assert_eq!(b.lovasz, 0.0);
    assert!((b.total - b.ce).abs() < 1e-15);
}

#[test]
fn total_loss_gradients_match_fd() {
    let (labels, logits) = toy_pyramid(9);
    let cfg = ObjectiveConfig::with_uniform_weights(3);
    let report = grad_check(
        |g, p| {
            let b = total_loss(g, p, &labels, &cfg)?;
            Ok(b.total_node)
        },
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
}

#[test]
fn iou_perfect_prediction() {
    let gt = labels1d(vec![0, 1, 2, 1]);
    let mut m = Metrics::new(3);
    m.update(&gt, &gt).unwrap();
    assert_eq!(m.binary_iou(), 1.0);
    assert_eq!(m.miou(), 1.0);
}

#[test]
fn iou_hand_counts() {
    // binary occupancy: TP=3, FP=1, FN=2 -> IoU = 0.5
    let gt = labels1d(vec![1, 1, 1, 1, 1, 0, 0, 0]);
    let pred = labels1d(vec![1, 1, 1, 0, 0, 1, 0, 0]);
    let mut m = Metrics::new(2);
    m.update(&pred, &gt).unwrap();
    assert_eq!(m.bin_tp, 3);
    assert_eq!(m.bin_fp, 1);
    assert_eq!(m.bin_fn, 2);
    assert!((m.binary_iou() - 0.5).abs() < 1e-15);
}

#[test]
fn iou_all_free_prediction_is_zero() {
    let gt = labels1d(vec![1, 0, 2, 1]);
    let pred = labels1d(vec![0, 0, 0, 0]);
    let mut m = Metrics::new(3);
    m.update(&pred, &gt).unwrap();
    assert_eq!(m.binary_iou(), 0.0);
}

#[test]
fn streamed_metrics_equal_single_pass() {
    let mut r = rng(10);
    let grids: Vec<(LabelGrid, LabelGrid)> = (0..6)
        .map(|_| {
            let gt = labels1d((0..32).map(|_| r.gen_range(0..4u8)).collect());
            let pred = labels1d((0..32).map(|_| r.gen_range(0..4u8)).collect());
            (pred, gt)
        })
        .collect();
    let mut single = Metrics::new(4);
    for (p, t) in &grids {
        single.update(p, t).unwrap();
    }
    let mut merged = Metrics::new(4);
    for chunk in grids.chunks(2) {
        let mut shard = Metrics::new(4);
        for (p, t) in chunk {
            shard.update(p, t).unwrap();
        }
        merged.merge(&shard);
    }
    assert_eq!(single, merged);
    assert_eq!(single.miou(), merged.miou());
}

#[test]
fn downsample_free_only_when_all_children_free() {
    let mut fine = LabelGrid::free([2, 2, 2]);
    assert_eq!(fine.downsample().unwrap().data, vec![0]);
    // one occupied child wins over seven free (thin structures survive)
    fine.set(1, 0, 1, 3);
    assert_eq!(fine.downsample().unwrap().data, vec![3]);
}

#[test]
fn downsample_majority_and_tiebreak() {
    let mut fine = LabelGrid::free([2, 2, 2]);
    // three of class 2, two of class 1 -> 2 wins
    fine.set(0, 0, 0, 2);
    fine.set(0, 0, 1, 2);
    fine.set(0, 1, 0, 2);
    fine.set(1, 0, 0, 1);
    fine.set(1, 0, 1, 1);
    assert_eq!(fine.downsample().unwrap().data, vec![2]);
    // two vs two -> smaller id wins
    let mut tie = LabelGrid::free([2, 2, 2]);
    tie.set(0, 0, 0, 5);
    tie.set(0, 0, 1, 5);
    tie.set(1, 0, 0, 3);
    tie.set(1, 0, 1, 3);
    assert_eq!(tie.downsample().unwrap().data, vec![3]);
}

#[test]
fn downsample_matches_bruteforce_oracle() {
    let mut r = rng(11);
    for _ in 0..20 {
        let fine = LabelGrid::new([4, 4, 4], (0..64).map(|_| r.gen_range(0..4u8)).collect()).unwrap();
        let got = fine.downsample().unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    // independent recount
                    let mut hist = [0usize; 4];
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                hist[fine.at(2 * x + dx, 2 * y + dy, 2 * z + dz) as usize] += 1;
                            }
                        }
                    }
                    let expect = (1..4)
                        .filter(|&c| hist[c] > 0)
                        .max_by_key(|&c| (hist[c], std::cmp::Reverse(c)))
                        .map(|c| c as u8)
                        .unwrap_or(0);
                    assert_eq!(got.at(x, y, z), expect, "at ({x},{y},{z})");
                }
            }
        }
    }
}
