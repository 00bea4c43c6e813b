//! Training objective (smoothed CE, geometric and semantic scene-completion
//! terms, Lovász-softmax) and IoU/mIoU evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseGrid, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Class id reserved for free space.
pub const FREE_CLASS: u8 = 0;
/// Guard inside the occupancy BCE logs.
const BCE_EPS: f64 = 1e-12;

/// Dense voxel labels, row-major (x, y, z).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims[0] * dims[1] * dims[2] != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "label grid dims {:?} need {} entries, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn free(dims: [usize; 3]) -> Self {
        Self { data: vec![FREE_CLASS; dims[0] * dims[1] * dims[2]], dims }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z] = v;
    }

    /// Halve each axis by voting over the 2x2x2 children. Free wins only when
    /// all eight children are free; otherwise the majority occupied class
    /// wins, ties broken toward the smaller class id.
    pub fn downsample(&self) -> Result<Self> {
        for d in self.dims {
            if d % 2 != 0 {
                return Err(Error::ShapeMismatch(format!("cannot halve odd dims {:?}", self.dims)));
            }
        }
        let out_dims = [self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2];
        let mut out = LabelGrid::free(out_dims);
        let mut counts = [0u8; 256];
        for x in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                for z in 0..out_dims[2] {
                    let mut seen: Vec<u8> = Vec::with_capacity(8);
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let c = self.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if c != FREE_CLASS {
                                    if counts[c as usize] == 0 {
                                        seen.push(c);
                                    }
                                    counts[c as usize] += 1;
                                }
                            }
                        }
                    }
                    let mut best: Option<(u8, u8)> = None; // (count, class)
                    seen.sort_unstable();
                    for &c in &seen {
                        let n = counts[c as usize];
                        counts[c as usize] = 0;
                        best = match best {
                            None => Some((n, c)),
                            Some((bn, bc)) if n > bn => Some((n, c)),
                            other => other,
                        };
                    }
                    if let Some((_, c)) = best {
                        out.set(x, y, z, c);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Fine labels plus the two coarser levels, finest last.
    pub fn pyramid(&self) -> Result<[LabelGrid; 3]> {
        let mid = self.downsample()?;
        let coarse = mid.downsample()?;
        Ok([coarse, mid, self.clone()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub ce: bool,
    pub sem_scal: bool,
    pub geo_scal: bool,
    pub lovasz: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { ce: true, sem_scal: true, geo_scal: true, lovasz: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub n_classes: usize,
    pub label_smoothing: f64,
    pub scale_weights: [f64; 3],
    /// Inverse-frequency class weights for sem_scal, mean 1, clipped.
    pub class_weights: Vec<f64>,
    pub toggles: LossToggles,
}

impl ObjectiveConfig {
    pub fn with_uniform_weights(n_classes: usize) -> Self {
        Self {
            n_classes,
            label_smoothing: 0.1,
            scale_weights: [0.5, 0.75, 1.0],
            class_weights: vec![1.0; n_classes],
            toggles: LossToggles::default(),
        }
    }
}

/// Inverse-frequency weights over the full training label set: w ~ 1/freq,
/// normalized to mean 1, then clipped to [0.1, 10].
pub fn class_frequency_weights<'a>(
    labels: impl Iterator<Item = &'a LabelGrid>,
    n_classes: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; n_classes];
    let mut total = 0u64;
    for grid in labels {
        for &c in &grid.data {
            counts[c as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![1.0; n_classes];
    }
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 / (c.max(1) as f64) / n_classes as f64)
        .collect();
    let mean = w.iter().sum::<f64>() / n_classes as f64;
    for v in &mut w {
        *v = (*v / mean).clamp(0.1, 10.0);
    }
    w
}

fn flatten_logits<S: Scalar>(g: &mut Graph<S>, logits: NodeId, n_classes: usize) -> Result<(NodeId, usize)> {
    let shape = g.value(logits).shape().to_vec();
    if shape.last() != Some(&n_classes) {
        return Err(Error::ShapeMismatch(format!("logits {:?} must end in {} classes", shape, n_classes)));
    }
    let v = g.value(logits).numel() / n_classes;
    let flat = g.reshape(logits, vec![v, n_classes])?;
    Ok((flat, v))
}

fn check_labels(labels: &LabelGrid, v: usize, n_classes: usize) -> Result<()> {
    if labels.numel() != v {
        return Err(Error::ShapeMismatch(format!("{} labels for {} voxels", labels.numel(), v)));
    }
    if labels.data.iter().any(|&c| c as usize >= n_classes) {
        return Err(Error::Config("label out of class range".into()));
    }
    Ok(())
}

/// Mean label-smoothed cross-entropy: targets (1-a) one-hot + a/C.
pub fn ce_smoothed<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &LabelGrid,
    n_classes: usize,
    alpha: f64,
) -> Result<NodeId> {
    let (flat, v) = flatten_logits(g, logits, n_classes)?;
    check_labels(labels, v, n_classes)?;
    let lsm = g.log_softmax(flat, 1)?;
    let uniform = alpha / n_classes as f64;
    let targets = DenseGrid::from_fn(vec![v, n_classes], |i| {
        let (row, c) = (i / n_classes, i % n_classes);
        let one_hot = if labels.data[row] as usize == c { 1.0 - alpha } else { 0.0 };
        S::c(one_hot + uniform)
    });
    let dot = g.dot_const(lsm, targets)?;
    g.scale(dot, S::c(-1.0 / v as f64))
}

/// Class-weighted cross-entropy (no smoothing); weights indexed by the true
/// class, mean over voxels.
pub fn sem_scal<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &LabelGrid,
    n_classes: usize,
    class_weights: &[f64],
) -> Result<NodeId> {
    if class_weights.len() != n_classes {
        return Err(Error::Config("one class weight per class required".into()));
    }
    let (flat, v) = flatten_logits(g, logits, n_classes)?;
    check_labels(labels, v, n_classes)?;
    let lsm = g.log_softmax(flat, 1)?;
    let targets = DenseGrid::from_fn(vec![v, n_classes], |i| {
        let (row, c) = (i / n_classes, i % n_classes);
        if labels.data[row] as usize == c {
            S::c(class_weights[c])
        } else {
            S::zero()
        }
    });
    let dot = g.dot_const(lsm, targets)?;
    g.scale(dot, S::c(-1.0 / v as f64))
}

/// Binary cross-entropy on occupancy: predicted occupancy probability is
/// 1 - p_free, ground truth is "label != free".
pub fn geo_scal<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &LabelGrid,
    n_classes: usize,
) -> Result<NodeId> {
    let (flat, v) = flatten_logits(g, logits, n_classes)?;
    check_labels(labels, v, n_classes)?;
    let probs = g.softmax(flat, 1)?;
    let p_free_col = g.slice_channels(probs, FREE_CLASS as usize, 1)?;
    let p_free = g.reshape(p_free_col, vec![v])?;
    let neg = g.scale(p_free, -S::one())?;
    let p_occ = g.add_scalar(neg, S::one())?;
    let log_occ = {
        let x = g.add_scalar(p_occ, S::c(BCE_EPS))?;
        g.log(x)?
    };
    let log_free = {
        let x = g.add_scalar(p_free, S::c(BCE_EPS))?;
        g.log(x)?
    };
    let y_occ = DenseGrid::from_fn(vec![v], |i| {
        if labels.data[i] != FREE_CLASS {
            S::one()
        } else {
            S::zero()
        }
    });
    let y_free = DenseGrid::from_fn(vec![v], |i| {
        if labels.data[i] == FREE_CLASS {
            S::one()
        } else {
            S::zero()
        }
    });
    let t1 = g.dot_const(log_occ, y_occ)?;
    let t2 = g.dot_const(log_free, y_free)?;
    let sum = g.add(t1, t2)?;
    g.scale(sum, S::c(-1.0 / v as f64))
}

/// Lovász-softmax over classes present in the labels.
///
/// For each present class, per-voxel errors (1 - p_c on the class, p_c off
/// it) are sorted descending and dotted with the Lovász-extension gradient of
/// the Jaccard loss; the sort permutation is treated as constant in backward,
/// which is exact almost everywhere.
pub fn lovasz_softmax<S: Scalar>(
    g: &mut Graph<S>,
    probs: NodeId,
    labels: &LabelGrid,
    n_classes: usize,
) -> Result<NodeId> {
    let shape = g.value(probs).shape().to_vec();
    if shape.last() != Some(&n_classes) {
        return Err(Error::ShapeMismatch(format!("probs {:?} must end in {} classes", shape, n_classes)));
    }
    let v = g.value(probs).numel() / n_classes;
    check_labels(labels, v, n_classes)?;
    let flat = g.reshape(probs, vec![v, n_classes])?;

    let mut present: Vec<usize> = Vec::new();
    for c in 0..n_classes {
        if labels.data.iter().any(|&y| y as usize == c) {
            present.push(c);
        }
    }
    if present.is_empty() {
        return Ok(g.scalar(S::zero()));
    }

    let mut total: Option<NodeId> = None;
    for &c in &present {
        let fg: Vec<f64> = labels.data.iter().map(|&y| if y as usize == c { 1.0 } else { 0.0 }).collect();
        let p_col = g.slice_channels(flat, c, 1)?;
        let p_c = g.reshape(p_col, vec![v])?;
        // m = fg + (1 - 2 fg) * p
        let coef = DenseGrid::from_fn(vec![v], |i| S::c(1.0 - 2.0 * fg[i]));
        let offs = DenseGrid::from_fn(vec![v], |i| S::c(fg[i]));
        let scaled = g.mul_const(p_c, coef)?;
        let m = g.add_const(scaled, offs)?;

        // sort errors descending (stable on index for determinism)
        let mvals = g.value(m).data().to_vec();
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| mvals[b].partial_cmp(&mvals[a]).unwrap().then(a.cmp(&b)));
        let grad_sorted = lovasz_grad(&order.iter().map(|&i| fg[i]).collect::<Vec<_>>());
        let mut weights = vec![S::zero(); v];
        for (rank, &idx) in order.iter().enumerate() {
            weights[idx] = S::c(grad_sorted[rank]);
        }
        let term = g.dot_const(m, DenseGrid::new(vec![v], weights)?)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    g.scale(total.expect("nonempty"), S::c(1.0 / present.len() as f64))
}

/// Gradient of the Lovász extension of the Jaccard loss for ground truth
/// sorted by descending error.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let n = gt_sorted.len();
    let p: f64 = gt_sorted.iter().sum();
    let mut jaccard = vec![0.0; n];
    let mut cum_gt = 0.0;
    let mut cum_not = 0.0;
    for i in 0..n {
        cum_gt += gt_sorted[i];
        cum_not += 1.0 - gt_sorted[i];
        let intersection = p - cum_gt;
        let union = p + cum_not;
        jaccard[i] = 1.0 - intersection / union;
    }
    let mut grad = jaccard;
    for i in (1..n).rev() {
        grad[i] -= grad[i - 1];
    }
    grad
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TermValues {
    pub ce: f64,
    pub sem_scal: f64,
    pub geo_scal: f64,
    pub lovasz: f64,
}

impl TermValues {
    pub fn total(&self) -> f64 {
        self.ce + self.sem_scal + self.geo_scal + self.lovasz
    }
}

#[derive(Debug)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sem_scal: f64,
    pub geo_scal: f64,
    pub lovasz: f64,
    pub total: f64,
    /// Unweighted per-scale term values, coarse to fine.
    pub per_scale: [TermValues; 3],
    pub total_node: NodeId,
}

/// Four-term loss over the three scales with weights w_s, each term itself a
/// weighted sum across scales.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: &[NodeId],
    labels: &[LabelGrid; 3],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    if logits.len() != 3 {
        return Err(Error::ShapeMismatch("three logit scales required".into()));
    }
    let mut per_scale = [TermValues::default(); 3];
    let mut terms: [Option<NodeId>; 4] = [None; 4];
    let mut term_values = [0.0f64; 4];
    for s in 0..3 {
        let w = cfg.scale_weights[s];
        let mut add_term = |g: &mut Graph<S>, slot: usize, node: NodeId| -> Result<f64> {
            let raw = g.value(node).item().f64();
            let weighted = g.scale(node, S::c(w))?;
            term_values[slot] += g.value(weighted).item().f64();
            terms[slot] = Some(match terms[slot] {
                None => weighted,
                Some(t) => g.add(t, weighted)?,
            });
            Ok(raw)
        };
        if cfg.toggles.ce {
            let n = ce_smoothed(g, logits[s], &labels[s], cfg.n_classes, cfg.label_smoothing)?;
            per_scale[s].ce = add_term(g, 0, n)?;
        }
        if cfg.toggles.sem_scal {
            let n = sem_scal(g, logits[s], &labels[s], cfg.n_classes, &cfg.class_weights)?;
            per_scale[s].sem_scal = add_term(g, 1, n)?;
        }
        if cfg.toggles.geo_scal {
            let n = geo_scal(g, logits[s], &labels[s], cfg.n_classes)?;
            per_scale[s].geo_scal = add_term(g, 2, n)?;
        }
        if cfg.toggles.lovasz {
            let (flat, _) = flatten_logits(g, logits[s], cfg.n_classes)?;
            let probs = g.softmax(flat, 1)?;
            let n = lovasz_softmax(g, probs, &labels[s], cfg.n_classes)?;
            per_scale[s].lovasz = add_term(g, 3, n)?;
        }
    }
    let mut total: Option<NodeId> = None;
    for t in terms.iter().flatten() {
        total = Some(match total {
            None => *t,
            Some(acc) => g.add(acc, *t)?,
        });
    }
    let total_node = match total {
        Some(t) => t,
        None => g.scalar(S::zero()),
    };
    Ok(LossBreakdown {
        ce: term_values[0],
        sem_scal: term_values[1],
        geo_scal: term_values[2],
        lovasz: term_values[3],
        total: g.value(total_node).item().f64(),
        per_scale,
        total_node,
    })
}

/// Streamable TP/FP/FN counters: per semantic class and binary occupancy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub n_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub bin_tp: u64,
    pub bin_fp: u64,
    pub bin_fn: u64,
}

impl Metrics {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            bin_tp: 0,
            bin_fp: 0,
            bin_fn: 0,
        }
    }

    pub fn update(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if pred.dims != gt.dims {
            return Err(Error::ShapeMismatch(format!("pred {:?} vs gt {:?}", pred.dims, gt.dims)));
        }
        for (&p, &y) in pred.data.iter().zip(&gt.data) {
            let (p, y) = (p as usize, y as usize);
            if p == y {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[y] += 1;
            }
            let (po, yo) = (p != FREE_CLASS as usize, y != FREE_CLASS as usize);
            match (po, yo) {
                (true, true) => self.bin_tp += 1,
                (true, false) => self.bin_fp += 1,
                (false, true) => self.bin_fn += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Metrics) {
        debug_assert_eq!(self.n_classes, other.n_classes);
        for c in 0..self.n_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.bin_tp += other.bin_tp;
        self.bin_fp += other.bin_fp;
        self.bin_fn += other.bin_fn;
    }

    /// None when the class never appears in either prediction or truth.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let denom = self.tp[c] + self.fp[c] + self.fn_[c];
        if denom == 0 {
            None
        } else {
            Some(self.tp[c] as f64 / denom as f64)
        }
    }

    /// Mean IoU over semantic classes (free excluded), skipping classes
    /// absent from both prediction and truth.
    pub fn miou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 1..self.n_classes {
            if let Some(iou) = self.class_iou(c) {
                sum += iou;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Occupied-vs-free IoU (geometry completion).
    pub fn binary_iou(&self) -> f64 {
        let denom = self.bin_tp + self.bin_fp + self.bin_fn;
        if denom == 0 {
            0.0
        } else {
            self.bin_tp as f64 / denom as f64
        }
    }
}

#[cfg(test)]
mod tests;
