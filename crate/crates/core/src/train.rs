//! AdamW with decoupled weight decay, cosine learning-rate schedule with
//! linear warmup, global-norm gradient clipping, and the training loop.

use serde::Serialize;

use crate::config::{OptimConfig, RunConfig};
use crate::decoder::{head_forward, HeadBias, HeadConfig, OccHeadParams, SceneInputs};
use crate::diffcore::{DenseGrid, Graph, NodeId};
use crate::error::{Error, Result};
use crate::objective::{total_loss, LabelGrid, ObjectiveConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::SceneSample;

/// Linear warmup to the base rate, then cosine decay to the floor.
pub fn cosine_lr(step: usize, cfg: &OptimConfig) -> f64 {
    if cfg.steps == 0 {
        return cfg.learning_rate;
    }
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let total = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = (step - cfg.warmup_steps) as f64 / total as f64;
    let progress = progress.min(1.0);
    cfg.lr_floor
        + 0.5 * (cfg.learning_rate - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so the global l2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<DenseGrid<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            let v = v.f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

pub struct AdamW<S> {
    m: Vec<DenseGrid<S>>,
    v: Vec<DenseGrid<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<DenseGrid<S>> =
            store.iter().map(|(_, _, val)| DenseGrid::zeros(val.shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One decoupled-weight-decay step. Parameters whose gradient is absent
    /// (detached or unused this step) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<DenseGrid<S>>],
        lr: f64,
        cfg: &OptimConfig,
    ) {
        self.t += 1;
        let b1 = S::c(cfg.beta1);
        let b2 = S::c(cfg.beta2);
        let eps = S::c(cfg.eps);
        let lr_s = S::c(lr);
        let wd = S::c(cfg.weight_decay);
        let bc1 = S::c(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = S::c(1.0 - cfg.beta2.powi(self.t as i32));
        let one = S::one();
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = store.id_at(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let update = m_hat / (v_hat.sqrt() + eps) + wd * p.data()[i];
                p.data_mut()[i] = p.data()[i] - lr_s * update;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub sem_scal: f64,
    pub geo_scal: f64,
    pub lovasz: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Scene with its precomputed per-scale label pyramid.
pub struct TrainScene<S> {
    pub sample: SceneSample<S>,
    pub label_pyramid: [LabelGrid; 3],
}

pub fn prepare_scenes<S: Scalar>(samples: Vec<SceneSample<S>>) -> Result<Vec<TrainScene<S>>> {
    samples
        .into_iter()
        .map(|sample| {
            let label_pyramid = sample.labels.pyramid()?;
            Ok(TrainScene { sample, label_pyramid })
        })
        .collect()
}

/// Deterministic single-threaded training loop. Aborts with a numerical
/// error if the loss ever goes non-finite.
pub fn train_loop<S: Scalar>(
    run: &RunConfig,
    head_cfg: &HeadConfig,
    obj_cfg: &ObjectiveConfig,
    head: &OccHeadParams,
    store: &mut ParamStore<S>,
    scenes: &[TrainScene<S>],
) -> Result<Vec<StepLog>> {
    if scenes.is_empty() && run.optim.steps > 0 {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut optimizer = AdamW::new(store);
    let mut logs = Vec::with_capacity(run.optim.steps);
    for step in 0..run.optim.steps {
        let lr = cosine_lr(step, &run.optim);
        let mut g: Graph<S> = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut batch_total: Option<NodeId> = None;
        let mut agg = StepLog {
            step,
            lr,
            ce: 0.0,
            sem_scal: 0.0,
            geo_scal: 0.0,
            lovasz: 0.0,
            total: 0.0,
            grad_norm: 0.0,
        };
        for j in 0..run.optim.batch_size {
            let scene = &scenes[(step * run.optim.batch_size + j) % scenes.len()];
            let fwd = head_forward(
                &mut g,
                head_cfg,
                head,
                &bound,
                &SceneInputs { features: &scene.sample.features, cameras: &scene.sample.cameras },
                HeadBias::Live,
            )?;
            let breakdown = total_loss(&mut g, &fwd.logits, &scene.label_pyramid, obj_cfg)?;
            let inv_b = 1.0 / run.optim.batch_size as f64;
            agg.ce += breakdown.ce * inv_b;
            agg.sem_scal += breakdown.sem_scal * inv_b;
            agg.geo_scal += breakdown.geo_scal * inv_b;
            agg.lovasz += breakdown.lovasz * inv_b;
            batch_total = Some(match batch_total {
                None => breakdown.total_node,
                Some(t) => g.add(t, breakdown.total_node)?,
            });
        }
        let loss_node = {
            let t = batch_total.expect("batch_size >= 1");
            g.scale(t, S::c(1.0 / run.optim.batch_size as f64))?
        };
        agg.total = g.value(loss_node).item().f64();
        if !agg.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss_node)?;
        let mut per_param: Vec<Option<DenseGrid<S>>> =
            (0..store.len()).map(|i| grads.grad(bound.node(store.id_at(i))).cloned()).collect();
        agg.grad_norm = clip_global_norm(&mut per_param, run.optim.grad_clip_norm);
        optimizer.step(store, &per_param, lr, &run.optim);
        log::debug!(
            "step {step}: lr {:.3e} total {:.4} (ce {:.4} sem {:.4} geo {:.4} lov {:.4}) |g| {:.3}",
            lr,
            agg.total,
            agg.ce,
            agg.sem_scal,
            agg.geo_scal,
            agg.lovasz,
            agg.grad_norm
        );
        logs.push(agg);
    }
    Ok(logs)
}
