//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, NodeId};
use super::grid::DenseGrid;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_entries: usize,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences over every entry of every parameter.
///
/// The error measure is mixed: |a - n| / max(1, |a|, |n|), so small gradients
/// are compared absolutely and large ones relatively.
pub fn grad_check<S, F>(build: F, params: &[DenseGrid<S>], h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[DenseGrid<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch("grad_check: builder must return a scalar".into()));
        }
        Ok(g.value(loss).item().f64())
    };

    // Analytic gradients in a single reverse sweep.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<DenseGrid<S>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.grad(id).cloned().unwrap_or_else(|| DenseGrid::zeros(p.shape().to_vec())))
        .collect();

    let mut work: Vec<DenseGrid<S>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, n_entries: 0, worst: None };
    let hs = S::c(h);
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + hs;
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - hs;
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[ei].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.n_entries += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
