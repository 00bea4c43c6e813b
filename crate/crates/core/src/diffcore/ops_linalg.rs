//! Linear layers, layer normalization, and (log-)softmax.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{BackwardRule, GradSink, Graph, NodeId, OpCtx};
use super::grid::DenseGrid;

/// Decompose a shape around `axis` into (outer, mid, inner) extents so that
/// flat index = (o * mid + m) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, mid, inner))
}

impl<S: Scalar> Graph<S> {
    /// Affine map over the last axis: y[.., o] = sum_i w[o, i] x[.., i] + b[o].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let c_in = xs.last_dim();
        if ws.shape().len() != 2 || ws.shape()[1] != c_in {
            return Err(Error::ShapeMismatch(format!(
                "linear: weight {:?} does not match input channels {}",
                ws.shape(),
                c_in
            )));
        }
        let c_out = ws.shape()[0];
        if bs.shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!("linear: bias {:?} vs c_out {}", bs.shape(), c_out)));
        }
        let rows = xs.leading_rows();
        let mut out_shape: Vec<usize> = xs.shape().to_vec();
        if out_shape.is_empty() {
            out_shape.push(c_out);
        } else {
            *out_shape.last_mut().unwrap() = c_out;
        }
        let mut data = vec![S::zero(); rows * c_out];
        let (xd, wd, bd) = (xs.data(), ws.data(), bs.data());
        for r in 0..rows {
            let xrow = &xd[r * c_in..(r + 1) * c_in];
            let orow = &mut data[r * c_out..(r + 1) * c_out];
            for (o, out) in orow.iter_mut().enumerate() {
                let wrow = &wd[o * c_in..(o + 1) * c_in];
                let mut acc = bd[o];
                for i in 0..c_in {
                    acc += xrow[i] * wrow[i];
                }
                *out = acc;
            }
        }
        let value = DenseGrid::new(out_shape, data)?;
        Ok(self.custom(vec![x, w, b], value, Box::new(LinearRule { rows, c_in, c_out })))
    }

    /// Normalize the last axis to zero mean, unit variance (no affine step).
    pub fn layernorm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if c == 0 {
            return Err(Error::ShapeMismatch("layernorm over empty axis".into()));
        }
        let rows = xs.leading_rows();
        let e = S::c(eps);
        let inv_c = S::c(1.0 / c as f64);
        let mut data = vec![S::zero(); xs.numel()];
        let xd = xs.data();
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let inv_std = S::one() / (var + e).sqrt();
            for i in 0..c {
                data[r * c + i] = (row[i] - mean) * inv_std;
            }
        }
        let value = DenseGrid::new(xs.shape().to_vec(), data)?;
        Ok(self.custom(vec![x], value, Box::new(LayerNormRule { rows, c, eps: e })))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let (outer, mid, inner) = axis_split(xs.shape(), axis)?;
        let mut data = vec![S::zero(); xs.numel()];
        let xd = xs.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = xd[at(0)];
                for m in 1..mid {
                    if xd[at(m)] > mx {
                        mx = xd[at(m)];
                    }
                }
                let mut sum = S::zero();
                for m in 0..mid {
                    let e = (xd[at(m)] - mx).exp();
                    data[at(m)] = e;
                    sum += e;
                }
                for m in 0..mid {
                    data[at(m)] = data[at(m)] / sum;
                }
            }
        }
        let value = DenseGrid::new(xs.shape().to_vec(), data)?;
        Ok(self.custom(vec![x], value, Box::new(SoftmaxRule { outer, mid, inner })))
    }

    /// Stable log(softmax(x)) along `axis`.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let (outer, mid, inner) = axis_split(xs.shape(), axis)?;
        let mut data = vec![S::zero(); xs.numel()];
        let xd = xs.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = xd[at(0)];
                for m in 1..mid {
                    if xd[at(m)] > mx {
                        mx = xd[at(m)];
                    }
                }
                let mut sum = S::zero();
                for m in 0..mid {
                    sum += (xd[at(m)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for m in 0..mid {
                    data[at(m)] = xd[at(m)] - lse;
                }
            }
        }
        let value = DenseGrid::new(xs.shape().to_vec(), data)?;
        Ok(self.custom(vec![x], value, Box::new(LogSoftmaxRule { outer, mid, inner })))
    }
}

struct LinearRule {
    rows: usize,
    c_in: usize,
    c_out: usize,
}
impl<S: Scalar> BackwardRule<S> for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (rows, c_in, c_out) = (self.rows, self.c_in, self.c_out);
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let gd = g.data();
        sink.add_to(0, |acc| {
            let dx = acc.data_mut();
            for r in 0..rows {
                let grow = &gd[r * c_out..(r + 1) * c_out];
                let dxrow = &mut dx[r * c_in..(r + 1) * c_in];
                for (o, &go) in grow.iter().enumerate() {
                    let wrow = &w[o * c_in..(o + 1) * c_in];
                    for i in 0..c_in {
                        dxrow[i] += go * wrow[i];
                    }
                }
            }
        });
        sink.add_to(1, |acc| {
            let dw = acc.data_mut();
            for r in 0..rows {
                let grow = &gd[r * c_out..(r + 1) * c_out];
                let xrow = &x[r * c_in..(r + 1) * c_in];
                for (o, &go) in grow.iter().enumerate() {
                    let dwrow = &mut dw[o * c_in..(o + 1) * c_in];
                    for i in 0..c_in {
                        dwrow[i] += go * xrow[i];
                    }
                }
            }
        });
        sink.add_to(2, |acc| {
            let db = acc.data_mut();
            for r in 0..rows {
                let grow = &gd[r * c_out..(r + 1) * c_out];
                for o in 0..c_out {
                    db[o] += grow[o];
                }
            }
        });
    }
}

struct LayerNormRule<S> {
    rows: usize,
    c: usize,
    eps: S,
}
impl<S: Scalar> BackwardRule<S> for LayerNormRule<S> {
    fn name(&self) -> &'static str {
        "layernorm"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (rows, c) = (self.rows, self.c);
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let gd = g.data();
        let inv_c = S::c(1.0 / c as f64);
        let eps = self.eps;
        sink.add_to(0, |acc| {
            let dx = acc.data_mut();
            for r in 0..rows {
                let xrow = &x[r * c..(r + 1) * c];
                let yrow = &y[r * c..(r + 1) * c];
                let grow = &gd[r * c..(r + 1) * c];
                let mean = xrow.iter().copied().sum::<S>() * inv_c;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
                let inv_std = S::one() / (var + eps).sqrt();
                let g_mean = grow.iter().copied().sum::<S>() * inv_c;
                let gy_mean = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum::<S>() * inv_c;
                for i in 0..c {
                    dx[r * c + i] += inv_std * (grow[i] - g_mean - yrow[i] * gy_mean);
                }
            }
        });
    }
}

struct SoftmaxRule {
    outer: usize,
    mid: usize,
    inner: usize,
}
impl<S: Scalar> BackwardRule<S> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (outer, mid, inner) = (self.outer, self.mid, self.inner);
        let y = ctx.output.data();
        let gd = g.data();
        sink.add_to(0, |acc| {
            let dx = acc.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |m: usize| (o * mid + m) * inner + i;
                    let mut dot = S::zero();
                    for m in 0..mid {
                        dot += gd[at(m)] * y[at(m)];
                    }
                    for m in 0..mid {
                        dx[at(m)] += y[at(m)] * (gd[at(m)] - dot);
                    }
                }
            }
        });
    }
}

struct LogSoftmaxRule {
    outer: usize,
    mid: usize,
    inner: usize,
}
impl<S: Scalar> BackwardRule<S> for LogSoftmaxRule {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (outer, mid, inner) = (self.outer, self.mid, self.inner);
        let y = ctx.output.data();
        let gd = g.data();
        sink.add_to(0, |acc| {
            let dx = acc.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |m: usize| (o * mid + m) * inner + i;
                    let mut gsum = S::zero();
                    for m in 0..mid {
                        gsum += gd[at(m)];
                    }
                    for m in 0..mid {
                        dx[at(m)] += gd[at(m)] - y[at(m)].exp() * gsum;
                    }
                }
            }
        });
    }
}
