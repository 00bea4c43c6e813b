//! Shape plumbing: concatenation, slicing, stacking, reshapes, repeats.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{BackwardRule, GradSink, Graph, NodeId, OpCtx};
use super::grid::DenseGrid;

impl<S: Scalar> Graph<S> {
    /// Concatenate along the last axis. All inputs must agree on the leading
    /// dimensions.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero grids".into()));
        }
        let lead_shape: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: incompatible shape {:?} vs leading {:?}",
                    s, lead_shape
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(parts[0]).leading_rows();
        let mut data = vec![S::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead_shape;
        shape.push(total);
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(parts.to_vec(), value, Box::new(ConcatChannelsRule { rows, widths })))
    }

    /// Take `len` channels starting at `start` from the last axis.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if start + len > c {
            return Err(Error::ShapeMismatch(format!("slice_channels: {start}+{len} > {c}")));
        }
        let rows = xs.leading_rows();
        let mut data = vec![S::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&xs.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(vec![x], value, Box::new(SliceChannelsRule { rows, c, start, len })))
    }

    /// Take `len` rows starting at `start` along axis 0.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x);
        if xs.shape().is_empty() {
            return Err(Error::ShapeMismatch("slice_rows on rank-0 grid".into()));
        }
        let n = xs.shape()[0];
        if start + len > n {
            return Err(Error::ShapeMismatch(format!("slice_rows: {start}+{len} > {n}")));
        }
        let row = xs.numel() / n.max(1);
        let data = xs.data()[start * row..(start + len) * row].to_vec();
        let mut shape = xs.shape().to_vec();
        shape[0] = len;
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(vec![x], value, Box::new(SliceRowsRule { row, start, len })))
    }

    /// Stack equal-shaped grids along a new leading axis.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("stack of zero grids".into()));
        }
        let part_shape = self.value(parts[0]).shape().to_vec();
        let per = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(per * parts.len());
        for &p in parts {
            if self.value(p).shape() != part_shape {
                return Err(Error::ShapeMismatch(format!(
                    "stack_rows: {:?} vs {:?}",
                    self.value(p).shape(),
                    part_shape
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&part_shape);
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(parts.to_vec(), value, Box::new(StackRowsRule { per })))
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.custom(vec![x], value, Box::new(ReshapeRule)))
    }

    /// Repeat every element `k` times along a new trailing axis.
    pub fn repeat_each(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::ShapeMismatch("repeat_each with k = 0".into()));
        }
        let xs = self.value(x);
        let mut data = Vec::with_capacity(xs.numel() * k);
        for &v in xs.data() {
            for _ in 0..k {
                data.push(v);
            }
        }
        let mut shape = xs.shape().to_vec();
        shape.push(k);
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(vec![x], value, Box::new(RepeatEachRule { k })))
    }
}

struct ConcatChannelsRule {
    rows: usize,
    widths: Vec<usize>,
}
impl<S: Scalar> BackwardRule<S> for ConcatChannelsRule {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (pos, &w) in self.widths.iter().enumerate() {
            let off = offset;
            sink.add_to(pos, |acc| {
                let d = acc.data_mut();
                for r in 0..self.rows {
                    for i in 0..w {
                        d[r * w + i] += g.data()[r * total + off + i];
                    }
                }
            });
            offset += w;
        }
    }
}

struct SliceChannelsRule {
    rows: usize,
    c: usize,
    start: usize,
    len: usize,
}
impl<S: Scalar> BackwardRule<S> for SliceChannelsRule {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            let d = acc.data_mut();
            for r in 0..self.rows {
                for i in 0..self.len {
                    d[r * self.c + self.start + i] += g.data()[r * self.len + i];
                }
            }
        });
    }
}

struct SliceRowsRule {
    row: usize,
    start: usize,
    len: usize,
}
impl<S: Scalar> BackwardRule<S> for SliceRowsRule {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            let d = acc.data_mut();
            let base = self.start * self.row;
            for i in 0..self.len * self.row {
                d[base + i] += g.data()[i];
            }
        });
    }
}

struct StackRowsRule {
    per: usize,
}
impl<S: Scalar> BackwardRule<S> for StackRowsRule {
    fn name(&self) -> &'static str {
        "stack_rows"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        for pos in 0..ctx.inputs.len() {
            sink.add_to(pos, |acc| {
                let d = acc.data_mut();
                let base = pos * self.per;
                for i in 0..self.per {
                    d[i] += g.data()[base + i];
                }
            });
        }
    }
}

struct ReshapeRule;
impl<S: Scalar> BackwardRule<S> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *o += *gi;
            }
        });
    }
}

struct RepeatEachRule {
    k: usize,
}
impl<S: Scalar> BackwardRule<S> for RepeatEachRule {
    fn name(&self) -> &'static str {
        "repeat_each"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            for (i, o) in acc.data_mut().iter_mut().enumerate() {
                let mut s = S::zero();
                for j in 0..self.k {
                    s += g.data()[i * self.k + j];
                }
                *o += s;
            }
        });
    }
}
