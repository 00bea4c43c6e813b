//! Elementwise operations, activations, and full reductions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{BackwardRule, GradSink, Graph, NodeId, OpCtx};
use super::grid::DenseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Silu,
    Sigmoid,
    Tanh,
}

fn check_same_shape<S: Scalar>(a: &DenseGrid<S>, b: &DenseGrid<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self.value(a), self.value(b), "add")?;
        let value = DenseGrid::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.custom(vec![a, b], value, Box::new(AddRule)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self.value(a), self.value(b), "sub")?;
        let value = DenseGrid::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect(),
        )?;
        Ok(self.custom(vec![a, b], value, Box::new(SubRule)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self.value(a), self.value(b), "mul")?;
        let value = DenseGrid::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.custom(vec![a, b], value, Box::new(MulRule)))
    }

    /// Elementwise division with the denominator clamped from below at `eps`.
    /// Intended for nonnegative denominators (gate sums, depths); where the
    /// clamp engages, no gradient flows into the denominator.
    pub fn div(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        check_same_shape(self.value(a), self.value(b), "div")?;
        let e = S::c(eps);
        let value = DenseGrid::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x / if y > e { y } else { e })
                .collect(),
        )?;
        Ok(self.custom(vec![a, b], value, Box::new(DivRule { eps: e })))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * c);
        Ok(self.custom(vec![x], value, Box::new(ScaleRule { c })))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let value = self.value(x).map(|v| v + c);
        Ok(self.custom(vec![x], value, Box::new(AddScalarRule)))
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| *v <= S::zero()) {
            return Err(Error::Numerical("log of non-positive value".into()));
        }
        let value = self.value(x).map(|v| v.ln());
        Ok(self.custom(vec![x], value, Box::new(LogRule)))
    }

    pub fn activation(&mut self, x: NodeId, kind: Act) -> Result<NodeId> {
        let value = self.value(x).map(|v| act_forward(v, kind));
        Ok(self.custom(vec![x], value, Box::new(ActRule { kind })))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().copied().sum();
        Ok(self.custom(vec![x], DenseGrid::scalar(total), Box::new(SumAllRule)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::ShapeMismatch("mean over empty grid".into()));
        }
        let total: S = self.value(x).data().iter().copied().sum();
        let value = DenseGrid::scalar(total / S::c(n as f64));
        Ok(self.custom(vec![x], value, Box::new(MeanAllRule { n })))
    }

    /// x (elementwise times) a constant grid.
    pub fn mul_const(&mut self, x: NodeId, c: DenseGrid<S>) -> Result<NodeId> {
        let cn = self.constant(c);
        self.mul(x, cn)
    }

    /// x + a constant grid.
    pub fn add_const(&mut self, x: NodeId, c: DenseGrid<S>) -> Result<NodeId> {
        let cn = self.constant(c);
        self.add(x, cn)
    }

    /// Inner product of x with constant weights, reduced to a scalar.
    pub fn dot_const(&mut self, x: NodeId, w: DenseGrid<S>) -> Result<NodeId> {
        let m = self.mul_const(x, w)?;
        self.sum_all(m)
    }
}

#[inline]
fn act_forward<S: Scalar>(v: S, kind: Act) -> S {
    match kind {
        Act::Relu => {
            if v > S::zero() {
                v
            } else {
                S::zero()
            }
        }
        Act::Silu => v * sigmoid(v),
        Act::Sigmoid => sigmoid(v),
        Act::Tanh => v.tanh(),
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

struct AddRule;
impl<S: Scalar> BackwardRule<S> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        for pos in 0..2 {
            sink.add_to(pos, |acc| {
                for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                    *o += *gi;
                }
            });
        }
    }
}

struct SubRule;
impl<S: Scalar> BackwardRule<S> for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *o += *gi;
            }
        });
        sink.add_to(1, |acc| {
            for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *o -= *gi;
            }
        });
    }
}

struct MulRule;
impl<S: Scalar> BackwardRule<S> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        sink.add_to(0, |acc| {
            for ((o, gi), bi) in acc.data_mut().iter_mut().zip(g.data()).zip(b.data()) {
                *o += *gi * *bi;
            }
        });
        sink.add_to(1, |acc| {
            for ((o, gi), ai) in acc.data_mut().iter_mut().zip(g.data()).zip(a.data()) {
                *o += *gi * *ai;
            }
        });
    }
}

struct DivRule<S> {
    eps: S,
}
impl<S: Scalar> BackwardRule<S> for DivRule<S> {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let eps = self.eps;
        sink.add_to(0, |acc| {
            for ((o, gi), bi) in acc.data_mut().iter_mut().zip(g.data()).zip(b.data()) {
                let be = if *bi > eps { *bi } else { eps };
                *o += *gi / be;
            }
        });
        sink.add_to(1, |acc| {
            for (i, o) in acc.data_mut().iter_mut().enumerate() {
                let bi = b.data()[i];
                if bi > eps {
                    *o -= g.data()[i] * a.data()[i] / (bi * bi);
                }
            }
        });
    }
}

struct ScaleRule<S> {
    c: S,
}
impl<S: Scalar> BackwardRule<S> for ScaleRule<S> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let c = self.c;
        sink.add_to(0, |acc| {
            for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *o += *gi * c;
            }
        });
    }
}

struct AddScalarRule;
impl<S: Scalar> BackwardRule<S> for AddScalarRule {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        sink.add_to(0, |acc| {
            for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *o += *gi;
            }
        });
    }
}

struct LogRule;
impl<S: Scalar> BackwardRule<S> for LogRule {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let x = ctx.inputs[0];
        sink.add_to(0, |acc| {
            for ((o, gi), xi) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                *o += *gi / *xi;
            }
        });
    }
}

struct ActRule {
    kind: Act,
}
impl<S: Scalar> BackwardRule<S> for ActRule {
    fn name(&self) -> &'static str {
        "activation"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let x = ctx.inputs[0];
        let y = ctx.output;
        let kind = self.kind;
        sink.add_to(0, |acc| {
            for i in 0..acc.numel() {
                let d = match kind {
                    Act::Relu => {
                        if x.data()[i] > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }
                    Act::Silu => {
                        let s = sigmoid(x.data()[i]);
                        s * (S::one() + x.data()[i] * (S::one() - s))
                    }
                    Act::Sigmoid => {
                        let o = y.data()[i];
                        o * (S::one() - o)
                    }
                    Act::Tanh => {
                        let o = y.data()[i];
                        S::one() - o * o
                    }
                };
                acc.data_mut()[i] += g.data()[i] * d;
            }
        });
    }
}

struct SumAllRule;
impl<S: Scalar> BackwardRule<S> for SumAllRule {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let g0 = g.item();
        sink.add_to(0, |acc| {
            for o in acc.data_mut() {
                *o += g0;
            }
        });
    }
}

struct MeanAllRule {
    n: usize,
}
impl<S: Scalar> BackwardRule<S> for MeanAllRule {
    fn name(&self) -> &'static str {
        "mean_all"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let g0 = g.item() / S::c(self.n as f64);
        sink.add_to(0, |acc| {
            for o in acc.data_mut() {
                *o += g0;
            }
        });
    }
}
