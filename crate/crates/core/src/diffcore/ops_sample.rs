//! Spatial kernels: bilinear sampling, trilinear upsampling, depthwise 3D
//! convolution, and weighted row aggregation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{BackwardRule, GradSink, Graph, NodeId, OpCtx};
use super::grid::{idx4, DenseGrid};

/// Per-axis interpolation cell: two neighbor indices, the fractional weight
/// on the upper neighbor, and whether the raw coordinate fell outside the
/// grid (clamped; zero derivative).
#[derive(Clone, Copy)]
struct Cell<S> {
    i0: usize,
    i1: usize,
    frac: S,
    clamped: bool,
}

fn interp_cell<S: Scalar>(coord: S, n: usize) -> Cell<S> {
    if n == 1 {
        return Cell { i0: 0, i1: 0, frac: S::zero(), clamped: true };
    }
    let max = S::c((n - 1) as f64);
    if coord <= S::zero() {
        return Cell { i0: 0, i1: 1, frac: S::zero(), clamped: coord < S::zero() };
    }
    if coord >= max {
        return Cell { i0: n - 2, i1: n - 1, frac: S::one(), clamped: coord > max };
    }
    let i0 = coord.floor().f64() as usize;
    let i0 = i0.min(n - 2);
    Cell { i0, i1: i0 + 1, frac: coord - S::c(i0 as f64), clamped: false }
}

impl<S: Scalar> Graph<S> {
    /// Bilinear sampling of a (H, W, C) feature map at normalized image
    /// coordinates. `uv` is (M, 2) (or (2,) for a single sample) with u along
    /// the width, v along the height; coordinates are interpreted on the
    /// pixel-center grid and clamped to the map border. Differentiable in
    /// both the map and the coordinates.
    pub fn bilinear_sample(&mut self, map: NodeId, uv: NodeId) -> Result<NodeId> {
        let ms = self.value(map);
        if ms.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!("bilinear_sample: map must be (H, W, C), got {:?}", ms.shape())));
        }
        let (h, w, c) = (ms.shape()[0], ms.shape()[1], ms.shape()[2]);
        let uvs = self.value(uv);
        let single = uvs.shape() == [2];
        if !single && (uvs.shape().len() != 2 || uvs.last_dim() != 2) {
            return Err(Error::ShapeMismatch(format!("bilinear_sample: uv must be (M, 2) or (2,), got {:?}", uvs.shape())));
        }
        let m_count = if single { 1 } else { uvs.shape()[0] };
        let half = S::c(0.5);
        let mut data = vec![S::zero(); m_count * c];
        let md = ms.data();
        for m in 0..m_count {
            let u = uvs.data()[m * 2];
            let v = uvs.data()[m * 2 + 1];
            let cx = interp_cell(u * S::c(w as f64) - half, w);
            let cy = interp_cell(v * S::c(h as f64) - half, h);
            let (fx, fy) = (cx.frac, cy.frac);
            let w00 = (S::one() - fx) * (S::one() - fy);
            let w10 = fx * (S::one() - fy);
            let w01 = (S::one() - fx) * fy;
            let w11 = fx * fy;
            let row = |y: usize, x: usize| (y * w + x) * c;
            let (r00, r10, r01, r11) = (row(cy.i0, cx.i0), row(cy.i0, cx.i1), row(cy.i1, cx.i0), row(cy.i1, cx.i1));
            for ch in 0..c {
                data[m * c + ch] =
                    w00 * md[r00 + ch] + w10 * md[r10 + ch] + w01 * md[r01 + ch] + w11 * md[r11 + ch];
            }
        }
        let shape = if single { vec![c] } else { vec![m_count, c] };
        let value = DenseGrid::new(shape, data)?;
        Ok(self.custom(vec![map, uv], value, Box::new(BilinearRule { h, w, c, m_count })))
    }

    /// Trilinear x2 upsampling of a (X, Y, Z, C) grid; child voxels sample at
    /// their centers (align-corners-false), so constants are preserved.
    pub fn trilinear_upsample(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        if xs.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("trilinear_upsample: need (X, Y, Z, C), got {:?}", xs.shape())));
        }
        let dims = [xs.shape()[0], xs.shape()[1], xs.shape()[2]];
        let c = xs.shape()[3];
        let tables: Vec<Vec<Cell<S>>> = dims
            .iter()
            .map(|&n| {
                (0..2 * n)
                    .map(|o| {
                        // Child-center coordinate in parent units: (o + 0.5)/2 - 0.5.
                        let src = S::c(o as f64) * S::c(0.5) - S::c(0.25);
                        interp_cell(src, n)
                    })
                    .collect()
            })
            .collect();
        let out_dims = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
        let mut data = vec![S::zero(); out_dims[0] * out_dims[1] * out_dims[2] * c];
        let xd = xs.data();
        for ox in 0..out_dims[0] {
            let tx = tables[0][ox];
            for oy in 0..out_dims[1] {
                let ty = tables[1][oy];
                for oz in 0..out_dims[2] {
                    let tz = tables[2][oz];
                    let out_base = idx4(out_dims, c, ox, oy, oz, 0);
                    for (ix, wx) in [(tx.i0, S::one() - tx.frac), (tx.i1, tx.frac)] {
                        if wx == S::zero() {
                            continue;
                        }
                        for (iy, wy) in [(ty.i0, S::one() - ty.frac), (ty.i1, ty.frac)] {
                            if wy == S::zero() {
                                continue;
                            }
                            for (iz, wz) in [(tz.i0, S::one() - tz.frac), (tz.i1, tz.frac)] {
                                if wz == S::zero() {
                                    continue;
                                }
                                let wgt = wx * wy * wz;
                                let in_base = idx4(dims, c, ix, iy, iz, 0);
                                for ch in 0..c {
                                    data[out_base + ch] += wgt * xd[in_base + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = DenseGrid::new(vec![out_dims[0], out_dims[1], out_dims[2], c], data)?;
        Ok(self.custom(vec![x], value, Box::new(TrilinearRule { dims, c })))
    }

    /// Depthwise 3D convolution, kernel 3x3x3, zero padding 1, stride 1.
    /// `kernel` has shape (C, 3, 3, 3); channel c of the input is convolved
    /// only with kernel c (groups == channels).
    pub fn dwconv3d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        if xs.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("dwconv3d: need (X, Y, Z, C), got {:?}", xs.shape())));
        }
        let dims = [xs.shape()[0], xs.shape()[1], xs.shape()[2]];
        let c = xs.shape()[3];
        let ks = self.value(kernel);
        if ks.shape() != [c, 3, 3, 3] {
            return Err(Error::ShapeMismatch(format!("dwconv3d: kernel {:?} for {} channels", ks.shape(), c)));
        }
        let value = dwconv3d_forward(xs, ks, dims, c)?;
        Ok(self.custom(vec![x, kernel], value, Box::new(DwConvRule { dims, c })))
    }

    /// y[c] = sum_m w[m] * f[m, c] for f (M, C), w (M,).
    pub fn weighted_sum_rows(&mut self, feats: NodeId, weights: NodeId) -> Result<NodeId> {
        let fs = self.value(feats);
        let ws = self.value(weights);
        if fs.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("weighted_sum_rows: feats must be (M, C), got {:?}", fs.shape())));
        }
        let (m_count, c) = (fs.shape()[0], fs.shape()[1]);
        if ws.shape() != [m_count] {
            return Err(Error::ShapeMismatch(format!("weighted_sum_rows: weights {:?} vs M {}", ws.shape(), m_count)));
        }
        let mut data = vec![S::zero(); c];
        for m in 0..m_count {
            let wm = ws.data()[m];
            let frow = &fs.data()[m * c..(m + 1) * c];
            for ch in 0..c {
                data[ch] += wm * frow[ch];
            }
        }
        let value = DenseGrid::new(vec![c], data)?;
        Ok(self.custom(vec![feats, weights], value, Box::new(WeightedSumRowsRule { m_count, c })))
    }
}

fn dwconv3d_forward<S: Scalar>(
    xs: &DenseGrid<S>,
    ks: &DenseGrid<S>,
    dims: [usize; 3],
    c: usize,
) -> Result<DenseGrid<S>> {
    let mut data = vec![S::zero(); xs.numel()];
    let (xd, kd) = (xs.data(), ks.data());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let out_base = idx4(dims, c, x, y, z, 0);
                for dx in 0..3usize {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= dims[0] as isize {
                        continue;
                    }
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= dims[1] as isize {
                            continue;
                        }
                        for dz in 0..3usize {
                            let sz = z as isize + dz as isize - 1;
                            if sz < 0 || sz >= dims[2] as isize {
                                continue;
                            }
                            let in_base = idx4(dims, c, sx as usize, sy as usize, sz as usize, 0);
                            let tap = (dx * 3 + dy) * 3 + dz;
                            for ch in 0..c {
                                data[out_base + ch] += kd[ch * 27 + tap] * xd[in_base + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    DenseGrid::new(xs.shape().to_vec(), data)
}

struct BilinearRule {
    h: usize,
    w: usize,
    c: usize,
    m_count: usize,
}
impl<S: Scalar> BackwardRule<S> for BilinearRule {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let (h, w, c) = (self.h, self.w, self.c);
        let md = ctx.inputs[0].data();
        let uvd = ctx.inputs[1].data();
        let half = S::c(0.5);
        let cells: Vec<(Cell<S>, Cell<S>)> = (0..self.m_count)
            .map(|m| {
                let u = uvd[m * 2];
                let v = uvd[m * 2 + 1];
                (interp_cell(u * S::c(w as f64) - half, w), interp_cell(v * S::c(h as f64) - half, h))
            })
            .collect();
        sink.add_to(0, |acc| {
            let dm = acc.data_mut();
            for (m, (cx, cy)) in cells.iter().enumerate() {
                let (fx, fy) = (cx.frac, cy.frac);
                let w00 = (S::one() - fx) * (S::one() - fy);
                let w10 = fx * (S::one() - fy);
                let w01 = (S::one() - fx) * fy;
                let w11 = fx * fy;
                let row = |y: usize, x: usize| (y * w + x) * c;
                for ch in 0..c {
                    let go = g.data()[m * c + ch];
                    dm[row(cy.i0, cx.i0) + ch] += w00 * go;
                    dm[row(cy.i0, cx.i1) + ch] += w10 * go;
                    dm[row(cy.i1, cx.i0) + ch] += w01 * go;
                    dm[row(cy.i1, cx.i1) + ch] += w11 * go;
                }
            }
        });
        sink.add_to(1, |acc| {
            let duv = acc.data_mut();
            for (m, (cx, cy)) in cells.iter().enumerate() {
                let (fx, fy) = (cx.frac, cy.frac);
                let row = |y: usize, x: usize| (y * w + x) * c;
                let (r00, r10, r01, r11) =
                    (row(cy.i0, cx.i0), row(cy.i0, cx.i1), row(cy.i1, cx.i0), row(cy.i1, cx.i1));
                let mut dval_dx = S::zero();
                let mut dval_dy = S::zero();
                for ch in 0..c {
                    let go = g.data()[m * c + ch];
                    dval_dx += go
                        * ((md[r10 + ch] - md[r00 + ch]) * (S::one() - fy)
                            + (md[r11 + ch] - md[r01 + ch]) * fy);
                    dval_dy += go
                        * ((md[r01 + ch] - md[r00 + ch]) * (S::one() - fx)
                            + (md[r11 + ch] - md[r10 + ch]) * fx);
                }
                if !cx.clamped {
                    duv[m * 2] += dval_dx * S::c(w as f64);
                }
                if !cy.clamped {
                    duv[m * 2 + 1] += dval_dy * S::c(h as f64);
                }
            }
        });
    }
}

struct TrilinearRule {
    dims: [usize; 3],
    c: usize,
}
impl<S: Scalar> BackwardRule<S> for TrilinearRule {
    fn name(&self) -> &'static str {
        "trilinear_upsample"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let dims = self.dims;
        let c = self.c;
        let out_dims = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
        let tables: Vec<Vec<Cell<S>>> = dims
            .iter()
            .map(|&n| {
                (0..2 * n)
                    .map(|o| interp_cell(S::c(o as f64) * S::c(0.5) - S::c(0.25), n))
                    .collect()
            })
            .collect();
        sink.add_to(0, |acc| {
            let dx = acc.data_mut();
            for ox in 0..out_dims[0] {
                let tx = tables[0][ox];
                for oy in 0..out_dims[1] {
                    let ty = tables[1][oy];
                    for oz in 0..out_dims[2] {
                        let tz = tables[2][oz];
                        let out_base = idx4(out_dims, c, ox, oy, oz, 0);
                        for (ix, wx) in [(tx.i0, S::one() - tx.frac), (tx.i1, tx.frac)] {
                            if wx == S::zero() {
                                continue;
                            }
                            for (iy, wy) in [(ty.i0, S::one() - ty.frac), (ty.i1, ty.frac)] {
                                if wy == S::zero() {
                                    continue;
                                }
                                for (iz, wz) in [(tz.i0, S::one() - tz.frac), (tz.i1, tz.frac)] {
                                    if wz == S::zero() {
                                        continue;
                                    }
                                    let wgt = wx * wy * wz;
                                    let in_base = idx4(dims, c, ix, iy, iz, 0);
                                    for ch in 0..c {
                                        dx[in_base + ch] += wgt * g.data()[out_base + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

struct DwConvRule {
    dims: [usize; 3],
    c: usize,
}
impl<S: Scalar> BackwardRule<S> for DwConvRule {
    fn name(&self) -> &'static str {
        "dwconv3d"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let dims = self.dims;
        let c = self.c;
        let xd = ctx.inputs[0].data();
        let kd = ctx.inputs[1].data();
        let gd = g.data();
        sink.add_to(0, |acc| {
            let dxg = acc.data_mut();
            dw_walk(dims, c, |out_base, in_base, tap| {
                for ch in 0..c {
                    dxg[in_base + ch] += kd[ch * 27 + tap] * gd[out_base + ch];
                }
            });
        });
        sink.add_to(1, |acc| {
            let dk = acc.data_mut();
            dw_walk(dims, c, |out_base, in_base, tap| {
                for ch in 0..c {
                    dk[ch * 27 + tap] += gd[out_base + ch] * xd[in_base + ch];
                }
            });
        });
    }
}

/// Tap walk shared by both dwconv3d gradients: output position reads input
/// position offset by tap - 1 per axis, zero padding skipped.
fn dw_walk(dims: [usize; 3], c: usize, mut f: impl FnMut(usize, usize, usize)) {
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let out_base = idx4(dims, c, x, y, z, 0);
                for dx in 0..3usize {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= dims[0] as isize {
                        continue;
                    }
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= dims[1] as isize {
                            continue;
                        }
                        for dz in 0..3usize {
                            let sz = z as isize + dz as isize - 1;
                            if sz < 0 || sz >= dims[2] as isize {
                                continue;
                            }
                            let in_base = idx4(dims, c, sx as usize, sy as usize, sz as usize, 0);
                            let tap = (dx * 3 + dy) * 3 + dz;
                            f(out_base, in_base, tap);
                        }
                    }
                }
            }
        }
    }
}

struct WeightedSumRowsRule {
    m_count: usize,
    c: usize,
}
impl<S: Scalar> BackwardRule<S> for WeightedSumRowsRule {
    fn name(&self) -> &'static str {
        "weighted_sum_rows"
    }
    fn backward(&self, ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let fd = ctx.inputs[0].data();
        let wd = ctx.inputs[1].data();
        let c = self.c;
        sink.add_to(0, |acc| {
            let df = acc.data_mut();
            for m in 0..self.m_count {
                let wm = wd[m];
                for ch in 0..c {
                    df[m * c + ch] += wm * g.data()[ch];
                }
            }
        });
        sink.add_to(1, |acc| {
            let dw = acc.data_mut();
            for m in 0..self.m_count {
                let mut s = S::zero();
                for ch in 0..c {
                    s += fd[m * c + ch] * g.data()[ch];
                }
                dw[m] += s;
            }
        });
    }
}
