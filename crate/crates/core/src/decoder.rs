//! Sequential three-scale occupancy head.
//!
//! A learnable embedding grid at the coarsest scale is refined block by block
//! (cross-attention and ConvNeXt-style depthwise conv blocks per the scale
//! schedule), patch-split into the next scale's queries, and bridged with
//! coarse-guided gated fusion. Cross-attention runs only at the two coarse
//! scales; the fine scale is convolution-only, which the per-scale call
//! counters make checkable.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Act, BackwardRule, DenseGrid, GradSink, Graph, NodeId, OpCtx};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};
use crate::pada::{pada_layer, BiasMode, PadaConfig, PadaLayerParams, SigmaTrace, LN_EPS};
use crate::params::{init_uniform, init_uniform_range, Binding, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Cross,
    Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub dims: [usize; 3],
    pub channels: usize,
    pub blocks: Vec<BlockKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Unet,
    None,
    DirectAdd,
    ScalarGate,
    ChannelGate,
    ChannelGateDw,
}

impl FusionVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Self::Unet),
            "none" => Ok(Self::None),
            "direct_add" => Ok(Self::DirectAdd),
            "scalar_gate" => Ok(Self::ScalarGate),
            "channel_gate" => Ok(Self::ChannelGate),
            "channel_gate_dw" => Ok(Self::ChannelGateDw),
            other => Err(Error::UnknownVariant(format!("fusion variant {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::None => "none",
            Self::DirectAdd => "direct_add",
            Self::ScalarGate => "scalar_gate",
            Self::ChannelGate => "channel_gate",
            Self::ChannelGateDw => "channel_gate_dw",
        }
    }

    pub fn all() -> [Self; 6] {
        [Self::Unet, Self::None, Self::DirectAdd, Self::ScalarGate, Self::ChannelGate, Self::ChannelGateDw]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub scales: Vec<ScaleSpec>,
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
    pub n_classes: usize,
    /// Base attention config; query_dim and offset_range are derived per
    /// scale (offsets bounded by two voxel pitches of the running scale).
    pub pada: PadaConfig,
    pub fusion: FusionVariant,
    /// Whether the S0->S1 transition also uses gated fusion (both fusion
    /// levels per the architecture figure); switchable.
    pub fuse_s0_s1: bool,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != 3 {
            return Err(Error::Config(format!("head needs exactly 3 scales, got {}", self.scales.len())));
        }
        for s in 0..2 {
            for a in 0..3 {
                if self.scales[s + 1].dims[a] != 2 * self.scales[s].dims[a] {
                    return Err(Error::Config(format!(
                        "scale {} dims {:?} must double scale {} dims {:?}",
                        s + 1,
                        self.scales[s + 1].dims,
                        s,
                        self.scales[s].dims
                    )));
                }
            }
        }
        let fine = self.scales.last().unwrap();
        if fine.blocks.iter().any(|b| *b == BlockKind::Cross) {
            return Err(Error::Config("fine scale must not contain cross blocks".into()));
        }
        for spec in &self.scales {
            if spec.blocks.iter().any(|b| *b == BlockKind::Cross)
                && spec.channels % self.pada.n_heads != 0
            {
                return Err(Error::Config(format!(
                    "channels {} not divisible by n_heads {}",
                    spec.channels, self.pada.n_heads
                )));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least free + one class".into()));
        }
        if matches!(self.fusion, FusionVariant::Unet) {
            return Err(Error::Config("unet fusion exists for cost accounting only and cannot run".into()));
        }
        self.pada.validate()
    }

    pub fn voxel_pitch(&self, scale: usize) -> [f64; 3] {
        let d = &self.scales[scale].dims;
        [
            (self.world_max[0] - self.world_min[0]) / d[0] as f64,
            (self.world_max[1] - self.world_min[1]) / d[1] as f64,
            (self.world_max[2] - self.world_min[2]) / d[2] as f64,
        ]
    }

    pub fn pada_for_scale(&self, scale: usize) -> PadaConfig {
        let pitch = self.voxel_pitch(scale);
        let max_pitch = pitch[0].max(pitch[1]).max(pitch[2]);
        PadaConfig {
            query_dim: self.scales[scale].channels,
            offset_range: 2.0 * max_pitch,
            ..self.pada.clone()
        }
    }

    /// World-space voxel centers in row-major (x, y, z) order.
    pub fn reference_points<S: Scalar>(&self, scale: usize) -> Vec<Vec3<S>> {
        let dims = self.scales[scale].dims;
        let pitch = self.voxel_pitch(scale);
        let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    out.push([
                        S::c(self.world_min[0] + (x as f64 + 0.5) * pitch[0]),
                        S::c(self.world_min[1] + (y as f64 + 0.5) * pitch[1]),
                        S::c(self.world_min[2] + (z as f64 + 0.5) * pitch[2]),
                    ]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    pub dw_kernel: ParamId,
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
}

impl ConvBlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = 4 * channels;
        Self {
            dw_kernel: store.register(
                format!("{prefix}.dw.kernel"),
                init_uniform(rng, vec![channels, 3, 3, 3], 27),
            ),
            pw1_w: store
                .register(format!("{prefix}.pw1.w"), init_uniform(rng, vec![hidden, channels], channels)),
            pw1_b: store.register(format!("{prefix}.pw1.b"), DenseGrid::zeros(vec![hidden])),
            // zero-initialized: the block is the identity at initialization
            pw2_w: store.register(format!("{prefix}.pw2.w"), DenseGrid::zeros(vec![channels, hidden])),
            pw2_b: store.register(format!("{prefix}.pw2.b"), DenseGrid::zeros(vec![channels])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub smooth_kernel: Option<ParamId>,
}

impl FusionParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c_prev: usize,
        c_curr: usize,
        variant: FusionVariant,
        rng: &mut ChaCha8Rng,
    ) -> Option<Self> {
        match variant {
            FusionVariant::None | FusionVariant::Unet => None,
            FusionVariant::DirectAdd => Some(Self {
                gate_w1: store.register(format!("{prefix}.unused.w1"), DenseGrid::zeros(vec![0])),
                gate_b1: store.register(format!("{prefix}.unused.b1"), DenseGrid::zeros(vec![0])),
                gate_w2: store.register(format!("{prefix}.unused.w2"), DenseGrid::zeros(vec![0])),
                gate_b2: store.register(format!("{prefix}.unused.b2"), DenseGrid::zeros(vec![0])),
                proj_w: store
                    .register(format!("{prefix}.proj.w"), init_uniform(rng, vec![c_curr, c_prev], c_prev)),
                proj_b: store.register(format!("{prefix}.proj.b"), DenseGrid::zeros(vec![c_curr])),
                smooth_kernel: None,
            }),
            FusionVariant::ScalarGate | FusionVariant::ChannelGate | FusionVariant::ChannelGateDw => {
                let hidden = (c_prev / 4).max(1);
                let gate_out = if matches!(variant, FusionVariant::ScalarGate) { 1 } else { c_curr };
                let smooth_kernel = if matches!(variant, FusionVariant::ChannelGateDw) {
                    // delta kernel: smoothing starts as identity
                    let mut k = DenseGrid::zeros(vec![c_curr, 3, 3, 3]);
                    for ch in 0..c_curr {
                        k.data_mut()[ch * 27 + 13] = S::one();
                    }
                    Some(store.register(format!("{prefix}.smooth.kernel"), k))
                } else {
                    None
                };
                Some(Self {
                    gate_w1: store
                        .register(format!("{prefix}.gate.w1"), init_uniform(rng, vec![hidden, c_prev], c_prev)),
                    gate_b1: store.register(format!("{prefix}.gate.b1"), DenseGrid::zeros(vec![hidden])),
                    gate_w2: store
                        .register(format!("{prefix}.gate.w2"), init_uniform(rng, vec![gate_out, hidden], hidden)),
                    gate_b2: store.register(format!("{prefix}.gate.b2"), DenseGrid::zeros(vec![gate_out])),
                    proj_w: store
                        .register(format!("{prefix}.proj.w"), init_uniform(rng, vec![c_curr, c_prev], c_prev)),
                    proj_b: store.register(format!("{prefix}.proj.b"), DenseGrid::zeros(vec![c_curr])),
                    smooth_kernel,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum BlockParams {
    Cross(PadaLayerParams),
    Conv(ConvBlockParams),
}

#[derive(Debug, Clone)]
pub struct SplitParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct OccHeadParams {
    pub embedding: ParamId,
    pub blocks: Vec<Vec<BlockParams>>,
    pub splits: Vec<SplitParams>,
    pub fusions: Vec<Option<FusionParams>>,
    pub classifiers: Vec<ClassifierParams>,
}

impl OccHeadParams {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let s0 = &cfg.scales[0];
        let embedding = store.register(
            "embedding",
            init_uniform_range(rng, vec![s0.dims[0], s0.dims[1], s0.dims[2], s0.channels], 1.0),
        );
        let mut blocks = Vec::new();
        for (si, spec) in cfg.scales.iter().enumerate() {
            let pc = cfg.pada_for_scale(si);
            let mut scale_blocks = Vec::new();
            for (bi, kind) in spec.blocks.iter().enumerate() {
                let prefix = format!("s{si}.block{bi}");
                scale_blocks.push(match kind {
                    BlockKind::Cross => {
                        BlockParams::Cross(PadaLayerParams::init(store, &format!("{prefix}.cross"), &pc, rng))
                    }
                    BlockKind::Conv => {
                        BlockParams::Conv(ConvBlockParams::init(store, &format!("{prefix}.conv"), spec.channels, rng))
                    }
                });
            }
            blocks.push(scale_blocks);
        }
        let mut splits = Vec::new();
        let mut fusions = Vec::new();
        for t in 0..2 {
            let c_in = cfg.scales[t].channels;
            let c_out = cfg.scales[t + 1].channels;
            splits.push(SplitParams {
                w: store.register(format!("split{t}.w"), init_uniform(rng, vec![8 * c_out, c_in], c_in)),
                b: store.register(format!("split{t}.b"), DenseGrid::zeros(vec![8 * c_out])),
            });
            let variant = if t == 0 && !cfg.fuse_s0_s1 { FusionVariant::None } else { cfg.fusion };
            fusions.push(FusionParams::init(store, &format!("fusion{t}"), c_in, c_out, variant, rng));
        }
        let classifiers = cfg
            .scales
            .iter()
            .enumerate()
            .map(|(si, spec)| ClassifierParams {
                w: store.register(
                    format!("cls{si}.w"),
                    init_uniform(rng, vec![cfg.n_classes, spec.channels], spec.channels),
                ),
                b: store.register(format!("cls{si}.b"), DenseGrid::zeros(vec![cfg.n_classes])),
            })
            .collect();
        Self { embedding, blocks, splits, fusions, classifiers }
    }
}

/// Linear projection C_in -> 8*C_out followed by rearranging each parent
/// voxel's 8 channel blocks into its 2x2x2 children.
pub fn patch_split<S: Scalar>(
    g: &mut Graph<S>,
    grid: NodeId,
    params: &SplitParams,
    bound: &Binding,
    c_out: usize,
) -> Result<NodeId> {
    let proj = g.linear(grid, bound.node(params.w), bound.node(params.b))?;
    expand_children(g, proj, c_out)
}

/// (X, Y, Z, 8*C) -> (2X, 2Y, 2Z, C); channel block (dx*4 + dy*2 + dz) feeds
/// child (2x+dx, 2y+dy, 2z+dz).
pub fn expand_children<S: Scalar>(g: &mut Graph<S>, grid: NodeId, c_out: usize) -> Result<NodeId> {
    let gs = g.value(grid);
    if gs.shape().len() != 4 || gs.shape()[3] != 8 * c_out {
        return Err(Error::ShapeMismatch(format!(
            "expand_children: need (X, Y, Z, {}), got {:?}",
            8 * c_out,
            gs.shape()
        )));
    }
    let dims = [gs.shape()[0], gs.shape()[1], gs.shape()[2]];
    let out_dims = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
    let mut data = vec![S::zero(); out_dims[0] * out_dims[1] * out_dims[2] * c_out];
    let src = gs.data();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let parent = ((x * dims[1] + y) * dims[2] + z) * 8 * c_out;
                for dx in 0..2usize {
                    for dy in 0..2usize {
                        for dz in 0..2usize {
                            let block = dx * 4 + dy * 2 + dz;
                            let child = (((2 * x + dx) * out_dims[1] + (2 * y + dy)) * out_dims[2]
                                + (2 * z + dz))
                                * c_out;
                            data[child..child + c_out]
                                .copy_from_slice(&src[parent + block * c_out..parent + (block + 1) * c_out]);
                        }
                    }
                }
            }
        }
    }
    let value = DenseGrid::new(vec![out_dims[0], out_dims[1], out_dims[2], c_out], data)?;
    Ok(g.custom(vec![grid], value, Box::new(ExpandChildrenRule { dims, c_out })))
}

struct ExpandChildrenRule {
    dims: [usize; 3],
    c_out: usize,
}
impl<S: Scalar> BackwardRule<S> for ExpandChildrenRule {
    fn name(&self) -> &'static str {
        "expand_children"
    }
    fn backward(&self, _ctx: &OpCtx<'_, S>, g: &DenseGrid<S>, sink: &mut GradSink<'_, S>) {
        let dims = self.dims;
        let c_out = self.c_out;
        let out_dims = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
        sink.add_to(0, |acc| {
            let d = acc.data_mut();
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        let parent = ((x * dims[1] + y) * dims[2] + z) * 8 * c_out;
                        for dx in 0..2usize {
                            for dy in 0..2usize {
                                for dz in 0..2usize {
                                    let block = dx * 4 + dy * 2 + dz;
                                    let child = (((2 * x + dx) * out_dims[1] + (2 * y + dy))
                                        * out_dims[2]
                                        + (2 * z + dz))
                                        * c_out;
                                    for ch in 0..c_out {
                                        d[parent + block * c_out + ch] += g.data()[child + ch];
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

/// ConvNeXt-style block: depthwise conv (k=3) -> layernorm -> pointwise MLP
/// (C -> 4C -> C, SiLU) -> residual. Identity at initialization.
pub fn conv_block<S: Scalar>(
    g: &mut Graph<S>,
    grid: NodeId,
    params: &ConvBlockParams,
    bound: &Binding,
) -> Result<NodeId> {
    let dw = g.dwconv3d(grid, bound.node(params.dw_kernel))?;
    let norm = g.layernorm(dw, LN_EPS)?;
    let h = g.linear(norm, bound.node(params.pw1_w), bound.node(params.pw1_b))?;
    let a = g.activation(h, Act::Silu)?;
    let out = g.linear(a, bound.node(params.pw2_w), bound.node(params.pw2_b))?;
    g.add(grid, out)
}

pub struct FusionOut<S> {
    pub node: NodeId,
    /// Gate values at coarse resolution, kept for heatmap export.
    pub gate: Option<DenseGrid<S>>,
}

/// Eqs. 6-10 style fusion: channel (or scalar) gates computed at the coarse
/// resolution, upsampled together with the projected coarse features, blended
/// convexly into the fine features, then optionally smoothed by a depthwise
/// conv + layernorm.
pub fn coarse_gated_fuse<S: Scalar>(
    g: &mut Graph<S>,
    h_prev: NodeId,
    h_curr: NodeId,
    params: Option<&FusionParams>,
    bound: &Binding,
    variant: FusionVariant,
) -> Result<FusionOut<S>> {
    let prev_shape = g.value(h_prev).shape().to_vec();
    let curr_shape = g.value(h_curr).shape().to_vec();
    if prev_shape.len() != 4 || curr_shape.len() != 4 {
        return Err(Error::ShapeMismatch("fusion expects 4D grids".into()));
    }
    for a in 0..3 {
        if curr_shape[a] != 2 * prev_shape[a] {
            return Err(Error::ShapeMismatch(format!(
                "fusion: fine dims {:?} must double coarse dims {:?}",
                &curr_shape[..3],
                &prev_shape[..3]
            )));
        }
    }
    let c_curr = curr_shape[3];
    match variant {
        FusionVariant::Unet => Err(Error::Config("unet fusion is not runnable".into())),
        FusionVariant::None => Ok(FusionOut { node: h_curr, gate: None }),
        FusionVariant::DirectAdd => {
            let p = params.ok_or_else(|| Error::Config("fusion params missing".into()))?;
            let proj = g.linear(h_prev, bound.node(p.proj_w), bound.node(p.proj_b))?;
            let up = g.trilinear_upsample(proj)?;
            let node = g.add(up, h_curr)?;
            Ok(FusionOut { node, gate: None })
        }
        FusionVariant::ScalarGate | FusionVariant::ChannelGate | FusionVariant::ChannelGateDw => {
            let p = params.ok_or_else(|| Error::Config("fusion params missing".into()))?;
            let h1 = g.linear(h_prev, bound.node(p.gate_w1), bound.node(p.gate_b1))?;
            let a1 = g.activation(h1, Act::Silu)?;
            let h2 = g.linear(a1, bound.node(p.gate_w2), bound.node(p.gate_b2))?;
            let gate = g.activation(h2, Act::Sigmoid)?;
            let gate_value = g.value(gate).clone();

            let gate_up = g.trilinear_upsample(gate)?;
            let gate_full = if matches!(variant, FusionVariant::ScalarGate) {
                let v = curr_shape[0] * curr_shape[1] * curr_shape[2];
                let flat = g.reshape(gate_up, vec![v])?;
                let rep = g.repeat_each(flat, c_curr)?;
                g.reshape(rep, curr_shape.clone())?
            } else {
                gate_up
            };
            let proj = g.linear(h_prev, bound.node(p.proj_w), bound.node(p.proj_b))?;
            let up_prev = g.trilinear_upsample(proj)?;

            let gated_prev = g.mul(gate_full, up_prev)?;
            let neg = g.scale(gate_full, -S::one())?;
            let inv_gate = g.add_scalar(neg, S::one())?;
            let gated_curr = g.mul(inv_gate, h_curr)?;
            let fused = g.add(gated_prev, gated_curr)?;

            let node = if matches!(variant, FusionVariant::ChannelGateDw) {
                let k = p.smooth_kernel.ok_or_else(|| Error::Config("missing smoothing kernel".into()))?;
                let sm = g.dwconv3d(fused, bound.node(k))?;
                g.layernorm(sm, LN_EPS)?
            } else {
                fused
            };
            Ok(FusionOut { node, gate: Some(gate_value) })
        }
    }
}

pub struct SceneInputs<'a, S> {
    pub features: &'a [Vec<DenseGrid<S>>],
    pub cameras: &'a [CameraModel<S>],
}

/// sigma_min tables of every cross layer in visit order, for frozen-bias
/// gradient verification.
pub enum HeadBias<'a, S> {
    Live,
    Frozen(&'a [SigmaTrace<S>]),
}

pub struct HeadForward<S> {
    /// Per-scale logits, shape (X_s, Y_s, Z_s, n_classes).
    pub logits: Vec<NodeId>,
    /// Per-scale output grids (X, Y, Z, C) after fusion.
    pub scale_outputs: Vec<NodeId>,
    /// Coarse-resolution gate values per transition (when the variant gates).
    pub gates: Vec<Option<DenseGrid<S>>>,
    /// Cross-attention invocations per scale.
    pub cross_calls: Vec<usize>,
    /// sigma traces of each cross layer in visit order.
    pub sigma_traces: Vec<SigmaTrace<S>>,
}

pub fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &HeadConfig,
    params: &OccHeadParams,
    bound: &Binding,
    inputs: &SceneInputs<'_, S>,
    bias: HeadBias<'_, S>,
) -> Result<HeadForward<S>> {
    cfg.validate()?;
    let mut logits = Vec::with_capacity(3);
    let mut scale_outputs = Vec::with_capacity(3);
    let mut gates = Vec::with_capacity(2);
    let mut cross_calls = vec![0usize; 3];
    let mut sigma_traces: Vec<SigmaTrace<S>> = Vec::new();
    let mut cross_visit = 0usize;

    let mut h = bound.node(params.embedding);
    let mut prev_output: Option<NodeId> = None;
    for (si, spec) in cfg.scales.iter().enumerate() {
        let dims = spec.dims;
        let v_count = dims[0] * dims[1] * dims[2];
        let pc = cfg.pada_for_scale(si);
        let refs = cfg.reference_points::<S>(si);
        if si > 0 {
            let split = &params.splits[si - 1];
            h = patch_split(g, h, split, bound, spec.channels)?;
        }
        for (bi, kind) in spec.blocks.iter().enumerate() {
            match (&params.blocks[si][bi], kind) {
                (BlockParams::Cross(layer), BlockKind::Cross) => {
                    let flat = g.reshape(h, vec![v_count, spec.channels])?;
                    let mode = match &bias {
                        HeadBias::Live => BiasMode::Live,
                        HeadBias::Frozen(traces) => BiasMode::Frozen(&traces[cross_visit]),
                    };
                    let out =
                        pada_layer(g, flat, &refs, inputs.features, inputs.cameras, layer, bound, &pc, mode)?;
                    sigma_traces.push(out.sigma_trace);
                    cross_visit += 1;
                    cross_calls[si] += 1;
                    h = g.reshape(out.node, vec![dims[0], dims[1], dims[2], spec.channels])?;
                }
                (BlockParams::Conv(conv), BlockKind::Conv) => {
                    h = conv_block(g, h, conv, bound)?;
                }
                _ => return Err(Error::Config("block parameter/schedule mismatch".into())),
            }
        }
        if si > 0 {
            let fused = coarse_gated_fuse(
                g,
                prev_output.expect("previous scale exists"),
                h,
                params.fusions[si - 1].as_ref(),
                bound,
                if si == 1 && !cfg.fuse_s0_s1 { FusionVariant::None } else { cfg.fusion },
            )?;
            gates.push(fused.gate);
            h = fused.node;
        }
        prev_output = Some(h);
        scale_outputs.push(h);
        let cls = &params.classifiers[si];
        let lin = g.linear(h, bound.node(cls.w), bound.node(cls.b))?;
        logits.push(g.reshape(lin, vec![dims[0], dims[1], dims[2], cfg.n_classes])?);
    }
    Ok(HeadForward { logits, scale_outputs, gates, cross_calls, sigma_traces })
}

/// Table-7-style three-scale schedule with dims and channels supplied by the
/// caller (the paper's dims or the toy harness dims).
pub fn standard_scales(fine_dims: [usize; 3], channels: [usize; 3]) -> Result<Vec<ScaleSpec>> {
    for d in fine_dims {
        if d % 4 != 0 && d != 4 {
            return Err(Error::Config(format!("fine dims {fine_dims:?} must be divisible by 4")));
        }
    }
    Ok(vec![
        ScaleSpec {
            dims: [fine_dims[0] / 4, fine_dims[1] / 4, fine_dims[2] / 4],
            channels: channels[0],
            blocks: vec![BlockKind::Cross, BlockKind::Conv, BlockKind::Cross, BlockKind::Conv],
        },
        ScaleSpec {
            dims: [fine_dims[0] / 2, fine_dims[1] / 2, fine_dims[2] / 2],
            channels: channels[1],
            blocks: vec![BlockKind::Cross, BlockKind::Conv, BlockKind::Conv],
        },
        ScaleSpec {
            dims: fine_dims,
            channels: channels[2],
            blocks: vec![BlockKind::Conv, BlockKind::Conv],
        },
    ])
}

#[cfg(test)]
mod tests;
