//! Analytic multiply-accumulate accounting for the fusion variants and the
//! attention path.
//!
//! Convention (embedded in every report): 1 MAC = 2 FLOPs, bias adds counted
//! as 1 FLOP per output element, activations / normalizations / elementwise
//! blends ignored, trilinear upsampling counted as zero.

use serde::Serialize;

use crate::decoder::FusionVariant;
use crate::error::{Error, Result};
use crate::pada::PadaConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CONVENTION: &str = "1 MAC = 2 FLOPs; bias adds counted; activations, normalizations and \
elementwise blends ignored; trilinear upsampling counted as 0";

#[derive(Debug, Clone, Serialize)]
pub struct FlopItem {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub title: String,
    pub convention: String,
    pub items: Vec<FlopItem>,
    pub total: u64,
    pub note: Option<String>,
}

impl FlopReport {
    fn new(title: impl Into<String>, items: Vec<FlopItem>, note: Option<String>) -> Self {
        let total = items.iter().map(|i| i.flops).sum();
        Self { title: title.into(), convention: CONVENTION.to_string(), items, total, note }
    }

    pub fn giga(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Aligned plain-text table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{}\n", self.title));
        let width = self.items.iter().map(|i| i.name.len()).max().unwrap_or(4).max(5);
        for item in &self.items {
            out.push_str(&format!(
                "  {:<width$}  {:>16}  ({:.4} G)\n",
                item.name,
                item.flops,
                item.flops as f64 / 1e9,
                width = width
            ));
        }
        out.push_str(&format!("  {:<width$}  {:>16}  ({:.4} G)\n", "total", self.total, self.giga(), width = width));
        if let Some(n) = &self.note {
            out.push_str(&format!("  note: {n}\n"));
        }
        out
    }
}

/// Dimensions of one scale transition. Defaults are the S1->S2 transition at
/// full dims: 100x100x8 -> 200x200x16 voxels, 256 -> 64 channels.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FusionDims {
    pub coarse_voxels: u64,
    pub fine_voxels: u64,
    pub c_in: u64,
    pub c_out: u64,
}

impl Default for FusionDims {
    fn default() -> Self {
        Self { coarse_voxels: 80_000, fine_voxels: 640_000, c_in: 256, c_out: 64 }
    }
}

fn macs(n: u64) -> u64 {
    2 * n
}

/// Itemized cost of one fusion variant under the documented convention.
pub fn count_fusion_variant(variant: FusionVariant, dims: FusionDims) -> Result<FlopReport> {
    let FusionDims { coarse_voxels, fine_voxels, c_in, c_out } = dims;
    let projection = FlopItem {
        name: format!("projection mlp {c_in}->{c_out} @ coarse"),
        flops: macs(coarse_voxels * c_in * c_out) + coarse_voxels * c_out,
    };
    let upsample = FlopItem { name: "trilinear upsampling".into(), flops: 0 };
    let title = format!("fusion variant: {}", variant.name());
    match variant {
        FusionVariant::None => Ok(FlopReport::new(title, vec![], Some("no cross-scale connection".into()))),
        FusionVariant::DirectAdd => Ok(FlopReport::new(
            title,
            vec![projection, upsample],
            Some("elementwise add ignored per convention".into()),
        )),
        FusionVariant::ScalarGate => {
            let gate = FlopItem {
                name: format!("scalar gate mlp {c_in}->1 @ coarse"),
                flops: macs(coarse_voxels * c_in) + coarse_voxels,
            };
            Ok(FlopReport::new(title, vec![projection, gate, upsample], None))
        }
        FusionVariant::ChannelGate | FusionVariant::ChannelGateDw => {
            let hidden = (c_in / 4).max(1);
            let gate = FlopItem {
                name: format!("channel gate mlp {c_in}->{hidden}->{c_out} @ coarse"),
                flops: macs(coarse_voxels * (c_in * hidden + hidden * c_out))
                    + coarse_voxels * (hidden + c_out),
            };
            let mut items = vec![projection, gate, upsample];
            if matches!(variant, FusionVariant::ChannelGateDw) {
                items.push(FlopItem {
                    name: format!("depthwise conv 3x3x3 ({c_out} ch) @ fine"),
                    flops: macs(fine_voxels * c_out * 27),
                });
            }
            Ok(FlopReport::new(title, items, None))
        }
        FusionVariant::Unet => {
            let deconv = FlopItem {
                name: format!("transposed conv 2x2x2 stride 2 {c_in}->{c_out} @ fine"),
                flops: macs(fine_voxels * c_in * c_out) + fine_voxels * c_out,
            };
            let conv = FlopItem {
                name: format!("conv 3x3x3 {c_out}->{c_out} @ fine"),
                flops: macs(fine_voxels * c_out * c_out * 27) + fine_voxels * c_out,
            };
            Ok(FlopReport::new(
                title,
                vec![deconv, conv],
                Some(
                    "channel widths of the reference decoder are our reading; the published ~73.4G \
                     figure is not reproduced exactly under this convention"
                        .into(),
                ),
            ))
        }
    }
}

/// All six variants at the given transition dims.
pub fn all_fusion_variants(dims: FusionDims) -> Result<Vec<FlopReport>> {
    FusionVariant::all().iter().map(|v| count_fusion_variant(*v, dims)).collect()
}

/// Cost of one PA-DA layer: `n_queries` voxel queries attending into
/// `n_cameras` cameras with per-level feature maps `level_dims` (H, W).
pub fn count_pada_layer(
    cfg: &PadaConfig,
    n_queries: u64,
    n_cameras: u64,
    level_dims: &[(u64, u64)],
) -> Result<FlopReport> {
    cfg.validate()?;
    if level_dims.len() != cfg.n_levels {
        return Err(Error::Config(format!(
            "{} level dims for {} levels",
            level_dims.len(),
            cfg.n_levels
        )));
    }
    let title = format!("pa-da layer: {n_queries} queries, {n_cameras} cameras");
    if n_cameras == 0 {
        return Ok(FlopReport::new(title, vec![], Some("no cameras: the layer contributes nothing".into())));
    }
    let c = cfg.query_dim as u64;
    let cf = cfg.feature_dim as u64;
    let (h, l, k) = (cfg.n_heads as u64, cfg.n_levels as u64, cfg.n_points as u64);
    let hlk = h * l * k;
    let d_head = cfg.head_dim() as u64;
    let q = n_queries;
    let n = n_cameras;
    let map_pixels: u64 = level_dims.iter().map(|&(hh, ww)| hh * ww).sum();

    let items = vec![
        FlopItem {
            name: format!("offset mlp {c}->{c}->{}", 3 * hlk),
            flops: macs(q * (c * c + c * 3 * hlk)) + q * (c + 3 * hlk),
        },
        FlopItem {
            name: format!("attention logits {c}->{hlk}"),
            flops: macs(q * c * hlk) + q * hlk,
        },
        FlopItem {
            name: format!("value projection {cf}->{c} over maps"),
            flops: macs(n * map_pixels * cf * c) + n * map_pixels * c,
        },
        FlopItem {
            name: "bilinear samples (8 MACs/sample/channel)".into(),
            flops: macs(q * n * hlk * d_head * 8),
        },
        FlopItem {
            name: "weighted aggregation".into(),
            flops: macs(q * n * hlk * d_head),
        },
        FlopItem {
            name: format!("output projection {c}->{c} per camera"),
            flops: macs(q * n * c * c) + q * n * c,
        },
        FlopItem {
            name: format!("geo embed mlp 6->{c}->{c} per camera"),
            flops: macs(q * n * (6 * c + c * c)) + q * n * 2 * c,
        },
        FlopItem {
            name: format!("gate mlp {}->{c}->{c} per camera", 2 * c),
            flops: macs(q * n * (2 * c * c + c * c)) + q * n * 2 * c,
        },
        FlopItem {
            name: "gated fusion across cameras".into(),
            flops: macs(q * n * c) + q * c,
        },
    ];
    Ok(FlopReport::new(title, items, None))
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    /// (module prefix, parameter count), in first-registration order.
    pub items: Vec<(String, u64)>,
    pub total: u64,
    pub trainable: u64,
}

impl ParamReport {
    pub fn render(&self) -> String {
        let mut out = String::from("trainable parameters\n");
        let width = self.items.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        for (name, n) in &self.items {
            out.push_str(&format!("  {:<width$}  {:>12}\n", name, n, width = width));
        }
        out.push_str(&format!("  {:<width$}  {:>12}\n", "total", self.total, width = width));
        out.push_str(&format!("  {:<width$}  {:>12}\n", "trainable", self.trainable, width = width));
        out
    }
}

/// Per-module parameter counts, grouped by the prefix before the first dot.
/// Modules whose prefix appears in `frozen_prefixes` are excluded from the
/// trainable total.
pub fn report_parameters<S: Scalar>(store: &ParamStore<S>, frozen_prefixes: &[&str]) -> ParamReport {
    let mut items: Vec<(String, u64)> = Vec::new();
    let mut trainable = 0u64;
    for (_, name, value) in store.iter() {
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        let n = value.numel() as u64;
        match items.iter_mut().find(|(p, _)| *p == prefix) {
            Some((_, acc)) => *acc += n,
            None => items.push((prefix.clone(), n)),
        }
        if !frozen_prefixes.contains(&prefix.as_str()) {
            trainable += n;
        }
    }
    let total = items.iter().map(|(_, n)| n).sum();
    ParamReport { items, total, trainable }
}
