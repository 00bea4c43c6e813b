//! Run configuration: one JSON-serializable struct wiring the scene
//! generator, rig, head dims, attention config, optimizer, and toggles.
//! Every field has a default, so partial config files work.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{standard_scales, FusionVariant, HeadConfig};
use crate::error::{Error, Result};
use crate::objective::LossToggles;
use crate::pada::PadaConfig;
use crate::synth::{GenParams, RigSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            lr_floor: 1e-6,
            warmup_steps: 50,
            grad_clip_norm: 35.0,
            batch_size: 1,
            steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the fixed random feature embedding (the frozen "encoder").
    pub embed_seed: u64,
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    pub n_classes: usize,
    pub fine_dims: [usize; 3],
    pub channels: [usize; 3],
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
    pub rig: RigSpec,
    pub scene_gen: GenParams,
    pub pada: PadaConfig,
    pub optim: OptimConfig,
    pub loss: LossToggles,
    pub label_smoothing: f64,
    pub scale_weights: [f64; 3],
    pub fusion: FusionVariant,
    pub fuse_s0_s1: bool,
    pub precision: Precision,
    pub data_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            embed_seed: 1234,
            n_train_scenes: 24,
            n_val_scenes: 6,
            n_classes: 6,
            fine_dims: [20, 20, 4],
            channels: [64, 64, 32],
            world_min: [-5.0, -5.0, 0.0],
            world_max: [5.0, 5.0, 2.0],
            rig: RigSpec::default(),
            scene_gen: GenParams::default(),
            pada: PadaConfig::default(),
            optim: OptimConfig::default(),
            loss: LossToggles::default(),
            label_smoothing: 0.1,
            scale_weights: [0.5, 0.75, 1.0],
            fusion: FusionVariant::ChannelGateDw,
            fuse_s0_s1: true,
            precision: Precision::F32,
            data_dir: "data".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.optim.learning_rate <= 0.0 || self.optim.lr_floor <= 0.0 || self.optim.grad_clip_norm <= 0.0
        {
            return Err(Error::Config("optimizer rates must be positive".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.n_classes < 2 || self.n_classes > 250 {
            return Err(Error::Config("n_classes out of range".into()));
        }
        if self.scene_gen.n_classes != self.n_classes {
            return Err(Error::Config("scene_gen.n_classes must match n_classes".into()));
        }
        if self.rig.feature_dim != self.pada.feature_dim {
            return Err(Error::Config("rig.feature_dim must match pada.feature_dim".into()));
        }
        if self.rig.level_dims.len() != self.pada.n_levels {
            return Err(Error::Config("rig.level_dims must match pada.n_levels".into()));
        }
        self.head_config()?.validate()
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        Ok(HeadConfig {
            scales: standard_scales(self.fine_dims, self.channels)?,
            world_min: self.world_min,
            world_max: self.world_max,
            n_classes: self.n_classes,
            pada: self.pada.clone(),
            fusion: self.fusion,
            fuse_s0_s1: self.fuse_s0_s1,
        })
    }

    /// Class names for reports: free, ground, then objN.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| match c {
                0 => "free".to_string(),
                1 => "ground".to_string(),
                n => format!("obj{n}"),
            })
            .collect()
    }
}
