//! Plain-text (TOML) training configuration.
//!
//! ```toml
//! seed = 0
//! variant = "frames16"
//! lr_scale = 100.0
//!
//! [model]
//! d_model = 32
//! n_layers = 2
//!
//! [k_target]
//! lambda_k = 0.0105
//!
//! [stages.3]
//! max_steps = 400
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{default_stage_configs, AdamWConfig, StageConfig, TrainOptions, Variant, DESK_LR_SCALE};
use crate::error::{Error, Result};
use crate::objectives::KTargetConfig;
use crate::selector::{KDecode, SelectorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub frame_position_embeddings: bool,
    pub k_decode: KDecode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = SelectorConfig::compact(1, 1, 1);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            dropout: c.dropout,
            frame_position_embeddings: c.frame_position_embeddings,
            k_decode: c.k_decode,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverride {
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KTargetOverride {
    pub lambda_k: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    /// Evaluate only every `k_stride`-th count (always including 1).
    pub k_stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub w_rank: f64,
    pub model: ModelConfig,
    pub k_target: KTargetOverride,
    /// Keyed by stage number.
    pub stages: BTreeMap<String, StageOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::default(),
            lr_scale: DESK_LR_SCALE,
            weight_decay: AdamWConfig::default().weight_decay,
            w_rank: 1.0,
            model: ModelConfig::default(),
            k_target: KTargetOverride::default(),
            stages: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn selector_config(&self, d_v: usize, d_t: usize) -> Result<SelectorConfig> {
        let m = &self.model;
        let cfg = SelectorConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout: m.dropout,
            frame_position_embeddings: m.frame_position_embeddings,
            k_decode: m.k_decode,
            max_frames: self.variant.n_frames(),
            ..SelectorConfig::compact(d_v, d_t, self.variant.k_max())
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage_configs(&self) -> Result<Vec<StageConfig>> {
        let mut cfgs = default_stage_configs(self.variant);
        for (key, o) in &self.stages {
            let stage: u8 = key
                .parse()
                .ok()
                .filter(|s| (1..=4).contains(s))
                .ok_or_else(|| Error::config(format!("unknown stage `{key}`")))?;
            let c = &mut cfgs[stage as usize - 1];
            if let Some(s) = o.max_steps {
                c.max_steps = s;
            }
            if let Some(b) = o.batch_size {
                c.batch_size = b;
            }
        }
        cfgs.iter().try_for_each(StageConfig::validate)?;
        Ok(cfgs)
    }

    pub fn k_target(&self) -> Result<KTargetConfig> {
        let k_max = self.variant.k_max();
        let mut cfg = KTargetConfig::for_k_max(k_max);
        let o = &self.k_target;
        if let Some(v) = o.lambda_k {
            cfg.lambda_k = v;
        }
        if let Some(v) = o.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = o.sigma {
            cfg.sigma = v;
        }
        if let Some(stride) = o.k_stride {
            if stride == 0 {
                return Err(Error::config("k_stride must be positive"));
            }
            cfg.k_grid = (1..=k_max).step_by(stride).collect();
        }
        cfg.validate(k_max)?;
        Ok(cfg)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        if !(self.lr_scale > 0.0) {
            return Err(Error::config("lr_scale must be positive"));
        }
        Ok(TrainOptions {
            lr_scale: self.lr_scale,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            k_target: Some(self.k_target()?),
            w_rank: self.w_rank,
            ..TrainOptions::default()
        })
    }
}
