use crate::adjacency::AdjacencyConfig;
use crate::attention::MaskMode;
use crate::error::{Error, Result};
use crate::kv;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub n_groups: usize,
    pub n_dmb_per_group: usize,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub scale: usize,
    pub mlp_ratio: f64,
    pub adjacency: AdjacencyConfig,
    pub gvt_mask_mode: MaskMode,
    /// Drop the Swin layer from every block (graph layers only).
    pub disable_stl: bool,
    /// Drop the graph layer from every block (Swin-only baseline).
    pub disable_gvt: bool,
    /// Per-token linear Q/K/V instead of depthwise-separable convs.
    pub plain_linear_qkv: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetConfig {
    /// Desk-scale default: 2 groups of 2 blocks, 32 channels, 4×4 windows, ×2.
    pub fn toy() -> Self {
        Self {
            n_groups: 2,
            n_dmb_per_group: 2,
            channels: 32,
            window: 4,
            heads: 2,
            scale: 2,
            mlp_ratio: 4.0,
            adjacency: AdjacencyConfig::default(),
            gvt_mask_mode: MaskMode::Hadamard,
            disable_stl: false,
            disable_gvt: false,
            plain_linear_qkv: false,
        }
    }

    /// Smallest config used for end-to-end gradient checks.
    pub fn grad_check() -> Self {
        Self {
            n_groups: 1,
            n_dmb_per_group: 1,
            channels: 8,
            ..Self::toy()
        }
    }

    /// Full-size settings: 6 groups, window 8, 6 heads.
    pub fn full_scale(scale: usize) -> Self {
        Self {
            n_groups: 6,
            n_dmb_per_group: 3,
            channels: 180,
            window: 8,
            heads: 6,
            scale,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Cyclic shift used by odd-numbered Swin layers in a group.
    pub fn shift_size(&self) -> usize {
        self.window / 2
    }

    pub fn upsample_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_groups", self.n_groups),
            ("n_dmb_per_group", self.n_dmb_per_group),
            ("channels", self.channels),
            ("window", self.window),
            ("heads", self.heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("channels {} not divisible by heads {}", self.channels, self.heads),
            ));
        }
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::config("scale", format!("{} is not one of 2, 4, 8", self.scale)));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::config("mlp_ratio", "must be finite and > 0"));
        }
        if self.disable_stl && self.disable_gvt {
            return Err(Error::config("no_stl", "cannot disable both layer kinds"));
        }
        self.adjacency.validate()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.adjacency;
        vec![
            ("n_groups", self.n_groups.to_string()),
            ("n_dmb_per_group", self.n_dmb_per_group.to_string()),
            ("channels", self.channels.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("scale", self.scale.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("threshold", a.threshold.to_string()),
            ("minkowski_p", a.p.to_string()),
            ("normalize_tokens", a.normalize_tokens.to_string()),
            ("adjacency_compare", a.comparison.to_string()),
            ("self_loops", a.self_loops.to_string()),
            ("mask_mode", self.gvt_mask_mode.to_string()),
            ("no_stl", self.disable_stl.to_string()),
            ("no_gvt", self.disable_gvt.to_string()),
            ("plain_qkv", self.plain_linear_qkv.to_string()),
        ]
    }

    /// Applies one key; returns `Ok(false)` when the key is not a network key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.adjacency;
        match key {
            "n_groups" => self.n_groups = kv::parse_value(key, value)?,
            "n_dmb_per_group" => self.n_dmb_per_group = kv::parse_value(key, value)?,
            "channels" => self.channels = kv::parse_value(key, value)?,
            "window" => self.window = kv::parse_value(key, value)?,
            "heads" => self.heads = kv::parse_value(key, value)?,
            "scale" => self.scale = kv::parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = kv::parse_value(key, value)?,
            "threshold" => a.threshold = kv::parse_value(key, value)?,
            "minkowski_p" => a.p = value.parse()?,
            "normalize_tokens" => a.normalize_tokens = kv::parse_bool(key, value)?,
            "adjacency_compare" => a.comparison = value.parse()?,
            "self_loops" => a.self_loops = kv::parse_bool(key, value)?,
            "mask_mode" => self.gvt_mask_mode = value.parse()?,
            "no_stl" => self.disable_stl = kv::parse_bool(key, value)?,
            "no_gvt" => self.disable_gvt = kv::parse_bool(key, value)?,
            "plain_qkv" => self.plain_linear_qkv = kv::parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.to_pairs())
    }

    /// Parses text holding exactly the network keys; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (k, v) in kv::parse(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::config(k, "unknown key"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
