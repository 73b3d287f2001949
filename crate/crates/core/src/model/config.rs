use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::NormKind;

/// Which layers carry bias vectors or learnable normalization affines.
///
/// The ending gate stack always has biases on both separable stages and no
/// affine on the gate normalizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamLayout {
    pub convblock_norm_affine: bool,
    pub gateblock_norm_affine: bool,
    pub conv_bias: bool,
    pub gateblock_depthwise_bias: bool,
    pub gateblock_pointwise_bias: bool,
    pub collapse_depthwise_bias: bool,
    pub collapse_pointwise_bias: bool,
    pub output_bias: bool,
}

impl Default for ParamLayout {
    fn default() -> Self {
        Self {
            convblock_norm_affine: false,
            gateblock_norm_affine: false,
            conv_bias: true,
            gateblock_depthwise_bias: true,
            gateblock_pointwise_bias: true,
            collapse_depthwise_bias: true,
            collapse_pointwise_bias: true,
            output_bias: true,
        }
    }
}

impl ParamLayout {
    pub(crate) fn flags(&self) -> [bool; 8] {
        [
            self.convblock_norm_affine,
            self.gateblock_norm_affine,
            self.conv_bias,
            self.gateblock_depthwise_bias,
            self.gateblock_pointwise_bias,
            self.collapse_depthwise_bias,
            self.collapse_pointwise_bias,
            self.output_bias,
        ]
    }

    pub(crate) fn from_flags(f: [bool; 8]) -> Self {
        Self {
            convblock_norm_affine: f[0],
            gateblock_norm_affine: f[1],
            conv_bias: f[2],
            gateblock_depthwise_bias: f[3],
            gateblock_pointwise_bias: f[4],
            collapse_depthwise_bias: f[5],
            collapse_pointwise_bias: f[6],
            output_bias: f[7],
        }
    }
}

/// Declarative description of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Input line height in pixels; must be a power of two of at least 8.
    pub input_height: usize,
    pub convblock_filters: Vec<usize>,
    /// Nominal width of each gate block. The first two pool 2×2, the rest
    /// 2×1; together they must bring the height down to 2.
    pub gateblock_filters: Vec<usize>,
    pub ending_gate_count: usize,
    pub ending_channels: usize,
    /// Number of characters, excluding the CTC blank.
    pub charset_size: usize,
    pub dropout_p: f64,
    pub noise_std: f64,
    pub norm_kind: NormKind,
    /// Replace an indivisible group count by the largest divisor of the
    /// channel count not exceeding it.
    pub group_norm_fallback: bool,
    pub layout: ParamLayout,
    /// Multiplier on the He-uniform bound for weight initialization.
    pub init_gain: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            convblock_filters: vec![32, 64],
            gateblock_filters: vec![64, 128, 128, 256, 256],
            ending_gate_count: 6,
            ending_channels: 256,
            charset_size: 79,
            dropout_p: 0.4,
            noise_std: 0.01,
            norm_kind: NormKind::Instance,
            group_norm_fallback: false,
            layout: ParamLayout::default(),
            init_gain: DEFAULT_INIT_GAIN,
        }
    }
}

pub const MAX_ENDING_GATES: usize = 6;

/// Full He scaling leaves the deep normalized stack unable to train at the
/// usual learning rate, so weights start smaller.
pub const DEFAULT_INIT_GAIN: f64 = 0.15;

impl ArchitectureConfig {
    /// Default widths for a given input height: one gate block per halving
    /// down to height 2, reusing the last width for extra blocks.
    pub fn for_height(input_height: usize) -> Self {
        let base = Self::default();
        let blocks = gateblock_count_for_height(input_height);
        let mut widths = base.gateblock_filters.clone();
        widths.resize(blocks.max(1), *widths.last().unwrap());
        widths.truncate(blocks.max(1));
        Self { input_height, gateblock_filters: widths, ..base }
    }

    /// Same topology with every channel width divided by `factor`, keeping
    /// widths even and at least 2.
    pub fn scaled_widths(&self, factor: usize) -> Self {
        let scale = |c: usize| ((c / factor).max(2) + 1) / 2 * 2;
        Self {
            convblock_filters: self.convblock_filters.iter().map(|&c| scale(c)).collect(),
            gateblock_filters: self.gateblock_filters.iter().map(|&c| scale(c)).collect(),
            ending_channels: scale(self.ending_channels),
            ..self.clone()
        }
    }

    pub fn with_ending_gates(&self, count: usize) -> Self {
        Self { ending_gate_count: count, ..self.clone() }
    }

    pub fn classes(&self) -> usize {
        self.charset_size + 1
    }

    /// Output frames for an input of width `w`.
    pub fn frames(w: usize) -> usize {
        w / 2 / 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &'static str, reason: String| Err(ModelError::Config { field, reason });
        if self.input_height < 8 || !self.input_height.is_power_of_two() {
            return bad("input_height", format!("{} is not a power of two ≥ 8", self.input_height));
        }
        if self.convblock_filters.is_empty() || self.convblock_filters.contains(&0) {
            return bad("convblock_filters", "need at least one positive width".into());
        }
        if self.gateblock_filters.is_empty() || self.gateblock_filters.contains(&0) {
            return bad("gateblock_filters", "need at least one positive width".into());
        }
        if !(1..=MAX_ENDING_GATES).contains(&self.ending_gate_count) {
            return bad("ending_gate_count", format!("{} outside 1..=6", self.ending_gate_count));
        }
        if self.ending_channels == 0 {
            return bad("ending_channels", "must be positive".into());
        }
        if self.charset_size == 0 {
            return bad("charset_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p", format!("{} outside [0, 1)", self.dropout_p));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std", format!("{} is negative", self.noise_std));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return bad("init_gain", format!("{} is not positive", self.init_gain));
        }
        if let NormKind::Group(0) = self.norm_kind {
            return bad("norm_kind", "group count must be positive".into());
        }
        Ok(())
    }

    /// Stable digest of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        crate::digest_hex(&toml::to_string(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gate blocks needed to bring `height` down to 2.
pub fn gateblock_count_for_height(height: usize) -> usize {
    let mut h = height;
    let mut n = 0;
    while h > 2 {
        h /= 2;
        n += 1;
    }
    n
}
