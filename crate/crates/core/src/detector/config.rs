use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};

/// Detection strides, coarse to fine. Scale index `s` always refers to this order.
pub const STRIDES: [usize; 3] = [32, 16, 8];
pub const ANCHORS_PER_SCALE: usize = 3;

/// Anchor set for a 416 input, small to large.
pub const YOLOV3_ANCHORS: [[f64; 2]; 9] = [
    [10.0, 13.0],
    [16.0, 30.0],
    [33.0, 23.0],
    [30.0, 61.0],
    [62.0, 45.0],
    [59.0, 119.0],
    [116.0, 90.0],
    [156.0, 198.0],
    [373.0, 326.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Darknet-53.
    Full,
    /// Six strided stages, at most 128 channels.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_residual: bool,
    pub use_channel_attention: bool,
    pub use_residual_attention: bool,
    pub use_multi_scale_attention: bool,
    pub use_domain: bool,
    pub num_classes: usize,
    pub num_domains: usize,
    pub input_size: usize,
    pub backbone: Backbone,
    /// Nine `(width, height)` pairs in input pixels, small to large.
    pub anchors: Vec<[f64; 2]>,
    pub reduction_ratio: usize,
    pub domain_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_residual: false,
            use_channel_attention: false,
            use_residual_attention: false,
            use_multi_scale_attention: false,
            use_domain: false,
            num_classes: 5,
            num_domains: 7,
            input_size: 416,
            backbone: Backbone::Full,
            anchors: YOLOV3_ANCHORS.to_vec(),
            reduction_ratio: 16,
            domain_channels: 64,
        }
    }
}

impl ModelConfig {
    /// Toy backbone with the default anchors rescaled to `input_size`.
    pub fn toy(input_size: usize) -> Self {
        let k = input_size as f64 / 416.0;
        ModelConfig {
            backbone: Backbone::Toy,
            input_size,
            anchors: YOLOV3_ANCHORS.iter().map(|[w, h]| [w * k, h * k]).collect(),
            domain_channels: 32,
            ..Default::default()
        }
    }

    /// Every violated invariant, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(MarsError::Config(errs))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            errs.push(format!(
                "model.input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if self.anchors.len() != 9 {
            errs.push(format!(
                "model.anchors must list exactly 9 (width, height) pairs, got {}",
                self.anchors.len()
            ));
        }
        if self
            .anchors
            .iter()
            .any(|[w, h]| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0))
        {
            errs.push("model.anchors must be positive and finite".into());
        }
        if self.num_classes == 0 {
            errs.push("model.num_classes must be positive".into());
        }
        if self.num_domains == 0 {
            errs.push("model.num_domains must be positive".into());
        }
        if self.reduction_ratio == 0 {
            errs.push("model.reduction_ratio must be positive".into());
        }
        if self.domain_channels == 0 {
            errs.push("model.domain_channels must be positive".into());
        }
        if self.use_residual_attention && self.use_residual && self.use_channel_attention {
            errs.push(
                "model.use_residual_attention cannot be combined with both use_residual and \
                 use_channel_attention at the same site"
                    .into(),
            );
        }
        errs
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_SCALE * self.outputs_per_anchor()
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.input_size / s)
    }

    /// Anchors used at scale `s` (0 = stride 32).
    pub fn scale_anchors(&self, s: usize) -> [[f64; 2]; 3] {
        let base = 3 * (2 - s);
        [self.anchors[base], self.anchors[base + 1], self.anchors[base + 2]]
    }

    /// Short human-readable description of the enabled blocks.
    pub fn variant_label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_domain {
            parts.push("+Domain ".to_string());
        }
        let mut blocks = Vec::new();
        if self.use_residual {
            blocks.push("+Residual");
        }
        if self.use_channel_attention {
            blocks.push("+Channel Attention");
        }
        if self.use_residual_attention {
            blocks.push("+Residual Attention");
        }
        if self.use_multi_scale_attention {
            blocks.push("+Multi-Scale Attention");
        }
        if parts.is_empty() && blocks.is_empty() {
            return "Baseline (YOLOv3)".into();
        }
        let mut s = parts.concat();
        s.push_str(&blocks.join(""));
        s.trim_end().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy(96).validate().unwrap();
        assert_eq!(ModelConfig::default().head_channels(), 30);
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(ModelConfig::default().grid_sizes(), [13, 26, 52]);
        assert_eq!(ModelConfig::toy(96).grid_sizes(), [3, 6, 12]);
        for k in 1..20 {
            let c = ModelConfig {
                input_size: 32 * k,
                ..Default::default()
            };
            assert_eq!(c.grid_sizes(), [k, 2 * k, 4 * k]);
        }
    }

    #[test]
    fn violations_are_all_listed() {
        let c = ModelConfig {
            input_size: 100,
            anchors: vec![[1.0, 1.0]; 8],
            use_residual: true,
            use_channel_attention: true,
            use_residual_attention: true,
            ..Default::default()
        };
        let v = c.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn coarse_scale_gets_large_anchors() {
        let c = ModelConfig::default();
        assert_eq!(c.scale_anchors(0)[0], [116.0, 90.0]);
        assert_eq!(c.scale_anchors(2)[0], [10.0, 13.0]);
    }

    #[test]
    fn labels() {
        let mut c = ModelConfig::default();
        assert_eq!(c.variant_label(), "Baseline (YOLOv3)");
        c.use_residual = true;
        c.use_channel_attention = true;
        c.use_multi_scale_attention = true;
        assert_eq!(
            c.variant_label(),
            "+Residual+Channel Attention+Multi-Scale Attention"
        );
        c.use_domain = true;
        assert_eq!(
            c.variant_label(),
            "+Domain +Residual+Channel Attention+Multi-Scale Attention"
        );
        c.use_residual = false;
        c.use_channel_attention = false;
        c.use_multi_scale_attention = false;
        assert_eq!(c.variant_label(), "+Domain");
    }
}
