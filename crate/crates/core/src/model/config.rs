use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone convolutions all use 3x3 kernels with one pixel of padding.
pub const CONV_KERNEL: usize = 3;

/// Network shape and regularization. `num_classes` is the letter count C;
/// zero means "take it from the dataset alphabet".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Widths of the hidden backbone layers; the last layer emits `feat_channels`.
    pub backbone_channels: Vec<usize>,
    /// One stride per backbone layer (`backbone_channels.len() + 1` entries).
    pub conv_strides: Vec<usize>,
    pub feat_channels: usize,
    pub attention_hidden: usize,
    pub pooled_height: usize,
    pub pooled_width: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub context_window: usize,
    pub dropout_encoder: f64,
    pub dropout_attention: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            frame_height: 64,
            frame_width: 64,
            backbone_channels: vec![8, 16, 16],
            conv_strides: vec![2, 2, 2, 2],
            feat_channels: 64,
            attention_hidden: 16,
            pooled_height: 4,
            pooled_width: 4,
            embed_dim: 256,
            encoder_layers: 2,
            heads: 2,
            ffn_hidden: 256,
            context_window: 5,
            dropout_encoder: 0.0,
            dropout_attention: 0.0,
            num_classes: 0,
        }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - CONV_KERNEL) / stride + 1
}

impl ModelConfig {
    /// Spatial size `(H, W)` of the backbone output.
    pub fn feat_grid(&self) -> (usize, usize) {
        self.conv_strides
            .iter()
            .fold((self.frame_height, self.frame_width), |(h, w), &s| {
                (conv_out(h, s), conv_out(w, s))
            })
    }

    /// Channel widths entering and leaving each backbone layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.in_channels];
        widths.extend(&self.backbone_channels);
        widths.push(self.feat_channels);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("model.num_classes must be >= 1".into());
        }
        if self.conv_strides.len() != self.backbone_channels.len() + 1 {
            return fail(format!(
                "model.conv_strides needs {} entries",
                self.backbone_channels.len() + 1
            ));
        }
        if self.conv_strides.contains(&0) {
            return fail("model.conv_strides must be positive".into());
        }
        let dims = [
            ("in_channels", self.in_channels),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("feat_channels", self.feat_channels),
            ("attention_hidden", self.attention_hidden),
            ("pooled_height", self.pooled_height),
            ("pooled_width", self.pooled_width),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("model.{name} must be >= 1"));
            }
        }
        if self.backbone_channels.contains(&0) {
            return fail("model.backbone_channels must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail("model.embed_dim must be divisible by model.heads".into());
        }
        let (h, w) = self.feat_grid();
        if self.pooled_height > h || self.pooled_width > w {
            return fail(format!(
                "pooled grid {}x{} exceeds feature grid {h}x{w}",
                self.pooled_height, self.pooled_width
            ));
        }
        for (name, p) in [
            ("dropout_encoder", self.dropout_encoder),
            ("dropout_attention", self.dropout_attention),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("model.{name} must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_and_validation() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..Default::default()
        };
        assert_eq!(cfg.feat_grid(), (4, 4));
        cfg.validate().unwrap();
        assert_eq!(cfg.layer_channels(), vec![(3, 8), (8, 16), (16, 16), (16, 64)]);
    }

    #[test]
    fn rejects_bad_configs() {
        let ok = ModelConfig {
            num_classes: 5,
            ..Default::default()
        };
        let bad = [
            ModelConfig { num_classes: 0, ..ok.clone() },
            ModelConfig { heads: 3, ..ok.clone() },
            ModelConfig { pooled_height: 5, ..ok.clone() },
            ModelConfig { conv_strides: vec![2, 2], ..ok.clone() },
            ModelConfig { dropout_encoder: 1.0, ..ok.clone() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
