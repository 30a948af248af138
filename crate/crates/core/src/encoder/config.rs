use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::aggregation::PoolMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Decoupled spatial/channel attention.
    Dcvit,
    /// Joint attention over all `C·N` tokens.
    Mcvit,
}

/// Residual wiring of an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residual {
    /// `x + MLP(LN₂(x + A(LN₁ x)))`
    Literal,
    /// `u = x + A(LN₁ x)`, then `u + MLP(LN₂ u)`
    Canonical,
}

/// Architectural hyperparameters. Layer indices in `channel_layers` are
/// 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(alias = "C_max")]
    pub c_max: usize,
    #[serde(alias = "H_img")]
    pub image_size: usize,
    #[serde(alias = "P")]
    pub patch_size: usize,
    #[serde(alias = "D")]
    pub dim: usize,
    #[serde(alias = "L")]
    pub depth: usize,
    #[serde(alias = "H")]
    pub heads: usize,
    /// Layers with channel attention.
    #[serde(alias = "M")]
    pub channel_layers: BTreeSet<usize>,
    pub alpha_init: f64,
    pub mlp_ratio: f64,
    pub use_channel_embed: bool,
    pub use_cls_per_channel: bool,
    pub g_sp: PoolMode,
    pub g_ch: PoolMode,
    /// Pool all tokens of a sample at once with `g_sp`; `g_ch` is unused.
    pub joint_pooling: bool,
    pub num_classes: usize,
    pub block_kind: BlockKind,
    /// Pre-norm before attention and MLP plus a final norm before pooling.
    pub use_norm: bool,
    pub residual: Residual,
}

impl Default for ModelConfig {
    /// ViT-S/16 at 224 px.
    fn default() -> Self {
        Self {
            c_max: 8,
            image_size: 224,
            patch_size: 16,
            dim: 384,
            depth: 12,
            heads: 6,
            channel_layers: BTreeSet::from([4, 6, 8]),
            alpha_init: 0.1,
            mlp_ratio: 4.0,
            use_channel_embed: true,
            use_cls_per_channel: false,
            g_sp: PoolMode::Abmil,
            g_ch: PoolMode::Max,
            joint_pooling: false,
            num_classes: 2,
            block_kind: BlockKind::Dcvit,
            use_norm: true,
            residual: Residual::Literal,
        }
    }
}

impl ModelConfig {
    /// Tokens per channel from patching, without the cls token.
    pub fn patches_per_channel(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per channel as seen by the blocks.
    pub fn tokens_per_channel(&self) -> usize {
        self.patches_per_channel() + usize::from(self.use_cls_per_channel)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn abmil_hidden(&self) -> usize {
        (self.dim / 2).max(1)
    }

    /// Whether 0-based layer `l` mixes in channel attention.
    pub fn has_channel_attention(&self, l: usize) -> bool {
        self.block_kind == BlockKind::Dcvit && self.channel_layers.contains(&(l + 1))
    }

    /// Number of α scalars the model carries.
    pub fn alpha_count(&self) -> usize {
        (0..self.depth).filter(|&l| self.has_channel_attention(l)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.c_max == 0 || self.dim == 0 || self.heads == 0 || self.num_classes == 0 {
            return bad("c_max, dim, heads and num_classes must be positive".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if let Some(&l) = self.channel_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return bad(format!("channel layer {l} outside 1..={}", self.depth));
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_hidden() >= 1) {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.g_sp == PoolMode::Cls && !self.use_cls_per_channel {
            return bad("g_sp = cls requires use_cls_per_channel".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_vit_small() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.depth, c.dim, c.heads), (12, 384, 6));
        assert_eq!(c.patches_per_channel(), 196);
        assert_eq!(c.alpha_count(), 3);
        assert!(c.has_channel_attention(3) && !c.has_channel_attention(4));
    }

    #[test]
    fn json_round_trip_and_aliases() {
        let c = ModelConfig::default();
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let c: ModelConfig = serde_json::from_str(r#"{"D": 8, "L": 2, "H": 2, "M": [2], "g_ch": "mean"}"#).unwrap();
        assert_eq!((c.dim, c.depth, c.heads), (8, 2, 2));
        assert_eq!(c.g_ch, PoolMode::Mean);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"depthh": 2}"#).is_err());
    }

    #[test]
    fn validation_errors() {
        let base = ModelConfig::default();
        for c in [
            ModelConfig { patch_size: 15, ..base.clone() },
            ModelConfig { heads: 5, ..base.clone() },
            ModelConfig { channel_layers: BTreeSet::from([13]), ..base.clone() },
            ModelConfig { channel_layers: BTreeSet::from([0]), ..base.clone() },
            ModelConfig { g_sp: PoolMode::Cls, ..base.clone() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let c = ModelConfig { g_sp: PoolMode::Cls, use_cls_per_channel: true, ..base };
        c.validate().unwrap();
        assert_eq!(c.tokens_per_channel(), 197);
    }

    #[test]
    fn mcvit_has_no_alphas() {
        let c = ModelConfig { block_kind: BlockKind::Mcvit, ..ModelConfig::default() };
        assert_eq!(c.alpha_count(), 0);
    }
}
