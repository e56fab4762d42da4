//! Network configuration and the named, ordered parameter collection for the
//! two-stage pipeline (AUCT global color transform followed by LE local
//! enhancement).

pub mod auct;
pub mod le;
pub mod pipeline;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shared layer constants (frozen; not runtime-configurable).
pub const LRELU_SLOPE: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const IN_EPS: f32 = 1e-5;
pub const DROPOUT_RATE: f32 = 0.2;
pub const GUIDED_RADIUS: usize = 4;
pub const GUIDED_EPS: f32 = 1e-2;
/// Noise factor on the identity-seeded base-network init; keeps the
/// untrained global transform close to the identity map.
pub const BASE_INIT_NOISE: f32 = 0.25;

/// Configuration of the global color-transform stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuctConfig {
    /// 1x1 conv layers in the base network.
    pub n_layers: usize,
    /// Channels of the base network's hidden layers.
    pub base_channels: usize,
    /// CHM blocks and FCM blocks in the condition network (each).
    pub n_blocks: usize,
    /// Channels inside the condition blocks.
    pub cond_channels: usize,
    /// Length of the condition vector.
    pub cond_vector_dim: usize,
    /// The condition network consumes the full image downsampled by this.
    pub cond_downscale: usize,
}

impl Default for AuctConfig {
    fn default() -> Self {
        AuctConfig {
            n_layers: 3,
            base_channels: 128,
            n_blocks: 4,
            cond_channels: 32,
            cond_vector_dim: 128,
            cond_downscale: 4,
        }
    }
}

impl AuctConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!("n_layers {} < 2", self.n_layers)));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("n_blocks", self.n_blocks),
            ("cond_channels", self.cond_channels),
            ("cond_vector_dim", self.cond_vector_dim),
            ("cond_downscale", self.cond_downscale),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Output channels of base-network layer `i`.
    pub fn base_layer_out(&self, i: usize) -> usize {
        if i + 1 == self.n_layers {
            3
        } else {
            self.base_channels
        }
    }

    pub fn base_layer_in(&self, i: usize) -> usize {
        if i == 0 {
            3
        } else {
            self.base_channels
        }
    }

    /// Minimum extent of the condition-network input (needs `n_blocks`
    /// halvings with every intermediate extent >= 2).
    pub fn min_cond_extent(&self) -> usize {
        1 << self.n_blocks
    }

    /// Minimum extent of a full-resolution input.
    pub fn min_input_extent(&self) -> usize {
        self.min_cond_extent() * self.cond_downscale
    }
}

/// Configuration of the local-enhancement stage (three-level U-Net).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeConfig {
    /// Channels of the full-resolution feature; doubles per level.
    pub base_width: usize,
    /// Encoder/decoder levels; the architecture is built for 3.
    pub levels: usize,
    /// Predict a residual on top of the color-transformed input.
    pub residual_output: bool,
}

impl Default for LeConfig {
    fn default() -> Self {
        // base_width 16 keeps the full pipeline within its compute budget
        // (~479 GMAC at 3840x2160, ~370K parameters).
        LeConfig {
            base_width: 16,
            levels: 3,
            residual_output: true,
        }
    }
}

impl LeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::Config(format!("levels {} unsupported (3)", self.levels)));
        }
        if self.base_width < 8 {
            return Err(Error::Config(format!("base_width {} < 8", self.base_width)));
        }
        Ok(())
    }
}

/// 1x1 or 3x3 convolution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Channel-selective normalization parameters: sigmoid(gate_logits) blends
/// normalized and untouched channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CsnormParams {
    pub gate_logits: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// One GFM head: two zero-initialized linear maps emitting per-channel
/// scale offsets and shifts from the condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GfmHead {
    pub scale: LinearParams,
    pub shift: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChmBlock {
    pub conv: ConvParams,
    pub norm: CsnormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmBlock {
    pub conv: ConvParams,
    pub norm: BnParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved with the model but not optimized (BN running statistics).
    Buffer,
}

/// All trainable tensors plus buffers for both stages, with their configs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub auct_cfg: AuctConfig,
    pub le_cfg: LeConfig,
    pub auct: auct::AuctParams,
    pub le: le::LeParams,
}

impl ModelParams {
    /// Random initialization; deterministic in `seed`.
    pub fn init(auct_cfg: AuctConfig, le_cfg: LeConfig, seed: u64) -> Result<Self> {
        auct_cfg.validate()?;
        le_cfg.validate()?;
        Ok(ModelParams {
            auct_cfg,
            le_cfg,
            auct: auct::AuctParams::init(&auct_cfg, seed, BASE_INIT_NOISE),
            le: le::LeParams::init(&le_cfg, seed),
        })
    }

    /// Noise-free identity initialization: the whole pipeline maps x to x
    /// exactly (modulation heads at identity, zero residual tail).
    pub fn init_identity(auct_cfg: AuctConfig, le_cfg: LeConfig) -> Result<Self> {
        auct_cfg.validate()?;
        le_cfg.validate()?;
        Ok(ModelParams {
            auct_cfg,
            le_cfg,
            auct: auct::AuctParams::init(&auct_cfg, 0, 0.0),
            le: le::LeParams::init_identity(&le_cfg),
        })
    }

    /// Enumerate `(name, tensor, kind)` in the canonical checkpoint order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.auct.visit(f);
        self.le.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.auct.visit_mut(f);
        self.le.visit_mut(f);
    }

    /// Exact element count over every tensor enumerated by [`Self::visit`]
    /// (this equals the number written to a checkpoint).
    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t, _| n += t.numel() as u64);
        n
    }

    pub fn trainable_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t, k| {
            if k == ParamKind::Trainable {
                n += t.numel() as u64;
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_and_visit_mut_agree_on_names() {
        let mut m = ModelParams::init(AuctConfig::default(), LeConfig::default(), 5).unwrap();
        let mut names_a = Vec::new();
        m.visit(&mut |n, _, k| names_a.push((n.to_string(), k)));
        let mut names_b = Vec::new();
        m.visit_mut(&mut |n, _, k| names_b.push((n.to_string(), k)));
        assert_eq!(names_a, names_b);
        assert!(!names_a.is_empty());
        let unique: std::collections::HashSet<_> = names_a.iter().map(|(n, _)| n).collect();
        assert_eq!(unique.len(), names_a.len(), "duplicate parameter names");
    }

    #[test]
    fn default_param_count_is_stable() {
        let m = ModelParams::init(AuctConfig::default(), LeConfig::default(), 1).unwrap();
        // Regression pin: layer arithmetic for the default configuration.
        assert_eq!(m.param_count(), 369_596);
        assert_eq!(m.trainable_count(), 369_340);
        let m2 = ModelParams::init(AuctConfig::default(), LeConfig::default(), 99).unwrap();
        assert_eq!(m2.param_count(), m.param_count());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = ModelParams::init(AuctConfig::default(), LeConfig::default(), 7).unwrap();
        let b = ModelParams::init(AuctConfig::default(), LeConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(AuctConfig::default(), LeConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let mut cfg = AuctConfig::default();
        cfg.n_layers = 1;
        assert!(cfg.validate().is_err());
        let mut le = LeConfig::default();
        le.base_width = 4;
        assert!(le.validate().is_err());
    }

    #[test]
    fn min_extents_follow_pooling_depth() {
        let cfg = AuctConfig::default();
        assert_eq!(cfg.min_cond_extent(), 16);
        assert_eq!(cfg.min_input_extent(), 64);
    }
}
