//! Model configuration shared by every component.

use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};

/// Declares a config enum with its canonical lowercase spellings.
macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = CoreError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(CoreError::config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Design of the temporal encoder's building block.
    TBlockKind { R21d => "r21d", C3d => "c3d", JointAttention => "joint_attention" }
);
named_enum!(
    /// Temporal reduction inside the temporal-to-integration map.
    PsiDown { DConv => "dconv", AvgPool => "avg_pool", MaxPool => "max_pool" }
);
named_enum!(
    /// Temporal expansion inside the integration-to-temporal map.
    PhiUp { Nearest => "nearest", Trilinear => "trilinear", Deconv => "deconv" }
);
named_enum!(
    /// Reduction of the final token grid to one video vector.
    Pooling { AllTokens => "all_tokens", ClsToken => "cls_token" }
);
named_enum!(
    /// Which tensor of the last spatial layer is handed downstream.
    FeatureTap { PostBlock => "post_block", PostNorm => "post_norm" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    /// Sparse frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl SpatialConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Patch tokens per frame, excluding the class token.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("channels", self.channels),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::config(format!("spatial {name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(CoreError::config(format!(
                "canvas {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(CoreError::config(format!(
                "spatial width {} is not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConfig {
    pub gamma: usize,
    pub beta_c: usize,
    pub kind: TBlockKind,
    /// Attention heads of the joint space-time block.
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationConfig {
    pub alpha_c: usize,
    pub psi: PsiDown,
    pub phi: PhiUp,
    /// Active layers, 1-based.
    pub layer_mask: Vec<usize>,
    /// Hidden expansion of the linear feed-forward path.
    pub ffn_ratio: usize,
    /// Per-channel kernel for the temporal conv path (otherwise dense).
    pub tconv_depthwise: bool,
    /// Adds the block input to its output.
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub classes: usize,
    /// Label-embedding width; `None` means the integration width.
    pub embed_dim: Option<usize>,
    pub tau: f64,
    pub pooling: Pooling,
}

/// Which parts of the model exist and which cross-branch maps are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub temporal: bool,
    pub integration: bool,
    pub integ_to_temp: bool,
    pub temp_to_integ: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            temporal: true,
            integration: true,
            integ_to_temp: true,
            temp_to_integ: true,
        }
    }
}

impl Ablation {
    pub fn spatial_only() -> Self {
        Ablation {
            temporal: false,
            integration: false,
            integ_to_temp: false,
            temp_to_integ: false,
        }
    }

    pub fn no_interaction() -> Self {
        Ablation {
            integ_to_temp: false,
            temp_to_integ: false,
            ..Self::default()
        }
    }

    /// Integration-to-temporal map in use.
    pub fn phi_active(&self) -> bool {
        self.temporal && self.integration && self.integ_to_temp
    }

    /// Temporal-to-integration map in use.
    pub fn psi_active(&self) -> bool {
        self.temporal && self.integration && self.temp_to_integ
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistConfig {
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub integration: IntegrationConfig,
    pub head: HeadConfig,
    pub ablation: Ablation,
    pub feature_tap: FeatureTap,
    pub ln_eps: f64,
}

impl DistConfig {
    /// ViT-B/16 at 224², 8 frames, γ = 2, αC = C/2, βC = C/8.
    pub fn vit_b16() -> Self {
        let c = 768;
        DistConfig {
            spatial: SpatialConfig {
                frames: 8,
                height: 224,
                width: 224,
                patch: 16,
                channels: c,
                layers: 12,
                heads: 12,
                mlp_ratio: 4,
            },
            temporal: TemporalConfig {
                gamma: 2,
                beta_c: c / 8,
                kind: TBlockKind::R21d,
                heads: 1,
            },
            integration: IntegrationConfig {
                alpha_c: c / 2,
                psi: PsiDown::DConv,
                phi: PhiUp::Nearest,
                layer_mask: (1..=12).collect(),
                ffn_ratio: 1,
                tconv_depthwise: true,
                residual: false,
            },
            head: HeadConfig {
                classes: 400,
                embed_dim: Some(512),
                tau: 0.07,
                pooling: Pooling::AllTokens,
            },
            ablation: Ablation::default(),
            feature_tap: FeatureTap::PostBlock,
            ln_eps: 1e-5,
        }
    }

    /// The smallest configuration used by the gradient-check suites.
    pub fn tiny() -> Self {
        DistConfig {
            spatial: SpatialConfig {
                frames: 2,
                height: 8,
                width: 8,
                patch: 4,
                channels: 8,
                layers: 2,
                heads: 2,
                mlp_ratio: 4,
            },
            temporal: TemporalConfig {
                gamma: 2,
                beta_c: 2,
                kind: TBlockKind::R21d,
                heads: 1,
            },
            integration: IntegrationConfig {
                alpha_c: 4,
                psi: PsiDown::DConv,
                phi: PhiUp::Nearest,
                layer_mask: vec![1, 2],
                ffn_ratio: 1,
                tconv_depthwise: true,
                residual: false,
            },
            head: HeadConfig {
                classes: 3,
                embed_dim: None,
                tau: 0.07,
                pooling: Pooling::AllTokens,
            },
            ablation: Ablation::default(),
            feature_tap: FeatureTap::PostBlock,
            ln_eps: 1e-5,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim.unwrap_or(self.integration.alpha_c)
    }

    /// Dense frames seen by the temporal encoder.
    pub fn dense_frames(&self) -> usize {
        self.spatial.frames * self.temporal.gamma
    }

    pub fn layer_active(&self, l: usize) -> bool {
        self.integration.layer_mask.contains(&l)
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        let t = &self.temporal;
        if t.gamma == 0 || t.beta_c == 0 || t.heads == 0 {
            return Err(CoreError::config("gamma, beta_c and temporal heads must be positive"));
        }
        if t.kind == TBlockKind::JointAttention && !t.beta_c.is_multiple_of(t.heads) {
            return Err(CoreError::config(format!(
                "temporal width {} is not divisible by {} heads",
                t.beta_c, t.heads
            )));
        }
        let i = &self.integration;
        if i.alpha_c == 0 || i.ffn_ratio == 0 {
            return Err(CoreError::config("alpha_c and ffn_ratio must be positive"));
        }
        if i.layer_mask.is_empty() {
            return Err(CoreError::config("layer_mask must name at least one layer"));
        }
        if let Some(&bad) = i.layer_mask.iter().find(|&&l| l == 0 || l > self.spatial.layers) {
            return Err(CoreError::config(format!(
                "layer_mask entry {bad} is outside 1..={}",
                self.spatial.layers
            )));
        }
        if self.head.classes == 0 {
            return Err(CoreError::config("head needs at least one class"));
        }
        if !(self.head.tau > 0.0) {
            return Err(CoreError::config("tau must be positive"));
        }
        if self.embed_dim() == 0 {
            return Err(CoreError::config("embed_dim must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(CoreError::config("ln_eps must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enums_round_trip_through_text() {
        for k in TBlockKind::ALL {
            assert_eq!(k.as_str().parse::<TBlockKind>().unwrap(), *k);
        }
        let err = "conv".parse::<PsiDown>().unwrap_err().to_string();
        assert!(err.contains("dconv"), "{err}");
    }

    #[test]
    fn presets_validate() {
        DistConfig::vit_b16().validate().unwrap();
        DistConfig::tiny().validate().unwrap();
        let mut c = DistConfig::tiny();
        c.integration.layer_mask = vec![3];
        assert!(c.validate().is_err());
        c.integration.layer_mask.clear();
        assert!(c.validate().is_err());
    }
}
