//! Model architecture settings and the context ablation switch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which context components feed the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Inundation history only.
    Inun,
    /// History plus elevation channel.
    #[serde(alias = "inun+elev")]
    InunElev,
    /// History plus calendar covariates.
    #[serde(alias = "inun+cov")]
    InunCov,
    /// Everything.
    #[serde(alias = "inun_elev_cov", alias = "inun+elev+cov")]
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Inun, Ablation::InunElev, Ablation::InunCov, Ablation::All];

    pub fn uses_elevation(self) -> bool {
        matches!(self, Ablation::InunElev | Ablation::All)
    }

    pub fn uses_covariates(self) -> bool {
        matches!(self, Ablation::InunCov | Ablation::All)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Inun => "inun",
            Ablation::InunElev => "inun_elev",
            Ablation::InunCov => "inun_cov",
            Ablation::All => "all",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Inun => "INUN",
            Ablation::InunElev => "INUN+ELEV",
            Ablation::InunCov => "INUN+COV",
            Ablation::All => "INUN+ELEV+COV",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inun" => Ok(Ablation::Inun),
            "inun_elev" | "inun+elev" => Ok(Ablation::InunElev),
            "inun_cov" | "inun+cov" => Ok(Ablation::InunCov),
            "all" | "inun_elev_cov" | "inun+elev+cov" => Ok(Ablation::All),
            other => Err(Error::InvalidParameter(format!(
                "unknown ablation {other:?}; expected inun|inun_elev|inun_cov|all"
            ))),
        }
    }
}

/// Architecture of the context encoder and the conditional UNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side length D.
    pub dim: usize,
    /// Context length c.
    pub context_len: usize,
    /// Context token dimension e.
    pub embed_dim: usize,
    /// Output channels of each encoder convolution block.
    pub encoder_channels: Vec<usize>,
    /// Side of the grid each encoded frame is average-pooled to.
    pub pool_grid: usize,
    /// Channels of each UNet down block (mirrored by the up blocks).
    pub unet_channels: Vec<usize>,
    pub layers_per_block: usize,
    /// Number of deepest down (and up) blocks carrying cross-attention.
    pub cross_attn_blocks: usize,
    pub attention_heads: usize,
    /// Attention width; `None` uses the block's channel count.
    pub attention_dim: Option<usize>,
    pub norm_groups: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Per-patch-size defaults for D ∈ {16, 64, 80, 96}; other sizes take the
    /// nearest row.
    pub fn for_patch(dim: usize) -> Self {
        let (encoder_channels, embed_dim, unet_channels) = match dim {
            0..=32 => (vec![8], 32, vec![8, 16, 32, 32]),
            33..=72 => (vec![16, 32, 64], 32, vec![16, 32, 32, 64]),
            73..=88 => (vec![16, 32, 64], 64, vec![16, 32, 32, 64]),
            _ => (vec![16, 32, 64], 96, vec![16, 32, 32, 64]),
        };
        Self {
            dim,
            context_len: 12,
            embed_dim,
            encoder_channels,
            pool_grid: 4,
            unet_channels,
            layers_per_block: 2,
            cross_attn_blocks: 2,
            attention_heads: 1,
            attention_dim: None,
            norm_groups: 8,
            ablation: Ablation::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dim == 0 || self.context_len == 0 || self.embed_dim == 0 {
            return bad("dim, context_len and embed_dim must be positive".into());
        }
        if self.encoder_channels.is_empty() || self.unet_channels.is_empty() {
            return bad("encoder and UNet need at least one block".into());
        }
        let downsamples = self.unet_channels.len() - 1;
        if self.dim % (1 << downsamples) != 0 {
            return bad(format!(
                "D = {} must be divisible by 2^{downsamples} for {} UNet blocks",
                self.dim,
                self.unet_channels.len()
            ));
        }
        let enc_side = self.encoded_side();
        if enc_side == 0 || self.pool_grid == 0 || self.pool_grid > enc_side {
            return bad(format!(
                "pool grid {} does not fit the {enc_side}×{enc_side} encoder output",
                self.pool_grid
            ));
        }
        if self.cross_attn_blocks > self.unet_channels.len() {
            return bad("more cross-attention blocks than UNet blocks".into());
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be positive".into());
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder channel counts must be positive".into());
        }
        for &c in &self.unet_channels {
            if c == 0 || c % self.norm_groups != 0 {
                return bad(format!("channel count {c} not divisible by {} groups", self.norm_groups));
            }
            let a = self.attention_dim.unwrap_or(c);
            if a % self.attention_heads != 0 {
                return bad(format!("attention width {a} not divisible by {} heads", self.attention_heads));
            }
        }
        Ok(())
    }

    /// Side length after the encoder's convolution blocks.
    pub fn encoded_side(&self) -> usize {
        self.encoder_channels
            .iter()
            .fold(self.dim, |side, _| if side >= 2 { side / 2 } else { side })
    }

    /// Length of the per-timestep spatial feature vector.
    pub fn spatial_feature_dim(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0) * self.pool_grid * self.pool_grid
    }

    /// Width of the fused (spatial ⊕ covariate) vector.
    pub fn fusion_input_dim(&self) -> usize {
        self.spatial_feature_dim() + if self.ablation.uses_covariates() { 4 } else { 0 }
    }

    pub fn encoder_in_channels(&self) -> usize {
        if self.ablation.uses_elevation() {
            2
        } else {
            1
        }
    }

    pub fn time_embed_dim(&self) -> usize {
        self.unet_channels[0] * 4
    }
}
