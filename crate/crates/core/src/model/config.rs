use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::swin_base()
    }
}

impl EncoderConfig {
    /// swin-base-patch4-window7-224
    pub fn swin_base() -> Self {
        Self {
            input_side: 224,
            patch_size: 4,
            window_size: 7,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            input_side: 56,
            embed_dim: 32,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            ..Self::swin_base()
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid side at `stage`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        (self.input_side / self.patch_size) >> stage
    }

    pub fn output_dim(&self) -> usize {
        self.stage_dim(self.stages() - 1)
    }

    /// Length of the visual token sequence handed to the decoder.
    pub fn output_len(&self) -> usize {
        let r = self.stage_resolution(self.stages() - 1);
        r * r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, window_size, embed_dim and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return bad(format!(
                "depths ({}) and num_heads ({}) must be non-empty and of equal length",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        let unit = self.patch_size * self.window_size;
        if self.input_side == 0 || self.input_side % unit != 0 {
            return bad(format!("input_side {} must be a multiple of {unit}", self.input_side));
        }
        // every stage grid must tile into whole windows, which also keeps
        // patch merging on even grids
        let need = unit << (self.stages() - 1);
        if self.input_side % need != 0 {
            return bad(format!(
                "input_side {} must be a multiple of {need} for {} stages",
                self.input_side,
                self.stages()
            ));
        }
        for (i, (&d, &h)) in self.depths.iter().zip(&self.num_heads).enumerate() {
            if d == 0 || h == 0 || self.stage_dim(i) % h != 0 {
                return bad(format!("stage {i}: dim {} is not divisible by {h} heads", self.stage_dim(i)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_positions: usize,
    /// Always on; kept so configs state it explicitly.
    pub cross_attention: bool,
    pub layer_norm_eps: f64,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::gpt2()
    }
}

impl DecoderConfig {
    /// gpt2 (base)
    pub fn gpt2() -> Self {
        Self {
            vocab_size: 50257,
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            max_positions: 1024,
            cross_attention: true,
            layer_norm_eps: 1e-5,
            dropout: 0.1,
        }
    }

    pub fn toy() -> Self {
        Self {
            vocab_size: 128,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            max_positions: 512,
            dropout: 0.0,
            ..Self::gpt2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.vocab_size == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("vocab_size, n_layers, n_heads and d_model must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if !self.cross_attention {
            return bad("cross_attention cannot be disabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Insert a learned projection when the encoder output width differs
    /// from the decoder width.
    pub projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::swin_base(),
            decoder: DecoderConfig::gpt2(),
            projection: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            projection: true,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.encoder.output_dim() != self.decoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.needs_projection() && !self.projection {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {} and projection is disabled",
                self.encoder.output_dim(),
                self.decoder.d_model
            )));
        }
        Ok(())
    }
}
