use crate::error::{config_err, Result};
use crate::kv::{parse_bool, parse_value, KvConfig};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub use_positional_embedding: bool,
    /// Use two residual connections per block (around attention and around
    /// the MLP) instead of a single one around the whole block.
    pub conventional_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            embed_dim: 384,
            num_heads: 6,
            encoder_depth: 12,
            decoder_depth: 12,
            mlp_ratio: 4.0,
            num_classes: 2,
            in_channels: 3,
            use_positional_embedding: true,
            conventional_residual: false,
        }
    }
}

impl ModelConfig {
    /// 32x32 input, 8x8 patches, 16-wide embedding, 2 + 2 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            num_heads: 2,
            encoder_depth: 2,
            decoder_depth: 2,
            ..Self::default()
        }
    }

    /// 64x64 input, 8x8 patches, 64-wide embedding, 2 + 2 blocks.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            encoder_depth: 2,
            decoder_depth: 2,
            ..Self::default()
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.encoder_depth = depth;
        self.decoder_depth = depth;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.hidden_dim();
        let p2 = self.patch_size * self.patch_size;
        let bn = 2 * self.in_channels;
        let embed = self.patch_dim() * d + d;
        let pos = if self.use_positional_embedding {
            self.num_patches() * d
        } else {
            0
        };
        let ln = 2 * d;
        let attention = 4 * d * d + d;
        let mlp = d * h + h + h * d + d;
        let encoder_block = 2 * ln + attention + mlp;
        let decoder_block = encoder_block + ln;
        let head = d * p2 * self.num_classes + p2 * self.num_classes;
        bn + embed
            + pos
            + self.encoder_depth * encoder_block
            + self.decoder_depth * decoder_block
            + head
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "num_heads" => self.num_heads = parse_value(key, value)?,
            "encoder_depth" => self.encoder_depth = parse_value(key, value)?,
            "decoder_depth" => self.decoder_depth = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "use_positional_embedding" => self.use_positional_embedding = parse_bool(key, value)?,
            "conventional_residual" => self.conventional_residual = parse_bool(key, value)?,
            _ => return Err(config_err!("unknown model setting {key:?}")),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("use_positional_embedding", self.use_positional_embedding.to_string()),
            ("conventional_residual", self.conventional_residual.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config_err!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config_err!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2"));
        }
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be positive"));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(config_err!("mlp_ratio must give a positive hidden width"));
        }
        Ok(())
    }
}
