use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kv::parse_value;

/// Architecture hyperparameters plus the variant switches used by ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub coarse_layers: usize,
    pub fine_layers: usize,
    pub decoder_layers: usize,
    /// Number of sources K.
    pub sources: usize,
    /// Longest sequence (per source, and for the target including bos/eos).
    pub max_len: usize,
    pub use_fine_encoder: bool,
    /// Cross-source attention sublayer inside each fine-encoder layer.
    pub fine_encoder_cross_attention: bool,
    /// Per-source decoder cross-attention with mean pooling; when off the
    /// decoder attends once over all sources concatenated.
    pub separated_decoder_cross_attention: bool,
    pub use_segment_embedding: bool,
    /// Coarse self-attention spans all sources; when off it is restricted to
    /// each source's own block.
    pub concatenated_encoding: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            coarse_layers: 4,
            fine_layers: 1,
            decoder_layers: 4,
            sources: 2,
            max_len: 64,
            use_fine_encoder: true,
            fine_encoder_cross_attention: true,
            separated_decoder_cross_attention: true,
            use_segment_embedding: true,
            concatenated_encoding: true,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The smallest complete configuration, used for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            coarse_layers: 2,
            fine_layers: 1,
            decoder_layers: 2,
            sources: 2,
            max_len: 16,
            ..Self::default()
        }
    }

    /// Fine-encoder layers actually instantiated.
    pub fn effective_fine_layers(&self) -> usize {
        if self.use_fine_encoder {
            self.fine_layers
        } else {
            0
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }

    /// Single-source architecture sharing every non-fine-encoder tensor with
    /// `self`: one source, no fine encoder, no segment embedding.
    pub fn single_source(&self) -> Self {
        ModelConfig { sources: 1, use_fine_encoder: false, use_segment_embedding: false, ..self.clone() }
    }

    /// Shape checks every constructed model needs.
    pub(crate) fn check_shapes(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("vocab_size, d_ff and max_len must be positive".into()));
        }
        if self.sources == 0 {
            return Err(Error::Config("at least one source is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Full validation: shape checks plus at least one coarse encoder and
    /// one decoder layer.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if self.coarse_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("coarse_layers and decoder_layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("coarse_layers", self.coarse_layers.to_string()),
            ("fine_layers", self.fine_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("sources", self.sources.to_string()),
            ("max_len", self.max_len.to_string()),
            ("use_fine_encoder", self.use_fine_encoder.to_string()),
            ("fine_encoder_cross_attention", self.fine_encoder_cross_attention.to_string()),
            ("separated_decoder_cross_attention", self.separated_decoder_cross_attention.to_string()),
            ("use_segment_embedding", self.use_segment_embedding.to_string()),
            ("concatenated_encoding", self.concatenated_encoding.to_string()),
            // `{:?}` keeps the shortest round-tripping representation
            ("dropout", format!("{:?}", self.dropout)),
            ("layer_norm_eps", format!("{:?}", self.layer_norm_eps)),
        ]
    }

    /// Overrides fields named in `pairs`; unknown keys are ignored so that a
    /// single config file can also carry training settings.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, v) in pairs {
            match key.as_str() {
                "vocab_size" => self.vocab_size = parse_value(key, v)?,
                "d_model" => self.d_model = parse_value(key, v)?,
                "heads" => self.heads = parse_value(key, v)?,
                "d_ff" => self.d_ff = parse_value(key, v)?,
                "coarse_layers" => self.coarse_layers = parse_value(key, v)?,
                "fine_layers" => self.fine_layers = parse_value(key, v)?,
                "decoder_layers" => self.decoder_layers = parse_value(key, v)?,
                "sources" => self.sources = parse_value(key, v)?,
                "max_len" => self.max_len = parse_value(key, v)?,
                "use_fine_encoder" => self.use_fine_encoder = parse_value(key, v)?,
                "fine_encoder_cross_attention" => self.fine_encoder_cross_attention = parse_value(key, v)?,
                "separated_decoder_cross_attention" => self.separated_decoder_cross_attention = parse_value(key, v)?,
                "use_segment_embedding" => self.use_segment_embedding = parse_value(key, v)?,
                "concatenated_encoding" => self.concatenated_encoding = parse_value(key, v)?,
                "dropout" => self.dropout = parse_value(key, v)?,
                "layer_norm_eps" => self.layer_norm_eps = parse_value(key, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_pairs(pairs)?;
        Ok(cfg)
    }
}
