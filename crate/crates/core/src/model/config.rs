use serde::{Deserialize, Serialize};

use super::ModelError;

/// Padding token id.
pub const PAD: usize = 0;
/// End-of-sequence token id.
pub const EOS: usize = 1;
/// Decoder start token id; every decoder prefix begins with it.
pub const START: usize = 2;

/// Shape of the encoder–decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
}

fn default_max_distance() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Default lab configuration: eight decoder layers over a 512-token vocabulary.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 8,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 32,
            rel_pos_buckets: 32,
            rel_pos_max_distance: default_max_distance(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("rel_pos_buckets", self.rel_pos_buckets),
            ("rel_pos_max_distance", self.rel_pos_max_distance),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_dec_layers < 2 {
            return Err(ModelError::Config(
                "n_dec_layers must be at least 2".to_string(),
            ));
        }
        if self.vocab_size <= START {
            return Err(ModelError::Config(
                "vocab_size must cover the special tokens".to_string(),
            ));
        }
        if self.rel_pos_buckets < 4 {
            return Err(ModelError::Config(
                "rel_pos_buckets must be at least 4".to_string(),
            ));
        }
        Ok(())
    }
}

/// T5 relative-position bucketing. `relative = key_pos - query_pos`.
pub(crate) fn relative_position_bucket(
    relative: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut offset = 0;
    let distance = if bidirectional {
        buckets /= 2;
        if relative > 0 {
            offset = buckets;
        }
        relative.unsigned_abs() as usize
    } else {
        (-relative.min(0)) as usize
    };
    let max_exact = buckets / 2;
    if distance < max_exact {
        return offset + distance;
    }
    let ratio = (distance as f64 / max_exact as f64).ln()
        / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as usize;
    offset + large.min(buckets - 1)
}
