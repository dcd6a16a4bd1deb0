use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

/// Which sublayer follows attention in every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    GraphMemory,
    DenseFfn,
}

/// Architecture of a model. Training, loss and maintenance knobs live in
/// their own records (see [`crate::config::RunConfig`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// Query/key width used for target scoring.
    pub nav_dim: usize,
    /// Centroid slots per block.
    pub n_slots: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub p_embed: f64,
    pub p_attn: f64,
    pub tau_max: f64,
    pub tau_min: f64,
    pub eps_grav: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    pub block_kind: BlockKind,
    /// Feed-forward width, used only by dense blocks.
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-trainable configuration with a byte vocabulary.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            nav_dim: 16,
            n_slots: 16,
            max_seq_len: 128,
            vocab_size: 257,
            p_embed: 0.1,
            p_attn: 0.1,
            tau_max: 1.0,
            tau_min: 0.1,
            eps_grav: 0.01,
            ln_eps: 1e-5,
            init_std: 0.02,
            block_kind: BlockKind::GraphMemory,
            ffn_hidden: 88,
        }
    }

    /// Desk trunk with dense feed-forward blocks.
    pub fn desk_baseline() -> Self {
        Self {
            block_kind: BlockKind::DenseFfn,
            ..Self::desk()
        }
    }

    /// Full-size memory model (16 blocks, width 768, 128 slots).
    pub fn base() -> Self {
        Self {
            n_layers: 16,
            hidden: 768,
            n_heads: 12,
            nav_dim: 128,
            n_slots: 128,
            max_seq_len: 1024,
            vocab_size: 50257,
            ffn_hidden: 1050,
            ..Self::desk()
        }
    }

    /// Same trunk as [`ModelConfig::base`] with dense blocks of width 1050.
    pub fn base_baseline() -> Self {
        Self {
            block_kind: BlockKind::DenseFfn,
            ..Self::base()
        }
    }

    /// Tiny instance for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            nav_dim: 4,
            n_slots: 4,
            max_seq_len: 3,
            vocab_size: 11,
            p_embed: 0.0,
            p_attn: 0.0,
            ffn_hidden: 24,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn is_memory(&self) -> bool {
        self.block_kind == BlockKind::GraphMemory
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(config_err!("{name} must be at least 1"));
            }
        }
        if self.hidden % self.n_heads != 0 {
            return Err(config_err!(
                "hidden {} is not divisible by {} heads",
                self.hidden,
                self.n_heads
            ));
        }
        match self.block_kind {
            BlockKind::GraphMemory => {
                if self.n_slots < 2 {
                    return Err(config_err!("memory blocks need at least 2 slots"));
                }
                if self.nav_dim == 0 {
                    return Err(config_err!("nav_dim must be at least 1"));
                }
            }
            BlockKind::DenseFfn => {
                if self.ffn_hidden == 0 {
                    return Err(config_err!("ffn_hidden must be at least 1"));
                }
            }
        }
        for (name, p) in [("p_embed", self.p_embed), ("p_attn", self.p_attn)] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.tau_min > 0.0 && self.tau_max >= self.tau_min) {
            return Err(config_err!(
                "need 0 < tau_min <= tau_max, got {} and {}",
                self.tau_min,
                self.tau_max
            ));
        }
        if !(self.eps_grav > 0.0 && self.ln_eps > 0.0 && self.init_std > 0.0) {
            return Err(config_err!(
                "eps_grav, ln_eps and init_std must be positive"
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; checkpoints refuse to load
    /// into a model whose hash differs.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            ModelConfig::desk(),
            ModelConfig::desk_baseline(),
            ModelConfig::base(),
            ModelConfig::base_baseline(),
            ModelConfig::toy(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::base().head_dim(), 64);
    }

    #[test]
    fn rejects_bad_heads_and_unknown_keys() {
        let mut c = ModelConfig::desk();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let err = serde_json::from_str::<ModelConfig>(r#"{"hidden": 64, "bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.n_slots = 32;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
