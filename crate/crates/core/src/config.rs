//! Model, training and pipeline configuration.
//!
//! Configuration files are TOML (`key = value` per line, grouped in
//! `[model]`, `[train]`, `[data]` and `[mining]` tables). Every field has a
//! default, so a file only needs the keys it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node embedding size (`heads * d_h`).
    pub d_e: usize,
    /// Word embedding size.
    pub d_w: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks_enc: usize,
    pub blocks_plan: usize,
    pub blocks_dec: usize,
    pub dropout: f64,
    pub max_path_hops: usize,
    /// Hidden size of the additive copy scorer.
    pub copy_hidden: usize,
    pub max_plan_len: usize,
    pub max_sent_len: usize,
    pub beam_size: usize,
    pub use_subgraph_attention: bool,
    pub use_node_attention: bool,
    pub use_copy: bool,
    pub vocab_size: usize,
    pub schema_count: usize,
    pub node_count: usize,
    pub relation_count: usize,
    pub user_count: usize,
    pub item_count: usize,
    pub rating_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 512,
            d_w: 512,
            heads: 8,
            ffn_hidden: 1024,
            blocks_enc: 6,
            blocks_plan: 6,
            blocks_dec: 6,
            dropout: 0.2,
            max_path_hops: crate::hkg::DEFAULT_MAX_HOPS,
            copy_hidden: 64,
            max_plan_len: 5,
            max_sent_len: 50,
            beam_size: 8,
            use_subgraph_attention: true,
            use_node_attention: true,
            use_copy: true,
            vocab_size: 0,
            schema_count: 0,
            node_count: 0,
            relation_count: 0,
            user_count: 0,
            item_count: 0,
            rating_levels: 5,
        }
    }
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.d_e / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || self.d_e % self.heads != 0 {
            return err("d_e must be a positive multiple of heads");
        }
        if self.d_w % self.heads != 0 {
            return err("d_w must be a multiple of heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must be in [0, 1)");
        }
        if self.max_plan_len == 0 || self.max_sent_len == 0 || self.beam_size == 0 {
            return err("max_plan_len, max_sent_len and beam_size must be >= 1");
        }
        if self.rating_levels == 0 {
            return err("rating_levels must be >= 1");
        }
        Ok(())
    }

    /// Short hash of the full configuration, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Peak learning rate of the warmup schedule.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Learning-rate multiplier for shared embeddings during stage 2.
    pub shared_lr_scale: f64,
    pub grad_clip: f64,
    /// Weight of the copy-switch indicator loss.
    pub si_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            stage1_epochs: 30,
            stage2_epochs: 30,
            lr: 2e-3,
            warmup_steps: 400,
            shared_lr_scale: 0.1,
            grad_clip: 1.0,
            si_weight: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub reviews: String,
    pub triples: String,
    pub interactions: String,
    pub kinds: String,
    pub keywords: String,
    pub min_cooccur: u32,
    pub vocab_size: usize,
    pub max_review_tokens: usize,
    pub local_cap: usize,
    /// Train/valid/test proportions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            reviews: "reviews.jsonl".into(),
            triples: "triples.tsv".into(),
            interactions: "interactions.tsv".into(),
            kinds: "kinds.tsv".into(),
            keywords: "keywords.txt".into(),
            min_cooccur: 2,
            vocab_size: 30_000,
            max_review_tokens: 100,
            local_cap: crate::hkg::DEFAULT_LOCAL_CAP,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub top_k: usize,
    pub max_slots: usize,
    /// Number of most frequent gold schemas compared in distribution error.
    pub report_top_k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            top_k: 30,
            max_slots: 6,
            report_top_k: 13,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub mining: MiningConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
