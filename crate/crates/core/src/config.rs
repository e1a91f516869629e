//! Pipeline configuration.
//!
//! Every tunable constant of the pipeline lives in [`PipelineConfig`]. The
//! built-in defaults are the reference deployment values; a TOML file may
//! override any subset of them, and CLI flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The default configuration file shipped with the crate.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Patch/token dimension after projection.
    pub embed_dim: usize,
    /// Source dimension of ingested patch vectors (projected when larger than `embed_dim`).
    pub source_dim: usize,
    /// Per-page k-means centroids.
    pub centroids_per_page: usize,
    /// Coarse shortlist size that receives exact scoring.
    pub shortlist_r: usize,
    /// Stage-1 output size.
    pub stage1_cutoff: usize,
    /// Stage-2 output size.
    pub stage2_cutoff: usize,
    /// Map shard size.
    pub shard_size: usize,
    /// Pages each map call keeps.
    pub map_target_k: usize,
    pub max_iterations: u32,
    pub dedup_threshold: f64,
    pub images_per_round: usize,
    pub summaries_per_round: usize,

    /// Centroid neighbours fetched per query token.
    pub probe_k: usize,
    /// Inverted lists in the centroid ANN index; 0 picks `sqrt(entries)`.
    pub ann_nlist: usize,
    /// Inverted lists scanned per query token.
    pub ann_nprobe: usize,
    /// Force exhaustive centroid search.
    pub exact_flat: bool,
    pub kmeans_iterations: usize,
    /// Patch vectors sampled to fit the projection.
    pub projection_sample: usize,

    /// Interleave Stage-1 ranks across shards; `false` uses contiguous rank blocks.
    pub interleaved_sharding: bool,
    /// Concurrent map calls in flight.
    pub map_concurrency: usize,
    /// Transport retries per model call.
    pub retries: u32,
    pub retry_backoff_ms: u64,

    pub filter_temperature: f64,
    pub filter_max_new_tokens: u32,
    pub reasoner_temperature: f64,
    pub reasoner_max_new_tokens: u32,
    pub filter_model: String,
    pub reasoner_model: String,

    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            source_dim: 768,
            centroids_per_page: 8,
            shortlist_r: 8000,
            stage1_cutoff: 2000,
            stage2_cutoff: 100,
            shard_size: 256,
            map_target_k: 25,
            max_iterations: 3,
            dedup_threshold: 0.97,
            images_per_round: 10,
            summaries_per_round: 20,
            probe_k: 32,
            ann_nlist: 0,
            ann_nprobe: 32,
            exact_flat: false,
            kmeans_iterations: 25,
            projection_sample: 100_000,
            interleaved_sharding: true,
            map_concurrency: 8,
            retries: 2,
            retry_backoff_ms: 250,
            filter_temperature: 0.0,
            filter_max_new_tokens: 1024,
            reasoner_temperature: 0.1,
            reasoner_max_new_tokens: 2048,
            filter_model: "Qwen3-30B-A3B".into(),
            reasoner_model: "Qwen2.5-VL-32B-Instruct".into(),
            seed: 42,
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML document; missing keys take their defaults.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn shipped_default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("shipped default config parses")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Returns the config unchanged when every invariant holds, otherwise the first violation.
    pub fn validate(self) -> Result<Self> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("source_dim", self.source_dim),
            ("centroids_per_page", self.centroids_per_page),
            ("shortlist_r", self.shortlist_r),
            ("stage1_cutoff (N1)", self.stage1_cutoff),
            ("stage2_cutoff (N2)", self.stage2_cutoff),
            ("shard_size (B)", self.shard_size),
            ("map_target_k", self.map_target_k),
            ("max_iterations", self.max_iterations as usize),
            ("images_per_round", self.images_per_round),
            ("summaries_per_round", self.summaries_per_round),
            ("probe_k", self.probe_k),
            ("ann_nprobe", self.ann_nprobe),
            ("kmeans_iterations", self.kmeans_iterations),
            ("projection_sample", self.projection_sample),
            ("map_concurrency", self.map_concurrency),
            ("filter_max_new_tokens", self.filter_max_new_tokens as usize),
            ("reasoner_max_new_tokens", self.reasoner_max_new_tokens as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.stage2_cutoff > self.stage1_cutoff {
            return Err(Error::InvalidConfig(format!(
                "N2 ≤ N1 violated (N2={}, N1={})",
                self.stage2_cutoff, self.stage1_cutoff
            )));
        }
        if self.map_target_k > self.shard_size {
            return Err(Error::InvalidConfig(format!(
                "map_target_k ≤ B violated (map_target_k={}, B={})",
                self.map_target_k, self.shard_size
            )));
        }
        if self.shortlist_r < self.stage1_cutoff {
            return Err(Error::InvalidConfig(format!(
                "shortlist_R ≥ N1 violated (R={}, N1={})",
                self.shortlist_r, self.stage1_cutoff
            )));
        }
        let shards = self.stage1_cutoff.div_ceil(self.shard_size);
        if shards * self.map_target_k < self.stage2_cutoff {
            return Err(Error::InvalidConfig(format!(
                "ceil(N1/B)·map_target_k ≥ N2 violated ({shards}·{} < {})",
                self.map_target_k, self.stage2_cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(Error::InvalidConfig(format!(
                "dedup_threshold must lie in [0, 1], got {}",
                self.dedup_threshold
            )));
        }
        if self.filter_temperature < 0.0 || self.reasoner_temperature < 0.0 {
            return Err(Error::InvalidConfig("temperatures must be ≥ 0".into()));
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::InvalidConfig(format!("seed must be at most {}", i64::MAX)));
        }
        Ok(self)
    }

    /// Number of Stage-2 map shards for a full Stage-1 list.
    pub fn num_shards(&self) -> usize {
        self.stage1_cutoff.div_ceil(self.shard_size)
    }
}
