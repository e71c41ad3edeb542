use serde::{Deserialize, Serialize};

use crate::embq::{FusionMode, QueryInit};
use crate::error::{Error, Result};
use crate::sap::CompressorKind;
use crate::vision::MIN_VOCAB;

/// Architecture and pipeline settings. Field defaults are the desk-scale
/// toy model; the compression settings match the published configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Width of the encoder features.
    pub d_vis: usize,
    /// Side of the square encoder grid (per tile in HD mode).
    pub grid: usize,
    /// Pooling rate: each `s × s` region becomes one token.
    pub s: usize,
    pub compressor: CompressorKind,
    pub n_queries: usize,
    pub query_init: QueryInit,
    /// 1-indexed blocks after which the query hook runs.
    pub embq_layers: Vec<usize>,
    pub embq_dim: usize,
    pub embq_n_layers: usize,
    pub fusion: FusionMode,
    pub hd: bool,
    /// In HD mode, let the queries read every tile rather than the thumbnail only.
    pub hd_all_tiles: bool,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: MIN_VOCAB,
            d_vis: 64,
            grid: 27,
            s: 3,
            compressor: CompressorKind::Sap,
            n_queries: 9,
            query_init: QueryInit::Dot,
            embq_layers: vec![8],
            embq_dim: 576,
            embq_n_layers: 1,
            fusion: FusionMode::Add,
            hd: false,
            hd_all_tiles: true,
            max_seq: 2048,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Two layers of width 8 on a 6×6 grid; small enough for finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_vis: 4,
            grid: 6,
            n_queries: 2,
            embq_layers: vec![1],
            embq_dim: 4,
            max_seq: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::contract(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.d_vis == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head width {} must be even for rotary positions",
                self.head_dim()
            ));
        }
        if self.vocab_size < MIN_VOCAB {
            return fail(format!("vocab_size must be at least {MIN_VOCAB}"));
        }
        if self.s == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.s) {
            return fail(format!(
                "grid {} is not divisible by s = {}",
                self.grid, self.s
            ));
        }
        if self.n_queries > 0 {
            if self.embq_layers.is_empty() {
                return fail("queries need at least one insertion layer".into());
            }
            if let Some(&k) = self
                .embq_layers
                .iter()
                .find(|&&k| k == 0 || k > self.n_layers)
            {
                return fail(format!("insertion layer {k} outside 1..={}", self.n_layers));
            }
            let mut sorted = self.embq_layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.embq_layers.len() {
                return fail("insertion layers must be distinct".into());
            }
            if self.embq_dim == 0 || self.embq_n_layers == 0 {
                return fail("embq_dim and embq_n_layers must be positive".into());
            }
        }
        if self.max_seq == 0 {
            return fail("max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Grids fed to the compressor: one, or four tiles plus a thumbnail.
    pub fn n_grids(&self) -> usize {
        if self.hd {
            5
        } else {
            1
        }
    }

    pub fn tokens_per_grid(&self) -> usize {
        (self.grid / self.s).pow(2)
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.n_grids() * self.tokens_per_grid()
    }

    pub fn embq_enabled(&self) -> bool {
        self.n_queries > 0
    }

    pub fn hook_at(&self, layer: usize) -> bool {
        self.embq_enabled() && self.embq_layers.contains(&layer)
    }

    /// One `key=value` line per field in key order, values JSON-encoded.
    pub fn to_canonical(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object().expect("config is an object");
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        keys.iter().map(|k| format!("{k}={}\n", map[*k])).collect()
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line without '=': {line:?}"),
            })?;
            let v = serde_json::from_str(v).map_err(|e| Error::Format {
                what: "config",
                detail: format!("{k}: {e}"),
            })?;
            map.insert(k.to_string(), v);
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }
}
