//! Run configuration: one JSON document with `model`, `compressor`, `embq`,
//! `train` and `cost` sections. Every field is optional and unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sloth_core::cost::{ImageKind, Scenario};
use sloth_core::embq::{FusionMode, QueryInit};
use sloth_core::sap::CompressorKind;
use sloth_core::ModelConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub compressor: CompressorSection,
    pub embq: EmbqSection,
    pub train: TrainSection,
    pub cost: CostSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_vis: usize,
    pub grid: usize,
    pub hd: bool,
    pub hd_all_tiles: bool,
    pub max_seq: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressorSection {
    pub kind: CompressorKind,
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbqSection {
    pub n_queries: usize,
    pub query_init: QueryInit,
    /// 1-indexed decoder blocks after which the queries are refreshed.
    pub insertion_layers: Vec<usize>,
    pub dim: usize,
    pub n_layers: usize,
    pub fusion: FusionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Examples used by the gradient check.
    pub grad_examples: usize,
    /// Entries per tensor probed by the gradient check.
    pub grad_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub text_len: usize,
    pub reference: String,
    pub benchmark: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        ModelSection {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            d_vis: c.d_vis,
            grid: c.grid,
            hd: c.hd,
            hd_all_tiles: c.hd_all_tiles,
            max_seq: c.max_seq,
            seed: c.seed,
        }
    }
}

impl Default for CompressorSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        CompressorSection {
            kind: c.compressor,
            s: c.s,
        }
    }
}

impl Default for EmbqSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        EmbqSection {
            n_queries: c.n_queries,
            query_init: c.query_init,
            insertion_layers: c.embq_layers,
            dim: c.embq_dim,
            n_layers: c.embq_n_layers,
            fusion: c.fusion,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_train: 8,
            n_eval: 16,
            stage1_steps: 20,
            stage2_steps: 200,
            stage1_lr: 1e-2,
            stage2_lr: 1e-2,
            grad_examples: 2,
            grad_entries: 32,
        }
    }
}

impl Default for CostSection {
    fn default() -> Self {
        let s = Scenario::default();
        CostSection {
            text_len: s.text_len,
            reference: s.reference,
            benchmark: s.benchmark,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| {
            CliError::Validation(format!(
                "config line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Seeds both parameter initialization and data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        let (m, c, e) = (&self.model, &self.compressor, &self.embq);
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: m.vocab_size,
            d_vis: m.d_vis,
            grid: m.grid,
            s: c.s,
            compressor: c.kind,
            n_queries: e.n_queries,
            query_init: e.query_init,
            embq_layers: e.insertion_layers.clone(),
            embq_dim: e.dim,
            embq_n_layers: e.n_layers,
            fusion: e.fusion,
            hd: m.hd,
            hd_all_tiles: m.hd_all_tiles,
            max_seq: m.max_seq,
            seed: m.seed,
        }
    }

    /// The model configuration after validation.
    pub fn checked_model_config(&self) -> Result<ModelConfig, CliError> {
        let c = self.model_config();
        c.validate()?;
        Ok(c)
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            image: if self.model.hd {
                ImageKind::Hd
            } else {
                ImageKind::Base
            },
            benchmark: self.cost.benchmark.clone(),
            text_len: self.cost.text_len,
            reference: self.cost.reference.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_the_published_layout() {
        let c = RunConfig::parse("{}").unwrap().model_config();
        assert_eq!(
            (c.s, c.n_queries, c.embq_layers.clone(), c.embq_dim),
            (3, 9, vec![8], 576)
        );
        assert_eq!(c.fusion, FusionMode::Add);
        assert_eq!(c, ModelConfig::default());
    }

    #[test]
    fn misspelled_keys_are_rejected_with_location() {
        let err = RunConfig::parse("{\n  \"embq\": {\"n_querys\": 3}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_querys") && msg.contains("line 2"), "{msg}");
        assert!(RunConfig::parse("{\"optimizer\": {}}").is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.embq.fusion = FusionMode::Gate;
        c.train.stage2_steps = 7;
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
