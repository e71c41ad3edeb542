//! Ablation sweeps: every variant on an axis is trained from the same seed
//! and reported with its analytic cost.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use sloth_core::cost::{self, ArchSpec, EmbqCost, TokenPolicy};
use sloth_core::model::ParamGroup;
use sloth_core::Model;

use crate::commands::train_two_stage;
use crate::{CliError, RunConfig};

pub const CSV_HEADER: &str = "axis,value,token_number,prefill_flops,final_loss,eval_accuracy";

/// Layers needed to place the deepest insertion point.
const INSERTION_DEPTH: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Compressor,
    QueryCount,
    QueryInit,
    Fusion,
    EmbqDim,
    EmbqLayers,
    InsertionLayer,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Compressor,
        AblationAxis::QueryCount,
        AblationAxis::QueryInit,
        AblationAxis::Fusion,
        AblationAxis::EmbqDim,
        AblationAxis::EmbqLayers,
        AblationAxis::InsertionLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Compressor => "compressor",
            AblationAxis::QueryCount => "query_count",
            AblationAxis::QueryInit => "query_init",
            AblationAxis::Fusion => "fusion",
            AblationAxis::EmbqDim => "embq_dim",
            AblationAxis::EmbqLayers => "embq_layers",
            AblationAxis::InsertionLayer => "insertion_layer",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            AblationAxis::Compressor => &["avg_pool", "sap", "pixel_shuffle", "ldp"],
            AblationAxis::QueryCount => &["0", "6", "9", "12", "15"],
            AblationAxis::QueryInit => &["fixed_dot", "random", "dot"],
            AblationAxis::Fusion => &["add", "replace", "gate"],
            AblationAxis::EmbqDim => &["576", "768", "1152", "2560"],
            AblationAxis::EmbqLayers => &["1", "2", "3"],
            AblationAxis::InsertionLayer => &["4", "8", "16", "24", "8/16/24"],
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, CliError> {
        let bad = || CliError::Usage(format!("{value:?} is not a value of axis {self}"));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let mut c = base.clone();
        match self {
            AblationAxis::Compressor => c.compressor.kind = value.parse().map_err(|_| bad())?,
            AblationAxis::QueryCount => c.embq.n_queries = num()?,
            AblationAxis::QueryInit => c.embq.query_init = value.parse().map_err(|_| bad())?,
            AblationAxis::Fusion => c.embq.fusion = value.parse().map_err(|_| bad())?,
            AblationAxis::EmbqDim => c.embq.dim = num()?,
            AblationAxis::EmbqLayers => c.embq.n_layers = num()?,
            AblationAxis::InsertionLayer => {
                c.model.n_layers = c.model.n_layers.max(INSERTION_DEPTH);
                c.embq.insertion_layers = value
                    .split('/')
                    .map(|k| k.parse().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?;
            }
        }
        Ok(c)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.as_str()).collect();
                CliError::Usage(format!(
                    "unknown axis {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub token_number: usize,
    pub prefill_flops: u64,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    /// Parameter tensors of the query module and query embeddings.
    pub embq_tensors: usize,
}

/// The published architecture with the variant's compression settings.
pub fn cost_spec(config: &RunConfig) -> ArchSpec {
    let (grid, s) = (config.model.grid, config.compressor.s);
    let mut spec = if config.model.hd {
        ArchSpec {
            policy: TokenPolicy::HdTiling { grid, s },
            ..ArchSpec::flashsloth_hd()
        }
    } else {
        ArchSpec {
            policy: TokenPolicy::Sap { grid, s },
            ..ArchSpec::flashsloth()
        }
    };
    let e = &config.embq;
    spec.n_queries = e.n_queries;
    spec.embq = match (e.n_queries, spec.embq.take()) {
        (0, _) | (_, None) => None,
        (_, Some(base)) => Some(EmbqCost {
            d_e: e.dim as u64,
            d_vis: base.d_vis,
            blocks: (e.n_layers * e.insertion_layers.len()) as u64,
        }),
    };
    spec
}

pub fn run_variant(
    axis: AblationAxis,
    value: &str,
    base: &RunConfig,
) -> Result<AblationRow, CliError> {
    let config = axis.apply(base, value)?;
    let mut model = Model::new(config.checked_model_config()?)?;
    let embq_tensors = model
        .params()
        .iter()
        .filter(|(n, _)| {
            matches!(
                ParamGroup::of(n),
                Some(ParamGroup::Embq | ParamGroup::Queries)
            )
        })
        .count();
    let outcome = train_two_stage(&mut model, &config, |_, _, _| {})?;
    let spec = cost_spec(&config);
    let report = cost::report(&spec, &config.scenario())?;
    Ok(AblationRow {
        axis,
        value: value.to_string(),
        token_number: report.token_number,
        prefill_flops: report.prefill_flops,
        final_loss: outcome.final_loss,
        eval_accuracy: outcome.eval_accuracy,
        embq_tensors,
    })
}

/// Worker threads for sweeps: `SLOTH_THREADS` if set, otherwise all cores.
pub fn thread_cap() -> usize {
    std::env::var("SLOTH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

pub fn run_axis(base: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationRow>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    pool.install(|| {
        axis.values()
            .par_iter()
            .map(|v| run_variant(axis, v, base))
            .collect()
    })
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.4}\n",
            r.axis, r.value, r.token_number, r.prefill_flops, r.final_loss, r.eval_accuracy
        ));
    }
    out
}
