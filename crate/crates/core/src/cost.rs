//! Analytic token, FLOP, KV-cache and parameter accounting.
//!
//! FLOPs count two per multiply-accumulate. Per layer, a prompt of `L`
//! tokens costs `8·L·d²` for the four attention projections, `4·L²·d` for
//! scores and mixing, and `4·L·d·d_ff` for the MLP. One decode step with
//! `L_ctx` cached positions costs `8·d² + 4·L_ctx·d + 4·d·d_ff`. Encoder
//! and compressor work is not included.

use serde::Serialize;

use crate::error::{Error, Result};

pub const KV_BYTES_PER_VALUE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Base,
    Hd,
}

/// How an architecture turns one image into visual tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenPolicy {
    Fixed(usize),
    /// `(grid/s)²` pooled tokens.
    Sap {
        grid: usize,
        s: usize,
    },
    /// Four tiles plus a thumbnail, each pooled: `5·(grid/s)²`.
    HdTiling {
        grid: usize,
        s: usize,
    },
    /// Resolution-dependent counts, recorded per benchmark.
    Dynamic {
        average: usize,
        per_benchmark: Vec<(String, usize)>,
    },
}

/// Cost parameters of the query module: `blocks` attention chains of width
/// `d_e` reading `n_raw` encoder tokens of width `d_vis`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbqCost {
    pub d_e: u64,
    pub d_vis: u64,
    pub blocks: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub param_count: u64,
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub n_heads: u64,
    pub policy: TokenPolicy,
    pub n_queries: usize,
    pub embq: Option<EmbqCost>,
}

const PHI2: (u64, u64, u64, u64) = (32, 2560, 10240, 32);

fn arch(
    name: &str,
    params: u64,
    (layers, d, ff, heads): (u64, u64, u64, u64),
    policy: TokenPolicy,
) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        param_count: params,
        n_layers: layers,
        d_model: d,
        d_ff: ff,
        n_heads: heads,
        policy,
        n_queries: 0,
        embq: None,
    }
}

fn dynamic(average: usize, counts: [usize; 5]) -> TokenPolicy {
    TokenPolicy::Dynamic {
        average,
        per_benchmark: BENCHMARKS
            .iter()
            .zip(counts)
            .map(|(b, c)| (b.to_string(), c))
            .collect(),
    }
}

pub const BENCHMARKS: [&str; 5] = ["GQA", "TextVQA", "MME", "MMB", "POPE"];

impl ArchSpec {
    pub fn llava15() -> Self {
        arch(
            "LLaVA-1.5",
            7_000_000_000,
            (32, 4096, 11008, 32),
            TokenPolicy::Fixed(576),
        )
    }

    pub fn imp() -> Self {
        arch("IMP", 3_100_000_000, PHI2, TokenPolicy::Fixed(729))
    }

    pub fn qwen2vl() -> Self {
        arch(
            "Qwen2-VL",
            2_000_000_000,
            (28, 1536, 8960, 12),
            dynamic(466, [352, 977, 646, 385, 353]),
        )
    }

    pub fn internvl2() -> Self {
        arch(
            "InternVL2",
            2_000_000_000,
            (24, 2048, 8192, 16),
            dynamic(1561, [1699, 1668, 1478, 1296, 1666]),
        )
    }

    pub fn flashsloth() -> Self {
        ArchSpec {
            n_queries: 9,
            embq: Some(EmbqCost {
                d_e: 576,
                d_vis: 1152,
                blocks: 1,
            }),
            ..arch(
                "FlashSloth",
                3_200_000_000,
                PHI2,
                TokenPolicy::Sap { grid: 27, s: 3 },
            )
        }
    }

    pub fn flashsloth_hd() -> Self {
        ArchSpec {
            name: "FlashSloth-HD".into(),
            policy: TokenPolicy::HdTiling { grid: 27, s: 3 },
            ..Self::flashsloth()
        }
    }

    /// Same language model, fixed visual token count, no queries.
    pub fn with_fixed_tokens(&self, name: &str, tokens: usize) -> Self {
        ArchSpec {
            name: name.into(),
            policy: TokenPolicy::Fixed(tokens),
            n_queries: 0,
            embq: None,
            ..self.clone()
        }
    }

    /// The methods compared in the efficiency table, reference first.
    pub fn presets() -> Vec<ArchSpec> {
        vec![
            Self::llava15(),
            Self::imp(),
            Self::qwen2vl(),
            Self::internvl2(),
            Self::flashsloth_hd(),
            Self::flashsloth(),
        ]
    }

    pub fn preset(name: &str) -> Option<ArchSpec> {
        Self::presets()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Encoder tokens the query module reads for `image`.
    fn raw_tokens(&self, image: ImageKind) -> u64 {
        match (&self.policy, image) {
            (TokenPolicy::Sap { grid, .. }, _) => (grid * grid) as u64,
            (TokenPolicy::HdTiling { grid, .. }, _) => 5 * (grid * grid) as u64,
            _ => 0,
        }
    }
}

/// Visual-side tokens (pooled visual tokens plus queries) for one image.
pub fn count_tokens(spec: &ArchSpec, image: ImageKind) -> Result<usize> {
    count_tokens_on(spec, image, None)
}

/// [`count_tokens`] on a named benchmark; dynamic policies need one of
/// [`BENCHMARKS`], `None` selects their recorded average.
pub fn count_tokens_on(
    spec: &ArchSpec,
    image: ImageKind,
    benchmark: Option<&str>,
) -> Result<usize> {
    let undefined = || {
        Err(Error::contract(format!(
            "{} has no token policy for a {image:?} image",
            spec.name
        )))
    };
    let pooled = |grid: usize, s: usize| -> Result<usize> {
        if s == 0 || !grid.is_multiple_of(s) {
            return Err(Error::contract(format!(
                "grid {grid} is not divisible by s = {s}"
            )));
        }
        Ok((grid / s).pow(2))
    };
    let visual = match (&spec.policy, image) {
        (TokenPolicy::Fixed(n), _) => *n,
        (TokenPolicy::Sap { grid, s }, ImageKind::Base) => pooled(*grid, *s)?,
        (TokenPolicy::HdTiling { grid, s }, ImageKind::Hd) => 5 * pooled(*grid, *s)?,
        (
            TokenPolicy::Dynamic {
                average,
                per_benchmark,
            },
            _,
        ) => match benchmark {
            None => *average,
            Some(b) => per_benchmark
                .iter()
                .find(|(name, _)| name.eq_ignore_ascii_case(b))
                .map(|(_, n)| *n)
                .ok_or_else(|| Error::contract(format!("{} has no count for {b}", spec.name)))?,
        },
        _ => return undefined(),
    };
    Ok(visual + spec.n_queries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

/// FLOPs split by term, already summed over layers and doubled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    pub projections: u64,
    pub attention: u64,
    pub mlp: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.mlp
    }
}

/// Per-term FLOPs of the language model for `seq_len` tokens (prefill) or
/// for one token against `seq_len` cached positions (decode).
pub fn flop_breakdown(spec: &ArchSpec, seq_len: u64, phase: Phase) -> FlopBreakdown {
    let (d, ff, layers) = (spec.d_model, spec.d_ff, spec.n_layers);
    let rows = match phase {
        Phase::Prefill => seq_len,
        Phase::Decode => 1,
    };
    FlopBreakdown {
        projections: 2 * layers * 8 * rows * d * d,
        attention: 2 * layers * 4 * rows * seq_len * d,
        mlp: 2 * layers * 4 * rows * d * ff,
    }
}

pub fn estimate_flops(spec: &ArchSpec, seq_len: u64, phase: Phase) -> u64 {
    flop_breakdown(spec, seq_len, phase).total()
}

/// FLOPs of the query module: both attention stages and the up-projection
/// for `n` queries, `text_len` instruction tokens and `n_raw` encoder tokens.
pub fn embq_flops(spec: &ArchSpec, text_len: u64, n_raw: u64) -> u64 {
    let Some(e) = &spec.embq else { return 0 };
    let n = spec.n_queries as u64;
    if n == 0 {
        return 0;
    }
    let d = spec.d_model;
    let text = n * d * e.d_e + 2 * text_len * d * e.d_e + 2 * n * text_len * e.d_e;
    let visual = n * e.d_e * e.d_e + 2 * n_raw * e.d_vis * e.d_e + 2 * n * n_raw * e.d_e;
    let up = n * e.d_e * d;
    2 * e.blocks * (text + visual + up)
}

/// Inputs shared by every row of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub image: ImageKind,
    pub benchmark: Option<String>,
    /// Instruction tokens added to every prompt.
    pub text_len: usize,
    /// Method the percentage deltas are measured against.
    pub reference: String,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            image: ImageKind::Base,
            benchmark: None,
            text_len: 0,
            reference: ArchSpec::llava15().name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub method: String,
    pub token_number: usize,
    pub prefill_flops: u64,
    pub decode_flops_per_token: u64,
    pub kv_bytes: u64,
    pub param_count: u64,
    pub delta_tokens_pct: f64,
    pub delta_flops_pct: f64,
}

/// HD specs are evaluated on an HD image and all others on a base image
/// unless the scenario says otherwise.
fn image_for(spec: &ArchSpec, scenario: &Scenario) -> ImageKind {
    match spec.policy {
        TokenPolicy::HdTiling { .. } => ImageKind::Hd,
        TokenPolicy::Sap { .. } => ImageKind::Base,
        _ => scenario.image,
    }
}

pub fn report(spec: &ArchSpec, scenario: &Scenario) -> Result<CostReport> {
    let image = image_for(spec, scenario);
    let tokens = count_tokens_on(spec, image, scenario.benchmark.as_deref())?;
    let len = (tokens + scenario.text_len) as u64;
    let prefill = estimate_flops(spec, len, Phase::Prefill)
        + embq_flops(spec, scenario.text_len as u64, spec.raw_tokens(image));
    Ok(CostReport {
        method: spec.name.clone(),
        token_number: tokens,
        prefill_flops: prefill,
        decode_flops_per_token: estimate_flops(spec, len + 1, Phase::Decode),
        kv_bytes: 2 * spec.n_layers * len * spec.d_model * KV_BYTES_PER_VALUE,
        param_count: spec.param_count,
        delta_tokens_pct: 0.0,
        delta_flops_pct: 0.0,
    })
}

/// `100·(value − reference)/reference`; negative values are reductions.
pub fn delta_pct(value: f64, reference: f64) -> f64 {
    100.0 * (value - reference) / reference
}

/// One report per spec, with deltas against `scenario.reference`.
pub fn compare(specs: &[ArchSpec], scenario: &Scenario) -> Result<Vec<CostReport>> {
    if specs.is_empty() {
        return Err(Error::contract("nothing to compare"));
    }
    let mut rows = specs
        .iter()
        .map(|s| report(s, scenario))
        .collect::<Result<Vec<_>>>()?;
    let reference = rows
        .iter()
        .find(|r| r.method == scenario.reference)
        .cloned()
        .ok_or_else(|| {
            Error::contract(format!(
                "reference {} is not in the table",
                scenario.reference
            ))
        })?;
    for r in &mut rows {
        r.delta_tokens_pct = delta_pct(r.token_number as f64, reference.token_number as f64);
        r.delta_flops_pct = delta_pct(r.prefill_flops as f64, reference.prefill_flops as f64);
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "method,token_number,prefill_flops,decode_flops_per_token,kv_bytes,param_count,delta_tokens_pct,delta_flops_pct";

pub fn to_csv(rows: &[CostReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.2},{:.2}\n",
            r.method,
            r.token_number,
            r.prefill_flops,
            r.decode_flops_per_token,
            r.kv_bytes,
            r.param_count,
            r.delta_tokens_pct,
            r.delta_flops_pct
        ));
    }
    out
}

pub fn to_json(rows: &[CostReport]) -> String {
    serde_json::to_string_pretty(rows).expect("reports serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_of_presets() {
        assert_eq!(
            count_tokens(&ArchSpec::flashsloth(), ImageKind::Base).unwrap(),
            90
        );
        assert_eq!(
            count_tokens(&ArchSpec::flashsloth_hd(), ImageKind::Hd).unwrap(),
            414
        );
        assert_eq!(
            count_tokens(&ArchSpec::llava15(), ImageKind::Base).unwrap(),
            576
        );
        assert_eq!(
            count_tokens(&ArchSpec::imp(), ImageKind::Base).unwrap(),
            729
        );
        assert_eq!(
            count_tokens(&ArchSpec::qwen2vl(), ImageKind::Base).unwrap(),
            466
        );
        assert_eq!(
            count_tokens_on(&ArchSpec::internvl2(), ImageKind::Base, Some("MMB")).unwrap(),
            1296
        );
    }

    #[test]
    fn undefined_policy_pairs_fail() {
        assert!(count_tokens(&ArchSpec::flashsloth(), ImageKind::Hd).is_err());
        assert!(count_tokens(&ArchSpec::flashsloth_hd(), ImageKind::Base).is_err());
        assert!(count_tokens_on(&ArchSpec::qwen2vl(), ImageKind::Base, Some("VQAv2")).is_err());
        let bad = ArchSpec {
            policy: TokenPolicy::Sap { grid: 28, s: 3 },
            ..ArchSpec::flashsloth()
        };
        assert!(count_tokens(&bad, ImageKind::Base).is_err());
    }

    #[test]
    fn decode_single_context_reduces_to_projection_term() {
        let spec = ArchSpec {
            n_layers: 1,
            d_ff: 0,
            ..ArchSpec::flashsloth()
        };
        let b = flop_breakdown(&spec, 1, Phase::Decode);
        let d = spec.d_model;
        assert_eq!(b.projections, 8 * d * d * 2);
        assert_eq!(b.mlp, 0);
        assert_eq!(b.total(), 16 * d * d + 8 * d);
    }

    #[test]
    fn shorter_prompts_cost_less_than_proportionally() {
        let spec = ArchSpec::imp();
        let short = estimate_flops(&spec, 90, Phase::Prefill) as f64;
        let long = estimate_flops(&spec, 576, Phase::Prefill) as f64;
        assert!(short / long < 0.17);
    }

    #[test]
    fn compare_requires_specs_and_reference() {
        assert!(compare(&[], &Scenario::default()).is_err());
        assert!(compare(&[ArchSpec::imp()], &Scenario::default()).is_err());
        let rows = compare(&[ArchSpec::llava15()], &Scenario::default()).unwrap();
        assert_eq!(rows[0].delta_tokens_pct, 0.0);
        assert_eq!(rows[0].delta_flops_pct, 0.0);
    }

    #[test]
    fn csv_has_expected_columns() {
        let rows = compare(&ArchSpec::presets(), &Scenario::default()).unwrap();
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(csv.lines().any(|l| l.starts_with("FlashSloth,90,")));
        assert!(csv.lines().any(|l| l.starts_with("FlashSloth-HD,414,")));
        let json: serde_json::Value = serde_json::from_str(&to_json(&rows)).unwrap();
        assert_eq!(json[5]["token_number"], 90);
    }
}
