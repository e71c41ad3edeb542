//! Embedded queries: learnable tokens that read the instruction, look up the
//! matching content in the uncompressed visual grid, and write the result
//! back into their own hidden states inside the language model.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::DOT_TOKEN;

/// Gate logit used for a closed gate.
pub const CLOSED_GATE: f64 = -30.0;
/// Standard deviation of randomly initialized query embeddings.
pub const RANDOM_QUERY_STD: f64 = 0.02;

macro_rules! config_enum {
    ($name:ident, $what:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::contract(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

config_enum!(FusionMode, "fusion mode" {
    Add => "add",
    Replace => "replace",
    Gate => "gate",
});

config_enum!(QueryInit, "query init" {
    Dot => "dot",
    Random => "random",
    FixedDot => "fixed_dot",
});

impl QueryInit {
    pub fn trainable(self) -> bool {
        self != QueryInit::FixedDot
    }
}

/// Query, key and value maps of one single-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttnParams {
    fn init(q_in: usize, kv_in: usize, d_e: usize, seed: u64) -> Self {
        AttnParams {
            wq: Tensor::randn(&[q_in, d_e], 1.0 / (q_in as f64).sqrt(), seed),
            wk: Tensor::randn(
                &[kv_in, d_e],
                1.0 / (kv_in as f64).sqrt(),
                seed.wrapping_add(1),
            ),
            wv: Tensor::randn(
                &[kv_in, d_e],
                1.0 / (kv_in as f64).sqrt(),
                seed.wrapping_add(2),
            ),
        }
    }
}

/// One text-attention → visual-attention → up-projection chain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbQBlock {
    /// `wq, wk, wv`: `[d_model × d_e]`.
    pub text_attn: AttnParams,
    /// `wq`: `[d_e × d_e]`; `wk, wv`: `[d_vis × d_e]`.
    pub vis_attn: AttnParams,
    /// `[d_e × d_model]`.
    pub up_proj: Tensor,
    /// `[d_model]`, present only for gate fusion.
    pub gate_logits: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbQParams {
    pub blocks: Vec<EmbQBlock>,
    pub fusion: FusionMode,
}

impl EmbQParams {
    pub fn init(
        d_model: usize,
        d_vis: usize,
        d_e: usize,
        n_layers: usize,
        fusion: FusionMode,
        seed: u64,
    ) -> Result<Self> {
        if n_layers == 0 || d_e == 0 {
            return Err(Error::contract("EmbQ needs n_layers ≥ 1 and d_e ≥ 1"));
        }
        let blocks = (0..n_layers as u64)
            .map(|i| {
                let base = seed.wrapping_add(i.wrapping_mul(0x9E37_79B9));
                EmbQBlock {
                    text_attn: AttnParams::init(d_model, d_model, d_e, base),
                    vis_attn: AttnParams::init(d_e, d_vis, d_e, base.wrapping_add(10)),
                    up_proj: Tensor::randn(
                        &[d_e, d_model],
                        1.0 / (d_e as f64).sqrt(),
                        base.wrapping_add(20),
                    ),
                    gate_logits: (fusion == FusionMode::Gate).then(|| Tensor::zeros(&[d_model])),
                }
            })
            .collect();
        Ok(EmbQParams { blocks, fusion })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_e(&self) -> usize {
        self.blocks[0].up_proj.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EmbQVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        let blocks = self
            .blocks
            .iter()
            .map(|b| EmbQBlockVars {
                text: [
                    leaf(&b.text_attn.wq),
                    leaf(&b.text_attn.wk),
                    leaf(&b.text_attn.wv),
                ],
                vis: [
                    leaf(&b.vis_attn.wq),
                    leaf(&b.vis_attn.wk),
                    leaf(&b.vis_attn.wv),
                ],
                up_proj: leaf(&b.up_proj),
                gate_logits: b.gate_logits.as_ref().map(&mut leaf),
            })
            .collect();
        EmbQVars {
            blocks,
            fusion: self.fusion,
        }
    }
}

/// Tape handles for one [`EmbQBlock`]; `text` and `vis` hold `[wq, wk, wv]`.
#[derive(Clone, Debug)]
pub struct EmbQBlockVars {
    pub text: [Var; 3],
    pub vis: [Var; 3],
    pub up_proj: Var,
    pub gate_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EmbQVars {
    pub blocks: Vec<EmbQBlockVars>,
    pub fusion: FusionMode,
}

/// The learnable query tokens appended after each instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// `[n × d_model]`; `n = 0` disables the module.
    pub embeddings: Tensor,
    pub init_mode: QueryInit,
}

impl QuerySet {
    pub fn n(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }
}

/// Dot modes copy the embedding row of `'.'` into every query; random mode
/// draws `N(0, 0.02²)` entries from `seed`.
pub fn init_queries(
    n: usize,
    embedding_table: &Tensor,
    mode: QueryInit,
    seed: u64,
) -> Result<QuerySet> {
    let (vocab, d) = embedding_table.matrix_dims("init_queries")?;
    let embeddings = match mode {
        QueryInit::Random => Tensor::randn(&[n, d], RANDOM_QUERY_STD, seed),
        QueryInit::Dot | QueryInit::FixedDot => {
            let dot = DOT_TOKEN as usize;
            if dot >= vocab {
                return Err(Error::contract(format!(
                    "embedding table of {vocab} rows has no dot token {dot}"
                )));
            }
            Tensor::new(vec![n, d], embedding_table.row(dot).repeat(n))?
        }
    };
    Ok(QuerySet {
        embeddings,
        init_mode: mode,
    })
}

/// Output of one attention stage and its `[n_q × n_k]` weights.
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// `softmax((q_src·wq)(kv·wk)ᵀ / √d_e) · (kv·wv)`.
pub fn attend_graph(tape: &mut Tape, q_src: Var, kv: Var, w: [Var; 3]) -> Result<Attended> {
    let d_e = tape.shape(w[0]).last().copied().unwrap_or(1);
    let q = tape.matmul(q_src, w[0])?;
    let k = tape.matmul(kv, w[1])?;
    let v = tape.matmul(kv, w[2])?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_e as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, v)?;
    Ok(Attended { out, weights })
}

/// Attention weights of every stage, in application order.
#[derive(Clone, Debug, Default)]
pub struct EmbQTrace {
    pub text_weights: Vec<Tensor>,
    pub visual_weights: Vec<Tensor>,
}

/// Records the full module on `tape`: `fq` `[n × d_model]`, `ft` `[l × d_model]`,
/// `fv` `[N_v × d_vis]`. Returns the fused query states and the weight handles.
pub fn embq_graph(
    tape: &mut Tape,
    fq: Var,
    ft: Var,
    fv: Var,
    vars: &EmbQVars,
) -> Result<(Var, Vec<(Var, Var)>)> {
    if tape.value(ft).rows() == 0 {
        return Err(Error::EmptyText);
    }
    if tape.value(fv).rows() == 0 {
        return Err(Error::contract("EmbQ needs at least one visual token"));
    }
    let mut current = fq;
    let mut weights = Vec::with_capacity(vars.blocks.len());
    for block in &vars.blocks {
        let text = attend_graph(tape, current, ft, block.text)?;
        let vis = attend_graph(tape, text.out, fv, block.vis)?;
        let delta = tape.matmul(vis.out, block.up_proj)?;
        current = match vars.fusion {
            FusionMode::Add => tape.add(current, delta)?,
            FusionMode::Replace => delta,
            FusionMode::Gate => {
                let logits = block
                    .gate_logits
                    .ok_or_else(|| Error::contract("gate fusion without gate logits"))?;
                let gate = tape.sigmoid(logits);
                let gated = tape.mul(delta, gate)?;
                tape.add(current, gated)?
            }
        };
        weights.push((text.weights, vis.weights));
    }
    Ok((current, weights))
}

fn eager_attend(q_src: &Tensor, kv: &Tensor, p: &AttnParams) -> Result<Tensor> {
    if kv.rows() == 0 {
        return Err(Error::contract("attention over an empty key set"));
    }
    let mut tape = Tape::new();
    let q = tape.constant(q_src.clone());
    let kv = tape.constant(kv.clone());
    let w = [
        tape.constant(p.wq.clone()),
        tape.constant(p.wk.clone()),
        tape.constant(p.wv.clone()),
    ];
    let a = attend_graph(&mut tape, q, kv, w)?;
    Ok(tape.value(a.out).clone())
}

/// Queries attend over the instruction states only.
pub fn text_query(fq_k: &Tensor, ft_k: &Tensor, block: &EmbQBlock) -> Result<Tensor> {
    if ft_k.rows() == 0 {
        return Err(Error::EmptyText);
    }
    eager_attend(fq_k, ft_k, &block.text_attn)
}

/// Text-conditioned queries attend over the uncompressed visual tokens.
pub fn visual_query(ftq: &Tensor, fv_raw: &Tensor, block: &EmbQBlock) -> Result<Tensor> {
    if fv_raw.rows() == 0 {
        return Err(Error::contract("EmbQ needs at least one visual token"));
    }
    eager_attend(ftq, fv_raw, &block.vis_attn)
}

pub fn embq_apply(
    fq_k: &Tensor,
    ft_k: &Tensor,
    fv_raw: &Tensor,
    params: &EmbQParams,
) -> Result<Tensor> {
    Ok(embq_apply_traced(fq_k, ft_k, fv_raw, params)?.0)
}

pub fn embq_apply_traced(
    fq_k: &Tensor,
    ft_k: &Tensor,
    fv_raw: &Tensor,
    params: &EmbQParams,
) -> Result<(Tensor, EmbQTrace)> {
    let mut tape = Tape::new();
    let fq = tape.constant(fq_k.clone());
    let ft = tape.constant(ft_k.clone());
    let fv = tape.constant(fv_raw.clone());
    let vars = params.bind(&mut tape, false);
    let (out, handles) = embq_graph(&mut tape, fq, ft, fv, &vars)?;
    let mut trace = EmbQTrace::default();
    for (t, v) in handles {
        trace.text_weights.push(tape.value(t).clone());
        trace.visual_weights.push(tape.value(v).clone());
    }
    Ok((tape.value(out).clone(), trace))
}
