//! Decoder-only transformer over `visual ‖ text ‖ query ‖ answer` sequences,
//! with the query hook after selected blocks and cached greedy decoding.

mod checkpoint;
mod config;
mod forward;
mod params;
mod sequence;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use forward::{DecodeState, ForwardTrace, GraphOut};
pub use params::{derive_seed, BoundParams, ParamGroup, ParamStore};
pub use sequence::{build_sequence, MixedSequence, Segment, Span, Token, Turn};

use crate::embq::{init_queries, AttnParams, EmbQBlock, EmbQBlockVars, EmbQParams, EmbQVars};
use crate::error::{Error, Result};
use crate::sap::{BaselineParams, CompressorKind, CompressorVars, SapParams, SapVars};
use crate::tensor::{matmul, Tensor};
use crate::vision::{hd_tile, synth_features, VisualGrid};

pub(crate) use params::{embq_name, layer_name};

const EMBED_STD: f64 = 0.02;

/// Encoder output for one image: a single grid, or four tiles and a thumbnail.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    pub grids: Vec<VisualGrid>,
}

impl VisualInput {
    pub fn single(grid: VisualGrid) -> Self {
        VisualInput { grids: vec![grid] }
    }

    pub fn hd(full: &VisualGrid) -> Result<Self> {
        Ok(VisualInput {
            grids: hd_tile(full)?.grids().cloned().collect(),
        })
    }

    /// Synthetic encoder output for `seed`, shaped for `config`.
    pub fn synth(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.hd {
            let side = 2 * config.grid;
            Self::hd(&synth_features(seed, side, side, config.d_vis)?)
        } else {
            Ok(Self::single(synth_features(
                seed,
                config.grid,
                config.grid,
                config.d_vis,
            )?))
        }
    }
}

/// Maps compressed tokens into model space.
pub fn project_visual(fv_s: &VisualGrid, proj: &Tensor) -> Result<Tensor> {
    matmul(fv_s.features(), proj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config)?;
        Ok(Model { config, params })
    }

    /// Pairs a config with existing weights; every expected tensor must be
    /// present with the expected shape and nothing else may be.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dims("from_parts", t.shape(), got.shape()));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    pub fn sequence(&self, turns: &[Turn]) -> MixedSequence {
        build_sequence(self.config.n_visual_tokens(), turns, self.config.n_queries)
    }

    /// SAP weights as a standalone value (SAP compressor only).
    pub fn sap_params(&self) -> Result<SapParams> {
        SapParams::new(
            self.params.get("compressor.w1")?.clone(),
            self.params.get("compressor.b1")?.clone(),
            self.params.get("compressor.w2")?.clone(),
            self.params.get("compressor.b2")?.clone(),
            self.config.s,
        )
    }

    /// Query-module weights for the hook after block `insert_at`.
    pub fn embq_params(&self, insert_at: usize) -> Result<EmbQParams> {
        let p = |b: usize, s: &str| self.params.get(&embq_name(insert_at, b, s)).cloned();
        let blocks = (0..self.config.embq_n_layers)
            .map(|b| {
                Ok(EmbQBlock {
                    text_attn: AttnParams {
                        wq: p(b, "text.wq")?,
                        wk: p(b, "text.wk")?,
                        wv: p(b, "text.wv")?,
                    },
                    vis_attn: AttnParams {
                        wq: p(b, "vis.wq")?,
                        wk: p(b, "vis.wk")?,
                        wv: p(b, "vis.wv")?,
                    },
                    up_proj: p(b, "up_proj")?,
                    gate_logits: match self.config.fusion {
                        crate::embq::FusionMode::Gate => Some(p(b, "gate")?),
                        _ => None,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(EmbQParams {
            blocks,
            fusion: self.config.fusion,
        })
    }

    pub(crate) fn compressor_vars(&self, bound: &BoundParams) -> Result<CompressorVars> {
        Ok(match self.config.compressor {
            CompressorKind::Sap => CompressorVars::Sap(SapVars {
                w1: bound.get("compressor.w1")?,
                b1: bound.get("compressor.b1")?,
                w2: bound.get("compressor.w2")?,
                b2: bound.get("compressor.b2")?,
            }),
            CompressorKind::AvgPool => CompressorVars::AvgPool,
            CompressorKind::PixelShuffle => CompressorVars::PixelShuffle {
                proj: bound.get("compressor.proj")?,
            },
            CompressorKind::Ldp => CompressorVars::Ldp {
                depthwise: bound.get("compressor.depthwise")?,
                pointwise: bound.get("compressor.pointwise")?,
            },
        })
    }

    pub(crate) fn embq_vars(&self, bound: &BoundParams, insert_at: usize) -> Result<EmbQVars> {
        let v = |b: usize, s: &str| bound.get(&embq_name(insert_at, b, s));
        let blocks = (0..self.config.embq_n_layers)
            .map(|b| {
                Ok(EmbQBlockVars {
                    text: [v(b, "text.wq")?, v(b, "text.wk")?, v(b, "text.wv")?],
                    vis: [v(b, "vis.wq")?, v(b, "vis.wk")?, v(b, "vis.wv")?],
                    up_proj: v(b, "up_proj")?,
                    gate_logits: match self.config.fusion {
                        crate::embq::FusionMode::Gate => Some(v(b, "gate")?),
                        _ => None,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(EmbQVars {
            blocks,
            fusion: self.config.fusion,
        })
    }
}

fn init_params(c: &ModelConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let seed = |name: &str| derive_seed(c.seed, name);
    let randn = |shape: &[usize], fan_in: usize, name: &str| {
        Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), seed(name))
    };

    match c.compressor {
        CompressorKind::Sap => {
            let p = SapParams::init(c.d_vis, c.d_vis, c.s, seed("compressor"))?;
            store.insert("compressor.w1", p.w1);
            store.insert("compressor.b1", p.b1);
            store.insert("compressor.w2", p.w2);
            store.insert("compressor.b2", p.b2);
        }
        kind => match BaselineParams::init(kind, c.d_vis, c.s, seed("compressor"))? {
            BaselineParams::AvgPool => {}
            BaselineParams::PixelShuffle { proj } => store.insert("compressor.proj", proj),
            BaselineParams::Ldp {
                depthwise,
                pointwise,
            } => {
                store.insert("compressor.depthwise", depthwise);
                store.insert("compressor.pointwise", pointwise);
            }
        },
    }

    store.insert("proj.w", randn(&[c.d_vis, c.d_model], c.d_vis, "proj.w"));
    let embed = Tensor::randn(&[c.vocab_size, c.d_model], EMBED_STD, seed("llm.embed"));

    let d = c.d_model;
    for l in 0..c.n_layers {
        let name = |s: &str| layer_name(l, s);
        store.insert(name("ln1.g"), Tensor::filled(&[d], 1.0));
        store.insert(name("ln1.b"), Tensor::zeros(&[d]));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(name(w), randn(&[d, d], d, &name(w)));
        }
        store.insert(name("ln2.g"), Tensor::filled(&[d], 1.0));
        store.insert(name("ln2.b"), Tensor::zeros(&[d]));
        store.insert(name("mlp.w1"), randn(&[d, c.d_ff], d, &name("mlp.w1")));
        store.insert(name("mlp.b1"), Tensor::zeros(&[c.d_ff]));
        store.insert(name("mlp.w2"), randn(&[c.d_ff, d], c.d_ff, &name("mlp.w2")));
        store.insert(name("mlp.b2"), Tensor::zeros(&[d]));
    }
    store.insert("llm.ln_f.g", Tensor::filled(&[d], 1.0));
    store.insert("llm.ln_f.b", Tensor::zeros(&[d]));
    store.insert("llm.lm_head", randn(&[d, c.vocab_size], d, "llm.lm_head"));

    if c.embq_enabled() {
        for &k in &c.embq_layers {
            let tag = format!("embq.L{k:02}");
            let p = EmbQParams::init(
                d,
                c.d_vis,
                c.embq_dim,
                c.embq_n_layers,
                c.fusion,
                seed(&tag),
            )?;
            for (b, block) in p.blocks.into_iter().enumerate() {
                let n = |s: &str| embq_name(k, b, s);
                store.insert(n("text.wq"), block.text_attn.wq);
                store.insert(n("text.wk"), block.text_attn.wk);
                store.insert(n("text.wv"), block.text_attn.wv);
                store.insert(n("vis.wq"), block.vis_attn.wq);
                store.insert(n("vis.wk"), block.vis_attn.wk);
                store.insert(n("vis.wv"), block.vis_attn.wv);
                store.insert(n("up_proj"), block.up_proj);
                if let Some(g) = block.gate_logits {
                    store.insert(n("gate"), g);
                }
            }
        }
        let q = init_queries(c.n_queries, &embed, c.query_init, seed("queries"))?;
        store.insert("queries", q.embeddings);
    }
    store.insert("llm.embed", embed);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::DOT_TOKEN;

    #[test]
    fn parameter_groups_are_populated() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        for g in ParamGroup::ALL {
            assert!(m.params().group(g).count() > 0, "{g}");
        }
        assert!(m.params().names().all(|n| ParamGroup::of(n).is_some()));
        let q = m.params().get("queries").unwrap();
        let e = m.params().get("llm.embed").unwrap();
        assert_eq!(q.row(1), e.row(DOT_TOKEN as usize));
    }

    #[test]
    fn no_queries_means_no_query_parameters() {
        let m = Model::new(ModelConfig {
            n_queries: 0,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert_eq!(m.params().group(ParamGroup::Embq).count(), 0);
        assert!(!m.params().contains("queries"));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig::tiny()).unwrap();
        let b = Model::new(ModelConfig::tiny()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig {
            seed: 1,
            ..ModelConfig::tiny()
        })
        .unwrap();
        assert_ne!(
            a.params().get("proj.w").unwrap(),
            c.params().get("proj.w").unwrap()
        );
    }

    #[test]
    fn project_visual_examples() {
        let g = synth_features(1, 27, 27, 4).unwrap();
        let pooled = crate::sap::sap_forward(&g, &SapParams::init(4, 4, 3, 0).unwrap()).unwrap();
        assert_eq!(
            project_visual(&pooled, &Tensor::eye(4)).unwrap(),
            *pooled.features()
        );
        let out = project_visual(&pooled, &Tensor::zeros(&[4, 6])).unwrap();
        assert_eq!(out.shape(), [81, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            project_visual(&pooled, &Tensor::zeros(&[5, 6])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let (config, mut params) = Model::new(ModelConfig::tiny()).unwrap().into_parts();
        assert!(Model::from_parts(config.clone(), params.clone()).is_ok());
        params.insert("proj.w", Tensor::zeros(&[3, 3]));
        assert!(Model::from_parts(config, params).is_err());
    }
}
