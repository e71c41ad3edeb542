use crate::embq::embq_graph;
use crate::error::{Error, Result};
use crate::sap::compress_graph;
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::END_OF_ANSWER;

use super::params::{layer_name, BoundParams, ParamGroup};
use super::sequence::{MixedSequence, Segment, Token};
use super::{Model, VisualInput};

/// Handles into a recorded forward pass.
pub struct GraphOut {
    /// `[len × vocab]`.
    pub logits: Var,
    /// Input embeddings, then the output of every block (after the hook
    /// where one runs).
    pub hidden: Vec<Var>,
    /// Rotated keys and values of every block.
    pub kv: Vec<(Var, Var)>,
}

/// Values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
}

/// Per-layer rotated key/value caches of the consumed positions.
#[derive(Clone, Debug)]
pub struct DecodeState {
    caches: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cache_rows(&self, layer: usize) -> usize {
        self.caches[layer].0.rows()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Source {
    Visual,
    Embed,
    Query,
}

impl Model {
    fn check_capacity(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq {
            return Err(Error::Capacity {
                len,
                max: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// Compressed, projected visual tokens and the raw tokens the queries read.
    fn visual_stream(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        visual: &VisualInput,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        if visual.grids.len() != c.n_grids() {
            return Err(Error::contract(format!(
                "expected {} visual grids, got {}",
                c.n_grids(),
                visual.grids.len()
            )));
        }
        let vars = self.compressor_vars(bound)?;
        let mut pooled = Vec::with_capacity(visual.grids.len());
        for g in &visual.grids {
            if g.h() != c.grid || g.w() != c.grid || g.d() != c.d_vis {
                return Err(Error::shape(
                    "visual_stream",
                    format!(
                        "grid {}×{}×{} does not match {}×{}×{}",
                        g.h(),
                        g.w(),
                        g.d(),
                        c.grid,
                        c.grid,
                        c.d_vis
                    ),
                ));
            }
            let x = tape.constant(g.features().clone());
            pooled.push(compress_graph(tape, x, g.h(), g.w(), c.s, &vars)?);
        }
        let tokens = tape.concat_rows(&pooled)?;
        let projected = tape.matmul(tokens, bound.get("proj.w")?)?;

        let raw_grids = if c.hd && !c.hd_all_tiles {
            &visual.grids[visual.grids.len() - 1..]
        } else {
            &visual.grids[..]
        };
        let mut raw = Vec::new();
        for g in raw_grids {
            raw.extend_from_slice(g.features().data());
        }
        let rows = raw.len() / c.d_vis;
        let fv = tape.constant(Tensor::new(vec![rows, c.d_vis], raw)?);
        Ok((projected, fv))
    }

    fn embed_tokens(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[Token],
        visual: Option<Var>,
    ) -> Result<Var> {
        let vocab = self.config.vocab_size;
        let mut runs: Vec<(Source, Vec<Option<usize>>)> = Vec::new();
        for &t in tokens {
            let (src, row) = match t {
                Token::Visual(i) => (Source::Visual, i),
                Token::Text(id) | Token::Answer(id) => {
                    if id as usize >= vocab {
                        return Err(Error::contract(format!(
                            "token id {id} outside vocabulary of {vocab}"
                        )));
                    }
                    (Source::Embed, id as usize)
                }
                Token::Query(j) => (Source::Query, j),
            };
            match runs.last_mut() {
                Some((s, rows)) if *s == src => rows.push(Some(row)),
                _ => runs.push((src, vec![Some(row)])),
            }
        }
        let mut pieces = Vec::with_capacity(runs.len());
        for (src, rows) in runs {
            let table = match src {
                Source::Visual => {
                    visual.ok_or_else(|| Error::contract("visual token without visual input"))?
                }
                Source::Embed => bound.get("llm.embed")?,
                Source::Query => bound.get("queries")?,
            };
            pieces.push(tape.gather_rows(table, rows)?);
        }
        tape.concat_rows(&pieces)
    }

    fn block(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: usize,
        x: Var,
        offset: usize,
        past: Option<(Var, Var)>,
    ) -> Result<(Var, Var, Var)> {
        let p = |s: &str| bound.get(&layer_name(layer, s));
        let heads = self.config.n_heads;
        let h = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?)?;
        let q = tape.matmul(h, p("attn.wq")?)?;
        let k = tape.matmul(h, p("attn.wk")?)?;
        let v = tape.matmul(h, p("attn.wv")?)?;
        let q = tape.rope(q, heads, offset)?;
        let k = tape.rope(k, heads, offset)?;
        let (k, v) = match past {
            Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let a = tape.causal_attention(q, k, v, heads, offset)?;
        let a = tape.matmul(a, p("attn.wo")?)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p("ln2.g")?, p("ln2.b")?)?;
        let f = tape.matmul(h, p("mlp.w1")?)?;
        let f = tape.add(f, p("mlp.b1")?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p("mlp.w2")?)?;
        let f = tape.add(f, p("mlp.b2")?)?;
        Ok((tape.add(x, f)?, k, v))
    }

    /// Replaces the hidden states at every query position with the fused
    /// query-module output; all other rows are copied unchanged.
    fn apply_hook(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        seq: &MixedSequence,
        fv: Var,
        insert_at: usize,
    ) -> Result<Var> {
        let vars = self.embq_vars(bound, insert_at)?;
        let n = seq.len();
        let mut pieces = vec![x];
        let mut index: Vec<Option<usize>> = (0..n).map(Some).collect();
        let mut next = n;
        for turn in 0..seq.n_turns() {
            let Some(qr) = seq.span_of(turn, Segment::Query) else {
                continue;
            };
            let tr = seq.span_of(turn, Segment::Text).ok_or(Error::EmptyText)?;
            let ft = tape.slice_rows(x, tr.start, tr.end)?;
            let fq = tape.slice_rows(x, qr.start, qr.end)?;
            let (fused, _) = embq_graph(tape, fq, ft, fv, &vars)?;
            pieces.push(fused);
            for (j, p) in qr.clone().enumerate() {
                index[p] = Some(next + j);
            }
            next += qr.len();
        }
        if pieces.len() == 1 {
            return Ok(x);
        }
        let all = tape.concat_rows(&pieces)?;
        tape.gather_rows(all, index)
    }

    /// Records the full forward pass. With `hook == false` the query
    /// module is skipped even when configured.
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        visual: &VisualInput,
        seq: &MixedSequence,
        hook: bool,
    ) -> Result<GraphOut> {
        self.check_capacity(seq.len())?;
        if seq.is_empty() {
            return Err(Error::contract("empty sequence"));
        }
        let has_visual = seq.count(Segment::Visual) > 0;
        let (projected, fv) = if has_visual || self.config.embq_enabled() {
            let (p, f) = self.visual_stream(tape, bound, visual)?;
            (Some(p), Some(f))
        } else {
            (None, None)
        };
        let mut x = self.embed_tokens(tape, bound, seq.tokens(), projected)?;
        let mut hidden = vec![x];
        let mut kv = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let (out, k, v) = self.block(tape, bound, layer, x, 0, None)?;
            x = out;
            if hook && self.config.hook_at(layer + 1) {
                let fv = fv.expect("visual stream is built when queries are enabled");
                x = self.apply_hook(tape, bound, x, seq, fv, layer + 1)?;
            }
            hidden.push(x);
            kv.push((k, v));
        }
        let logits = self.head(tape, bound, x)?;
        Ok(GraphOut { logits, hidden, kv })
    }

    fn head(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, bound.get("llm.ln_f.g")?, bound.get("llm.ln_f.b")?)?;
        tape.matmul(h, bound.get("llm.lm_head")?)
    }

    pub fn forward(&self, visual: &VisualInput, seq: &MixedSequence) -> Result<Tensor> {
        Ok(self.forward_traced(visual, seq, true)?.logits)
    }

    pub fn forward_traced(
        &self,
        visual: &VisualInput,
        seq: &MixedSequence,
        hook: bool,
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let out = self.build_graph(&mut tape, &bound, visual, seq, hook)?;
        Ok(ForwardTrace {
            logits: tape.value(out.logits).clone(),
            hidden: out.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        })
    }

    /// Runs the prompt, returning the caches and the logits of its last row.
    pub fn prefill(
        &self,
        visual: &VisualInput,
        prompt: &MixedSequence,
    ) -> Result<(DecodeState, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let out = self.build_graph(&mut tape, &bound, visual, prompt, true)?;
        let caches = out
            .kv
            .iter()
            .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
            .collect();
        let logits = tape.value(out.logits);
        let last = Tensor::vector(logits.row(logits.rows() - 1).to_vec());
        Ok((
            DecodeState {
                caches,
                len: prompt.len(),
            },
            last,
        ))
    }

    /// Feeds one answer token at position `state.len()`.
    pub fn decode_step(&self, state: &mut DecodeState, token: u32) -> Result<Tensor> {
        self.check_capacity(state.len + 1)?;
        let mut tape = Tape::new();
        let bound = self
            .params
            .bind_where(&mut tape, |n| ParamGroup::of(n) == Some(ParamGroup::Llm));
        let mut x = self.embed_tokens(&mut tape, &bound, &[Token::Answer(token)], None)?;
        let mut fresh = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let (ck, cv) = &state.caches[layer];
            let past = (tape.constant(ck.clone()), tape.constant(cv.clone()));
            let (out, k, v) = self.block(&mut tape, &bound, layer, x, state.len, Some(past))?;
            x = out;
            fresh.push((k, v));
        }
        let logits = self.head(&mut tape, &bound, x)?;
        for (cache, (k, v)) in state.caches.iter_mut().zip(fresh) {
            *cache = (tape.value(k).clone(), tape.value(v).clone());
        }
        state.len += 1;
        Ok(Tensor::vector(tape.value(logits).data().to_vec()))
    }

    /// Greedy decoding; the end-of-answer id stops generation and is not returned.
    pub fn decode_greedy(
        &self,
        visual: &VisualInput,
        prompt: &MixedSequence,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        self.check_capacity(prompt.len())?;
        let mut out = Vec::new();
        if max_new == 0 {
            return Ok(out);
        }
        let (mut state, mut logits) = self.prefill(visual, prompt)?;
        loop {
            let id = argmax(logits.data()) as u32;
            if id == END_OF_ANSWER {
                break;
            }
            out.push(id);
            if out.len() == max_new {
                break;
            }
            logits = self.decode_step(&mut state, id)?;
        }
        Ok(out)
    }
}

/// Index of the first maximal entry.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
