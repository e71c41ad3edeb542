//! Slow, loop-based reference implementations used as test oracles. They
//! share no code with the library beyond its data types.

#![allow(dead_code)]

use sloth_core::embq::{EmbQBlock, FusionMode};
use sloth_core::model::{MixedSequence, Model, Segment, Token, VisualInput};
use sloth_core::sap::SapParams;
use sloth_core::vision::{VisualGrid, END_OF_ANSWER};
use sloth_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Region loop: score every cell with the MLP, softmax within the region,
/// and sum the weighted cells.
pub fn sap_oracle(grid: &VisualGrid, p: &SapParams) -> Mat {
    let s = p.s;
    let w1 = to_mat(&p.w1);
    let b1 = vec_of(&p.b1);
    let w2 = vec_of(&p.w2);
    let b2 = p.b2.data()[0];
    let d = grid.d();
    let mut out = Vec::new();
    for rr in 0..grid.h() / s {
        for rc in 0..grid.w() / s {
            let mut cells = Vec::new();
            for i in 0..s {
                for j in 0..s {
                    cells.push(grid.cell(rr * s + i, rc * s + j).to_vec());
                }
            }
            let logits: Vec<f64> = cells
                .iter()
                .map(|x| {
                    let mut z = b2;
                    for h in 0..b1.len() {
                        let mut a = b1[h];
                        for k in 0..d {
                            a += x[k] * w1[k][h];
                        }
                        z += gelu(a) * w2[h];
                    }
                    z
                })
                .collect();
            let alpha = softmax(&logits);
            let mut pooled = vec![0.0; d];
            for (a, x) in alpha.iter().zip(&cells) {
                for k in 0..d {
                    pooled[k] += a * x[k];
                }
            }
            out.push(pooled);
        }
    }
    out
}

/// `softmax((q·wq)(kv·wk)ᵀ/√d_e)·(kv·wv)` with explicit loops.
pub fn attention_oracle(q_src: &Mat, kv: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> (Mat, Mat) {
    let q = mat_mul(q_src, wq);
    let k = mat_mul(kv, wk);
    let v = mat_mul(kv, wv);
    let d_e = wq[0].len() as f64;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d_e.sqrt())
            .collect();
        let a = softmax(&scores);
        let mut o = vec![0.0; v[0].len()];
        for (aj, vj) in a.iter().zip(&v) {
            for t in 0..o.len() {
                o[t] += aj * vj[t];
            }
        }
        out.push(o);
        weights.push(a);
    }
    (out, weights)
}

pub fn embq_block_oracle(fq: &Mat, ft: &Mat, fv: &Mat, b: &EmbQBlock, fusion: FusionMode) -> Mat {
    let (ftq, _) = attention_oracle(
        fq,
        ft,
        &to_mat(&b.text_attn.wq),
        &to_mat(&b.text_attn.wk),
        &to_mat(&b.text_attn.wv),
    );
    let (fvq, _) = attention_oracle(
        &ftq,
        fv,
        &to_mat(&b.vis_attn.wq),
        &to_mat(&b.vis_attn.wk),
        &to_mat(&b.vis_attn.wv),
    );
    let delta = mat_mul(&fvq, &to_mat(&b.up_proj));
    let gate: Option<Vec<f64>> = b
        .gate_logits
        .as_ref()
        .map(|g| g.data().iter().map(|&x| sigmoid(x)).collect());
    fq.iter()
        .zip(&delta)
        .map(|(q, dl)| {
            (0..q.len())
                .map(|j| match fusion {
                    FusionMode::Add => q[j] + dl[j],
                    FusionMode::Replace => dl[j],
                    FusionMode::Gate => q[j] + gate.as_ref().unwrap()[j] * dl[j],
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
        .collect()
}

fn rotate(x: &mut [f64], pos: usize, n_heads: usize) {
    let hd = x.len() / n_heads;
    for h in 0..n_heads {
        for t in 0..hd / 2 {
            let theta = pos as f64 / 10000f64.powf(2.0 * t as f64 / hd as f64);
            let (i, j) = (h * hd + 2 * t, h * hd + 2 * t + 1);
            let (a, b) = (x[i], x[j]);
            x[i] = a * theta.cos() - b * theta.sin();
            x[j] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Whole-model reference: SAP compressor, projector, pre-norm blocks with
/// rotary causal attention, the query hook and the output head.
pub fn forward_oracle(model: &Model, visual: &VisualInput, seq: &MixedSequence) -> Mat {
    let c = model.config();
    let p = |n: &str| model.params().get(n).unwrap();
    let m = |n: &str| to_mat(p(n));
    let v = |n: &str| vec_of(p(n));
    let sap = model.sap_params().unwrap();
    let proj = m("proj.w");
    let mut visual_rows = Vec::new();
    for g in &visual.grids {
        visual_rows.extend(mat_mul(&sap_oracle(g, &sap), &proj));
    }
    let embed = m("llm.embed");
    let queries = if c.n_queries > 0 {
        m("queries")
    } else {
        vec![]
    };
    let mut x: Mat = seq
        .tokens()
        .iter()
        .map(|t| match *t {
            Token::Visual(i) => visual_rows[i].clone(),
            Token::Text(id) | Token::Answer(id) => embed[id as usize].clone(),
            Token::Query(j) => queries[j].clone(),
        })
        .collect();
    let fv: Mat = visual
        .grids
        .iter()
        .flat_map(|g| to_mat(g.features()))
        .collect();
    let (heads, hd) = (c.n_heads, c.head_dim());
    for l in 0..c.n_layers {
        let name = |s: &str| format!("llm.L{l:02}.{s}");
        let h: Mat = x
            .iter()
            .map(|r| layer_norm(r, &v(&name("ln1.g")), &v(&name("ln1.b"))))
            .collect();
        let mut q = mat_mul(&h, &m(&name("attn.wq")));
        let mut k = mat_mul(&h, &m(&name("attn.wk")));
        let vv = mat_mul(&h, &m(&name("attn.wv")));
        for (pos, (qr, kr)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
            rotate(qr, pos, heads);
            rotate(kr, pos, heads);
        }
        let mut mixed = vec![vec![0.0; c.d_model]; x.len()];
        for i in 0..x.len() {
            for hh in 0..heads {
                let cols = hh * hd..(hh + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for (j, aj) in a.iter().enumerate() {
                    for t in cols.clone() {
                        mixed[i][t] += aj * vv[j][t];
                    }
                }
            }
        }
        let attn = mat_mul(&mixed, &m(&name("attn.wo")));
        for (r, a) in x.iter_mut().zip(&attn) {
            for j in 0..r.len() {
                r[j] += a[j];
            }
        }
        let h: Mat = x
            .iter()
            .map(|r| layer_norm(r, &v(&name("ln2.g")), &v(&name("ln2.b"))))
            .collect();
        let mut f = mat_mul(&h, &m(&name("mlp.w1")));
        let b1 = v(&name("mlp.b1"));
        for r in &mut f {
            for j in 0..r.len() {
                r[j] = gelu(r[j] + b1[j]);
            }
        }
        let f = mat_mul(&f, &m(&name("mlp.w2")));
        let b2 = v(&name("mlp.b2"));
        for (r, fr) in x.iter_mut().zip(&f) {
            for j in 0..r.len() {
                r[j] += fr[j] + b2[j];
            }
        }
        if c.n_queries > 0 && c.embq_layers.contains(&(l + 1)) {
            let params = model.embq_params(l + 1).unwrap();
            for turn in 0..seq.n_turns() {
                let Some(qr) = seq.span_of(turn, Segment::Query) else {
                    continue;
                };
                let tr = seq.span_of(turn, Segment::Text).unwrap();
                let ft: Mat = x[tr].to_vec();
                let mut fq: Mat = x[qr.clone()].to_vec();
                for b in &params.blocks {
                    fq = embq_block_oracle(&fq, &ft, &fv, b, params.fusion);
                }
                for (j, pos) in qr.enumerate() {
                    x[pos] = fq[j].clone();
                }
            }
        }
    }
    let h: Mat = x
        .iter()
        .map(|r| layer_norm(r, &v("llm.ln_f.g"), &v("llm.ln_f.b")))
        .collect();
    mat_mul(&h, &m("llm.lm_head"))
}

/// Greedy decoding that recomputes the full forward pass for every token.
pub fn decode_recompute(
    model: &Model,
    visual: &VisualInput,
    prompt: &MixedSequence,
    max_new: usize,
) -> Vec<u32> {
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    while out.len() < max_new {
        let logits = model.forward(visual, &seq).unwrap();
        let last = logits.row(logits.rows() - 1);
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        if best as u32 == END_OF_ANSWER {
            break;
        }
        out.push(best as u32);
        seq.push_answer(best as u32);
    }
    out
}
