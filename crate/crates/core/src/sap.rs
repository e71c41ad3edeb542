//! Spatial attention pooling and the baseline compressors it is compared with.
//!
//! A grid is split into `s × s` regions. For each region a two-layer MLP
//! scores every cell, a softmax turns the scores into weights `α`, and the
//! region collapses to the `α`-weighted sum of its cells. The output keeps
//! the feature width, so an `h × w` grid becomes `(h/s) × (w/s)` tokens.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::VisualGrid;

/// Compressor selected by the `"sap" | "avg_pool" | "pixel_shuffle" | "ldp"` strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    Sap,
    AvgPool,
    PixelShuffle,
    Ldp,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 4] = [
        CompressorKind::Sap,
        CompressorKind::AvgPool,
        CompressorKind::PixelShuffle,
        CompressorKind::Ldp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompressorKind::Sap => "sap",
            CompressorKind::AvgPool => "avg_pool",
            CompressorKind::PixelShuffle => "pixel_shuffle",
            CompressorKind::Ldp => "ldp",
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown compressor {s:?}")))
    }
}

/// Weights of the scoring MLP `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SapParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub s: usize,
}

impl SapParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, s: usize) -> Result<Self> {
        let (d, dh) = w1.matrix_dims("sap_params")?;
        if s == 0 || dh == 0 || d == 0 {
            return Err(Error::contract("SAP needs s ≥ 1 and positive widths"));
        }
        if b1.shape() != [dh] || w2.shape() != [dh, 1] || b2.shape() != [1] {
            return Err(Error::dims("sap_params", w1.shape(), w2.shape()));
        }
        Ok(SapParams { w1, b1, w2, b2, s })
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(d: usize, hidden: usize, s: usize, seed: u64) -> Result<Self> {
        Self::new(
            Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), seed),
            Tensor::zeros(&[hidden]),
            Tensor::randn(
                &[hidden, 1],
                1.0 / (hidden as f64).sqrt(),
                seed.wrapping_add(1),
            ),
            Tensor::zeros(&[1]),
            s,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SapVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        SapVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SapVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One softmax weight vector of length `s²` per output cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeights {
    pub s: usize,
    /// `[regions × s²]`, regions in row-major order.
    pub alpha: Tensor,
}

impl RegionWeights {
    pub fn region(&self, r: usize) -> &[f64] {
        self.alpha.row(r)
    }

    pub fn len(&self) -> usize {
        self.alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.rows() == 0
    }
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::shape(
            "partition_regions",
            format!("{h}×{w} grid is not divisible into {s}×{s} regions"),
        ));
    }
    Ok(())
}

/// Source row of every cell in region-major order: regions row-major over
/// region coordinates, cells row-major within each region.
pub fn region_order(h: usize, w: usize, s: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, s)?;
    let mut order = Vec::with_capacity(h * w);
    for rr in 0..h / s {
        for rc in 0..w / s {
            for i in 0..s {
                for j in 0..s {
                    order.push((rr * s + i) * w + rc * s + j);
                }
            }
        }
    }
    Ok(order)
}

/// Splits a grid into `(h/s)·(w/s)` blocks of `s²` tokens each.
pub fn partition_regions(grid: &VisualGrid, s: usize) -> Result<Vec<Tensor>> {
    let order = region_order(grid.h(), grid.w(), s)?;
    let d = grid.d();
    order
        .chunks(s * s)
        .map(|cells| {
            let data = cells
                .iter()
                .flat_map(|&r| grid.features().row(r).iter().copied())
                .collect();
            Tensor::new(vec![s * s, d], data)
        })
        .collect()
}

fn mlp_logits(tape: &mut Tape, x: Var, p: &SapVars) -> Result<Var> {
    let z = tape.matmul(x, p.w1)?;
    let z = tape.add(z, p.b1)?;
    let z = tape.gelu(z);
    let z = tape.matmul(z, p.w2)?;
    tape.add(z, p.b2)
}

/// `α = softmax(mlp(block))` for a single region block.
pub fn region_weights(block: &Tensor, params: &SapParams) -> Result<Tensor> {
    let (_, d) = block.matrix_dims("region_weights")?;
    if d != params.input_dim() {
        return Err(Error::dims(
            "region_weights",
            block.shape(),
            params.w1.shape(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(block.clone());
    let vars = params.bind(&mut tape, false);
    let logits = mlp_logits(&mut tape, x, &vars)?;
    let row = tape.transpose(logits)?;
    let alpha = tape.softmax_rows(row)?;
    tape.value(alpha).reshape(&[block.rows()])
}

struct SapGraph {
    alpha: Var,
    pooled: Var,
}

fn sap_graph_parts(
    tape: &mut Tape,
    features: Var,
    h: usize,
    w: usize,
    s: usize,
    vars: &SapVars,
) -> Result<SapGraph> {
    let order: Vec<Option<usize>> = region_order(h, w, s)?.into_iter().map(Some).collect();
    let regions = h * w / (s * s);
    let logits = mlp_logits(tape, features, vars)?;
    let logits = tape.gather_rows(logits, order.clone())?;
    let logits = tape.reshape(logits, &[regions, s * s])?;
    let alpha = tape.softmax_rows(logits)?;
    let cells = tape.gather_rows(features, order)?;
    let pooled = tape.segment_weighted_sum(alpha, cells)?;
    Ok(SapGraph { alpha, pooled })
}

/// Records attention pooling of `features` (`[h·w × d]`) on `tape`.
pub fn sap_graph(
    tape: &mut Tape,
    features: Var,
    h: usize,
    w: usize,
    s: usize,
    vars: &SapVars,
) -> Result<Var> {
    Ok(sap_graph_parts(tape, features, h, w, s, vars)?.pooled)
}

pub fn sap_forward(grid: &VisualGrid, params: &SapParams) -> Result<VisualGrid> {
    Ok(sap_forward_with_weights(grid, params)?.0)
}

/// Pooled grid together with the per-region weights that produced it.
pub fn sap_forward_with_weights(
    grid: &VisualGrid,
    params: &SapParams,
) -> Result<(VisualGrid, RegionWeights)> {
    if grid.d() != params.input_dim() {
        return Err(Error::dims(
            "sap_forward",
            grid.features().shape(),
            params.w1.shape(),
        ));
    }
    let s = params.s;
    check_divisible(grid.h(), grid.w(), s)?;
    let mut tape = Tape::new();
    let x = tape.constant(grid.features().clone());
    let vars = params.bind(&mut tape, false);
    let g = sap_graph_parts(&mut tape, x, grid.h(), grid.w(), s, &vars)?;
    let out = VisualGrid::new(grid.h() / s, grid.w() / s, tape.value(g.pooled).clone())?;
    let weights = RegionWeights {
        s,
        alpha: tape.value(g.alpha).clone(),
    };
    Ok((out, weights))
}

/// Learned weights of the baseline compressors.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineParams {
    AvgPool,
    /// `[s²·d × d]` map applied to the channel-concatenated region.
    PixelShuffle {
        proj: Tensor,
    },
    /// `[9 × d]` depthwise 3×3 kernel (row `k` is offset `(k/3 − 1, k%3 − 1)`)
    /// followed by a `[d × d]` pointwise map.
    Ldp {
        depthwise: Tensor,
        pointwise: Tensor,
    },
}

impl BaselineParams {
    pub fn init(kind: CompressorKind, d: usize, s: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            CompressorKind::AvgPool => BaselineParams::AvgPool,
            CompressorKind::PixelShuffle => BaselineParams::PixelShuffle {
                proj: Tensor::randn(&[s * s * d, d], 1.0 / ((s * s * d) as f64).sqrt(), seed),
            },
            CompressorKind::Ldp => BaselineParams::Ldp {
                depthwise: Tensor::randn(&[9, d], 1.0 / 3.0, seed),
                pointwise: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), seed.wrapping_add(1)),
            },
            CompressorKind::Sap => {
                return Err(Error::contract("SAP is not a baseline compressor"));
            }
        })
    }
}

/// Tape handles of whichever compressor a model uses.
#[derive(Clone, Debug)]
pub enum CompressorVars {
    Sap(SapVars),
    AvgPool,
    PixelShuffle { proj: Var },
    Ldp { depthwise: Var, pointwise: Var },
}

/// Records any compressor on the tape. `features` is `[h·w × d]`.
pub fn compress_graph(
    tape: &mut Tape,
    features: Var,
    h: usize,
    w: usize,
    s: usize,
    vars: &CompressorVars,
) -> Result<Var> {
    check_divisible(h, w, s)?;
    let regions = h * w / (s * s);
    let d = tape.value(features).cols();
    match vars {
        CompressorVars::Sap(v) => sap_graph(tape, features, h, w, s, v),
        CompressorVars::AvgPool => {
            let order = region_order(h, w, s)?.into_iter().map(Some).collect();
            let cells = tape.gather_rows(features, order)?;
            let weights = tape.constant(Tensor::filled(&[regions, s * s], 1.0 / (s * s) as f64));
            tape.segment_weighted_sum(weights, cells)
        }
        CompressorVars::PixelShuffle { proj } => {
            let order = region_order(h, w, s)?.into_iter().map(Some).collect();
            let cells = tape.gather_rows(features, order)?;
            let stacked = tape.reshape(cells, &[regions, s * s * d])?;
            tape.matmul(stacked, *proj)
        }
        CompressorVars::Ldp {
            depthwise,
            pointwise,
        } => {
            let (oh, ow) = (h / s, w / s);
            let center = (s - 1) / 2;
            let mut acc: Option<Var> = None;
            for k in 0..9 {
                let (dr, dc) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let index = (0..oh * ow)
                    .map(|o| {
                        let r = ((o / ow) * s + center) as isize + dr;
                        let c = ((o % ow) * s + center) as isize + dc;
                        (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
                            .then(|| r as usize * w + c as usize)
                    })
                    .collect();
                let shifted = tape.gather_rows(features, index)?;
                let tap = tape.slice_rows(*depthwise, k, k + 1)?;
                let tap = tape.reshape(tap, &[d])?;
                let term = tape.mul(shifted, tap)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            tape.matmul(acc.expect("nine taps"), *pointwise)
        }
    }
}

/// Runs a baseline compressor eagerly.
pub fn baseline_compress(
    grid: &VisualGrid,
    kind: CompressorKind,
    s: usize,
    params: &BaselineParams,
) -> Result<VisualGrid> {
    let d = grid.d();
    let mut tape = Tape::new();
    let x = tape.constant(grid.features().clone());
    let vars = match (kind, params) {
        (CompressorKind::AvgPool, _) => CompressorVars::AvgPool,
        (CompressorKind::PixelShuffle, BaselineParams::PixelShuffle { proj }) => {
            if proj.shape() != [s * s * d, d] {
                return Err(Error::dims(
                    "pixel_shuffle",
                    grid.features().shape(),
                    proj.shape(),
                ));
            }
            CompressorVars::PixelShuffle {
                proj: tape.constant(proj.clone()),
            }
        }
        (
            CompressorKind::Ldp,
            BaselineParams::Ldp {
                depthwise,
                pointwise,
            },
        ) => {
            if depthwise.shape() != [9, d] || pointwise.shape() != [d, d] {
                return Err(Error::dims(
                    "ldp",
                    grid.features().shape(),
                    depthwise.shape(),
                ));
            }
            CompressorVars::Ldp {
                depthwise: tape.constant(depthwise.clone()),
                pointwise: tape.constant(pointwise.clone()),
            }
        }
        _ => {
            return Err(Error::contract(format!(
                "parameters do not match compressor {kind}"
            )))
        }
    };
    let out = compress_graph(&mut tape, x, grid.h(), grid.w(), s, &vars)?;
    VisualGrid::new(grid.h() / s, grid.w() / s, tape.value(out).clone())
}
