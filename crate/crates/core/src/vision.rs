//! Stand-in for the frozen vision encoder: seeded feature grids, feature-level
//! HD tiling, the byte tokenizer and the `VGRD` grid file format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `h × w` grid of `d`-dimensional features. Row `i` of `features`
/// is grid cell `(i / w, i % w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualGrid {
    h: usize,
    w: usize,
    features: Tensor,
}

impl VisualGrid {
    pub fn new(h: usize, w: usize, features: Tensor) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("visual_grid", format!("empty grid {h}×{w}")));
        }
        let (rows, d) = features.matrix_dims("visual_grid")?;
        if rows != h * w || d == 0 {
            return Err(Error::shape(
                "visual_grid",
                format!("{h}×{w} grid needs {} rows, features are {rows}×{d}", h * w),
            ));
        }
        Ok(VisualGrid { h, w, features })
    }

    /// Builds a grid from `cells[r][c]` feature vectors.
    pub fn from_cells(cells: &[Vec<Vec<f64>>]) -> Result<Self> {
        let h = cells.len();
        let w = cells.first().map_or(0, Vec::len);
        let rows: Vec<Vec<f64>> = cells.iter().flatten().cloned().collect();
        Self::new(h, w, Tensor::from_rows(&rows)?)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        self.features.row(r * self.w + c)
    }

    /// Writes the `VGRD` layout: magic, `u32` h, w, d, then little-endian
    /// `f64` values in row-major order.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(b"VGRD")?;
        for v in [self.h, self.w, self.d()] {
            out.write_all(&u32::try_from(v).map_err(|_| too_big())?.to_le_bytes())?;
        }
        for v in self.features.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"VGRD" {
            return Err(Error::Format {
                what: "visual grid",
                detail: format!("bad magic {magic:?}"),
            });
        }
        let h = read_u32(&mut input)? as usize;
        let w = read_u32(&mut input)? as usize;
        let d = read_u32(&mut input)? as usize;
        let data = read_f64s(&mut input, h * w * d)?;
        VisualGrid::new(h, w, Tensor::new(vec![h * w, d], data)?)
    }
}

fn too_big() -> Error {
    Error::Format {
        what: "visual grid",
        detail: "dimension exceeds u32".into(),
    }
}

pub(crate) fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Deterministic synthetic encoder output.
///
/// Raw values are standard normal draws from ChaCha8 seeded with `seed`,
/// in row-major cell order. Each channel is then smoothed with a 3×3 box
/// filter (mean over the in-bounds neighbours), so adjacent cells overlap
/// in content the way real encoder tokens do.
pub fn synth_features(seed: u64, h: usize, w: usize, d: usize) -> Result<VisualGrid> {
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::shape(
            "synth_features",
            format!("dimensions must be positive, got {h}×{w}×{d}"),
        ));
    }
    let raw = Tensor::randn(&[h * w, d], 1.0, seed);
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let mut count = 0.0;
            let dst = &mut out[(r * w + c) * d..(r * w + c + 1) * d];
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    count += 1.0;
                    for (o, v) in dst.iter_mut().zip(raw.row(nr * w + nc)) {
                        *o += v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o /= count;
            }
        }
    }
    VisualGrid::new(h, w, Tensor::new(vec![h * w, d], out)?)
}

/// Four quadrant tiles plus a 2×2-average-pooled thumbnail, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct HdTileSet {
    /// Top-left, top-right, bottom-left, bottom-right.
    pub tiles: [VisualGrid; 4],
    pub thumbnail: VisualGrid,
}

impl HdTileSet {
    /// Tiles first, thumbnail last; this is the order the visual segment uses.
    pub fn grids(&self) -> impl Iterator<Item = &VisualGrid> {
        self.tiles.iter().chain(std::iter::once(&self.thumbnail))
    }

    /// Inverse of the tiling: stitches the quadrants back together.
    pub fn reassemble(&self) -> Result<VisualGrid> {
        let (h, w, d) = (self.tiles[0].h, self.tiles[0].w, self.tiles[0].d());
        let mut data = Vec::with_capacity(4 * h * w * d);
        for r in 0..2 * h {
            for c in 0..2 * w {
                let tile = &self.tiles[(r / h) * 2 + c / w];
                data.extend_from_slice(tile.cell(r % h, c % w));
            }
        }
        VisualGrid::new(2 * h, 2 * w, Tensor::new(vec![4 * h * w, d], data)?)
    }
}

pub fn hd_tile(full: &VisualGrid) -> Result<HdTileSet> {
    if !full.h.is_multiple_of(2) || !full.w.is_multiple_of(2) {
        return Err(Error::shape(
            "hd_tile",
            format!("grid {}×{} must have even sides", full.h, full.w),
        ));
    }
    let (h, w, d) = (full.h / 2, full.w / 2, full.d());
    let quadrant = |r0: usize, c0: usize| -> Result<VisualGrid> {
        let mut data = Vec::with_capacity(h * w * d);
        for r in 0..h {
            for c in 0..w {
                data.extend_from_slice(full.cell(r0 + r, c0 + c));
            }
        }
        VisualGrid::new(h, w, Tensor::new(vec![h * w, d], data)?)
    };
    let tiles = [
        quadrant(0, 0)?,
        quadrant(0, w)?,
        quadrant(h, 0)?,
        quadrant(h, w)?,
    ];
    let mut thumb = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for k in 0..d {
                let s = full.cell(2 * r, 2 * c)[k]
                    + full.cell(2 * r, 2 * c + 1)[k]
                    + full.cell(2 * r + 1, 2 * c)[k]
                    + full.cell(2 * r + 1, 2 * c + 1)[k];
                thumb.push(s / 4.0);
            }
        }
    }
    let thumbnail = VisualGrid::new(h, w, Tensor::new(vec![h * w, d], thumb)?)?;
    Ok(HdTileSet { tiles, thumbnail })
}

/// Token id of `'.'`; its embedding row seeds the query tokens.
pub const DOT_TOKEN: u32 = b'.' as u32;
/// Reserved slot for a dedicated dot token. The byte id [`DOT_TOKEN`] is
/// used instead, so the tokenizer never emits this id.
pub const RESERVED_DOT: u32 = 256;
/// Terminates every answer.
pub const END_OF_ANSWER: u32 = 257;
/// Smallest vocabulary that holds the bytes plus the reserved ids.
pub const MIN_VOCAB: usize = 258;

/// Byte-level tokenizer: one id per UTF-8 byte.
pub fn toy_tokenize(text: &str, vocab_size: usize) -> Result<Vec<u32>> {
    if vocab_size < MIN_VOCAB {
        return Err(Error::contract(format!(
            "vocabulary of {vocab_size} cannot hold {MIN_VOCAB} reserved ids"
        )));
    }
    Ok(text.bytes().map(u32::from).collect())
}

/// Inverse of [`toy_tokenize`]. Ids above 255 are dropped.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
