//! Sinusoidal encodings of relative offsets `k - q`.
//!
//! Layout is interleaved: entry `2i` holds `sin(δ / base^(2i/dim))` and entry
//! `2i + 1` the matching cosine. 2-d offsets concatenate an x-axis encoding and
//! a y-axis encoding of half the width each.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RelPosEncoder {
    dim: usize,
    base: f64,
    max_clip: i64,
}

impl RelPosEncoder {
    pub fn new(dim: usize, base: f64, max_clip: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "encoding dim must be even, got {dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) || max_clip == 0 {
            return Err(Error::contract("encoding base and clip must be positive"));
        }
        Ok(RelPosEncoder {
            dim,
            base,
            max_clip: max_clip as i64,
        })
    }

    /// Encoder whose clip is `max_extent - 1`, so no realizable offset is clipped.
    pub fn for_layouts(dim: usize, layouts: &[Layout]) -> Result<Self> {
        let extent = layouts.iter().map(Layout::max_extent).max().unwrap_or(1);
        Self::new(dim, DEFAULT_BASE, extent.saturating_sub(1).max(1))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_clip(&self) -> usize {
        self.max_clip as usize
    }

    pub fn encode_1d(&self, offset: i64) -> Vec<f64> {
        encode_into(
            offset.clamp(-self.max_clip, self.max_clip),
            self.dim,
            self.base,
        )
    }

    pub fn encode_2d(&self, dx: i64, dy: i64) -> Result<Vec<f64>> {
        if !self.dim.is_multiple_of(4) {
            return Err(Error::contract(format!(
                "2-d encoding needs dim divisible by 4, got {}",
                self.dim
            )));
        }
        let half = self.dim / 2;
        let mut out = encode_into(dx.clamp(-self.max_clip, self.max_clip), half, self.base);
        out.extend(encode_into(
            dy.clamp(-self.max_clip, self.max_clip),
            half,
            self.base,
        ));
        Ok(out)
    }

    /// Encoding of a `[dx, dy]` offset under the given layout's dimensionality.
    pub fn encode(&self, layout: Layout, offset: [i64; 2]) -> Result<Vec<f64>> {
        match layout {
            Layout::Seq { .. } => Ok(self.encode_1d(offset[0])),
            Layout::Grid { .. } => self.encode_2d(offset[0], offset[1]),
        }
    }
}

fn encode_into(offset: i64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let d = offset as f64;
    for i in 0..dim / 2 {
        let angle = d / base.powf((2 * i) as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Encodings of every offset realizable between a query layout and a key layout,
/// plus the table row for each `(q, k)` pair.
#[derive(Clone, Debug)]
pub struct OffsetTable {
    /// `[n_offsets, dim]`
    pub encodings: Tensor,
    /// Row of `encodings` for pair `(q, k)`, stored at `q * n_keys + k`.
    pub pair_index: Vec<usize>,
    pub offsets: Vec<[i64; 2]>,
    pub n_queries: usize,
    pub n_keys: usize,
}

impl OffsetTable {
    pub fn build(encoder: &RelPosEncoder, queries: Layout, keys: Layout) -> Result<Self> {
        if queries.dims() != keys.dims() {
            return Err(Error::contract(
                "query and key layouts differ in dimensionality",
            ));
        }
        let (nq, nk) = (queries.len(), keys.len());
        let mut rows: HashMap<[i64; 2], usize> = HashMap::new();
        let mut offsets = Vec::new();
        let mut pair_index = Vec::with_capacity(nq * nk);
        let mut all: Vec<[i64; 2]> = Vec::new();
        for q in 0..nq {
            let [qx, qy] = queries.coords(q);
            for k in 0..nk {
                let [kx, ky] = keys.coords(k);
                all.push([kx - qx, ky - qy]);
            }
        }
        // sorted so the table layout is deterministic
        let mut distinct = all.clone();
        distinct.sort_unstable_by_key(|o| (o[1], o[0]));
        distinct.dedup();
        let mut data = Vec::with_capacity(distinct.len() * encoder.dim());
        for o in distinct {
            rows.insert(o, offsets.len());
            offsets.push(o);
            data.extend(encoder.encode(queries, o)?);
        }
        for o in &all {
            pair_index.push(rows[o]);
        }
        Ok(OffsetTable {
            encodings: Tensor::new([offsets.len(), encoder.dim()], data)?,
            pair_index,
            offsets,
            n_queries: nq,
            n_keys: nk,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}
