//! Regular and deformable convolution written as attention.
//!
//! Sampling point `m` of a kernel plays the role of head `m`. The regular kernel
//! puts weight 1 on the key at `q + p_m`; the deformable kernel spreads it
//! bilinearly around `q + p_m + w_m^T x_q`. In both cases the value projection is
//! the identity and head `m` owns the `[C, C]` block `m` of the output
//! projection, stored stacked as `[N_k·C, C]`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::{for_each_corner, Rng, Tape, Tensor, Var};

/// Learning-rate multiplier applied to the offset predictor.
pub const OFFSET_LR_SCALE: f64 = 0.1;

/// Sampling offsets `p_m`, one per head, as `[dx, dy]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvKernelSpec {
    offsets: Vec<[i64; 2]>,
}

impl ConvKernelSpec {
    pub fn new(offsets: Vec<[i64; 2]>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("kernel needs at least one offset".into()));
        }
        let mut seen = offsets.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != offsets.len() {
            return Err(Error::Config("kernel offsets must be distinct".into()));
        }
        Ok(ConvKernelSpec { offsets })
    }

    /// `n × n` grid centered at zero, row-major from the top-left offset.
    pub fn square(n: usize) -> Result<Self> {
        let r = odd_radius(n)?;
        let offsets = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| [dx, dy]))
            .collect();
        Self::new(offsets)
    }

    /// `n` consecutive positions centered at zero, for sequences.
    pub fn line(n: usize) -> Result<Self> {
        let r = odd_radius(n)?;
        Self::new((-r..=r).map(|dx| [dx, 0]).collect())
    }

    /// Square kernel on grids, line kernel on sequences; `n_k` counts the
    /// sampling points (`n²` on a grid).
    pub fn for_layout(layout: Layout, n_k: usize) -> Result<Self> {
        match layout {
            Layout::Seq { .. } => Self::line(n_k),
            Layout::Grid { .. } => {
                let n = (n_k as f64).sqrt().round() as usize;
                if n * n != n_k {
                    return Err(Error::Config(format!(
                        "grid kernel size {n_k} is not a square"
                    )));
                }
                Self::square(n)
            }
        }
    }

    pub fn n_k(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[[i64; 2]] {
        &self.offsets
    }

    /// Key index of `q + p_m` for every `(q, m)`, stored at `q·N_k + m`.
    pub fn taps(&self, layout: Layout) -> Rc<[Option<usize>]> {
        (0..layout.len())
            .flat_map(|q| self.offsets.iter().map(move |&p| layout.shifted(q, p)))
            .collect()
    }

    fn check_layout(&self, layout: Layout) -> Result<()> {
        if layout.dims() == 1 && self.offsets.iter().any(|p| p[1] != 0) {
            return Err(Error::Config(
                "sequence kernels cannot have vertical offsets".into(),
            ));
        }
        Ok(())
    }
}

fn odd_radius(n: usize) -> Result<i64> {
    if n.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel extent must be odd, got {n}")));
    }
    Ok((n / 2) as i64)
}

/// Nonzero attention weights of one head as `(key, weight)` pairs.
pub type SparseWeights = Vec<(usize, f64)>;

/// Weight 1 on the key at `q + p_m` for every head `m`; a head whose key falls
/// outside the layout has no weights.
pub fn regular_conv_weights(
    layout: Layout,
    q: usize,
    spec: &ConvKernelSpec,
) -> Result<Vec<SparseWeights>> {
    check_query(layout, q)?;
    spec.check_layout(layout)?;
    Ok(spec
        .offsets
        .iter()
        .map(|&p| layout.shifted(q, p).map(|k| (k, 1.0)).into_iter().collect())
        .collect())
}

fn check_query(layout: Layout, q: usize) -> Result<()> {
    if q >= layout.len() {
        return Err(Error::contract(format!(
            "query {q} outside a layout of {}",
            layout.len()
        )));
    }
    Ok(())
}

/// `g(a, b) = max(0, 1 − |a − b|)`
pub fn bilinear_g(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// `G(a, b) = Π_n g(a_n, b_n)` over the axes of two points.
pub fn bilinear_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("bilinear_kernel", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| bilinear_g(x, y)).product())
}

/// Nonzero bilinear weights of the in-bounds integer neighbors of `loc`.
pub fn bilinear_weights(layout: Layout, loc: &[f64]) -> Result<SparseWeights> {
    if loc.len() != layout.dims() {
        return Err(Error::dims(
            "bilinear_weights",
            &[loc.len()],
            &[layout.dims()],
        ));
    }
    if loc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampling location {loc:?}")));
    }
    let mut out = Vec::new();
    for_each_corner(layout, loc, |k, w, _| {
        if let (Some(k), true) = (k, w != 0.0) {
            out.push((k, w));
        }
    });
    Ok(out)
}

/// Regular convolution over `x` (`[N, C]`) with the stacked kernel `[N_k·C, C]`.
pub fn regular_conv_forward(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    layout: Layout,
    spec: &ConvKernelSpec,
) -> Result<Var> {
    spec.check_layout(layout)?;
    let (n, c) = content_dims(tape, x, layout)?;
    check_kernel(tape, kernel, spec.n_k() * c, c)?;
    let taps = spec.taps(layout);
    let ones: Rc<[f64]> = vec![1.0; taps.len()].into();
    let gathered = tape.sparse_aggregate(x, taps, ones, 1)?;
    let stacked = tape.reshape(gathered, [n, spec.n_k() * c])?;
    tape.matmul(stacked, kernel)
}

fn content_dims(tape: &Tape, x: Var, layout: Layout) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [n, c] if n == layout.len() => Ok((n, c)),
        ref s => Err(Error::dims("convolution input", s, &[layout.len()])),
    }
}

fn check_kernel(tape: &Tape, v: Var, rows: usize, cols: usize) -> Result<()> {
    if tape.shape(v) != [rows, cols] {
        return Err(Error::dims(
            "convolution kernel",
            tape.shape(v),
            &[rows, cols],
        ));
    }
    Ok(())
}

/// Learnable tensors of a deformable convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableParams {
    /// `w_m` for every sampling point, `[C, D·N_k]`; column `m·D + axis`.
    pub offset_pred: Tensor,
    /// Stacked `W_m`, `[N_k·C, C]`.
    pub output_proj: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DeformableVars {
    pub offset_pred: Var,
    pub output_proj: Var,
}

impl DeformableParams {
    /// The offset predictor starts at zero, so a fresh module samples the
    /// regular grid.
    pub fn init(c: usize, layout: Layout, spec: &ConvKernelSpec, rng: &mut Rng) -> Self {
        let nk = spec.n_k();
        DeformableParams {
            offset_pred: Tensor::zeros([c, layout.dims() * nk]),
            output_proj: Tensor::init_fan_in([nk * c, c], nk * c, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DeformableVars {
        DeformableVars {
            offset_pred: tape.leaf(self.offset_pred.clone(), trainable),
            output_proj: tape.leaf(self.output_proj.clone(), trainable),
        }
    }

    /// Per-tensor learning-rate multipliers, in `tensors()` order.
    pub fn lr_scales(&self) -> [f64; 2] {
        [OFFSET_LR_SCALE, 1.0]
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.offset_pred, &self.output_proj]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.offset_pred, &mut self.output_proj]
    }

    /// Fractional sampling location `q + p_m + w_m^T x_q` of head `m`.
    pub fn location(
        &self,
        layout: Layout,
        q: usize,
        x_q: &[f64],
        spec: &ConvKernelSpec,
        m: usize,
    ) -> Result<Vec<f64>> {
        let dims = layout.dims();
        let c = self.offset_pred.rows();
        if x_q.len() != c {
            return Err(Error::dims("deformable query content", &[x_q.len()], &[c]));
        }
        let coords = layout.coords(q);
        Ok((0..dims)
            .map(|axis| {
                let col = m * dims + axis;
                let shift: f64 = x_q
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.offset_pred.at(i, col))
                    .sum();
                (coords[axis] + spec.offsets[m][axis]) as f64 + shift
            })
            .collect())
    }
}

/// `A_m(q, k) = G(k, q + p_m + w_m^T x_q)` for every head, nonzero entries only.
pub fn deformable_weights(
    layout: Layout,
    q: usize,
    x_q: &[f64],
    params: &DeformableParams,
    spec: &ConvKernelSpec,
) -> Result<Vec<SparseWeights>> {
    check_query(layout, q)?;
    spec.check_layout(layout)?;
    (0..spec.n_k())
        .map(|m| bilinear_weights(layout, &params.location(layout, q, x_q, spec, m)?))
        .collect()
}

/// Deformable convolution over `x` (`[N, C]`). Samples outside the layout read zero.
pub fn deformable_forward(
    tape: &mut Tape,
    x: Var,
    vars: &DeformableVars,
    layout: Layout,
    spec: &ConvKernelSpec,
) -> Result<Var> {
    spec.check_layout(layout)?;
    let (n, c) = content_dims(tape, x, layout)?;
    let (nk, dims) = (spec.n_k(), layout.dims());
    check_kernel(tape, vars.offset_pred, c, dims * nk)?;
    check_kernel(tape, vars.output_proj, nk * c, c)?;
    let mut base = Vec::with_capacity(n * nk * dims);
    for q in 0..n {
        let coords = layout.coords(q);
        for p in &spec.offsets {
            for axis in 0..dims {
                base.push((coords[axis] + p[axis]) as f64);
            }
        }
    }
    let base = tape.constant(Tensor::new([n, nk * dims], base)?);
    let shift = tape.matmul(x, vars.offset_pred)?;
    let loc = tape.add(base, shift)?;
    let loc = tape.reshape(loc, [n * nk, dims])?;
    let sampled = tape.bilinear_sample(x, loc, layout)?;
    let stacked = tape.reshape(sampled, [n, nk * c])?;
    tape.matmul(stacked, vars.output_proj)
}
