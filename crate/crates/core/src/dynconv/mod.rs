//! Dynamic convolution written as attention.
//!
//! Every channel is its own head. A gated linear unit runs first; from the gated
//! feature `h_q` each channel group `g` predicts a softmax-normalized kernel
//! `K_{j,g} ∝ exp(d_{j,g}^T h_q)` over the window offsets `p_j`, shared by the
//! channels of that group. Outputs pass through the point-wise projection `W_c`.

use std::rc::Rc;

use crate::conv::ConvKernelSpec;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const DEFAULT_GROUPS: usize = 16;

/// 1-based group of 1-based channel `c`: `⌈c / (C_in / N_g)⌉`.
pub fn group_of_channel(c: usize, c_in: usize, n_g: usize) -> Result<usize> {
    if n_g == 0 || !c_in.is_multiple_of(n_g) {
        return Err(Error::contract(format!(
            "{n_g} groups do not divide {c_in} channels"
        )));
    }
    if c == 0 || c > c_in {
        return Err(Error::contract(format!("channel {c} outside 1..={c_in}")));
    }
    Ok(c.div_ceil(c_in / n_g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConvParams {
    pub groups: usize,
    pub spec: ConvKernelSpec,
    /// Linear branch of the gated unit, `[C, C]` and `[1, C]`.
    pub glu_linear: Tensor,
    pub glu_linear_bias: Tensor,
    /// Gate branch of the gated unit, `[C, C]` and `[1, C]`.
    pub glu_gate: Tensor,
    pub glu_gate_bias: Tensor,
    /// `d_{j,g}` in column `g·N_k + j`, `[C, N_g·N_k]`.
    pub kernel_pred: Tensor,
    /// `W_c`, `[C, C_out]`.
    pub pointwise: Tensor,
    /// Renormalize kernels over the taps that fall inside the layout.
    pub renormalize: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DynamicConvVars {
    pub glu_linear: Var,
    pub glu_linear_bias: Var,
    pub glu_gate: Var,
    pub glu_gate_bias: Var,
    pub kernel_pred: Var,
    pub pointwise: Var,
}

impl DynamicConvParams {
    pub fn init(
        c_in: usize,
        c_out: usize,
        groups: usize,
        spec: ConvKernelSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{groups} groups do not divide {c_in} channels"
            )));
        }
        let nk = spec.n_k();
        Ok(DynamicConvParams {
            groups,
            spec,
            glu_linear: Tensor::init_fan_in([c_in, c_in], c_in, rng),
            glu_linear_bias: Tensor::zeros([1, c_in]),
            glu_gate: Tensor::init_fan_in([c_in, c_in], c_in, rng),
            glu_gate_bias: Tensor::zeros([1, c_in]),
            kernel_pred: Tensor::init_fan_in([c_in, groups * nk], c_in, rng),
            pointwise: Tensor::init_fan_in([c_in, c_out], c_in, rng),
            renormalize: false,
        })
    }

    pub fn c_in(&self) -> usize {
        self.glu_linear.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.glu_linear,
            &self.glu_linear_bias,
            &self.glu_gate,
            &self.glu_gate_bias,
            &self.kernel_pred,
            &self.pointwise,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.glu_linear,
            &mut self.glu_linear_bias,
            &mut self.glu_gate,
            &mut self.glu_gate_bias,
            &mut self.kernel_pred,
            &mut self.pointwise,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DynamicConvVars {
        let v: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        DynamicConvVars::from_slice(&v).expect("six tensors")
    }
}

impl DynamicConvVars {
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        let &[glu_linear, glu_linear_bias, glu_gate, glu_gate_bias, kernel_pred, pointwise] = v
        else {
            return Err(Error::contract("dynamic convolution needs six leaves"));
        };
        Ok(DynamicConvVars {
            glu_linear,
            glu_linear_bias,
            glu_gate,
            glu_gate_bias,
            kernel_pred,
            pointwise,
        })
    }
}

/// `(x A + a) ⊙ σ(x B + b)`
pub fn glu(tape: &mut Tape, x: Var, vars: &DynamicConvVars) -> Result<Var> {
    let lin = tape.matmul(x, vars.glu_linear)?;
    let lin = tape.add_row(lin, vars.glu_linear_bias)?;
    let gate = tape.matmul(x, vars.glu_gate)?;
    let gate = tape.add_row(gate, vars.glu_gate_bias)?;
    let gate = tape.sigmoid(gate);
    tape.mul(lin, gate)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Kernel `K[g][j]` predicted from the gated feature `h_q` of one query.
pub fn dynamic_kernel(h_q: &[f64], params: &DynamicConvParams) -> Result<Vec<Vec<f64>>> {
    let c = params.c_in();
    if h_q.len() != c {
        return Err(Error::dims("dynamic_kernel", &[h_q.len()], &[c]));
    }
    let nk = params.spec.n_k();
    Ok((0..params.groups)
        .map(|g| {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    h_q.iter()
                        .enumerate()
                        .map(|(i, v)| v * params.kernel_pred.at(i, g * nk + j))
                        .sum()
                })
                .collect();
            softmax(&logits)
        })
        .collect())
}

/// Weight of key `k` for query `q` in every channel: `K_{j, g(c)}` when
/// `k = q + p_j`, zero for keys outside the window.
pub fn dynamic_weights(
    layout: Layout,
    q: usize,
    k: usize,
    h_q: &[f64],
    params: &DynamicConvParams,
) -> Result<Vec<f64>> {
    let c = params.c_in();
    let kernel = dynamic_kernel(h_q, params)?;
    let j = params
        .spec
        .offsets()
        .iter()
        .position(|&p| layout.shifted(q, p) == Some(k));
    (1..=c)
        .map(|ch| {
            let g = group_of_channel(ch, c, params.groups)?;
            Ok(j.map_or(0.0, |j| kernel[g - 1][j]))
        })
        .collect()
}

/// Gated unit, dynamic depth-wise window, then `W_c`. `x` is `[N, C_in]`.
pub fn dynamic_forward(
    tape: &mut Tape,
    x: Var,
    params: &DynamicConvParams,
    vars: &DynamicConvVars,
    layout: Layout,
) -> Result<Var> {
    let (n, g, nk) = (layout.len(), params.groups, params.spec.n_k());
    match *tape.shape(x) {
        [rows, c] if rows == n && c == params.c_in() => {}
        ref s => return Err(Error::dims("dynamic_forward", s, &[n, params.c_in()])),
    }
    let taps = params.spec.taps(layout);
    let h = glu(tape, x, vars)?;
    let logits = tape.matmul(h, vars.kernel_pred)?;
    let logits = tape.reshape(logits, [n * g, nk])?;
    let mask: Option<Rc<[bool]>> = params.renormalize.then(|| {
        (0..n * g)
            .flat_map(|r| {
                let q = r / g;
                taps[q * nk..(q + 1) * nk].iter().map(Option::is_some)
            })
            .collect()
    });
    let kernel = tape.softmax(logits, mask)?;
    let kernel = tape.reshape(kernel, [n, g * nk])?;
    let mixed = tape.depthwise_window(h, kernel, taps, g)?;
    tape.matmul(mixed, vars.pointwise)
}
