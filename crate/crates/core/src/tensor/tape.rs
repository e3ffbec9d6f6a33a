use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::layout::Layout;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic performed by the forward pass.
///
/// `macs` counts multiply-accumulates (one per product feeding a sum, plus one
/// per elementwise product or scaling). Exponentials (softmax, sigmoid) and
/// divisions are tallied separately and never folded into `macs`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
    pub exps: u64,
    pub divs: u64,
}

impl std::ops::Sub for OpCounter {
    type Output = OpCounter;

    fn sub(self, rhs: OpCounter) -> OpCounter {
        OpCounter {
            macs: self.macs - rhs.macs,
            exps: self.exps - rhs.exps,
            divs: self.divs - rhs.divs,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row repeated over the rows of `a`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// tensor times a learnable scalar
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    PairDotGather {
        query: Var,
        table: Var,
        index: Rc<[usize]>,
    },
    SparseAggregate {
        input: Var,
        index: Rc<[Option<usize>]>,
        weights: Rc<[f64]>,
        slots: usize,
    },
    BilinearSample {
        input: Var,
        loc: Var,
        layout: Layout,
    },
    DepthwiseWindow {
        input: Var,
        kernel: Var,
        taps: Rc<[Option<usize>]>,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    counter: OpCounter,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).matrix_dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.counter.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dims("matmul_nt", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        self.counter.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.counter.macs += self.value(a).len() as u64;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(row) != [1, n] {
            return Err(Error::dims("add_row", self.shape(a), self.shape(row)));
        }
        let (ad, rd) = (self.value(a).data(), self.value(row).data());
        let data = (0..m * n).map(|i| ad[i] + rd[i % n]).collect();
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::new([m, n], data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.counter.macs += value.len() as u64;
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the scalar held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dims("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.counter.macs += value.len() as u64;
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.counter.exps += value.len() as u64;
        self.counter.divs += value.len() as u64;
        let rg = self.requires_grad(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Softmax along the last axis. `mask[i] == false` excludes entry `i`: it is
    /// treated as a `-inf` logit and comes out exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let v = self.value(a);
        if let Some(m) = &mask {
            if m.len() != v.len() {
                return Err(Error::dims("softmax mask", v.shape(), &[m.len()]));
            }
        }
        let value = softmax_rows(v, mask.as_deref())?;
        let live = mask
            .as_deref()
            .map_or(value.len(), |m| m.iter().filter(|&&k| k).count()) as u64;
        self.counter.exps += live;
        self.counter.divs += live;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dims("slice_cols", self.shape(a), &[start, len]));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new([m, len], out)?,
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::dims("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new([m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.counter.divs += n as u64;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new([1, n], out)?, Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `out[q, k] = query[q] · table[index[q·nk + k]]`, one dot product per pair.
    ///
    /// `query` has either `nq` rows or a single row shared by every query.
    pub fn pair_dot_gather(
        &mut self,
        query: Var,
        table: Var,
        index: Rc<[usize]>,
        nq: usize,
        nk: usize,
    ) -> Result<Var> {
        let (qr, d) = self.dims2(query, "pair_dot_gather")?;
        let (tr, d2) = self.dims2(table, "pair_dot_gather")?;
        if d != d2 || (qr != nq && qr != 1) || index.len() != nq * nk {
            return Err(Error::dims(
                "pair_dot_gather",
                self.shape(query),
                self.shape(table),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tr) {
            return Err(Error::contract(format!(
                "no encoding for offset row {bad} (table has {tr})"
            )));
        }
        let (qd, td) = (self.value(query).data(), self.value(table).data());
        let mut out = vec![0.0; nq * nk];
        for q in 0..nq {
            let qrow = if qr == 1 { 0 } else { q };
            let a = &qd[qrow * d..(qrow + 1) * d];
            for k in 0..nk {
                let r = index[q * nk + k];
                out[q * nk + k] = dot(a, &td[r * d..(r + 1) * d]);
            }
        }
        self.counter.macs += (nq * nk * d) as u64;
        let rg = self.any_grad(&[query, table]);
        Ok(self.push(
            Tensor::new([nq, nk], out)?,
            Op::PairDotGather {
                query,
                table,
                index,
            },
            rg,
        ))
    }

    /// `out[r] = Σ_s weights[r·slots + s] · input[index[r·slots + s]]`, with
    /// `None` reading a zero row. Weights are constants.
    pub fn sparse_aggregate(
        &mut self,
        input: Var,
        index: Rc<[Option<usize>]>,
        weights: Rc<[f64]>,
        slots: usize,
    ) -> Result<Var> {
        let (n, c) = self.dims2(input, "sparse_aggregate")?;
        if slots == 0 || index.len() != weights.len() || !index.len().is_multiple_of(slots) {
            return Err(Error::contract("sparse_aggregate index/weight layout"));
        }
        if index.iter().flatten().any(|&k| k >= n) {
            return Err(Error::contract("sparse_aggregate key index out of range"));
        }
        let rows = index.len() / slots;
        let x = self.value(input).data();
        let mut out = vec![0.0; rows * c];
        for (e, (k, w)) in index.iter().zip(weights.iter()).enumerate() {
            if let Some(k) = *k {
                let r = e / slots;
                axpy(&mut out[r * c..(r + 1) * c], *w, &x[k * c..(k + 1) * c]);
            }
        }
        self.counter.macs += (index.len() * c) as u64;
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new([rows, c], out)?,
            Op::SparseAggregate {
                input,
                index,
                weights,
                slots,
            },
            rg,
        ))
    }

    /// Bilinear read of `input` (rows laid out by `layout`) at fractional
    /// locations `loc` (`[rows, dims]`, columns ordered x then y). Reads outside
    /// the extent are zero.
    pub fn bilinear_sample(&mut self, input: Var, loc: Var, layout: Layout) -> Result<Var> {
        let (n, c) = self.dims2(input, "bilinear_sample")?;
        let (rows, dims) = self.dims2(loc, "bilinear_sample")?;
        if n != layout.len() || dims != layout.dims() {
            return Err(Error::dims(
                "bilinear_sample",
                self.shape(input),
                self.shape(loc),
            ));
        }
        let l = self.value(loc).data();
        if let Some(bad) = l.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampling location {bad}")));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let o = &mut out[r * c..(r + 1) * c];
            for_each_corner(layout, &l[r * dims..(r + 1) * dims], |k, w, _| {
                if let Some(k) = k {
                    axpy(o, w, &x[k * c..(k + 1) * c]);
                }
            });
        }
        self.counter.macs += (rows * (1 << dims) * c) as u64;
        let rg = self.any_grad(&[input, loc]);
        Ok(self.push(
            Tensor::new([rows, c], out)?,
            Op::BilinearSample { input, loc, layout },
            rg,
        ))
    }

    /// Depth-wise windowed aggregation with per-query kernels shared within
    /// channel groups: `out[q, c] = Σ_j kernel[q, g(c)·nk + j] · input[taps[q·nk + j], c]`.
    pub fn depthwise_window(
        &mut self,
        input: Var,
        kernel: Var,
        taps: Rc<[Option<usize>]>,
        groups: usize,
    ) -> Result<Var> {
        let (n, c) = self.dims2(input, "depthwise_window")?;
        let (kn, kw) = self.dims2(kernel, "depthwise_window")?;
        if groups == 0 || c % groups != 0 || kw % groups != 0 || kn != n {
            return Err(Error::dims(
                "depthwise_window",
                self.shape(input),
                self.shape(kernel),
            ));
        }
        let nk = kw / groups;
        if taps.len() != n * nk || taps.iter().flatten().any(|&k| k >= n) {
            return Err(Error::contract("depthwise_window tap table"));
        }
        let per_group = c / groups;
        let (x, kd) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            for j in 0..nk {
                let Some(k) = taps[q * nk + j] else { continue };
                for ch in 0..c {
                    let w = kd[q * kw + (ch / per_group) * nk + j];
                    out[q * c + ch] += w * x[k * c + ch];
                }
            }
        }
        self.counter.macs += (n * nk * c) as u64;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            Tensor::new([n, c], out)?,
            Op::DepthwiseWindow {
                input,
                kernel,
                taps,
                groups,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>) -> Result<Var> {
        let (m, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= k) {
            return Err(Error::contract("cross_entropy targets"));
        }
        let d = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * k..(i + 1) * k];
            loss += log_sum_exp(row) - row[t];
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy { logits, targets },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`grad`](Self::grad) returns
    /// `d loss / d v` for every grad-requiring `v` recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract(
                "loss is not reachable from any grad-requiring tensor",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        for p in 0..k {
                            axpy(
                                &mut gb[p * n..(p + 1) * n],
                                ad[i * k + p],
                                &g[i * n..(i + 1) * n],
                            );
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                &mut ga[i * k..(i + 1) * k],
                                g[i * n + j],
                                &bd[j * k..(j + 1) * k],
                            );
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(
                                &mut gb[j * k..(j + 1) * k],
                                g[i * n + j],
                                &ad[i * k..(i + 1) * k],
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc!(v) {
                        axpy(gv, 1.0, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gr) = acc!(*row) {
                    let n = gr.len();
                    for (j, x) in g.iter().enumerate() {
                        gr[j % n] += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, *c, g);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).data()[0];
                let ad = self.value(*a).data();
                if let Some(ga) = acc!(*a) {
                    axpy(ga, c, g);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += dot(g, ad);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::Softmax(input) => {
                let n = node.value.cols();
                if let Some(ga) = acc!(*input) {
                    for r in 0..out.len() / n {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let s = dot(y, gy);
                        for j in 0..n {
                            ga[r * n + j] += y[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, 1.0, g);
                }
            }
            Op::SliceCols { input, start } => {
                let n = self.value(*input).cols();
                let w = node.value.cols();
                if let Some(ga) = acc!(*input) {
                    for r in 0..g.len() / w {
                        axpy(
                            &mut ga[r * n + start..r * n + start + w],
                            1.0,
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = acc!(p) {
                        for r in 0..rows {
                            axpy(
                                &mut gp[r * w..(r + 1) * w],
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = dims(self.value(*a));
                if let Some(ga) = acc!(*a) {
                    for r in 0..m {
                        axpy(&mut ga[r * n..(r + 1) * n], 1.0 / m as f64, g);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::PairDotGather {
                query,
                table,
                index,
            } => {
                let (qr, d) = dims(self.value(*query));
                let (nq, nk) = dims(&node.value);
                let (qd, td) = (self.value(*query).data(), self.value(*table).data());
                if let Some(gq) = acc!(*query) {
                    for q in 0..nq {
                        let qrow = if qr == 1 { 0 } else { q };
                        for k in 0..nk {
                            let r = index[q * nk + k];
                            axpy(
                                &mut gq[qrow * d..(qrow + 1) * d],
                                g[q * nk + k],
                                &td[r * d..(r + 1) * d],
                            );
                        }
                    }
                }
                if let Some(gt) = acc!(*table) {
                    for q in 0..nq {
                        let qrow = if qr == 1 { 0 } else { q };
                        for k in 0..nk {
                            let r = index[q * nk + k];
                            axpy(
                                &mut gt[r * d..(r + 1) * d],
                                g[q * nk + k],
                                &qd[qrow * d..(qrow + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::SparseAggregate {
                input,
                index,
                weights,
                slots,
            } => {
                let c = self.value(*input).cols();
                if let Some(gx) = acc!(*input) {
                    for (e, (k, w)) in index.iter().zip(weights.iter()).enumerate() {
                        if let Some(k) = *k {
                            let r = e / slots;
                            axpy(&mut gx[k * c..(k + 1) * c], *w, &g[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::BilinearSample { input, loc, layout } => {
                let c = self.value(*input).cols();
                let dims = layout.dims();
                let (x, l) = (self.value(*input).data(), self.value(*loc).data());
                let rows = node.value.rows();
                if let Some(gx) = acc!(*input) {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        for_each_corner(*layout, &l[r * dims..(r + 1) * dims], |k, w, _| {
                            if let Some(k) = k {
                                axpy(&mut gx[k * c..(k + 1) * c], w, gr);
                            }
                        });
                    }
                }
                if let Some(gl) = acc!(*loc) {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        for_each_corner(*layout, &l[r * dims..(r + 1) * dims], |k, _, dw| {
                            if let Some(k) = k {
                                let s = dot(gr, &x[k * c..(k + 1) * c]);
                                for (a, d) in dw.iter().take(dims).enumerate() {
                                    gl[r * dims + a] += d * s;
                                }
                            }
                        });
                    }
                }
            }
            Op::DepthwiseWindow {
                input,
                kernel,
                taps,
                groups,
            } => {
                let (n, c) = dims(self.value(*input));
                let kw = self.value(*kernel).cols();
                let nk = kw / groups;
                let per_group = c / groups;
                let (x, kd) = (self.value(*input).data(), self.value(*kernel).data());
                if let Some(gx) = acc!(*input) {
                    for q in 0..n {
                        for j in 0..nk {
                            let Some(k) = taps[q * nk + j] else { continue };
                            for ch in 0..c {
                                gx[k * c + ch] +=
                                    kd[q * kw + (ch / per_group) * nk + j] * g[q * c + ch];
                            }
                        }
                    }
                }
                if let Some(gk) = acc!(*kernel) {
                    for q in 0..n {
                        for j in 0..nk {
                            let Some(k) = taps[q * nk + j] else { continue };
                            for ch in 0..c {
                                gk[q * kw + (ch / per_group) * nk + j] +=
                                    g[q * c + ch] * x[k * c + ch];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, k) = dims(self.value(*logits));
                let d = self.value(*logits).data();
                if let Some(gl) = acc!(*logits) {
                    let scale = g[0] / m as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &d[i * k..(i + 1) * k];
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (p - y);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise masked softmax with max subtraction.
pub(crate) fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = x.cols();
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for r in 0..d.len() / n {
        let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
        let row = &d[r * n..(r + 1) * n];
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY && !(0..n).any(keep) {
            return Err(Error::DegenerateRegion { slice: r });
        }
        if !max.is_finite() {
            return Err(Error::NonFinite(format!("softmax row {r} has logit {max}")));
        }
        let mut total = 0.0;
        for j in (0..n).filter(|&j| keep(j)) {
            let e = (row[j] - max).exp();
            out[r * n + j] = e;
            total += e;
        }
        for v in &mut out[r * n..(r + 1) * n] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Visits the `2^dims` integer neighbours of a fractional location with the
/// bilinear weight `∏ max(0, 1 - |a_n - b_n|)` and its partial derivatives
/// with respect to each coordinate of the location.
pub(crate) fn for_each_corner(
    layout: Layout,
    loc: &[f64],
    mut f: impl FnMut(Option<usize>, f64, [f64; 2]),
) {
    let base: Vec<f64> = loc.iter().map(|a| a.floor()).collect();
    for corner in 0..(1usize << loc.len()) {
        let mut w = 1.0;
        let mut hats = [1.0; 2];
        let mut slopes = [0.0; 2];
        let mut point = [0i64; 2];
        for (axis, (&a, &b0)) in loc.iter().zip(&base).enumerate() {
            let b = b0 + ((corner >> axis) & 1) as f64;
            let diff = a - b;
            let h = (1.0 - diff.abs()).max(0.0);
            hats[axis] = h;
            slopes[axis] = if diff.abs() < 1.0 {
                -diff.signum()
            } else {
                0.0
            };
            w *= h;
            point[axis] = b as i64;
        }
        let mut dw = [0.0; 2];
        for axis in 0..loc.len() {
            let mut d = slopes[axis];
            for (other, h) in hats.iter().enumerate().take(loc.len()) {
                if other != axis {
                    d *= h;
                }
            }
            dw[axis] = d;
        }
        f(layout.index_of(&point[..loc.len()]), w, dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut t = Tape::new();
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let i = t.constant(Tensor::eye(3));
        let bv = t.constant(b.clone());
        let out = t.matmul(i, bv).unwrap();
        assert_eq!(t.value(out), &b);

        let z = t.constant(Tensor::zeros([2, 4]));
        let out = t.matmul(bv, z).unwrap();
        assert!(t.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(m(&[&[1.0], &[1.0]]));
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
        assert_eq!(t.counter().macs, 4);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled([1, 4], 0.7));
        let y = t.softmax(x, None).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = t.constant(m(&[&[0.0, 3f64.ln()]]));
        let y = t.softmax(x, None).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let x = t.constant(m(&[&[0.0, 123.0]]));
        let y = t.softmax(x, Some(Rc::from(vec![true, false]))).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 2]));
        let err = t.softmax(x, Some(Rc::from(vec![true, false, false, false])));
        assert!(matches!(err, Err(Error::DegenerateRegion { slice: 1 })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros([2, 2]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), Tensor::ones([2, 2]));

        let mut t = Tape::new();
        let x = t.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_unreachable() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros([2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let c = t.constant(Tensor::scalar(1.0));
        assert!(matches!(t.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn bilinear_integer_location_reads_exactly() {
        let layout = Layout::grid(3, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([6, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loc = t.constant(m(&[&[1.0, 1.0], &[0.5, 0.0], &[-1.0, 0.0]]));
        let y = t.bilinear_sample(x, loc, layout).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, 1.5, 0.0]);
    }
}
