//! Multi-head attention with four switchable energy terms.
//!
//! For head `m` with head width `d = C / M`, the logit of query `q` and key `k` is
//! the β-weighted sum of
//!
//! * `E1 = (U_m z_q) · (V^C_m x_k)`: query content against key content,
//! * `E2 = (U_m z_q) · (V^R_m R_{k-q})`: query content against relative position,
//! * `E3 = u_m · (V^C_m x_k)`: key content alone,
//! * `E4 = v_m · (V^R_m R_{k-q})`: relative position alone,
//!
//! normalized with a softmax over the support region. The output is
//! `y_q = Σ_m W_m Σ_k A_m(q, k) W'_m x_k`.
//!
//! Every matrix is stored input-major (`[in, out]`) and applied as `x · W`; the
//! columns `m·d .. (m+1)·d` belong to head `m`.

mod config;

pub use config::{AttentionConfig, AttentionMode, Beta, Region, DEFAULT_HEADS};

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::relpos::{OffsetTable, RelPosEncoder};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Learnable tensors of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    /// `U`, `[C, C]`
    pub query_embed: Tensor,
    /// `V^C`, `[C, C]`
    pub key_embed: Tensor,
    /// `V^R`, `[dim_R, C]`
    pub position_embed: Tensor,
    /// `u_m` for every head, `[1, C]`
    pub key_bias: Tensor,
    /// `v_m` for every head, `[1, C]`
    pub position_bias: Tensor,
    /// `W'`, `[C, C]`
    pub value_proj: Tensor,
    /// `W`, `[C, C]`
    pub output_proj: Tensor,
}

/// [`TransformerParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TransformerVars {
    pub query_embed: Var,
    pub key_embed: Var,
    pub position_embed: Var,
    pub key_bias: Var,
    pub position_bias: Var,
    pub value_proj: Var,
    pub output_proj: Var,
}

impl TransformerParams {
    pub fn init(config: &AttentionConfig, rel_dim: usize, rng: &mut Rng) -> Self {
        let c = config.model_dim;
        let d = config.head_dim();
        TransformerParams {
            query_embed: Tensor::init_fan_in([c, c], c, rng),
            key_embed: Tensor::init_fan_in([c, c], c, rng),
            position_embed: Tensor::init_fan_in([rel_dim, c], rel_dim, rng),
            key_bias: Tensor::init_fan_in([1, c], d, rng),
            position_bias: Tensor::init_fan_in([1, c], d, rng),
            value_proj: Tensor::init_fan_in([c, c], c, rng),
            output_proj: Tensor::init_fan_in([c, c], c, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.query_embed,
            &self.key_embed,
            &self.position_embed,
            &self.key_bias,
            &self.position_bias,
            &self.value_proj,
            &self.output_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.query_embed,
            &mut self.key_embed,
            &mut self.position_embed,
            &mut self.key_bias,
            &mut self.position_bias,
            &mut self.value_proj,
            &mut self.output_proj,
        ]
    }

    pub fn from_tensors(t: &[Tensor]) -> Result<Self> {
        let [q, k, p, u, v, wv, wo] = t else {
            return Err(Error::contract("transformer params need seven tensors"));
        };
        Ok(TransformerParams {
            query_embed: q.clone(),
            key_embed: k.clone(),
            position_embed: p.clone(),
            key_bias: u.clone(),
            position_bias: v.clone(),
            value_proj: wv.clone(),
            output_proj: wo.clone(),
        })
    }

    /// Records the parameters as leaves; `trainable` decides whether they collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TransformerVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        TransformerVars::from_slice(&vars).expect("seven tensors")
    }

    pub fn check(&self, config: &AttentionConfig, rel_dim: usize) -> Result<()> {
        let c = config.model_dim;
        let expect: [[usize; 2]; 7] =
            [[c, c], [c, c], [rel_dim, c], [1, c], [1, c], [c, c], [c, c]];
        for (t, e) in self.tensors().into_iter().zip(expect) {
            if t.shape() != e {
                return Err(Error::dims("transformer params", t.shape(), &e));
            }
        }
        Ok(())
    }
}

impl TransformerVars {
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        let &[query_embed, key_embed, position_embed, key_bias, position_bias, value_proj, output_proj] =
            v
        else {
            return Err(Error::contract("transformer vars need seven leaves"));
        };
        Ok(TransformerVars {
            query_embed,
            key_embed,
            position_embed,
            key_bias,
            position_bias,
            value_proj,
            output_proj,
        })
    }

    pub fn all(&self) -> [Var; 7] {
        [
            self.query_embed,
            self.key_embed,
            self.position_embed,
            self.key_bias,
            self.position_bias,
            self.value_proj,
            self.output_proj,
        ]
    }
}

/// Projections shared between terms, computed at most once per forward pass.
struct Projections<'a> {
    config: &'a AttentionConfig,
    vars: &'a TransformerVars,
    z: Var,
    x: Var,
    table: Option<(Var, &'a OffsetTable)>,
    queries: Option<Var>,
    keys: Option<Var>,
    positions: Option<Var>,
}

impl<'a> Projections<'a> {
    fn new(
        config: &'a AttentionConfig,
        vars: &'a TransformerVars,
        z: Var,
        x: Var,
        table: Option<(Var, &'a OffsetTable)>,
    ) -> Self {
        Projections {
            config,
            vars,
            z,
            x,
            table,
            queries: None,
            keys: None,
            positions: None,
        }
    }

    fn check_content(&self, tape: &Tape, v: Var) -> Result<()> {
        let c = self.config.model_dim;
        match tape.shape(v) {
            [_, w] if *w == c => Ok(()),
            s => Err(Error::dims("attention content", s, &[c])),
        }
    }

    /// `U z`, `[Nq, C]`
    fn queries(&mut self, tape: &mut Tape) -> Result<Var> {
        if let Some(v) = self.queries {
            return Ok(v);
        }
        self.check_content(tape, self.z)?;
        let v = tape.matmul(self.z, self.vars.query_embed)?;
        self.queries = Some(v);
        Ok(v)
    }

    /// `V^C x`, `[Nk, C]`
    fn keys(&mut self, tape: &mut Tape) -> Result<Var> {
        if let Some(v) = self.keys {
            return Ok(v);
        }
        self.check_content(tape, self.x)?;
        let v = tape.matmul(self.x, self.vars.key_embed)?;
        self.keys = Some(v);
        Ok(v)
    }

    /// `V^R R`, `[N_offsets, C]`
    fn positions(&mut self, tape: &mut Tape) -> Result<(Var, &'a OffsetTable)> {
        let (enc, table) = self
            .table
            .ok_or_else(|| Error::contract("relative-position terms need an offset table"))?;
        if let Some(v) = self.positions {
            return Ok((v, table));
        }
        let v = tape.matmul(enc, self.vars.position_embed)?;
        self.positions = Some(v);
        Ok((v, table))
    }

    fn head(&self, tape: &mut Tape, v: Var, m: usize) -> Result<Var> {
        let d = self.config.head_dim();
        tape.slice_cols(v, m * d, d)
    }

    fn e1(&mut self, tape: &mut Tape) -> Result<Vec<Var>> {
        let (q, k) = (self.queries(tape)?, self.keys(tape)?);
        (0..self.config.heads)
            .map(|m| {
                let (qm, km) = (self.head(tape, q, m)?, self.head(tape, k, m)?);
                tape.matmul_nt(qm, km)
            })
            .collect()
    }

    fn e2(&mut self, tape: &mut Tape) -> Result<Vec<Var>> {
        let q = self.queries(tape)?;
        let (p, table) = self.positions(tape)?;
        let index: Rc<[usize]> = table.pair_index.as_slice().into();
        (0..self.config.heads)
            .map(|m| {
                let (qm, pm) = (self.head(tape, q, m)?, self.head(tape, p, m)?);
                tape.pair_dot_gather(qm, pm, index.clone(), table.n_queries, table.n_keys)
            })
            .collect()
    }

    fn e3(&mut self, tape: &mut Tape) -> Result<Vec<Var>> {
        let k = self.keys(tape)?;
        (0..self.config.heads)
            .map(|m| {
                let (um, km) = (
                    self.head(tape, self.vars.key_bias, m)?,
                    self.head(tape, k, m)?,
                );
                tape.matmul_nt(um, km)
            })
            .collect()
    }

    fn e4(&mut self, tape: &mut Tape) -> Result<Vec<Var>> {
        let (p, table) = self.positions(tape)?;
        let index: Rc<[usize]> = table.pair_index.as_slice().into();
        (0..self.config.heads)
            .map(|m| {
                let vm = self.head(tape, self.vars.position_bias, m)?;
                let pm = self.head(tape, p, m)?;
                tape.pair_dot_gather(vm, pm, index.clone(), table.n_queries, table.n_keys)
            })
            .collect()
    }
}

/// Per-head energies of the active terms. `E1`, `E2`, `E4` are `[Nq, Nk]`;
/// `E3` is `[1, Nk]` and broadcasts over queries.
#[derive(Clone, Debug, Default)]
pub struct EnergyTerms {
    pub e1: Option<Vec<Var>>,
    pub e2: Option<Vec<Var>>,
    pub e3: Option<Vec<Var>>,
    pub e4: Option<Vec<Var>>,
    pub n_queries: usize,
    pub n_keys: usize,
}

fn offset_var(tape: &mut Tape, table: &OffsetTable) -> Var {
    tape.constant(table.encodings.clone())
}

/// `E1 = z_q^T U_m^T V^C_m x_k` for every head.
pub fn energy_e1(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    z: Var,
    x: Var,
) -> Result<Vec<Var>> {
    Projections::new(config, vars, z, x, None).e1(tape)
}

/// `E2 = z_q^T U_m^T V^R_m R_{k-q}` for every head.
pub fn energy_e2(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    z: Var,
    table: &OffsetTable,
) -> Result<Vec<Var>> {
    check_rows(tape, z, table.n_queries)?;
    let enc = offset_var(tape, table);
    Projections::new(config, vars, z, z, Some((enc, table))).e2(tape)
}

/// `E3 = u_m^T V^C_m x_k` for every head, `[1, Nk]`.
pub fn energy_e3(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    x: Var,
) -> Result<Vec<Var>> {
    Projections::new(config, vars, x, x, None).e3(tape)
}

/// `E4 = v_m^T V^R_m R_{k-q}` for every head.
pub fn energy_e4(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    table: &OffsetTable,
) -> Result<Vec<Var>> {
    let enc = offset_var(tape, table);
    Projections::new(config, vars, enc, enc, Some((enc, table))).e4(tape)
}

fn check_rows(tape: &Tape, v: Var, rows: usize) -> Result<()> {
    if tape.value(v).rows() != rows {
        return Err(Error::dims("attention rows", tape.shape(v), &[rows]));
    }
    Ok(())
}

/// Computes every term switched on in `config.beta`, sharing the query, key and
/// position projections between terms.
pub fn energy_terms(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    z: Var,
    x: Var,
    table: &OffsetTable,
) -> Result<EnergyTerms> {
    check_rows(tape, z, table.n_queries)?;
    check_rows(tape, x, table.n_keys)?;
    let beta = config.beta;
    let enc = if beta.term(2) || beta.term(4) {
        Some((offset_var(tape, table), table))
    } else {
        None
    };
    let mut proj = Projections::new(config, vars, z, x, enc);
    Ok(EnergyTerms {
        e1: beta.term(1).then(|| proj.e1(tape)).transpose()?,
        e2: beta.term(2).then(|| proj.e2(tape)).transpose()?,
        e3: beta.term(3).then(|| proj.e3(tape)).transpose()?,
        e4: beta.term(4).then(|| proj.e4(tape)).transpose()?,
        n_queries: table.n_queries,
        n_keys: table.n_keys,
    })
}

/// Softmax over the support region of `Σ_j β_j E_j`, one `[Nq, Nk]` matrix per head.
/// Terms absent from `terms` count as switched off.
pub fn attention_weights(
    tape: &mut Tape,
    config: &AttentionConfig,
    terms: &EnergyTerms,
    mask: Option<Rc<[bool]>>,
) -> Result<Vec<Var>> {
    let beta = config.beta;
    let (nq, nk) = (terms.n_queries, terms.n_keys);
    let pick = |on: bool, t: &Option<Vec<Var>>, m: usize| -> Option<Var> {
        if on {
            t.as_ref().map(|v| v[m])
        } else {
            None
        }
    };
    (0..config.heads)
        .map(|m| {
            let mut logits: Option<Var> = None;
            for v in [
                pick(beta.term(1), &terms.e1, m),
                pick(beta.term(2), &terms.e2, m),
                pick(beta.term(4), &terms.e4, m),
            ]
            .into_iter()
            .flatten()
            {
                logits = Some(match logits {
                    Some(acc) => tape.add(acc, v)?,
                    None => v,
                });
            }
            let mut logits = match logits {
                Some(l) => l,
                None => tape.constant(Tensor::zeros([nq, nk])),
            };
            if let Some(e3) = pick(beta.term(3), &terms.e3, m) {
                logits = tape.add_row(logits, e3)?;
            }
            tape.softmax(logits, mask.clone())
        })
        .collect()
}

/// `y_q = Σ_m W_m Σ_k A_m(q, k) W'_m x_k`, `[Nq, C]`.
pub fn aggregate(
    tape: &mut Tape,
    config: &AttentionConfig,
    vars: &TransformerVars,
    weights: &[Var],
    x: Var,
) -> Result<Var> {
    if weights.len() != config.heads {
        return Err(Error::dims(
            "aggregate heads",
            &[weights.len()],
            &[config.heads],
        ));
    }
    let d = config.head_dim();
    let values = tape.matmul(x, vars.value_proj)?;
    let heads = weights
        .iter()
        .enumerate()
        .map(|(m, &a)| {
            let vm = tape.slice_cols(values, m * d, d)?;
            tape.matmul(a, vm)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, vars.output_proj)
}

/// A complete attention module: configuration, parameters and the
/// relative-position encoder.
#[derive(Clone, Debug)]
pub struct TransformerAttention {
    pub config: AttentionConfig,
    pub params: TransformerParams,
    pub encoder: RelPosEncoder,
}

impl TransformerAttention {
    /// Position encodings share the content width, as in the image stages.
    pub fn init(config: AttentionConfig, layouts: &[Layout], rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = RelPosEncoder::for_layouts(config.model_dim, layouts)?;
        let params = TransformerParams::init(&config, encoder.dim(), rng);
        Ok(TransformerAttention {
            config,
            params,
            encoder,
        })
    }

    pub fn offset_table(&self, queries: Layout, keys: Layout) -> Result<OffsetTable> {
        OffsetTable::build(&self.encoder, queries, keys)
    }

    /// Attention output for queries `z` laid out by `queries` over keys `x` laid
    /// out by `keys`. Self-attention requires `z` and `x` to be the same value.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &TransformerVars,
        z: Var,
        x: Var,
        queries: Layout,
        keys: Layout,
        mode: AttentionMode,
    ) -> Result<Var> {
        let table = self.offset_table(queries, keys)?;
        self.forward_with_table(tape, vars, z, x, &table, queries, keys, mode)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_table(
        &self,
        tape: &mut Tape,
        vars: &TransformerVars,
        z: Var,
        x: Var,
        table: &OffsetTable,
        queries: Layout,
        keys: Layout,
        mode: AttentionMode,
    ) -> Result<Var> {
        if mode == AttentionMode::SelfAttention && (z != x || queries != keys) {
            return Err(Error::contract(
                "self-attention takes the same tensor as queries and keys",
            ));
        }
        let terms = energy_terms(tape, &self.config, vars, z, x, table)?;
        let mask = self.config.region.mask(queries, keys)?;
        let weights = attention_weights(tape, &self.config, &terms, mask)?;
        aggregate(tape, &self.config, vars, &weights, x)
    }
}

/// `input + scale · branch`, the insertion form whose scale starts at zero so a
/// freshly added module leaves its host unchanged.
pub fn residual(tape: &mut Tape, input: Var, branch: Var, scale: Var) -> Result<Var> {
    let scaled = tape.scale_by(branch, scale)?;
    tape.add(input, scaled)
}

/// Full layer: attention followed by the zero-initialized residual.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer_forward(
    tape: &mut Tape,
    module: &TransformerAttention,
    vars: &TransformerVars,
    z: Var,
    x: Var,
    queries: Layout,
    keys: Layout,
    mode: AttentionMode,
    residual_scale: Var,
) -> Result<Var> {
    let y = module.forward(tape, vars, z, x, queries, keys, mode)?;
    residual(tape, z, y, residual_scale)
}
