//! Small models built from the attention modules, one per insertion pattern.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::task::{Sample, TaskSpec};
use crate::attention::{
    residual, AttentionConfig, AttentionMode, Beta, Region, TransformerAttention, TransformerVars,
};
use crate::conv::{deformable_forward, ConvKernelSpec, DeformableParams, DeformableVars};
use crate::dynconv::{dynamic_forward, DynamicConvParams, DynamicConvVars};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::relpos::OffsetTable;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Where attention sits in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stack {
    /// Self-attention added to the backbone through a zero-initialized
    /// residual scalar. On encoder-decoder tasks it acts on the encoder and the
    /// encoder-decoder attention stays at `1111`.
    AttendedBlock,
    /// Attention with a plain residual. On encoder-decoder tasks the switched
    /// module is the encoder-decoder attention.
    Transformer,
    /// A deformable convolution (zero-initialized residual) in front of the
    /// switched attention.
    TransformerDeformable,
    /// Dynamic convolution in place of self-attention.
    Dynamic,
}

impl Stack {
    pub const ALL: [Stack; 4] = [
        Stack::AttendedBlock,
        Stack::Transformer,
        Stack::TransformerDeformable,
        Stack::Dynamic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stack::AttendedBlock => "attended-block",
            Stack::Transformer => "transformer",
            Stack::TransformerDeformable => "transformer-deformable",
            Stack::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stack::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stack {s:?}")))
    }
}

/// Architecture choices of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stack: Stack,
    /// Switched terms; `None` leaves the switched attention out.
    pub beta: Option<Beta>,
    pub heads: usize,
    pub region: Region,
    /// Convolution kernel size; defaults to 3 on sequences and 3×3 on grids.
    pub n_k: Option<usize>,
    /// Dynamic-convolution groups; defaults to `gcd(16, C)`.
    pub n_g: Option<usize>,
}

impl ModelConfig {
    pub fn new(stack: Stack, beta: Option<Beta>) -> Self {
        ModelConfig {
            stack,
            beta,
            heads: 2,
            region: Region::Full,
            n_k: None,
            n_g: None,
        }
    }

    pub fn kernel_size(&self, layout: Layout) -> usize {
        self.n_k.unwrap_or(if layout.dims() == 1 { 3 } else { 9 })
    }

    pub fn groups(&self, channels: usize) -> usize {
        self.n_g
            .unwrap_or_else(|| gcd(crate::dynconv::DEFAULT_GROUPS, channels))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// How an inserted module joins its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Join {
    /// `x + y`
    Plain,
    /// `x + α·y` with a learnable `α` starting at zero
    Gated,
}

/// One attention module with its cached offset table and mask.
#[derive(Clone, Debug)]
struct AttnUnit {
    module: TransformerAttention,
    table: OffsetTable,
    mask: Option<Rc<[bool]>>,
    mode: AttentionMode,
    scale: Tensor,
    scale_trainable: bool,
}

impl AttnUnit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        beta: Beta,
        cfg: &ModelConfig,
        dim: usize,
        queries: Layout,
        keys: Layout,
        mode: AttentionMode,
        join: Join,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut config = AttentionConfig::uniform(cfg.heads, dim)?.with_region(cfg.region);
        config.beta = beta;
        let module = TransformerAttention::init(config, &[queries, keys], rng)?;
        let table = module.offset_table(queries, keys)?;
        let mask = cfg.region.mask(queries, keys)?;
        Ok(AttnUnit {
            module,
            table,
            mask,
            mode,
            scale: Tensor::scalar(if join == Join::Plain { 1.0 } else { 0.0 }),
            scale_trainable: join == Join::Gated,
        })
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], scale: Var, z: Var, x: Var) -> Result<Var> {
        let vars = TransformerVars::from_slice(vars)?;
        let cfg = &self.module.config;
        if self.mode == AttentionMode::SelfAttention && z != x {
            return Err(Error::contract("self-attention needs one input"));
        }
        let terms = crate::attention::energy_terms(tape, cfg, &vars, z, x, &self.table)?;
        let w = crate::attention::attention_weights(tape, cfg, &terms, self.mask.clone())?;
        let y = crate::attention::aggregate(tape, cfg, &vars, &w, x)?;
        residual(tape, z, y, scale)
    }
}

#[derive(Clone, Debug)]
struct DeformUnit {
    params: DeformableParams,
    spec: ConvKernelSpec,
    scale: Tensor,
}

#[derive(Clone, Debug)]
struct DynUnit {
    params: DynamicConvParams,
    scale: Tensor,
}

/// A trainable tensor with its learning-rate multiplier.
pub struct Slot<'a> {
    pub tensor: &'a Tensor,
    pub lr_scale: f64,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    spec: TaskSpec,
    deform: Option<DeformUnit>,
    dynamic: Option<DynUnit>,
    self_attn: Option<AttnUnit>,
    cross_attn: Option<AttnUnit>,
    readout_w: Tensor,
    readout_b: Tensor,
}

// independent streams so that each part's initialization does not depend on
// which other parts exist
const READOUT_STREAM: u64 = 10;
const SELF_STREAM: u64 = 11;
const CROSS_STREAM: u64 = 12;
const DEFORM_STREAM: u64 = 13;
const DYNAMIC_STREAM: u64 = 14;

impl Model {
    pub fn new(config: ModelConfig, spec: TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels();
        let src = spec.source_layout();
        let rng = |s| Rng::derive(seed, s);
        let encdec = spec.query_layout();
        let beta = config.beta;
        let need_beta = || {
            beta.ok_or_else(|| {
                Error::Config(format!(
                    "the {} stack needs a β configuration",
                    config.stack
                ))
            })
        };
        let self_unit = |b: Beta, join: Join| {
            AttnUnit::new(
                b,
                &config,
                c,
                src,
                src,
                AttentionMode::SelfAttention,
                join,
                &mut rng(SELF_STREAM),
            )
        };
        let cross_unit = |b: Beta| match encdec {
            Some(q) => AttnUnit::new(
                b,
                &config,
                c,
                q,
                src,
                AttentionMode::EncoderDecoder,
                Join::Plain,
                &mut rng(CROSS_STREAM),
            )
            .map(Some),
            None => Ok(None),
        };
        let (mut self_attn, mut cross_attn, mut deform, mut dynamic) = (None, None, None, None);
        match config.stack {
            Stack::AttendedBlock => {
                if let Some(b) = beta {
                    self_attn = Some(self_unit(b, Join::Gated)?);
                }
                cross_attn = cross_unit(Beta::FULL)?;
            }
            Stack::Transformer | Stack::TransformerDeformable => {
                if config.stack == Stack::TransformerDeformable {
                    let spec = ConvKernelSpec::for_layout(src, config.kernel_size(src))?;
                    deform = Some(DeformUnit {
                        params: DeformableParams::init(c, src, &spec, &mut rng(DEFORM_STREAM)),
                        spec,
                        scale: Tensor::scalar(0.0),
                    });
                }
                if encdec.is_some() {
                    cross_attn = cross_unit(need_beta()?)?;
                } else if let Some(b) = beta {
                    let join = if config.stack == Stack::Transformer {
                        Join::Plain
                    } else {
                        Join::Gated
                    };
                    self_attn = Some(self_unit(b, join)?);
                } else if config.stack == Stack::Transformer {
                    need_beta()?;
                }
            }
            Stack::Dynamic => {
                if beta.is_some() {
                    return Err(Error::Config(
                        "the dynamic stack replaces the switched attention; leave β unset".into(),
                    ));
                }
                let kspec = ConvKernelSpec::for_layout(src, config.kernel_size(src))?;
                dynamic = Some(DynUnit {
                    params: DynamicConvParams::init(
                        c,
                        c,
                        config.groups(c),
                        kspec,
                        &mut rng(DYNAMIC_STREAM),
                    )?,
                    scale: Tensor::scalar(0.0),
                });
                cross_attn = cross_unit(Beta::FULL)?;
            }
        }
        let k = spec.classes();
        let readout_w = Tensor::init_fan_in([c, k], c, &mut rng(READOUT_STREAM));
        Ok(Model {
            config,
            spec,
            deform,
            dynamic,
            self_attn,
            cross_attn,
            readout_w,
            readout_b: Tensor::zeros([1, k]),
        })
    }

    /// Every tensor in a fixed order shared by [`bind`](Self::bind) and
    /// [`tensors_mut`](Self::tensors_mut).
    pub fn slots(&self) -> Vec<Slot<'_>> {
        let mut out = Vec::new();
        let mut push = |tensor, lr_scale, trainable| {
            out.push(Slot {
                tensor,
                lr_scale,
                trainable,
            })
        };
        if let Some(d) = &self.deform {
            for (t, s) in d.params.tensors().into_iter().zip(d.params.lr_scales()) {
                push(t, s, true);
            }
            push(&d.scale, 1.0, true);
        }
        if let Some(d) = &self.dynamic {
            for t in d.params.tensors() {
                push(t, 1.0, true);
            }
            push(&d.scale, 1.0, true);
        }
        for a in [&self.self_attn, &self.cross_attn].into_iter().flatten() {
            for t in a.module.params.tensors() {
                push(t, 1.0, true);
            }
            push(&a.scale, 1.0, a.scale_trainable);
        }
        push(&self.readout_w, 1.0, true);
        push(&self.readout_b, 1.0, true);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(d) = &mut self.deform {
            out.extend(d.params.tensors_mut());
            out.push(&mut d.scale);
        }
        if let Some(d) = &mut self.dynamic {
            out.extend(d.params.tensors_mut());
            out.push(&mut d.scale);
        }
        for a in [&mut self.self_attn, &mut self.cross_attn]
            .into_iter()
            .flatten()
        {
            out.extend(a.module.params.tensors_mut());
            out.push(&mut a.scale);
        }
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.slots()
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.tensor.len())
            .sum()
    }

    /// Records every tensor on `tape`, in [`slots`](Self::slots) order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.slots()
            .into_iter()
            .map(|s| tape.leaf(s.tensor.clone(), trainable && s.trainable))
            .collect()
    }

    /// Class logits: one row per query, per position, or a single row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], sample: &Sample) -> Result<Var> {
        let mut rest = vars;
        let mut take = |n: usize| -> Result<&[Var]> {
            if rest.len() < n {
                return Err(Error::contract("model bound with too few leaves"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let src = self.spec.source_layout();
        let mut x = tape.constant(sample.source.clone());
        if let Some(d) = &self.deform {
            let v = take(3)?;
            let dv = DeformableVars {
                offset_pred: v[0],
                output_proj: v[1],
            };
            let y = deformable_forward(tape, x, &dv, src, &d.spec)?;
            x = residual(tape, x, y, v[2])?;
        }
        if let Some(d) = &self.dynamic {
            let v = take(7)?;
            let dv = DynamicConvVars::from_slice(&v[..6])?;
            let y = dynamic_forward(tape, x, &d.params, &dv, src)?;
            x = residual(tape, x, y, v[6])?;
        }
        if let Some(a) = &self.self_attn {
            let v = take(8)?;
            x = a.forward(tape, &v[..7], v[7], x, x)?;
        }
        let mut h = x;
        if let Some(a) = &self.cross_attn {
            let v = take(8)?;
            let q = sample
                .queries
                .as_ref()
                .ok_or_else(|| Error::contract("encoder-decoder model needs queries"))?;
            let z = tape.constant(q.clone());
            h = a.forward(tape, &v[..7], v[7], z, x)?;
        }
        if self.spec.pooled() {
            h = tape.mean_rows(h)?;
        }
        let v = take(2)?;
        let logits = tape.matmul(h, v[0])?;
        tape.add_row(logits, v[1])
    }

    pub fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &vars, sample)?;
        let l = tape.value(logits);
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect())
    }

    /// Forward-pass MACs for one sample.
    pub fn forward_macs(&self, sample: &Sample) -> Result<u64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let before = tape.counter();
        self.forward(&mut tape, &vars, sample)?;
        Ok((tape.counter() - before).macs)
    }

    pub fn task(&self) -> &TaskSpec {
        &self.spec
    }
}
