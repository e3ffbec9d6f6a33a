//! Exact multiply-add accounting.
//!
//! Closed forms here mirror, operation by operation, what the modules record on
//! a [`Tape`]; [`measure_term`] and [`measure_mechanism`] run the real modules
//! and read the tape counter so the two can be compared exactly. One MAC is one
//! multiply-add; exponentials and divisions are tallied separately by the tape
//! and left out of these counts.
//!
//! Projection sizes follow the modules: position encodings are `C` wide, the
//! dynamic convolution keeps `C` channels through the gated unit and the
//! point-wise projection, and deformable sampling reads `2^D` neighbors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::attention::{
    aggregate, attention_weights, energy_e1, energy_e2, energy_e3, energy_e4, energy_terms,
    AttentionConfig, Beta, TransformerAttention,
};
use crate::conv::{deformable_forward, regular_conv_forward, ConvKernelSpec, DeformableParams};
use crate::dynconv::{dynamic_forward, DynamicConvParams};
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::relpos::OffsetTable;
use crate::tensor::{OpCounter, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    E1,
    E2,
    E3,
    E4,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::E1, Term::E2, Term::E3, Term::E4];

    /// Position in `β`, 1-based.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn only(self) -> Beta {
        let mut bits = [false; 4];
        bits[self as usize] = true;
        Beta::new(bits)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.index())
    }
}

/// A count split into the part that grows with query·key pairs and the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TermCount {
    /// Embeddings of content and position encodings.
    pub projection: u64,
    /// Work done per (query, key) pair, or per key for `E3`.
    pub pairwise: u64,
}

impl TermCount {
    pub fn total(&self) -> u64 {
        self.projection + self.pairwise
    }
}

/// Sizes that determine the attention counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub n_queries: usize,
    pub n_keys: usize,
    /// Distinct relative offsets between the query and key layouts.
    pub n_offsets: usize,
    pub dim: usize,
    pub rel_dim: usize,
    pub heads: usize,
}

impl AttentionShape {
    /// Offsets between two layouts of the same kind, counted as the offset table does.
    pub fn between(queries: Layout, keys: Layout, dim: usize, heads: usize) -> Result<Self> {
        let n_offsets = match (queries, keys) {
            (Layout::Seq { len: a }, Layout::Seq { len: b }) => a + b - 1,
            (
                Layout::Grid {
                    width: wa,
                    height: ha,
                },
                Layout::Grid {
                    width: wb,
                    height: hb,
                },
            ) => (wa + wb - 1) * (ha + hb - 1),
            _ => {
                return Err(Error::contract(
                    "query and key layouts differ in dimensionality",
                ))
            }
        };
        Ok(AttentionShape {
            n_queries: queries.len(),
            n_keys: keys.len(),
            n_offsets,
            dim,
            rel_dim: dim,
            heads,
        })
    }

    /// Self-attention over a sequence of `n_s` tokens.
    pub fn self_seq(n_s: usize, dim: usize, heads: usize) -> Self {
        Self::between(Layout::seq(n_s), Layout::seq(n_s), dim, heads).expect("same kind")
    }

    fn u(&self) -> [u64; 5] {
        [
            self.n_queries as u64,
            self.n_keys as u64,
            self.n_offsets as u64,
            self.dim as u64,
            self.rel_dim as u64,
        ]
    }
}

/// Cost of one term computed on its own, embeddings included.
pub fn count_term(term: Term, s: &AttentionShape) -> TermCount {
    let [nq, nk, nr, c, dr] = s.u();
    let (queries, keys, positions) = (nq * c * c, nk * c * c, nr * dr * c);
    match term {
        Term::E1 => TermCount {
            projection: queries + keys,
            pairwise: nq * nk * c,
        },
        Term::E2 => TermCount {
            projection: queries + positions,
            pairwise: nq * nk * c,
        },
        Term::E3 => TermCount {
            projection: keys,
            pairwise: nk * c,
        },
        Term::E4 => TermCount {
            projection: positions,
            pairwise: nq * nk * c,
        },
    }
}

/// Cost of every term active in `beta` when the query, key and position
/// embeddings are computed once and shared.
pub fn count_combined(beta: Beta, s: &AttentionShape) -> TermCount {
    let [nq, nk, nr, c, dr] = s.u();
    let b = |j| beta.term(j);
    let mut projection = 0;
    if b(1) || b(2) {
        projection += nq * c * c;
    }
    if b(1) || b(3) {
        projection += nk * c * c;
    }
    if b(2) || b(4) {
        projection += nr * dr * c;
    }
    let pairwise = Term::ALL
        .into_iter()
        .filter(|t| b(t.index()))
        .map(|t| count_term(t, s).pairwise)
        .sum();
    TermCount {
        projection,
        pairwise,
    }
}

/// MACs saved by sharing embeddings between the active terms.
pub fn sharing_savings(beta: Beta, s: &AttentionShape) -> u64 {
    let separate: u64 = Term::ALL
        .into_iter()
        .filter(|t| beta.term(t.index()))
        .map(|t| count_term(t, s).total())
        .sum();
    separate - count_combined(beta, s).total()
}

/// Value projection, weighted sum over keys and output projection.
pub fn count_aggregation(s: &AttentionShape) -> u64 {
    let [nq, nk, _, c, _] = s.u();
    nk * c * c + nq * nk * c + nq * c * c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mechanism {
    Regular,
    Deformable,
    Dynamic,
    Transformer(Beta),
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Regular => f.write_str("regular"),
            Mechanism::Deformable => f.write_str("deformable"),
            Mechanism::Dynamic => f.write_str("dynamic"),
            Mechanism::Transformer(b) => write!(f, "transformer-{b}"),
        }
    }
}

/// Sizes shared by every mechanism in one comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MechanismShape {
    pub layout: Layout,
    pub dim: usize,
    pub n_k: usize,
    pub n_g: usize,
    pub heads: usize,
}

impl MechanismShape {
    pub fn n_s(&self) -> usize {
        self.layout.len()
    }

    pub fn attention(&self) -> AttentionShape {
        AttentionShape::between(self.layout, self.layout, self.dim, self.heads)
            .expect("same layout")
    }
}

/// Forward-pass MACs of one mechanism applied to a whole layout.
pub fn count_mechanism(mech: Mechanism, s: &MechanismShape) -> u64 {
    let (n, c, nk, ng) = (s.n_s() as u64, s.dim as u64, s.n_k as u64, s.n_g as u64);
    let dims = s.layout.dims() as u64;
    match mech {
        Mechanism::Regular => n * nk * c + n * nk * c * c,
        Mechanism::Deformable => n * c * dims * nk + n * nk * (1 << dims) * c + n * nk * c * c,
        // gated unit (two projections and the gating product), kernel
        // prediction, depth-wise window, point-wise projection
        Mechanism::Dynamic => 2 * n * c * c + n * c + n * c * ng * nk + n * nk * c + n * c * c,
        Mechanism::Transformer(beta) => {
            let a = s.attention();
            count_combined(beta, &a).total() + count_aggregation(&a)
        }
    }
}

/// Spatial support of a mechanism's attention weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spatial {
    DenseGlobal,
    SparseLocal,
    SparseGlobal,
}

impl fmt::Display for Spatial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spatial::DenseGlobal => "dense-global",
            Spatial::SparseLocal => "sparse-local",
            Spatial::SparseGlobal => "sparse-global",
        })
    }
}

/// Which inputs a mechanism's weights depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Factors {
    pub spatial: Spatial,
    pub query_content: bool,
    pub key_content: bool,
    pub relative_position: bool,
}

impl fmt::Display for Factors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "spatial={};query={};key={};relpos={}",
            self.spatial,
            self.query_content as u8,
            self.key_content as u8,
            self.relative_position as u8
        )
    }
}

pub fn term_factors(term: Term) -> Factors {
    let (q, k, r) = match term {
        Term::E1 => (true, true, false),
        Term::E2 => (true, false, true),
        Term::E3 => (false, true, false),
        Term::E4 => (false, false, true),
    };
    Factors {
        spatial: Spatial::DenseGlobal,
        query_content: q,
        key_content: k,
        relative_position: r,
    }
}

pub fn mechanism_factors(mech: Mechanism) -> Factors {
    let f = |spatial, q, k, r| Factors {
        spatial,
        query_content: q,
        key_content: k,
        relative_position: r,
    };
    match mech {
        Mechanism::Regular => f(Spatial::SparseLocal, false, false, true),
        Mechanism::Deformable => f(Spatial::SparseGlobal, true, false, true),
        Mechanism::Dynamic => f(Spatial::SparseLocal, true, false, true),
        Mechanism::Transformer(b) => f(
            Spatial::DenseGlobal,
            b.term(1) || b.term(2),
            b.term(1) || b.term(3),
            b.term(2) || b.term(4),
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LedgerKey {
    pub mechanism: String,
    pub term: String,
    pub n_s: usize,
    pub dim: usize,
    pub n_k: usize,
    pub n_g: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub macs: u64,
    pub factors: Option<Factors>,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    mechanism: &'a str,
    term: &'a str,
    #[serde(rename = "N_s")]
    n_s: usize,
    #[serde(rename = "C")]
    dim: usize,
    #[serde(rename = "N_k")]
    n_k: usize,
    #[serde(rename = "N_g")]
    n_g: usize,
    #[serde(rename = "M")]
    heads: usize,
    macs: u64,
    flags: String,
}

/// Exact MAC counts keyed by mechanism, term and shape.
#[derive(Clone, Debug, Default)]
pub struct FlopLedger {
    entries: BTreeMap<LedgerKey, LedgerEntry>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: LedgerKey, entry: LedgerEntry) {
        self.entries.insert(key, entry);
    }

    pub fn get(&self, key: &LedgerKey) -> Option<&LedgerEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LedgerKey, &LedgerEntry)> {
        self.entries.iter()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (k, e) in &self.entries {
            w.serialize(CsvRow {
                mechanism: &k.mechanism,
                term: &k.term,
                n_s: k.n_s,
                dim: k.dim,
                n_k: k.n_k,
                n_g: k.n_g,
                heads: k.heads,
                macs: e.macs,
                flags: e.factors.map(|f| f.to_string()).unwrap_or_default(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mechanism-comparison rows for one shape: the four terms alone, the
/// aggregation step, the full `1111` module and the three convolutions.
pub fn emit_table(s: &MechanismShape) -> FlopLedger {
    let mut ledger = FlopLedger::new();
    let key = |mechanism: &str, term: &str| LedgerKey {
        mechanism: mechanism.into(),
        term: term.into(),
        n_s: s.n_s(),
        dim: s.dim,
        n_k: s.n_k,
        n_g: s.n_g,
        heads: s.heads,
    };
    let a = s.attention();
    for t in Term::ALL {
        ledger.record(
            key("transformer", &t.to_string()),
            LedgerEntry {
                macs: count_term(t, &a).total(),
                factors: Some(term_factors(t)),
            },
        );
    }
    ledger.record(
        key("transformer", "aggregation"),
        LedgerEntry {
            macs: count_aggregation(&a),
            factors: None,
        },
    );
    let full = Mechanism::Transformer(Beta::FULL);
    ledger.record(
        key("transformer", &Beta::FULL.to_string()),
        LedgerEntry {
            macs: count_mechanism(full, s),
            factors: Some(mechanism_factors(full)),
        },
    );
    for m in [
        Mechanism::Regular,
        Mechanism::Deformable,
        Mechanism::Dynamic,
    ] {
        ledger.record(
            key(&m.to_string(), "-"),
            LedgerEntry {
                macs: count_mechanism(m, s),
                factors: Some(mechanism_factors(m)),
            },
        );
    }
    ledger
}

/// Runs one term on random inputs and returns what the tape counted.
pub fn measure_term(
    term: Term,
    queries: Layout,
    keys: Layout,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<OpCounter> {
    let mut rng = Rng::new(seed);
    let config = AttentionConfig::new(heads, dim, term.only())?;
    let module = TransformerAttention::init(config, &[queries, keys], &mut rng)?;
    let table = module.offset_table(queries, keys)?;
    let mut tape = Tape::new();
    let vars = module.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::uniform([queries.len(), dim], 1.0, &mut rng));
    let x = tape.constant(Tensor::uniform([keys.len(), dim], 1.0, &mut rng));
    let before = tape.counter();
    let cfg = &module.config;
    match term {
        Term::E1 => energy_e1(&mut tape, cfg, &vars, z, x)?,
        Term::E2 => energy_e2(&mut tape, cfg, &vars, z, &table)?,
        Term::E3 => energy_e3(&mut tape, cfg, &vars, x)?,
        Term::E4 => energy_e4(&mut tape, cfg, &vars, &table)?,
    };
    Ok(tape.counter() - before)
}

/// Runs the energies of `beta` together plus the aggregation and returns the
/// tape counts of the two stages.
pub fn measure_attention(
    beta: Beta,
    queries: Layout,
    keys: Layout,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<(OpCounter, OpCounter)> {
    let mut rng = Rng::new(seed);
    let mut config = AttentionConfig::uniform(heads, dim)?;
    config.beta = beta;
    let module = TransformerAttention::init(config, &[queries, keys], &mut rng)?;
    let table: OffsetTable = module.offset_table(queries, keys)?;
    let mut tape = Tape::new();
    let vars = module.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::uniform([queries.len(), dim], 1.0, &mut rng));
    let x = tape.constant(Tensor::uniform([keys.len(), dim], 1.0, &mut rng));
    let cfg = &module.config;
    let start = tape.counter();
    let terms = energy_terms(&mut tape, cfg, &vars, z, x, &table)?;
    let energies = tape.counter() - start;
    let start = tape.counter();
    let weights = attention_weights(&mut tape, cfg, &terms, None)?;
    aggregate(&mut tape, cfg, &vars, &weights, x)?;
    Ok((energies, tape.counter() - start))
}

/// Runs a whole mechanism forward on random inputs and returns the tape counts.
pub fn measure_mechanism(mech: Mechanism, s: &MechanismShape, seed: u64) -> Result<OpCounter> {
    let mut rng = Rng::new(seed);
    let (n, c) = (s.n_s(), s.dim);
    if let Mechanism::Transformer(beta) = mech {
        let (e, a) = measure_attention(beta, s.layout, s.layout, c, s.heads, seed)?;
        return Ok(OpCounter {
            macs: e.macs + a.macs,
            exps: e.exps + a.exps,
            divs: e.divs + a.divs,
        });
    }
    let spec = ConvKernelSpec::for_layout(s.layout, s.n_k)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform([n, c], 1.0, &mut rng));
    // parameters are bound before the counter is read so only the forward counts
    let start;
    match mech {
        Mechanism::Regular => {
            let kernel = Tensor::init_fan_in([s.n_k * c, c], s.n_k * c, &mut rng);
            let kernel = tape.constant(kernel);
            start = tape.counter();
            regular_conv_forward(&mut tape, x, kernel, s.layout, &spec)?;
        }
        Mechanism::Deformable => {
            let mut p = DeformableParams::init(c, s.layout, &spec, &mut rng);
            p.offset_pred = Tensor::uniform(p.offset_pred.shape().to_vec(), 0.3, &mut rng);
            let vars = p.bind(&mut tape, false);
            start = tape.counter();
            deformable_forward(&mut tape, x, &vars, s.layout, &spec)?;
        }
        Mechanism::Dynamic => {
            let p = DynamicConvParams::init(c, c, s.n_g, spec, &mut rng)?;
            let vars = p.bind(&mut tape, false);
            start = tape.counter();
            dynamic_forward(&mut tape, x, &p, &vars, s.layout)?;
        }
        Mechanism::Transformer(_) => unreachable!("handled above"),
    }
    Ok(tape.counter() - start)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests;
