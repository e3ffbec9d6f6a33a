use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::layout::Layout;

/// Which of the four energy terms are switched on, written `"β1β2β3β4"`.
///
/// `"1000"` keeps only query/key content, `"0011"` keeps key content and
/// relative-position bias, and so on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Beta([bool; 4]);

impl Beta {
    pub const FULL: Beta = Beta([true; 4]);
    pub const NONE: Beta = Beta([false; 4]);

    pub fn new(bits: [bool; 4]) -> Self {
        Beta(bits)
    }

    /// All sixteen configurations from `"0000"` to `"1111"`.
    pub fn all() -> impl Iterator<Item = Beta> {
        (0u8..16).map(|i| Beta([i & 8 != 0, i & 4 != 0, i & 2 != 0, i & 1 != 0]))
    }

    /// Whether term `j` (1-based, as in `E1..E4`) is active.
    pub fn term(&self, j: usize) -> bool {
        self.0[j - 1]
    }

    pub fn bits(&self) -> [bool; 4] {
        self.0
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True when every term active in `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &Beta) -> bool {
        self.0.iter().zip(other.0).all(|(&a, b)| !a || b)
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 4 || !bytes.iter().all(|b| matches!(b, b'0' | b'1')) {
            return Err(Error::Config(format!(
                "β configuration must be four characters over {{0,1}}, got {s:?}"
            )));
        }
        let mut bits = [false; 4];
        for (bit, b) in bits.iter_mut().zip(bytes) {
            *bit = *b == b'1';
        }
        Ok(Beta(bits))
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Supporting key region for each query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// Every key.
    #[default]
    Full,
    /// Keys within `radius` of the query along every axis.
    Window { radius: usize },
    /// Keys at or before the query (sequences only).
    Causal,
}

impl Region {
    /// Keep-mask over `[n_queries, n_keys]`; `None` when nothing is excluded.
    /// Keys outside a window are left out of the support rather than padded.
    pub fn mask(&self, queries: Layout, keys: Layout) -> Result<Option<Rc<[bool]>>> {
        let (nq, nk) = (queries.len(), keys.len());
        let keep: Vec<bool> = match *self {
            Region::Full => return Ok(None),
            Region::Window { radius } => {
                let r = radius as i64;
                (0..nq * nk)
                    .map(|i| {
                        let ([qx, qy], [kx, ky]) = (queries.coords(i / nk), keys.coords(i % nk));
                        (kx - qx).abs() <= r && (ky - qy).abs() <= r
                    })
                    .collect()
            }
            Region::Causal => {
                if queries.dims() != 1 || keys.dims() != 1 {
                    return Err(Error::Config("causal region needs sequence layouts".into()));
                }
                (0..nq * nk).map(|i| i % nk <= i / nk).collect()
            }
        };
        Ok(Some(keep.into()))
    }
}

/// Queries and keys drawn from the same set (`x = z`) or from two sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    SelfAttention,
    EncoderDecoder,
}

pub const DEFAULT_HEADS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub beta: Beta,
    pub model_dim: usize,
    pub region: Region,
    /// Permits `β = 0000`, where every query averages its support uniformly.
    pub allow_uniform: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize, beta: Beta) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            beta,
            model_dim,
            region: Region::Full,
            allow_uniform: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `β = 0000`: weights are uniform over the support region.
    pub fn uniform(heads: usize, model_dim: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            beta: Beta::NONE,
            model_dim,
            region: Region::Full,
            allow_uniform: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = region;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide model dim {}",
                self.heads, self.model_dim
            )));
        }
        if !self.beta.any() && !self.allow_uniform {
            return Err(Error::Config(
                "β = 0000 needs the uniform-attention mode".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_parse_and_display() {
        let b: Beta = "0011".parse().unwrap();
        assert!(!b.term(1) && !b.term(2) && b.term(3) && b.term(4));
        assert_eq!(b.to_string(), "0011");
        assert!("011".parse::<Beta>().is_err());
        assert!("0a11".parse::<Beta>().is_err());
        let all: Vec<String> = Beta::all().map(|b| b.to_string()).collect();
        assert_eq!(all.len(), 16);
        assert_eq!(all[0], "0000");
        assert_eq!(all[15], "1111");
        assert_eq!(all[6], "0110");
    }

    #[test]
    fn config_rules() {
        assert!(AttentionConfig::new(3, 8, Beta::FULL).is_err());
        assert!(AttentionConfig::new(2, 8, Beta::NONE).is_err());
        assert!(AttentionConfig::uniform(2, 8).is_ok());
        assert_eq!(
            AttentionConfig::new(2, 8, Beta::FULL).unwrap().head_dim(),
            4
        );
    }

    #[test]
    fn window_mask() {
        let l = Layout::seq(5);
        let m = Region::Window { radius: 1 }.mask(l, l).unwrap().unwrap();
        let row2: Vec<bool> = m[10..15].to_vec();
        assert_eq!(row2, vec![false, true, true, true, false]);
        let c = Region::Causal.mask(l, l).unwrap().unwrap();
        assert_eq!(&c[5..10], &[true, true, false, false, false]);
    }
}
