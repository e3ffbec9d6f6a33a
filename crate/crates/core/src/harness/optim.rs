use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            steps: 1500,
            batch: 16,
            clip: Some(5.0),
        }
    }
}

/// Heavy-ball gradient descent: `v ← μ v + g`, `p ← p − (lr · scale) v`.
#[derive(Clone, Debug)]
pub struct Momentum {
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
    velocity: Vec<Option<Tensor>>,
}

impl Momentum {
    pub fn new(config: &OptimizerConfig) -> Self {
        Momentum {
            lr: config.lr,
            momentum: config.momentum,
            clip: config.clip,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `grads[i] == None` leaves `params[i]` untouched;
    /// `lr_scales[i]` multiplies the global rate for that tensor.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Option<Tensor>],
        lr_scales: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr_scales.len() {
            return Err(Error::dims(
                "optimizer step",
                &[params.len()],
                &[grads.len(), lr_scales.len()],
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = vec![None; params.len()];
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let shrink = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dims("optimizer step", g.shape(), p.shape()));
            }
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let rate = self.lr * lr_scales[i];
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + shrink * gv;
                *pv -= rate * *vv;
            }
        }
        Ok(())
    }
}
