use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};

/// Mini-batch SGD settings shared by the local training loops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Shuffled partition of `0..n` into batches of at most `batch_size`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_finite(stage: &'static str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage, epoch, loss })
    }
}

/// Update rule used by the supervised training loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

impl Optimizer {
    pub fn state_for(self, net: &Mlp) -> OptimizerState {
        match self {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => {
                let k = net.param_count();
                OptimizerState::Adam {
                    m: vec![0.0; k],
                    v: vec![0.0; k],
                    t: 0,
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptimizerState {
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        match self {
            OptimizerState::Sgd => net.sgd_step(grads, lr),
            OptimizerState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let g = grads.to_flat();
                if g.len() != m.len() {
                    return Err(Error::shape("Adam step", m.len(), g.len()));
                }
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let mut params = net.flat_params();
                for i in 0..g.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                }
                net.set_flat_params(&params)
            }
        }
    }
}

/// Independent child seed for a named stage, so adding or reordering
/// stages never shifts another stage's random stream.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
