//! Adam optimizer and the serializable RNG state shared by the training loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("invalid Adam coefficients {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub first: ModelParams,
    pub second: ModelParams,
    pub updates: u64,
}

impl Adam {
    pub fn new(like: &ModelParams) -> Self {
        Self {
            first: like.zeros_like(),
            second: like.zeros_like(),
            updates: 0,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &AdamConfig) {
        self.updates += 1;
        let k = self.updates as i32;
        let c1 = 1.0 - cfg.beta1.powi(k);
        let c2 = 1.0 - cfg.beta2.powi(k);
        let arrays = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in arrays {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Exact position of a ChaCha8 stream, enough to resume it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
