use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam over one flat parameter vector.
///
/// The vector may be partitioned into named blocks; the names only serve
/// error reporting.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    blocks: Vec<(String, usize)>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self::with_blocks(vec![("params".to_string(), len)], config)
    }

    pub fn with_blocks(blocks: Vec<(String, usize)>, config: AdamConfig) -> Self {
        let len = blocks.iter().map(|(_, n)| n).sum();
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            blocks,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    fn block_of(&self, offset: usize) -> (String, usize) {
        let mut start = 0;
        for (name, n) in &self.blocks {
            if offset < start + n {
                return (name.clone(), offset - start);
            }
            start += n;
        }
        ("params".to_string(), offset)
    }

    /// One in-place update of `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} values, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            let (block, offset) = self.block_of(k);
            return Err(Error::NonFiniteGradient { block, offset });
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
