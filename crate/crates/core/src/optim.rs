//! AdamW with decoupled weight decay, plus the linear learning-rate decay
//! schedule.
//!
//! ```text
//! m ← β₁m + (1−β₁)g
//! v ← β₂v + (1−β₂)g²
//! m̂ = m / (1−β₁ᵗ),  v̂ = v / (1−β₂ᵗ)
//! θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)
//! ```

use std::collections::BTreeMap;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::model::{BlockId, MultiTaskModel, Update};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name}"), msg))
            }
        };
        field("lr", self.lr >= 0.0 && self.lr.is_finite(), "must be finite and >= 0")?;
        field("beta1", (0.0..1.0).contains(&self.beta1), "must be in [0, 1)")?;
        field("beta2", (0.0..1.0).contains(&self.beta2), "must be in [0, 1)")?;
        field("eps", self.eps > 0.0 && self.eps.is_finite(), "must be > 0")?;
        field(
            "weight_decay",
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "must be finite and >= 0",
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    m: BTreeMap<BlockId, Matrix>,
    v: BTreeMap<BlockId, Matrix>,
    step: u64,
}

impl AdamWState {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: BlockId) -> Option<&Matrix> {
        self.m.get(&id)
    }

    pub fn second_moment(&self, id: BlockId) -> Option<&Matrix> {
        self.v.get(&id)
    }

    /// One AdamW update of every block named in `update`, at rate `lr`.
    /// Blocks absent from `update` are left alone. Nothing is modified if
    /// any input is invalid.
    pub fn apply(&mut self, model: &mut MultiTaskModel, update: &Update, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (id, g) in &update.blocks {
            let p = model
                .param(*id)
                .ok_or_else(|| Error::param(format!("model has no block {id}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient block {id}")));
            }
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in &update.blocks {
            let (rows, cols) = g.shape();
            let m = self.m.entry(*id).or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v.entry(*id).or_insert_with(|| Matrix::zeros(rows, cols));
            let theta = model.param_mut(*id).unwrap();
            let entries = theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &g) in entries {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamWState::apply`].
pub fn adamw_step(model: &mut MultiTaskModel, update: &Update, state: &mut AdamWState, lr: f64) -> Result<()> {
    state.apply(model, update, lr)
}

/// `lr_base · (1 − step/total_steps)`.
pub fn linear_decay_lr(step: usize, total_steps: usize, lr_base: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::param("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::param(format!("step {step} past the end of a {total_steps}-step schedule")));
    }
    Ok(lr_base * (1.0 - step as f64 / total_steps as f64))
}
