//! Per-replica optimizer updates.
//!
//! SGD folds L2 weight decay into the gradient before the momentum buffer;
//! AdamW applies decoupled decay after the preconditioned step. Both are plain
//! (non-Nesterov) and operate in place on flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::check_shape;
use crate::{Error, Result};

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        }
    }

    /// AdamW with the usual betas and epsilon.
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }
}

/// Optimizer configuration: update rule plus optional gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// Clip the gradient to this L2 norm before the update.
    pub clip: Option<f64>,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerSpec { kind, clip: None }
    }

    pub fn with_clip(mut self, threshold: f64) -> Self {
        self.clip = Some(threshold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(
                    name,
                    format!("must be finite and nonnegative, got {v}"),
                ))
            }
        };
        let unit = |name, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(name, format!("must lie in [0, 1), got {v}")))
            }
        };
        match self.kind {
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                unit("momentum", momentum)?;
                nonneg("weight_decay", weight_decay)?;
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                nonneg("weight_decay", weight_decay)?;
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(Error::param("eps", format!("must be positive, got {eps}")));
                }
            }
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::param("clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Buffers {
    Sgd { velocity: Vec<f64> },
    AdamW { m: Vec<f64>, v: Vec<f64> },
}

/// Optimizer state owned by one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    buffers: Buffers,
    step: u64,
}

impl OptimizerState {
    /// Fresh state with zeroed buffers for `dim` parameters.
    pub fn new(spec: OptimizerSpec, dim: usize) -> Result<Self> {
        spec.validate()?;
        let buffers = match spec.kind {
            OptimizerKind::Sgd { .. } => Buffers::Sgd {
                velocity: vec![0.0; dim],
            },
            OptimizerKind::AdamW { .. } => Buffers::AdamW {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
            },
        };
        Ok(OptimizerState {
            spec,
            buffers,
            step: 0,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        match &self.buffers {
            Buffers::Sgd { velocity } => velocity.len(),
            Buffers::AdamW { m, .. } => m.len(),
        }
    }

    /// Zeroes all buffers and the step counter.
    pub fn reset(&mut self) {
        match &mut self.buffers {
            Buffers::Sgd { velocity } => velocity.fill(0.0),
            Buffers::AdamW { m, v } => {
                m.fill(0.0);
                v.fill(0.0);
            }
        }
        self.step = 0;
    }

    /// The buffers as a list of slices (velocity, or first and second moments).
    pub fn buffers(&self) -> Vec<&[f64]> {
        match &self.buffers {
            Buffers::Sgd { velocity } => vec![velocity],
            Buffers::AdamW { m, v } => vec![m, v],
        }
    }

    /// Mutable access to the same buffers as [`Self::buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.buffers {
            Buffers::Sgd { velocity } => vec![velocity],
            Buffers::AdamW { m, v } => vec![m, v],
        }
    }

    /// Clips `grad` in place if configured, then applies one update to
    /// `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], lr: f64, grad: &mut [f64]) -> Result<()> {
        clip_gradient(grad, self.spec.clip);
        match self.spec.kind {
            OptimizerKind::Sgd { .. } => self.sgd_step(params, lr, grad),
            OptimizerKind::AdamW { .. } => self.adamw_step(params, lr, grad),
        }
    }

    fn check_inputs(&self, params: &[f64], lr: f64, grad: &[f64]) -> Result<()> {
        check_shape("params", self.dim(), params.len())?;
        check_shape("grad", self.dim(), grad.len())?;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::param(
                "lr",
                format!("must be finite and nonnegative, got {lr}"),
            ));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                step: self.step,
            });
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameters",
                step: self.step,
            });
        }
        Ok(())
    }

    /// Heavy-ball SGD with coupled weight decay: `v = mu v + g + wd p`,
    /// `p -= lr v`. No clipping is applied here.
    pub fn sgd_step(&mut self, params: &mut [f64], lr: f64, grad: &[f64]) -> Result<()> {
        self.check_inputs(params, lr, grad)?;
        let (
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            },
            Buffers::Sgd { velocity },
        ) = (self.spec.kind, &mut self.buffers)
        else {
            return Err(Error::param("kind", "state was not created for SGD"));
        };
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + (g + weight_decay * *p);
            *p -= lr * *v;
        }
        self.step += 1;
        Ok(())
    }

    /// Bias-corrected Adam step with decoupled weight decay. No clipping is
    /// applied here.
    pub fn adamw_step(&mut self, params: &mut [f64], lr: f64, grad: &[f64]) -> Result<()> {
        self.check_inputs(params, lr, grad)?;
        let (
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            },
            Buffers::AdamW { m, v },
        ) = (self.spec.kind, &mut self.buffers)
        else {
            return Err(Error::param("kind", "state was not created for AdamW"));
        };
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, m), v), g) in params
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(grad)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
        Ok(())
    }
}

/// Rescales `grad` in place to L2 norm `threshold` if it is longer than that.
/// Returns the norm before clipping.
pub fn clip_gradient(grad: &mut [f64], threshold: Option<f64>) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(tau) = threshold {
        if norm > tau {
            let scale = tau / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
