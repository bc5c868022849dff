use serde::{Deserialize, Serialize};

use super::{FreezeSet, ParamGroup, Policy};
use crate::error::{Error, Result};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain gradient descent; updates are exactly `-lr * grad`.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Descent optimizer over a policy's flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam { .. } => (vec![0.0; num_params], vec![0.0; num_params]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            m,
            v,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One descent step along `grad`. Parameters of frozen groups, and the
    /// optimizer state attached to them, are left untouched.
    pub fn step(
        &mut self,
        policy: &mut Policy,
        grad: &[f64],
        freeze: &FreezeSet,
        learning_rate: f64,
    ) -> Result<()> {
        if grad.len() != policy.num_params() {
            return Err(Error::InvalidInput(format!(
                "gradient has {} entries, policy has {} parameters",
                grad.len(),
                policy.num_params()
            )));
        }
        let bad: Vec<usize> = grad
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_finite())
            .map(|(i, _)| i)
            .collect();
        if let Some(&first) = bad.first() {
            let group = ParamGroup::ALL
                .into_iter()
                .find(|g| policy.group_range(*g).contains(&first))
                .map(|g| g.name())
                .unwrap_or("?");
            return Err(Error::NonFiniteGradient {
                step: self.steps,
                detail: format!(
                    "{} non-finite entries, first at parameter {first} ({group} group, value {})",
                    bad.len(),
                    grad[first]
                ),
            });
        }

        self.steps += 1;
        let ranges: Vec<_> = ParamGroup::ALL
            .into_iter()
            .filter(|g| !freeze.contains(g))
            .map(|g| policy.group_range(g))
            .collect();
        let params = policy.params_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for range in ranges {
                    for i in range {
                        params[i] -= learning_rate * grad[i];
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for range in ranges {
                    for i in range {
                        let g = grad[i];
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = self.m[i] / c1;
                        let v_hat = self.v[i] / c2;
                        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `Σ weight_{i,t} ∇θ log π(o_{i,t})` for one group of responses
/// and take one optimizer step along it.
pub fn apply_gradient(
    policy: &mut Policy,
    optimizer: &mut Optimizer,
    prompt: &[TokenId],
    responses: &[&[TokenId]],
    token_weights: &[Vec<f64>],
    freeze: &FreezeSet,
    learning_rate: f64,
) -> Result<()> {
    let mut grad = vec![0.0; policy.num_params()];
    policy.accumulate_gradient(prompt, responses, token_weights, freeze, &mut grad)?;
    optimizer.step(policy, &grad, freeze, learning_rate)
}
