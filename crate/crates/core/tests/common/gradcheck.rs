//! Finite-difference check of the GRPO-loss gradient on a small policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlzero::grpo::{compute_advantages, grpo_loss, GroupBatch, GrpoHyper, TokenLogProbs};
use rlzero::policy::{init_policy, FreezeSet, Policy, PolicyConfig};
use rlzero::TokenId;

pub const H: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn small_policy(seed: u64) -> Policy {
    init_policy(PolicyConfig {
        vocab_size: 7,
        context_window: 12,
        d_model: 6,
        n_layers: 2,
        n_heads: 2,
        ffn_mult: 2,
        seed,
    })
    .unwrap()
}

pub fn perturbed(p: &Policy, rng: &mut ChaCha8Rng, scale: f64) -> Policy {
    let params = p
        .params()
        .iter()
        .map(|x| x + scale * (rng.random::<f64>() - 0.5))
        .collect();
    Policy::from_parts(p.config().clone(), params).unwrap()
}

pub struct Instance {
    prompt: Vec<TokenId>,
    responses: Vec<Vec<TokenId>>,
    old: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    hyper: GrpoHyper,
}

impl Instance {
    pub fn random(p: &Policy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = p.config().vocab_size as TokenId;
        let prompt: Vec<TokenId> = (0..rng.random_range(1..=4))
            .map(|_| rng.random_range(0..vocab))
            .collect();
        let g = rng.random_range(2..=5);
        let responses: Vec<Vec<TokenId>> = (0..g)
            .map(|_| {
                (0..rng.random_range(1..=6))
                    .map(|_| rng.random_range(0..vocab))
                    .collect()
            })
            .collect();
        let refs: Vec<&[TokenId]> = responses.iter().map(|r| r.as_slice()).collect();
        let old = perturbed(p, &mut rng, 0.2)
            .group_log_probs(&prompt, &refs)
            .unwrap();
        let reference = perturbed(p, &mut rng, 0.4)
            .group_log_probs(&prompt, &refs)
            .unwrap();
        let rewards = (0..g)
            .map(|_| rng.random_range(0..3) as f64 + rng.random::<f64>())
            .collect();
        let hyper = GrpoHyper {
            kl_beta: rng.random_range(0.0..0.5),
            ..GrpoHyper::default()
        };
        Self {
            prompt,
            responses,
            old,
            reference,
            rewards,
            hyper,
        }
    }

    fn refs(&self) -> Vec<&[TokenId]> {
        self.responses.iter().map(|r| r.as_slice()).collect()
    }

    fn batch(&self, p: &Policy) -> GroupBatch {
        let current = p.group_log_probs(&self.prompt, &self.refs()).unwrap();
        let rollouts = current
            .into_iter()
            .zip(&self.old)
            .zip(&self.reference)
            .map(|((c, o), r)| TokenLogProbs::new(c, o.clone(), r.clone()).unwrap())
            .collect();
        GroupBatch {
            rollouts,
            advantages: compute_advantages(&self.rewards).unwrap(),
        }
    }

    pub fn loss(&self, p: &Policy) -> f64 {
        grpo_loss(&self.batch(p), &self.hyper).unwrap().loss
    }

    pub fn analytic_gradient(&self, p: &Policy) -> Vec<f64> {
        let weights = grpo_loss(&self.batch(p), &self.hyper)
            .unwrap()
            .token_weights;
        let mut grad = vec![0.0; p.num_params()];
        p.accumulate_gradient(
            &self.prompt,
            &self.refs(),
            &weights,
            &FreezeSet::new(),
            &mut grad,
        )
        .unwrap();
        grad
    }
}

pub fn numeric_gradient(inst: &Instance, p: &Policy) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.num_params())
        .map(|i| {
            let x = p.params()[i];
            q.params_mut()[i] = x + H;
            let up = inst.loss(&q);
            q.params_mut()[i] = x - H;
            let down = inst.loss(&q);
            q.params_mut()[i] = x;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of the analytic against the numeric gradient for one
/// random instance: `|a - n| / max(|a|, |n|)`.
pub fn relative_error(seed: u64) -> (usize, f64) {
    let p = small_policy(seed);
    let inst = Instance::random(&p, 1000 + seed);
    let analytic = inst.analytic_gradient(&p);
    let numeric = numeric_gradient(&inst, &p);
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    assert!(scale > 1e-6, "instance {seed}: vanishing gradient");
    (p.num_params(), norm(&diff) / scale)
}
