//! The analytic GRPO-loss gradient against central finite differences, the
//! on-policy weight expansion, and gradient accumulation.

mod common;

use common::gradcheck::{relative_error, small_policy, INSTANCES, MAX_REL_ERR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlzero::grpo::{compute_advantages, grpo_loss, GroupBatch, GrpoHyper, TokenLogProbs};
use rlzero::policy::{FreezeSet, Optimizer, OptimizerKind};
use rlzero::TokenId;

#[test]
fn grpo_gradient_matches_central_differences() {
    for seed in 0..INSTANCES {
        let (params, rel) = relative_error(seed);
        assert!(params <= 1000, "{params} parameters");
        assert!(rel < MAX_REL_ERR, "instance {seed}: relative error {rel:e}");
    }
}

#[test]
fn on_policy_weights_are_advantage_over_group_and_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let g = rng.random_range(2..=8);
        let lens: Vec<usize> = (0..g).map(|_| rng.random_range(1..=12)).collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..3.0)).collect();
        let rollouts = lens
            .iter()
            .map(|&n| {
                let cur: Vec<f64> = (0..n).map(|_| -rng.random_range(0.01..4.0)).collect();
                let reference = (0..n).map(|_| -rng.random_range(0.01..4.0)).collect();
                TokenLogProbs::new(cur.clone(), cur, reference).unwrap()
            })
            .collect();
        let advantages = compute_advantages(&rewards).unwrap();
        let adv = advantages.advantages.clone();
        let hyper = GrpoHyper {
            kl_beta: 0.0,
            ..GrpoHyper::default()
        };
        let out = grpo_loss(
            &GroupBatch {
                rollouts,
                advantages,
            },
            &hyper,
        )
        .unwrap();
        for (i, w) in out.token_weights.iter().enumerate() {
            let expect = adv[i] / (g as f64 * lens[i] as f64);
            for x in w {
                assert!((x - expect).abs() < 1e-12, "{x} vs {expect}");
            }
        }
        // With ratio 1 each rollout contributes its advantage once, and
        // standardized advantages sum to zero.
        assert!(out.loss.abs() < 1e-12);
    }
}

/// Prompt, responses and per-token weights.
type Group = (Vec<TokenId>, Vec<Vec<TokenId>>, Vec<Vec<f64>>);

#[test]
fn accumulated_groups_equal_the_averaged_step_under_sgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = small_policy(11);
    let groups: Vec<Group> = (0..3)
        .map(|_| {
            let prompt = vec![rng.random_range(0..7), rng.random_range(0..7)];
            let responses: Vec<Vec<TokenId>> = (0..4)
                .map(|_| {
                    (0..rng.random_range(1..5))
                        .map(|_| rng.random_range(0..7))
                        .collect()
                })
                .collect();
            let weights = responses
                .iter()
                .map(|r| r.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            (prompt, responses, weights)
        })
        .collect();
    let k = groups.len() as f64;
    let lr = 0.05;
    let free = FreezeSet::new();

    let mut accumulated = p.clone();
    let mut grad = vec![0.0; p.num_params()];
    for (prompt, responses, weights) in &groups {
        let refs: Vec<&[TokenId]> = responses.iter().map(|r| r.as_slice()).collect();
        let scaled: Vec<Vec<f64>> = weights
            .iter()
            .map(|w| w.iter().map(|x| x / k).collect())
            .collect();
        accumulated
            .accumulate_gradient(prompt, &refs, &scaled, &free, &mut grad)
            .unwrap();
    }
    Optimizer::new(OptimizerKind::Sgd, p.num_params())
        .step(&mut accumulated, &grad, &free, lr)
        .unwrap();

    let mut mean = vec![0.0; p.num_params()];
    for (prompt, responses, weights) in &groups {
        let refs: Vec<&[TokenId]> = responses.iter().map(|r| r.as_slice()).collect();
        let mut g = vec![0.0; p.num_params()];
        p.accumulate_gradient(prompt, &refs, weights, &free, &mut g)
            .unwrap();
        for (m, x) in mean.iter_mut().zip(&g) {
            *m += x / k;
        }
    }
    for ((a, x), m) in accumulated.params().iter().zip(p.params()).zip(&mean) {
        assert!((a - (x - lr * m)).abs() < 1e-12);
    }
}
