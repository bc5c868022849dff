//! The GRPO objective against a tabular policy evaluated directly in
//! probability space, plus the hand-worked values of the math core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlzero::grpo::{
    compute_advantages, grpo_loss, kl_penalty, per_token_surrogate, GroupBatch, GrpoHyper,
    TokenLogProbs,
};

const TOL: f64 = 1e-12;

/// Every response of length 1..=3 over a two-token vocabulary.
fn responses() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for len in 1..=3 {
        for bits in 0..(1usize << len) {
            out.push((0..len).map(|i| (bits >> i) & 1).collect());
        }
    }
    out
}

/// Next-token probabilities indexed by the prefix, one row per distinct
/// prefix of length 0..=2.
struct Table(Vec<[f64; 2]>);

impl Table {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Table(
            (0..7)
                .map(|_| {
                    let p = rng.random_range(0.05..0.95);
                    [p, 1.0 - p]
                })
                .collect(),
        )
    }

    fn prob(&self, prefix: &[usize], token: usize) -> f64 {
        let row = (1usize << prefix.len()) - 1
            + prefix
                .iter()
                .enumerate()
                .map(|(i, b)| b << i)
                .sum::<usize>();
        self.0[row][token]
    }

    fn token_probs(&self, response: &[usize]) -> Vec<f64> {
        (0..response.len())
            .map(|t| self.prob(&response[..t], response[t]))
            .collect()
    }

    fn token_logprobs(&self, response: &[usize]) -> Vec<f64> {
        self.token_probs(response).iter().map(|p| p.ln()).collect()
    }
}

/// `(1/G) Σ_i (1/|o_i|) Σ_t [min(ρ Â, clip(ρ) Â) − β (π_ref/π − ln(π_ref/π) − 1)]`
/// with ratios formed from probabilities, not log differences.
fn objective(
    group: &[&Vec<usize>],
    rewards: &[f64],
    cur: &Table,
    old: &Table,
    reference: &Table,
    eps: f64,
    beta: f64,
) -> f64 {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g).sqrt();
    let mut total = 0.0;
    for (o, r) in group.iter().zip(rewards) {
        let adv = if std < 1e-8 { 0.0 } else { (r - mean) / std };
        let (pc, po, pr) = (
            cur.token_probs(o),
            old.token_probs(o),
            reference.token_probs(o),
        );
        let mut seq = 0.0;
        for t in 0..o.len() {
            let rho = pc[t] / po[t];
            let clipped = rho.max(1.0 - eps).min(1.0 + eps);
            let q = pr[t] / pc[t];
            seq += (rho * adv).min(clipped * adv) - beta * (q - q.ln() - 1.0);
        }
        total += seq / o.len() as f64;
    }
    total / g
}

fn batch(
    group: &[&Vec<usize>],
    rewards: &[f64],
    cur: &Table,
    old: &Table,
    reference: &Table,
) -> GroupBatch {
    GroupBatch {
        rollouts: group
            .iter()
            .map(|o| {
                TokenLogProbs::new(
                    cur.token_logprobs(o),
                    old.token_logprobs(o),
                    reference.token_logprobs(o),
                )
                .unwrap()
            })
            .collect(),
        advantages: compute_advantages(rewards).unwrap(),
    }
}

#[test]
fn loss_matches_exhaustive_tabular_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let all = responses();
    let (cur, old, reference) = (
        Table::random(&mut rng),
        Table::random(&mut rng),
        Table::random(&mut rng),
    );
    let hyper = GrpoHyper {
        clip_epsilon: 0.2,
        kl_beta: 0.04,
        group_size: 4,
        inner_epochs: 1,
    };
    let n = all.len();
    let mut checked = 0;
    for code in 0..n.pow(4) {
        let group: Vec<&Vec<usize>> = (0..4).map(|i| &all[(code / n.pow(i)) % n]).collect();
        let rewards: Vec<f64> = (0..4)
            .map(|_| f64::from(rng.random_range(0..3u8)))
            .collect();
        let expect = objective(
            &group,
            &rewards,
            &cur,
            &old,
            &reference,
            hyper.clip_epsilon,
            hyper.kl_beta,
        );
        let got = grpo_loss(&batch(&group, &rewards, &cur, &old, &reference), &hyper).unwrap();
        assert!(
            (got.loss + expect).abs() < TOL,
            "group {code}: {} vs {}",
            got.loss,
            -expect
        );
        checked += 1;
    }
    assert_eq!(checked, 14usize.pow(4));
}

#[test]
fn token_weights_are_the_objective_derivative_in_logprob() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    let hyper = GrpoHyper::default();
    for _ in 0..500 {
        let g = rng.random_range(2..6);
        let rollouts: Vec<TokenLogProbs> = (0..g)
            .map(|_| {
                let n = rng.random_range(1..5);
                let mut draw = || {
                    (0..n)
                        .map(|_| -rng.random_range(0.05..3.0))
                        .collect::<Vec<f64>>()
                };
                TokenLogProbs::new(draw(), draw(), draw()).unwrap()
            })
            .collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-1.0..2.0)).collect();
        let b = GroupBatch {
            rollouts: rollouts.clone(),
            advantages: compute_advantages(&rewards).unwrap(),
        };
        let out = grpo_loss(&b, &hyper).unwrap();
        for i in 0..g {
            for t in 0..rollouts[i].len() {
                // Skip tokens sitting on a clip boundary, where the
                // objective has a kink.
                let rho = (rollouts[i].current()[t] - rollouts[i].old()[t]).exp();
                if ((rho - 1.0).abs() - hyper.clip_epsilon).abs() < 1e-4 {
                    continue;
                }
                let shifted = |d: f64| {
                    let mut cur = rollouts[i].current().to_vec();
                    cur[t] += d;
                    let mut rs = rollouts.clone();
                    rs[i] = rs[i].with_current(cur).unwrap();
                    let b = GroupBatch {
                        rollouts: rs,
                        advantages: compute_advantages(&rewards).unwrap(),
                    };
                    -grpo_loss(&b, &hyper).unwrap().loss
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let w = out.token_weights[i][t];
                assert!(
                    (w - numeric).abs() < 1e-7 * (1.0 + w.abs()),
                    "{w} vs {numeric}"
                );
            }
        }
    }
}

#[test]
fn hand_worked_advantages() {
    let a = compute_advantages(&[2.0, 0.0]).unwrap();
    assert_eq!(a.advantages, vec![1.0, -1.0]);
    let a = compute_advantages(&[1.0; 4]).unwrap();
    assert_eq!(a.advantages, vec![0.0; 4]);
    let a = compute_advantages(&[2.0, 1.0, 1.0, 0.0]).unwrap();
    let r2 = 2f64.sqrt();
    for (x, e) in a.advantages.iter().zip([r2, 0.0, 0.0, -r2]) {
        assert!((x - e).abs() < TOL);
    }
}

#[test]
fn hand_worked_surrogate_and_kl() {
    let hyper = GrpoHyper::default();
    let lp = |d: f64| TokenLogProbs::new(vec![-1.0 + d; 3], vec![-1.0; 3], vec![-1.0; 3]).unwrap();
    for x in per_token_surrogate(&lp(1.5f64.ln()), 1.0, &hyper).unwrap() {
        assert!((x - 1.2).abs() < TOL);
    }
    for x in per_token_surrogate(&lp(0.5f64.ln()), -1.0, &hyper).unwrap() {
        assert!((x + 0.8).abs() < TOL);
    }
    let kl = |d: f64| {
        kl_penalty(&TokenLogProbs::on_policy(vec![-1.0 + d], vec![-1.0]).unwrap()).unwrap()[0]
    };
    assert!((kl(2f64.ln()) - (0.5 - 0.5f64.ln() - 1.0)).abs() < TOL);
    assert!((kl(-(2f64.ln())) - (2.0 - 2f64.ln() - 1.0)).abs() < TOL);
    assert!((kl(2f64.ln()) - 0.19315).abs() < 1e-5);
    assert!((kl(-(2f64.ln())) - 0.30685).abs() < 1e-5);
}

#[test]
fn advantages_ignore_affine_reward_changes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let r: Vec<f64> = (0..rng.random_range(2..10))
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let (scale, shift) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let (a, b) = (
            compute_advantages(&r).unwrap(),
            compute_advantages(&moved).unwrap(),
        );
        for (x, y) in a.advantages.iter().zip(&b.advantages) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn clipped_tokens_carry_no_policy_gradient() {
    let hyper = GrpoHyper {
        kl_beta: 0.0,
        ..GrpoHyper::default()
    };
    let old = vec![-1.0; 2];
    // Positive advantage above 1+ε and negative advantage below 1-ε are
    // both past the clip, so neither token moves the objective.
    let b = GroupBatch {
        rollouts: vec![
            TokenLogProbs::new(vec![-1.0 + 1.3f64.ln(); 2], old.clone(), old.clone()).unwrap(),
            TokenLogProbs::new(vec![-1.0 + 0.7f64.ln(); 2], old.clone(), old.clone()).unwrap(),
        ],
        advantages: compute_advantages(&[1.0, 0.0]).unwrap(),
    };
    let out = grpo_loss(&b, &hyper).unwrap();
    assert!(out.token_weights.iter().flatten().all(|w| *w == 0.0));
    assert_eq!(out.clip_fraction, 1.0);
    // Inside the band the same tokens are active.
    let b = GroupBatch {
        rollouts: vec![
            TokenLogProbs::new(vec![-1.0 + 0.7f64.ln(); 2], old.clone(), old.clone()).unwrap(),
            TokenLogProbs::new(vec![-1.0 + 1.3f64.ln(); 2], old.clone(), old).unwrap(),
        ],
        advantages: compute_advantages(&[1.0, 0.0]).unwrap(),
    };
    let out = grpo_loss(&b, &hyper).unwrap();
    assert!(out.token_weights.iter().flatten().all(|w| *w != 0.0));
    assert_eq!(out.clip_fraction, 0.0);
}
