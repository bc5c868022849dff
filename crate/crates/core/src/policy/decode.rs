//! Autoregressive sampling with cached keys and values.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{add_bias, attend, gelu, layer_norm, log_softmax_rows, view, KvSegment};
use super::Policy;
use crate::error::{Error, Result};
use crate::TokenId;

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub stop_token: TokenId,
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Generated tokens, including the stop token when one was emitted.
    pub tokens: Vec<TokenId>,
    /// `log π(token_t | prompt, tokens_<t)` at temperature 1 for every token.
    pub logprobs: Vec<f64>,
    /// Whether generation ended on the stop token rather than `max_len`.
    pub stopped: bool,
}

struct Branch {
    rng: ChaCha8Rng,
    /// Per block, the `[q | k | v]` rows generated so far.
    qkv: Vec<Vec<f64>>,
    rollout: Rollout,
    done: bool,
}

fn choose(logp: ndarray::ArrayView1<'_, f64>, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        let mut best = 0;
        for (i, v) in logp.iter().enumerate() {
            if *v > logp[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logp
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding left a sliver of mass: fall back to the last non-zero weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub(super) fn sample_group(
    policy: &Policy,
    prompt: &[TokenId],
    cfg: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<Rollout>> {
    if cfg.temperature.is_nan() || cfg.temperature < 0.0 {
        return Err(Error::InvalidInput(format!(
            "temperature must be >= 0, got {}",
            cfg.temperature
        )));
    }
    policy.check_tokens(&[cfg.stop_token])?;
    policy.check_length(prompt.len() + cfg.max_len)?;
    let trunk = policy.forward_group(prompt, &[])?;

    let config = &policy.config;
    let layout = &policy.layout;
    let params = &policy.params;
    let d = config.d_model;
    let heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let p_len = prompt.len();

    let mut branches: Vec<Branch> = seeds
        .iter()
        .map(|&s| Branch {
            rng: ChaCha8Rng::seed_from_u64(s),
            qkv: vec![Vec::new(); layout.blocks.len()],
            rollout: Rollout {
                tokens: Vec::new(),
                logprobs: Vec::new(),
                stopped: false,
            },
            done: cfg.max_len == 0,
        })
        .collect();

    let first = trunk.row_log_probs(p_len - 1);
    for b in branches.iter_mut().filter(|b| !b.done) {
        let tok = choose(first, cfg.temperature, &mut b.rng);
        b.rollout.tokens.push(tok as TokenId);
        b.rollout.logprobs.push(first[tok]);
        if tok as TokenId == cfg.stop_token {
            b.rollout.stopped = true;
            b.done = true;
        } else if b.rollout.tokens.len() >= cfg.max_len {
            b.done = true;
        }
    }

    let tok_emb = view(params, layout.tok_emb);
    let pos_emb = view(params, layout.pos_emb);
    let mut probs = vec![0.0; config.context_window];
    loop {
        let active: Vec<usize> = (0..branches.len()).filter(|&i| !branches[i].done).collect();
        if active.is_empty() {
            break;
        }
        let m = active.len();
        let mut x = Array2::zeros((m, d));
        for (row, &i) in active.iter().enumerate() {
            let b = &branches[i].rollout;
            let tok = *b.tokens.last().expect("at least one token") as usize;
            let pos = p_len + b.tokens.len() - 1;
            for k in 0..d {
                x[[row, k]] = tok_emb[[tok, k]] + pos_emb[[pos, k]];
            }
        }
        for (bi, (blk, cache)) in layout.blocks.iter().zip(&trunk.blocks).enumerate() {
            let (h1, _) = layer_norm(
                &x,
                &params[blk.ln1_gain.range()],
                &params[blk.ln1_bias.range()],
            );
            let mut qkv = h1.dot(&view(params, blk.w_qkv));
            add_bias(&mut qkv, &params[blk.b_qkv.range()]);
            let trunk_qkv = cache.qkv.as_slice().expect("standard layout");
            let mut att = Array2::zeros((m, d));
            for (row, &i) in active.iter().enumerate() {
                let own = &mut branches[i].qkv[bi];
                own.extend(qkv.row(row).iter());
                let own_rows = own.len() / (3 * d);
                let segments = [
                    KvSegment {
                        data: trunk_qkv,
                        start: 0,
                        end: p_len,
                    },
                    KvSegment {
                        data: own,
                        start: 0,
                        end: own_rows,
                    },
                ];
                let q = &own[(own_rows - 1) * 3 * d..(own_rows - 1) * 3 * d + 3 * d];
                let vis = p_len + own_rows;
                for h in 0..heads {
                    let mut out = vec![0.0; dh];
                    attend(
                        &q[h * dh..(h + 1) * dh],
                        &segments,
                        3 * d,
                        d + h * dh,
                        2 * d + h * dh,
                        scale,
                        &mut probs[..vis],
                        &mut out,
                    );
                    for (k, v) in out.into_iter().enumerate() {
                        att[[row, h * dh + k]] = v;
                    }
                }
            }
            let mut proj = att.dot(&view(params, blk.w_proj));
            add_bias(&mut proj, &params[blk.b_proj.range()]);
            x += &proj;
            let (h2, _) = layer_norm(
                &x,
                &params[blk.ln2_gain.range()],
                &params[blk.ln2_bias.range()],
            );
            let mut pre = h2.dot(&view(params, blk.w_fc));
            add_bias(&mut pre, &params[blk.b_fc.range()]);
            let act = pre.mapv(gelu);
            let mut mlp = act.dot(&view(params, blk.w_out));
            add_bias(&mut mlp, &params[blk.b_out.range()]);
            x += &mlp;
        }
        let (hf, _) = layer_norm(
            &x,
            &params[layout.lnf_gain.range()],
            &params[layout.lnf_bias.range()],
        );
        let mut logp = hf.dot(&view(params, layout.w_unembed));
        add_bias(&mut logp, &params[layout.b_unembed.range()]);
        log_softmax_rows(&mut logp);

        for (row, &i) in active.iter().enumerate() {
            let b = &mut branches[i];
            let lp = logp.row(row);
            let tok = choose(lp, cfg.temperature, &mut b.rng);
            b.rollout.tokens.push(tok as TokenId);
            b.rollout.logprobs.push(lp[tok]);
            if tok as TokenId == cfg.stop_token {
                b.rollout.stopped = true;
                b.done = true;
            } else if b.rollout.tokens.len() >= cfg.max_len {
                b.done = true;
            }
        }
    }
    Ok(branches.into_iter().map(|b| b.rollout).collect())
}
