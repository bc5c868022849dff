//! Batched forward pass over a prompt tree and its exact backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::layout::Tensor;
use super::{FreezeSet, ParamGroup, Policy};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row structure of a prompt tree: `trunk_len` prompt rows followed by the
/// rows of each branch. A trunk row sees the trunk up to itself; a branch row
/// sees the whole trunk plus its own branch up to itself.
#[derive(Debug, Clone)]
pub(crate) struct TreeShape {
    pub trunk_len: usize,
    pub branch_starts: Vec<usize>,
    pub branch_lens: Vec<usize>,
    pub positions: Vec<usize>,
    /// Visible trunk rows are `0..trunk_end[r]`.
    pub trunk_end: Vec<usize>,
    /// Visible own-branch rows are `own_start[r]..=r`.
    pub own_start: Vec<usize>,
}

impl TreeShape {
    pub fn new(trunk_len: usize, branch_lens: impl IntoIterator<Item = usize>) -> Self {
        let branch_lens: Vec<usize> = branch_lens.into_iter().collect();
        let mut positions: Vec<usize> = (0..trunk_len).collect();
        let mut trunk_end: Vec<usize> = (1..=trunk_len).collect();
        let mut own_start: Vec<usize> = (1..=trunk_len).collect();
        let mut branch_starts = Vec::with_capacity(branch_lens.len());
        let mut row = trunk_len;
        for &len in &branch_lens {
            branch_starts.push(row);
            for j in 0..len {
                positions.push(trunk_len + j);
                trunk_end.push(trunk_len);
                own_start.push(row);
            }
            row += len;
        }
        Self {
            trunk_len,
            branch_starts,
            branch_lens,
            positions,
            trunk_end,
            own_start,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    fn visible(&self, r: usize) -> usize {
        self.trunk_end[r] + (r + 1 - self.own_start[r])
    }

    /// Row whose output predicts token `j` of branch `b`.
    pub fn predictor_row(&self, b: usize, j: usize) -> usize {
        if j == 0 {
            self.trunk_len - 1
        } else {
            self.branch_starts[b] + j - 1
        }
    }
}

pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct BlockCache {
    ln1: NormCache,
    h1: Array2<f64>,
    pub qkv: Array2<f64>,
    probs: Vec<f64>,
    att: Array2<f64>,
    ln2: NormCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct Forward {
    pub shape: TreeShape,
    tokens: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    lnf: NormCache,
    hf: Array2<f64>,
    /// Row-wise log-softmax of the logits.
    pub logp: Array2<f64>,
    /// Offsets of each row's attention probabilities (per head).
    prob_offsets: Vec<usize>,
    prob_total: usize,
}

pub(crate) fn view<'a>(params: &'a [f64], t: Tensor) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((t.rows, t.cols), &params[t.range()]).expect("tensor shape")
}

pub(crate) fn view_mut<'a>(params: &'a mut [f64], t: Tensor) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((t.rows, t.cols), &mut params[t.range()]).expect("tensor shape")
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> (Array2<f64>, NormCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    let mut rstd = Vec::with_capacity(n);
    for ((xr, mut hr), mut yr) in x
        .outer_iter()
        .zip(xhat.outer_iter_mut())
        .zip(y.outer_iter_mut())
    {
        let mean = xr.sum() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for k in 0..d {
            let h = (xr[k] - mean) * rs;
            hr[k] = h;
            yr[k] = h * gain[k] + bias[k];
        }
        rstd.push(rs);
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        let hr = cache.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            dgain[k] += dyr[k] * hr[k];
            dbias[k] += dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * hr[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        let mut dxr = dx.row_mut(r);
        for k in 0..d {
            dxr[k] = rs * (dxhat[k] - mean_dxhat - hr[k] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn add_bias(m: &mut Array2<f64>, bias: &[f64]) {
    for mut row in m.outer_iter_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_col_sums(dy: &Array2<f64>, out: &mut [f64]) {
    for row in dy.outer_iter() {
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
}

pub(crate) fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// A contiguous run of rows of a `[q | k | v]` matrix with row stride `3d`.
pub(crate) struct KvSegment<'a> {
    pub data: &'a [f64],
    pub start: usize,
    pub end: usize,
}

/// Softmax attention of one query over the given key/value segments.
/// Writes the probabilities to `probs` and the weighted values to `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f64],
    segments: &[KvSegment<'_>],
    stride: usize,
    k_off: usize,
    v_off: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let dh = q.len();
    let mut idx = 0;
    let mut max = f64::NEG_INFINITY;
    for seg in segments {
        for r in seg.start..seg.end {
            let k = &seg.data[r * stride + k_off..r * stride + k_off + dh];
            let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            probs[idx] = s;
            max = max.max(s);
            idx += 1;
        }
    }
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    out.fill(0.0);
    idx = 0;
    for seg in segments {
        for r in seg.start..seg.end {
            let p = probs[idx] / sum;
            probs[idx] = p;
            let v = &seg.data[r * stride + v_off..r * stride + v_off + dh];
            for (o, vv) in out.iter_mut().zip(v) {
                *o += p * vv;
            }
            idx += 1;
        }
    }
}

pub(crate) fn forward(policy: &Policy, shape: TreeShape, tokens: Vec<usize>) -> Forward {
    let cfg = &policy.config;
    let layout = &policy.layout;
    let params = &policy.params;
    let n = shape.rows();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = view(params, layout.tok_emb);
    let pos = view(params, layout.pos_emb);
    let mut x = Array2::zeros((n, d));
    for (r, mut row) in x.outer_iter_mut().enumerate() {
        let t = tok.row(tokens[r]);
        let p = pos.row(shape.positions[r]);
        for k in 0..d {
            row[k] = t[k] + p[k];
        }
    }

    let mut prob_offsets = Vec::with_capacity(n);
    let mut prob_total = 0;
    for r in 0..n {
        prob_offsets.push(prob_total);
        prob_total += shape.visible(r);
    }

    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for b in &layout.blocks {
        let (h1, ln1) = layer_norm(&x, &params[b.ln1_gain.range()], &params[b.ln1_bias.range()]);
        let mut qkv = h1.dot(&view(params, b.w_qkv));
        add_bias(&mut qkv, &params[b.b_qkv.range()]);

        let mut probs = vec![0.0; prob_total * heads];
        let mut att = Array2::zeros((n, d));
        {
            let qkv_data = qkv.as_slice().expect("standard layout");
            let att_data = att.as_slice_mut().expect("standard layout");
            for r in 0..n {
                let segments = [
                    KvSegment {
                        data: qkv_data,
                        start: 0,
                        end: shape.trunk_end[r],
                    },
                    KvSegment {
                        data: qkv_data,
                        start: shape.own_start[r],
                        end: r + 1,
                    },
                ];
                let vis = shape.visible(r);
                for h in 0..heads {
                    let q = &qkv_data[r * 3 * d + h * dh..r * 3 * d + (h + 1) * dh];
                    let off = h * prob_total + prob_offsets[r];
                    attend(
                        q,
                        &segments,
                        3 * d,
                        d + h * dh,
                        2 * d + h * dh,
                        scale,
                        &mut probs[off..off + vis],
                        &mut att_data[r * d + h * dh..r * d + (h + 1) * dh],
                    );
                }
            }
        }
        let mut proj = att.dot(&view(params, b.w_proj));
        add_bias(&mut proj, &params[b.b_proj.range()]);
        x += &proj;

        let (h2, ln2) = layer_norm(&x, &params[b.ln2_gain.range()], &params[b.ln2_bias.range()]);
        let mut pre = h2.dot(&view(params, b.w_fc));
        add_bias(&mut pre, &params[b.b_fc.range()]);
        let act = pre.mapv(gelu);
        let mut mlp = act.dot(&view(params, b.w_out));
        add_bias(&mut mlp, &params[b.b_out.range()]);
        x += &mlp;

        blocks.push(BlockCache {
            ln1,
            h1,
            qkv,
            probs,
            att,
            ln2,
            h2,
            pre,
            act,
        });
    }

    let (hf, lnf) = layer_norm(
        &x,
        &params[layout.lnf_gain.range()],
        &params[layout.lnf_bias.range()],
    );
    let mut logp = hf.dot(&view(params, layout.w_unembed));
    add_bias(&mut logp, &params[layout.b_unembed.range()]);
    log_softmax_rows(&mut logp);

    Forward {
        shape,
        tokens,
        blocks,
        lnf,
        hf,
        logp,
        prob_offsets,
        prob_total,
    }
}

impl Forward {
    pub fn row_log_probs(&self, row: usize) -> ndarray::ArrayView1<'_, f64> {
        self.logp.row(row)
    }

    pub fn response_log_probs(&self) -> Vec<Vec<f64>> {
        let shape = &self.shape;
        (0..shape.branch_lens.len())
            .map(|b| {
                let start = shape.branch_starts[b];
                (0..shape.branch_lens[b])
                    .map(|j| self.logp[[shape.predictor_row(b, j), self.tokens[start + j]]])
                    .collect()
            })
            .collect()
    }

    /// Accumulate `∇θ(-Σ w · log π)` into `grad`. Frozen groups receive no
    /// gradient; backpropagation stops early when the encoder is frozen.
    pub fn backward(
        &self,
        policy: &Policy,
        weights: &[Vec<f64>],
        freeze: &FreezeSet,
        grad: &mut [f64],
    ) {
        let cfg = &policy.config;
        let layout = &policy.layout;
        let params = &policy.params;
        let shape = &self.shape;
        let n = shape.rows();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let head_frozen = freeze.contains(&ParamGroup::Head);
        let encoder_frozen = freeze.contains(&ParamGroup::Encoder);
        if head_frozen && encoder_frozen {
            return;
        }

        // d(-w·logp_target)/dlogits = -w (onehot - softmax)
        let mut dlogits = Array2::<f64>::zeros((n, v));
        let mut any = false;
        for (b, w) in weights.iter().enumerate() {
            let start = shape.branch_starts[b];
            for (j, &wt) in w.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                any = true;
                let row = shape.predictor_row(b, j);
                let target = self.tokens[start + j];
                let lp = self.logp.row(row);
                let mut dl = dlogits.row_mut(row);
                for k in 0..v {
                    dl[k] += wt * lp[k].exp();
                }
                dl[target] -= wt;
            }
        }
        if !any {
            return;
        }

        let mut local = vec![0.0; grad.len()];
        let g = local.as_mut_slice();

        let dhf = dlogits.dot(&view(params, layout.w_unembed).t());
        general_mat_mul(
            1.0,
            &self.hf.t(),
            &dlogits,
            1.0,
            &mut view_mut(g, layout.w_unembed),
        );
        add_col_sums(&dlogits, &mut g[layout.b_unembed.range()]);
        let mut dx = {
            let (dg, db) = split_pair(g, layout.lnf_gain, layout.lnf_bias);
            layer_norm_backward(&dhf, &self.lnf, &params[layout.lnf_gain.range()], dg, db)
        };
        drop(dhf);

        let stop = if encoder_frozen {
            layout.split_block
        } else {
            0
        };
        for (b, cache) in layout.blocks.iter().zip(&self.blocks).skip(stop).rev() {
            // MLP
            general_mat_mul(1.0, &cache.act.t(), &dx, 1.0, &mut view_mut(g, b.w_out));
            add_col_sums(&dx, &mut g[b.b_out.range()]);
            let mut dpre = dx.dot(&view(params, b.w_out).t());
            ndarray::Zip::from(&mut dpre)
                .and(&cache.pre)
                .for_each(|dp, &p| *dp *= gelu_grad(p));
            general_mat_mul(1.0, &cache.h2.t(), &dpre, 1.0, &mut view_mut(g, b.w_fc));
            add_col_sums(&dpre, &mut g[b.b_fc.range()]);
            let dh2 = dpre.dot(&view(params, b.w_fc).t());
            let dln2 = {
                let (dg, db) = split_pair(g, b.ln2_gain, b.ln2_bias);
                layer_norm_backward(&dh2, &cache.ln2, &params[b.ln2_gain.range()], dg, db)
            };
            dx += &dln2;

            // Attention
            general_mat_mul(1.0, &cache.att.t(), &dx, 1.0, &mut view_mut(g, b.w_proj));
            add_col_sums(&dx, &mut g[b.b_proj.range()]);
            let datt = dx.dot(&view(params, b.w_proj).t());
            let dqkv = self.attention_backward(cache, &datt, d, heads, dh, scale);
            general_mat_mul(1.0, &cache.h1.t(), &dqkv, 1.0, &mut view_mut(g, b.w_qkv));
            add_col_sums(&dqkv, &mut g[b.b_qkv.range()]);
            let dh1 = dqkv.dot(&view(params, b.w_qkv).t());
            let dln1 = {
                let (dg, db) = split_pair(g, b.ln1_gain, b.ln1_bias);
                layer_norm_backward(&dh1, &cache.ln1, &params[b.ln1_gain.range()], dg, db)
            };
            dx += &dln1;
        }

        if stop == 0 {
            for r in 0..n {
                let dr = dx.row(r);
                let t = layout.tok_emb.offset + self.tokens[r] * d;
                let p = layout.pos_emb.offset + shape.positions[r] * d;
                for k in 0..d {
                    g[t + k] += dr[k];
                    g[p + k] += dr[k];
                }
            }
        }

        for group in ParamGroup::ALL {
            if freeze.contains(&group) {
                continue;
            }
            let range = policy.group_range(group);
            for (dst, src) in grad[range.clone()].iter_mut().zip(&local[range]) {
                *dst += src;
            }
        }
    }

    fn attention_backward(
        &self,
        cache: &BlockCache,
        datt: &Array2<f64>,
        d: usize,
        heads: usize,
        dh: usize,
        scale: f64,
    ) -> Array2<f64> {
        let shape = &self.shape;
        let n = shape.rows();
        let stride = 3 * d;
        let qkv = cache.qkv.as_slice().expect("standard layout");
        let datt = datt.as_slice().expect("standard layout");
        let mut dqkv = vec![0.0; n * stride];
        let mut dp = Vec::new();
        let mut keys = Vec::new();
        let mut dq = vec![0.0; dh];
        for r in 0..n {
            keys.clear();
            keys.extend(0..shape.trunk_end[r]);
            keys.extend(shape.own_start[r]..=r);
            for h in 0..heads {
                let off = h * self.prob_total + self.prob_offsets[r];
                let probs = &cache.probs[off..off + keys.len()];
                let dout = &datt[r * d + h * dh..r * d + (h + 1) * dh];
                let q_off = h * dh;
                let k_off = d + h * dh;
                let v_off = 2 * d + h * dh;
                dp.clear();
                let mut weighted = 0.0;
                for (&key, &p) in keys.iter().zip(probs) {
                    let vrow = &qkv[key * stride + v_off..key * stride + v_off + dh];
                    let g = dout.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                    dp.push(g);
                    weighted += p * g;
                    let dv = &mut dqkv[key * stride + v_off..key * stride + v_off + dh];
                    for (o, a) in dv.iter_mut().zip(dout) {
                        *o += p * a;
                    }
                }
                dq.fill(0.0);
                let q = &qkv[r * stride + q_off..r * stride + q_off + dh];
                for ((&key, &p), &g) in keys.iter().zip(probs).zip(&dp) {
                    let ds = p * (g - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &qkv[key * stride + k_off..key * stride + k_off + dh];
                    for (o, k) in dq.iter_mut().zip(krow) {
                        *o += ds * k;
                    }
                    let dk = &mut dqkv[key * stride + k_off..key * stride + k_off + dh];
                    for (o, qq) in dk.iter_mut().zip(q) {
                        *o += ds * qq;
                    }
                }
                let dqr = &mut dqkv[r * stride + q_off..r * stride + q_off + dh];
                for (o, g) in dqr.iter_mut().zip(&dq) {
                    *o += g;
                }
            }
        }
        Array2::from_shape_vec((n, stride), dqkv).expect("shape")
    }
}

/// Mutable slices for two adjacent, non-overlapping tensors.
fn split_pair(buf: &mut [f64], a: Tensor, b: Tensor) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(a.offset + a.len(), b.offset);
    let (_, rest) = buf.split_at_mut(a.offset);
    let (first, rest) = rest.split_at_mut(a.len());
    (first, &mut rest[..b.len()])
}
