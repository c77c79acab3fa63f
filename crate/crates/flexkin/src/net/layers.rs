//! Tape-level building blocks shared by the fusion layers and encoders.

use crate::tape::{Tape, Tensor, TensorId};

const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// Per-sample channel normalization with learnable scale and shift: each
/// time step is centered and scaled over its channels. Replaces running
/// batch statistics so that the forward pass is batch-independent.
pub fn channel_norm(tape: &mut Tape, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
    let rows = tape.value(x).rows();
    let d = tape.value(x).last_dim();
    let mu = tape.mean_lastdim(x);
    let mu_b = tape.broadcast_lastdim(mu, d);
    let centered = tape.sub(x, mu_b);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_lastdim(sq);
    let var_eps = tape.add_scalar(var, NORM_EPS);
    let std = tape.sqrt(var_eps);
    let std_b = tape.broadcast_lastdim(std, d);
    let normed = tape.div(centered, std_b);
    let g = tape.repeat_rows(gamma, rows);
    let b = tape.repeat_rows(beta, rows);
    let scaled = tape.mul(normed, g);
    tape.add(scaled, b)
}

/// x W + b for row vectors: `[R x in] -> [R x out]`.
pub fn linear(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let rows = tape.value(x).shape()[0];
    let y = tape.matmul(x, w);
    let bb = tape.repeat_rows(b, rows);
    tape.add(y, bb)
}

/// Parameter handles of one convolution block.
#[derive(Clone, Copy)]
pub struct ConvBlockIds {
    pub w: TensorId,
    pub b: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// conv1d -> channel norm -> leaky ReLU (-> dropout mask when given).
pub fn conv_block(
    tape: &mut Tape,
    x: TensorId,
    ids: ConvBlockIds,
    dropout_mask: Option<&Tensor>,
) -> TensorId {
    let y = tape.conv1d(x, ids.w, ids.b);
    let n = channel_norm(tape, y, ids.gamma, ids.beta);
    let a = tape.leaky_relu(n, LEAKY_SLOPE);
    match dropout_mask {
        Some(mask) => {
            let m = tape.constant(mask.clone());
            tape.mul(a, m)
        }
        None => a,
    }
}

/// Parameter handles of the multi-view convolution.
#[derive(Clone, Copy)]
pub struct MultiViewConvParams {
    /// Temporal kernel applied to each view's own stream.
    pub w_self: TensorId,
    /// Temporal kernel applied to the all-view mean, added to every view.
    pub w_cross: TensorId,
    pub b: TensorId,
}

/// Convolution whose receptive field spans a temporal window of every view:
/// each output channel sums a per-view temporal filter and a filter over the
/// view-averaged stream, so the same kernels serve any number of views.
/// Input/output: `[T x C x K]`, view axis preserved.
pub fn multiview_conv(
    tape: &mut Tape,
    x: TensorId,
    params: MultiViewConvParams,
) -> TensorId {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "multiview_conv expects [T x C x K]");
    let views = shape[2];
    let mean = tape.mean_lastdim(x);
    let mean2d = tape.reshape(mean, vec![shape[0], shape[1]]);
    let zero_bias = tape.constant(Tensor::zeros(vec![tape.value(params.b).numel()]));
    let cross = tape.conv1d(mean2d, params.w_cross, zero_bias);
    let mut outs = Vec::with_capacity(views);
    for k in 0..views {
        let xk = tape.index_lastdim(x, k);
        let own = tape.conv1d(xk, params.w_self, params.b);
        outs.push(tape.add(own, cross));
    }
    tape.stack_lastdim(&outs)
}

/// Parameter handles of one cross-view attention layer.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    /// Scoring vector of the learned view collapse.
    pub score: TensorId,
}

/// Multi-head attention over the view axis: for every frame independently,
/// each view queries all views, the softmax runs over views, heads are
/// concatenated, linearly mixed, and added back residually.
/// Input/output `[T x C x K]`.
pub fn view_attention(
    tape: &mut Tape,
    x: TensorId,
    params: AttentionParams,
    heads: usize,
) -> TensorId {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "view_attention expects [T x C x K]");
    let (t_len, channels, views) = (shape[0], shape[1], shape[2]);
    assert_eq!(channels % heads, 0, "channels must divide into heads");
    let dh = channels / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let xs: Vec<TensorId> = (0..views).map(|k| tape.index_lastdim(x, k)).collect();
    let qs: Vec<TensorId> = xs
        .iter()
        .map(|&xk| linear(tape, xk, params.wq, params.bq))
        .collect();
    let ks: Vec<TensorId> = xs
        .iter()
        .map(|&xk| linear(tape, xk, params.wk, params.bk))
        .collect();
    let vs: Vec<TensorId> = xs
        .iter()
        .map(|&xk| linear(tape, xk, params.wv, params.bv))
        .collect();

    let mut outs = Vec::with_capacity(views);
    for i in 0..views {
        // [T x H] score per key view, stacked to [T x H x K]
        let per_key: Vec<TensorId> = (0..views)
            .map(|j| {
                let prod = tape.mul(qs[i], ks[j]);
                let summed = tape.block_sum_lastdim(prod, heads);
                tape.scale(summed, scale)
            })
            .collect();
        let stacked = tape.stack_lastdim(&per_key);
        let alpha = tape.softmax_lastdim(stacked);
        let mut acc: Option<TensorId> = None;
        for j in 0..views {
            let a_j = tape.index_lastdim(alpha, j); // [T x H]
            let a_wide = tape.block_broadcast_lastdim(a_j, dh); // [T x C]
            let contrib = tape.mul(a_wide, vs[j]);
            acc = Some(match acc {
                Some(s) => tape.add(s, contrib),
                None => contrib,
            });
        }
        let mixed = linear(tape, acc.expect("views >= 1"), params.wo, params.bo);
        outs.push(tape.add(xs[i], mixed));
    }
    let _ = t_len;
    tape.stack_lastdim(&outs)
}

/// Collapse the view axis with a learned, data-dependent weighted sum:
/// per-frame scores from `score` are softmaxed over views and used to blend
/// the per-view features into `[T x C]`.
pub fn collapse_views(tape: &mut Tape, x: TensorId, score: TensorId) -> TensorId {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "collapse_views expects [T x C x K]");
    let (t_len, channels, views) = (shape[0], shape[1], shape[2]);
    let xs: Vec<TensorId> = (0..views).map(|k| tape.index_lastdim(x, k)).collect();
    let scores: Vec<TensorId> = xs.iter().map(|&xk| tape.matmul(xk, score)).collect();
    let stacked = tape.stack_lastdim(&scores); // [T x 1 x K]
    let flat = tape.reshape(stacked, vec![t_len, views]);
    let alpha = tape.softmax_lastdim(flat); // [T x K]
    let mut acc: Option<TensorId> = None;
    for (k, &xk) in xs.iter().enumerate() {
        let a_k = tape.index_lastdim(alpha, k); // [T]
        let a_col = tape.reshape(a_k, vec![t_len, 1]);
        let a_wide = tape.broadcast_lastdim(a_col, channels);
        let contrib = tape.mul(a_wide, xk);
        acc = Some(match acc {
            Some(s) => tape.add(s, contrib),
            None => contrib,
        });
    }
    acc.expect("views >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{assert_grads, rand_tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn channel_norm_centers_and_scales() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let g = tape.leaf(Tensor::new(vec![1, 4], vec![1.0; 4]));
        let b = tape.leaf(Tensor::zeros(vec![1, 4]));
        let y = channel_norm(&mut tape, x, g, b);
        let d = tape.value(y).data();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // eps slightly shrinks the variance
        }
    }

    #[test]
    fn channel_norm_gradients() {
        let mut r = rng(31);
        let x = rand_tensor(vec![4, 6], -1.0, 1.0, &mut r);
        let g = rand_tensor(vec![1, 6], 0.5, 1.5, &mut r);
        let b = rand_tensor(vec![1, 6], -0.5, 0.5, &mut r);
        assert_grads(
            "channel_norm",
            |tape, ids| {
                let y = channel_norm(tape, ids[0], ids[1], ids[2]);
                let sq = tape.mul(y, y);
                tape.mean_all(sq)
            },
            &[x, g, b],
            None,
            32,
        );
    }

    #[test]
    fn multiview_conv_zero_kernels_give_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![4, 3, 2], |i| i as f64));
        let w_self = tape.leaf(Tensor::zeros(vec![3, 3, 3]));
        let w_cross = tape.leaf(Tensor::zeros(vec![3, 3, 3]));
        let b = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]));
        let y = multiview_conv(&mut tape, x, MultiViewConvParams { w_self, w_cross, b });
        assert_eq!(tape.value(y).shape(), &[4, 3, 2]);
        for t in 0..4 {
            for k in 0..2 {
                for (c, expect) in [0.5, -1.0, 2.0].iter().enumerate() {
                    assert_eq!(tape.value(y).data()[(t * 3 + c) * 2 + k], *expect);
                }
            }
        }
    }

    #[test]
    fn multiview_conv_single_view_is_conv1d() {
        // with K = 1 the mean equals the view, so the op reduces to a conv1d
        // with kernel w_self + w_cross
        let mut r = rng(33);
        let x2d = rand_tensor(vec![5, 3], -1.0, 1.0, &mut r);
        let ws = rand_tensor(vec![4, 3, 3], -1.0, 1.0, &mut r);
        let wc = rand_tensor(vec![4, 3, 3], -1.0, 1.0, &mut r);
        let bias = rand_tensor(vec![4], -0.5, 0.5, &mut r);

        let mut tape = Tape::new();
        let x3d = {
            let x = tape.leaf(x2d.clone());
            tape.reshape(x, vec![5, 3, 1])
        };
        let w_self = tape.leaf(ws.clone());
        let w_cross = tape.leaf(wc.clone());
        let b = tape.leaf(bias.clone());
        let y = multiview_conv(&mut tape, x3d, MultiViewConvParams { w_self, w_cross, b });

        let mut ref_tape = Tape::new();
        let x = ref_tape.leaf(x2d);
        let sum_w = Tensor::new(
            vec![4, 3, 3],
            ws.data().iter().zip(wc.data()).map(|(a, b)| a + b).collect(),
        );
        let w = ref_tape.leaf(sum_w);
        let b = ref_tape.leaf(bias);
        let expect = ref_tape.conv1d(x, w, b);
        let got = tape.value(y).data();
        for (a, e) in got.iter().zip(ref_tape.value(expect).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn multiview_conv_gradients() {
        let mut r = rng(34);
        let x = rand_tensor(vec![5, 3, 2], -1.0, 1.0, &mut r);
        let ws = rand_tensor(vec![3, 3, 3], -1.0, 1.0, &mut r);
        let wc = rand_tensor(vec![3, 3, 3], -1.0, 1.0, &mut r);
        let b = rand_tensor(vec![3], -0.5, 0.5, &mut r);
        assert_grads(
            "multiview_conv",
            |tape, ids| {
                let y = multiview_conv(
                    tape,
                    ids[0],
                    MultiViewConvParams { w_self: ids[1], w_cross: ids[2], b: ids[3] },
                );
                let sq = tape.mul(y, y);
                tape.mean_all(sq)
            },
            &[x, ws, wc, b],
            None,
            35,
        );
    }

    fn attention_inputs(c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let mut v = vec![rand_tensor(vec![4, c, 3], -1.0, 1.0, rng)];
        for _ in 0..4 {
            v.push(rand_tensor(vec![c, c], -0.5, 0.5, rng));
            v.push(rand_tensor(vec![1, c], -0.2, 0.2, rng));
        }
        v.push(rand_tensor(vec![c, 1], -0.5, 0.5, rng));
        v
    }

    fn attn_params(ids: &[TensorId]) -> AttentionParams {
        AttentionParams {
            wq: ids[1],
            bq: ids[2],
            wk: ids[3],
            bk: ids[4],
            wv: ids[5],
            bv: ids[6],
            wo: ids[7],
            bo: ids[8],
            score: ids[9],
        }
    }

    #[test]
    fn attention_identical_views_get_uniform_weights() {
        // with K identical views every view's output must be identical; in
        // particular the collapse weights are uniform by symmetry
        let mut r = rng(36);
        let c = 8;
        let inputs = attention_inputs(c, &mut r);
        let mut tape = Tape::new();
        let one_view = rand_tensor(vec![6, c], -1.0, 1.0, &mut r);
        let xk = tape.leaf(one_view);
        let x = tape.stack_lastdim(&[xk, xk, xk]);
        let ids: Vec<TensorId> = std::iter::once(x)
            .chain(inputs[1..].iter().map(|t| tape.leaf(t.clone())))
            .collect();
        let y = view_attention(&mut tape, x, attn_params(&ids), 2);
        let d = tape.value(y).data().to_vec();
        let (t_len, views) = (6, 3);
        for t in 0..t_len {
            for ch in 0..c {
                let v0 = d[(t * c + ch) * views];
                for k in 1..views {
                    assert!((d[(t * c + ch) * views + k] - v0).abs() < 1e-12);
                }
            }
        }
        let collapsed = collapse_views(&mut tape, y, ids[9]);
        assert_eq!(tape.value(collapsed).shape(), &[6, c]);
        for t in 0..t_len {
            for ch in 0..c {
                let want = d[(t * c + ch) * views];
                let got = tape.value(collapsed).data()[t * c + ch];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_view_softmax_is_one() {
        let mut r = rng(37);
        let c = 8;
        let inputs = attention_inputs(c, &mut r);
        let mut tape = Tape::new();
        let xk = tape.leaf(rand_tensor(vec![5, c], -1.0, 1.0, &mut r));
        let x = tape.stack_lastdim(&[xk]);
        let ids: Vec<TensorId> = std::iter::once(x)
            .chain(inputs[1..].iter().map(|t| tape.leaf(t.clone())))
            .collect();
        let p = attn_params(&ids);
        let y = view_attention(&mut tape, x, p, 2);
        // output must equal residual + Wo(V) exactly, i.e. the weights are 1
        let v = linear(&mut tape, xk, p.wv, p.bv);
        let mixed = linear(&mut tape, v, p.wo, p.bo);
        let expect = tape.add(xk, mixed);
        let y0 = tape.index_lastdim(y, 0);
        for (a, e) in tape.value(y0).data().iter().zip(tape.value(expect).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    // Oracle: permuting the input views permutes the outputs identically.
    #[test]
    fn attention_is_permutation_equivariant() {
        let mut r = rng(38);
        let c = 8;
        let inputs = attention_inputs(c, &mut r);
        let run = |perm: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let base = tape.leaf(inputs[0].clone());
            let views: Vec<TensorId> = perm.iter().map(|&k| tape.index_lastdim(base, k)).collect();
            let x = tape.stack_lastdim(&views);
            let ids: Vec<TensorId> = std::iter::once(x)
                .chain(inputs[1..].iter().map(|t| tape.leaf(t.clone())))
                .collect();
            let y = view_attention(&mut tape, x, attn_params(&ids), 2);
            tape.value(y).data().to_vec()
        };
        let plain = run(&[0, 1, 2]);
        let permuted = run(&[2, 0, 1]);
        let views = 3;
        let rows = plain.len() / views;
        for e in 0..rows {
            for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
                assert!((permuted[e * views + dst] - plain[e * views + src]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng(39);
        let inputs = attention_inputs(8, &mut r);
        assert_grads(
            "view_attention + collapse",
            |tape, ids| {
                let y = view_attention(tape, ids[0], attn_params(ids), 2);
                let collapsed = collapse_views(tape, y, ids[9]);
                let sq = tape.mul(collapsed, collapsed);
                tape.mean_all(sq)
            },
            &inputs,
            Some(40),
            40,
        );
    }
}
