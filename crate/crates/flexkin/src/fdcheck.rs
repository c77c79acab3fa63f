//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so it
//! is independent of the backward implementation it validates. Builders must
//! therefore be pure functions of their inputs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Tensor, TensorId};

/// Step used by the central difference (f(x+h) - f(x-h)) / 2h.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error at float64.
pub const FD_REL_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_abs_err: f64,
    /// max |analytic - fd| over the probed entries, normalized by the largest
    /// gradient magnitude seen (floored to avoid 0/0 on flat functions).
    pub max_rel_err: f64,
    pub probed: usize,
}

/// Compare tape gradients of a scalar-valued builder against central finite
/// differences. `probes_per_input` bounds the number of elements perturbed
/// per input (None = all); probe choice is seeded and deterministic.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor],
    probes_per_input: Option<usize>,
    seed: u64,
) -> GradReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let run = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.scalar_value(out)
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape.backward(out);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    let mut probed = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idxs: Vec<usize> = match probes_per_input {
            Some(p) if p < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(p);
                all
            }
            _ => (0..n).collect(),
        };
        for idx in idxs {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[idx] += FD_STEP;
            let fp = run(&plus);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[idx] -= FD_STEP;
            let fm = run(&minus);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[i][idx];
            max_abs = max_abs.max((a - fd).abs());
            max_mag = max_mag.max(a.abs()).max(fd.abs());
            probed += 1;
        }
    }
    GradReport {
        max_abs_err: max_abs,
        max_rel_err: max_abs / max_mag.max(1e-6),
        probed,
    }
}

/// Panic with a readable message if the check exceeds [`FD_REL_TOL`].
pub fn assert_grads<F>(name: &str, build: F, inputs: &[Tensor], probes: Option<usize>, seed: u64)
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let report = grad_check(build, inputs, probes, seed);
    assert!(
        report.max_rel_err < FD_REL_TOL,
        "{name}: gradient check failed, rel err {:.3e} (abs {:.3e}, {} probes)",
        report.max_rel_err,
        report.max_abs_err,
        report.probed
    );
}

/// Deterministic uniform random tensor for tests.
pub fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn arithmetic_ops() {
        let mut r = rng(1);
        let a = rand_tensor(vec![3, 4], -2.0, 2.0, &mut r);
        let b = rand_tensor(vec![3, 4], 0.5, 2.0, &mut r);
        assert_grads(
            "add/sub/mul/div/scale/neg",
            |tape, ids| {
                let s = tape.add(ids[0], ids[1]);
                let d = tape.sub(s, ids[0]);
                let m = tape.mul(d, ids[0]);
                let q = tape.div(m, ids[1]);
                let sc = tape.scale(q, 1.7);
                let n = tape.neg(sc);
                let sh = tape.add_scalar(n, 0.3);
                let sq = tape.mul(sh, sh);
                tape.mean_all(sq)
            },
            &[a, b],
            None,
            11,
        );
    }

    #[test]
    fn nonlinearities() {
        let mut r = rng(2);
        let a = rand_tensor(vec![4, 3], -2.0, 2.0, &mut r);
        assert_grads(
            "sigmoid/softplus/leaky_relu",
            |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                let p = tape.softplus(s);
                let l = tape.leaky_relu(p, 0.2);
                let sq = tape.mul(l, l);
                tape.mean_all(sq)
            },
            &[a],
            None,
            12,
        );
        let b = rand_tensor(vec![6], 0.2, 3.0, &mut r);
        assert_grads(
            "sqrt",
            |tape, ids| {
                let s = tape.sqrt(ids[0]);
                tape.mean_all(s)
            },
            &[b],
            None,
            13,
        );
    }

    #[test]
    fn reductions_and_broadcast() {
        let mut r = rng(3);
        let a = rand_tensor(vec![3, 5], -1.0, 1.0, &mut r);
        assert_grads(
            "mean_lastdim/broadcast/mean_over_rows",
            |tape, ids| {
                let m = tape.mean_lastdim(ids[0]);
                let b = tape.broadcast_lastdim(m, 5);
                let d = tape.sub(ids[0], b);
                let sq = tape.mul(d, d);
                let rowmean = tape.mean_over_rows(sq);
                tape.sum_all(rowmean)
            },
            &[a],
            None,
            14,
        );
        let c = rand_tensor(vec![4, 3], -1.0, 1.0, &mut r);
        assert_grads(
            "max_over_rows",
            |tape, ids| {
                let m = tape.max_over_rows(ids[0]);
                let sq = tape.mul(m, m);
                tape.sum_all(sq)
            },
            &[c],
            None,
            15,
        );
    }

    #[test]
    fn shape_ops() {
        let mut r = rng(4);
        let a = rand_tensor(vec![4, 6], -1.0, 1.0, &mut r);
        let b = rand_tensor(vec![4, 2], -1.0, 1.0, &mut r);
        assert_grads(
            "reshape/slice/concat/stack/index/gather",
            |tape, ids| {
                let left = tape.slice_lastdim(ids[0], 0, 2);
                let cat = tape.concat_lastdim(&[left, ids[1]]);
                let st = tape.stack_lastdim(&[cat, cat]);
                let pick = tape.index_lastdim(st, 1);
                let rows = tape.gather_rows(pick, vec![2, 0, 1, 3, 2]);
                let sl = tape.slice_rows(rows, 1, 4);
                let rs = tape.reshape(sl, vec![3, 4]);
                let sq = tape.mul(rs, rs);
                tape.mean_all(sq)
            },
            &[a, b],
            None,
            16,
        );
        let c = rand_tensor(vec![1, 5], -1.0, 1.0, &mut r);
        assert_grads(
            "repeat_rows/block ops",
            |tape, ids| {
                let rep = tape.repeat_rows(ids[0], 3);
                let wide = tape.block_broadcast_lastdim(rep, 2);
                let back = tape.block_sum_lastdim(wide, 5);
                let sq = tape.mul(back, back);
                tape.mean_all(sq)
            },
            &[c],
            None,
            17,
        );
    }

    #[test]
    fn matmul_and_conv() {
        let mut r = rng(5);
        let a = rand_tensor(vec![3, 4], -1.0, 1.0, &mut r);
        let b = rand_tensor(vec![4, 2], -1.0, 1.0, &mut r);
        assert_grads(
            "matmul",
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1]);
                let sq = tape.mul(c, c);
                tape.mean_all(sq)
            },
            &[a, b],
            None,
            18,
        );
        for (t, cin, cout, kw, seed) in [(7, 3, 4, 3, 19), (5, 2, 2, 5, 20), (1, 3, 2, 3, 21)] {
            let x = rand_tensor(vec![t, cin], -1.0, 1.0, &mut r);
            let w = rand_tensor(vec![cout, cin, kw], -1.0, 1.0, &mut r);
            let bias = rand_tensor(vec![cout], -0.5, 0.5, &mut r);
            assert_grads(
                "conv1d",
                |tape, ids| {
                    let y = tape.conv1d(ids[0], ids[1], ids[2]);
                    let sq = tape.mul(y, y);
                    tape.mean_all(sq)
                },
                &[x, w, bias],
                None,
                seed,
            );
        }
    }

    #[test]
    fn softmax_and_normalize() {
        let mut r = rng(6);
        let a = rand_tensor(vec![5, 4], -2.0, 2.0, &mut r);
        assert_grads(
            "softmax_lastdim",
            |tape, ids| {
                let y = tape.softmax_lastdim(ids[0]);
                let sq = tape.mul(y, y);
                tape.mean_all(sq)
            },
            &[a],
            None,
            22,
        );
        let b = rand_tensor(vec![6, 4], 0.2, 2.0, &mut r);
        assert_grads(
            "normalize_lastdim",
            |tape, ids| {
                let y = tape.normalize_lastdim(ids[0]);
                let w = tape.add_scalar(y, 0.5);
                let sq = tape.mul(w, w);
                tape.mean_all(sq)
            },
            &[b],
            None,
            23,
        );
    }

    #[test]
    fn quaternion_ops() {
        let mut r = rng(7);
        let q = rand_tensor(vec![5, 4], 0.3, 1.0, &mut r);
        let p = rand_tensor(vec![5, 4], -1.0, 1.0, &mut r);
        assert_grads(
            "quat_mul/conj",
            |tape, ids| {
                let c = tape.quat_conj_rows(ids[1]);
                let m = tape.quat_mul_rows(ids[0], c);
                let sq = tape.mul(m, m);
                tape.mean_all(sq)
            },
            &[q.clone(), p],
            None,
            24,
        );
        let v = rand_tensor(vec![5, 3], -1.0, 1.0, &mut r);
        assert_grads(
            "quat_rotate (via normalize)",
            |tape, ids| {
                let un = tape.normalize_lastdim(ids[0]);
                let rv = tape.quat_rotate_rows(un, ids[1]);
                let sq = tape.mul(rv, rv);
                tape.mean_all(sq)
            },
            &[q, v],
            None,
            25,
        );
    }
}
