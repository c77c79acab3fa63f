//! Differentiable forward kinematics on the tape. The math mirrors
//! `kinematics::fk` exactly (a unit test pins the two together); composing it
//! from tape primitives keeps the gradients covered by the primitive checks.

use crate::skeleton::SkeletonTopology;
use crate::tape::{Tape, Tensor, TensorId};

/// Inputs of one view's FK pass.
pub struct FkView {
    /// Distinct bone lengths, `[L]`.
    pub s_distinct: TensorId,
    /// Unit quaternion rows `[T*(J-1) x 4]`, frame-major: row `t*(J-1)+(j-1)`
    /// holds the rotation of joint `j` at frame `t`.
    pub q_rows: TensorId,
    /// Root rotation per frame, `[T x 4]`, unit rows.
    pub root_rot: TensorId,
    /// Root position per frame, `[T x 3]`; `None` pins the root to the origin
    /// (the root-zeroed form used by the position loss).
    pub root_pos: Option<TensorId>,
}

/// Per-view joint positions `[T x 3J]` (x, y, z triplets in joint order).
pub fn fk_view(tape: &mut Tape, topo: &SkeletonTopology, view: &FkView) -> TensorId {
    let j_count = topo.joint_count();
    let joints = j_count - 1;
    let frames = tape.value(view.root_rot).shape()[0];
    debug_assert_eq!(tape.value(view.q_rows).shape(), &[frames * joints, 4]);
    let l_count = topo.distinct_length_count();
    debug_assert_eq!(tape.value(view.s_distinct).numel(), l_count);

    // per-bone lengths = E s, with zero rows for overlap bones
    let mut expand = vec![0.0; joints * l_count];
    for j in 1..j_count {
        if let Some(slot) = topo.distinct_slot(j) {
            expand[(j - 1) * l_count + slot] = 1.0;
        }
    }
    let e = tape.constant(Tensor::new(vec![joints, l_count], expand));
    let s_col = tape.reshape(view.s_distinct, vec![l_count, 1]);
    let lengths = tape.matmul(e, s_col); // [(J-1) x 1]
    let lengths3 = tape.broadcast_lastdim(lengths, 3);
    let dirs = tape.constant(Tensor::new(
        vec![joints, 3],
        (1..j_count).flat_map(|j| topo.rest_dir(j)).collect(),
    ));
    let offsets = tape.mul(lengths3, dirs); // [(J-1) x 3]

    // frame-major -> joint-major so each joint's quats are contiguous rows
    let mut perm = vec![0usize; frames * joints];
    for j in 0..joints {
        for t in 0..frames {
            perm[j * frames + t] = t * joints + j;
        }
    }
    let q_joint_major = tape.gather_rows(view.q_rows, perm);

    let mut global_rot: Vec<Option<TensorId>> = vec![None; j_count];
    let mut global_pos: Vec<Option<TensorId>> = vec![None; j_count];
    global_rot[0] = Some(view.root_rot);
    global_pos[0] = Some(match view.root_pos {
        Some(p) => p,
        None => tape.constant(Tensor::zeros(vec![frames, 3])),
    });
    for &j in &topo.topo_order()[1..] {
        let parent = topo.parent(j).expect("non-root joint");
        let g_parent = global_rot[parent].expect("parents precede children");
        let p_parent = global_pos[parent].expect("parents precede children");
        if topo.is_overlap_bone(j) {
            // zero offset: the joint coincides with its parent exactly
            global_pos[j] = Some(p_parent);
        } else {
            let off = tape.slice_rows(offsets, j - 1, j);
            let off_t = tape.repeat_rows(off, frames);
            let rotated = tape.quat_rotate_rows(g_parent, off_t);
            global_pos[j] = Some(tape.add(p_parent, rotated));
        }
        let q_j = tape.slice_rows(q_joint_major, (j - 1) * frames, j * frames);
        global_rot[j] = Some(tape.quat_mul_rows(g_parent, q_j));
    }

    let columns: Vec<TensorId> = (0..j_count)
        .map(|j| global_pos[j].expect("all joints visited"))
        .collect();
    tape.concat_lastdim(&columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{assert_grads, rand_tensor};
    use crate::kinematics::{fk, fk_root_zeroed, MotionSequence};
    use crate::skeleton::default_topology;
    use crate::tape::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn motion_inputs(tape: &mut Tape, motion: &MotionSequence, view: usize, zero_root: bool) -> FkView {
        let frames = motion.frames();
        let joints = motion.topology.joint_count() - 1;
        let s_distinct = tape.constant(Tensor::new(
            vec![motion.lengths.distinct.len()],
            motion.lengths.distinct.clone(),
        ));
        let q_rows = tape.constant(Tensor::new(
            vec![frames * joints, 4],
            motion.rotations.data().to_vec(),
        ));
        let mut rot = Vec::with_capacity(frames * 4);
        let mut pos = Vec::with_capacity(frames * 3);
        for t in 0..frames {
            rot.extend_from_slice(&motion.root.rot(t, view));
            pos.extend_from_slice(&motion.root.pos(t, view));
        }
        let root_rot = tape.constant(Tensor::new(vec![frames, 4], rot));
        let root_pos = if zero_root {
            None
        } else {
            Some(tape.constant(Tensor::new(vec![frames, 3], pos)))
        };
        FkView { s_distinct, q_rows, root_rot, root_pos }
    }

    // Cross-check: the tape FK and the plain FK are two implementations of
    // the same map and must agree to double precision.
    #[test]
    fn matches_plain_fk() {
        let motion = crate::kinematics::tests::random_motion(21, 6, 3);
        let plain = fk(&motion).unwrap();
        let zeroed = fk_root_zeroed(&motion).unwrap();
        for k in 0..motion.views() {
            let mut tape = Tape::new();
            let inputs = motion_inputs(&mut tape, &motion, k, false);
            let out = fk_view(&mut tape, &motion.topology, &inputs);
            let expect = plain.view_slice(k);
            for (a, e) in tape.value(out).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
            let mut tape = Tape::new();
            let inputs = motion_inputs(&mut tape, &motion, k, true);
            let out = fk_view(&mut tape, &motion.topology, &inputs);
            let expect = zeroed.view_slice(k);
            for (a, e) in tape.value(out).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_joints_coincide_exactly() {
        let motion = crate::kinematics::tests::random_motion(22, 4, 1);
        let mut tape = Tape::new();
        let inputs = motion_inputs(&mut tape, &motion, 0, false);
        let out = fk_view(&mut tape, &motion.topology, &inputs);
        let topo = &motion.topology;
        let j3 = topo.joint_count() * 3;
        let d = tape.value(out).data();
        for j in topo.overlap_bones().collect::<Vec<_>>() {
            let p = topo.parent(j).unwrap();
            for t in 0..motion.frames() {
                for c in 0..3 {
                    assert_eq!(d[t * j3 + 3 * j + c], d[t * j3 + 3 * p + c]);
                }
            }
        }
    }

    // Gradient oracle: central finite differences through the whole FK and
    // the quaternion normalization, w.r.t. lengths, rotations and root.
    #[test]
    fn fk_gradients() {
        let topo = default_topology();
        let joints = topo.joint_count() - 1;
        let frames = 3;
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let s = rand_tensor(vec![10], 0.2, 0.6, &mut r);
        let q_raw = rand_tensor(vec![frames * joints, 4], 0.3, 1.0, &mut r);
        let root_rot_raw = rand_tensor(vec![frames, 4], 0.3, 1.0, &mut r);
        let root_pos = rand_tensor(vec![frames, 3], -1.0, 1.0, &mut r);
        assert_grads(
            "fk_view",
            |tape, ids| {
                let q_rows = tape.normalize_lastdim(ids[1]);
                let root_rot = tape.normalize_lastdim(ids[2]);
                let view = FkView {
                    s_distinct: ids[0],
                    q_rows,
                    root_rot,
                    root_pos: Some(ids[3]),
                };
                let out = fk_view(tape, &topo, &view);
                let sq = tape.mul(out, out);
                tape.mean_all(sq)
            },
            &[s, q_raw, root_rot_raw, root_pos],
            Some(30),
            24,
        );
    }
}
