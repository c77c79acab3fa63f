//! Training losses. All reductions are means over every element of the
//! compared tensors; batch expectations are realized as batch means by the
//! trainer. The adversarial objective follows the least-squares convention:
//! the discriminator pushes real scores to 1 and fake scores to 0, the
//! generator pushes fake scores to 1.

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::kinematics::Positions3D;
use crate::skeleton::SkeletonTopology;
use crate::tape::{Tape, Tensor, TensorId};

/// Loss term weights; defaults follow the reference mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_q: f64,
    pub lambda_r: f64,
    pub lambda_f: f64,
    pub lambda_fc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_q: 1.0,
            lambda_r: 1.3,
            lambda_f: 0.5,
            lambda_fc: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_q, self.lambda_r, self.lambda_f, self.lambda_fc];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FlexError::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which side of the adversarial objective is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanRole {
    Discriminator,
    Generator,
}

/// Mean squared error between two same-shape tensors.
pub fn mse(tape: &mut Tape, a: TensorId, b: TensorId) -> TensorId {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Position loss: MSE between root-zeroed predicted positions (one `[T x 3J]`
/// tensor per view) and root-zeroed ground truth.
pub fn position_loss(
    tape: &mut Tape,
    pred_zeroed_views: &[TensorId],
    gt_zeroed: &Positions3D,
) -> Result<TensorId> {
    if pred_zeroed_views.len() != gt_zeroed.views() {
        return Err(FlexError::ShapeMismatch(format!(
            "{} predicted views vs {} ground-truth views",
            pred_zeroed_views.len(),
            gt_zeroed.views()
        )));
    }
    let rows = gt_zeroed.frames();
    let cols = 3 * gt_zeroed.joint_count();
    for &v in pred_zeroed_views {
        if tape.value(v).shape() != [rows, cols] {
            return Err(FlexError::ShapeMismatch(format!(
                "predicted view shape {:?}, expected [{rows}, {cols}]",
                tape.value(v).shape()
            )));
        }
    }
    let stacked = tape.stack_lastdim(pred_zeroed_views);
    let gt = tape.constant(Tensor::new(
        vec![rows, cols, gt_zeroed.views()],
        gt_zeroed.data().to_vec(),
    ));
    Ok(mse(tape, stacked, gt))
}

/// Skeleton loss: MSE over the distinct bone lengths.
pub fn skeleton_loss(tape: &mut Tape, pred_s: TensorId, gt_s: &[f64]) -> Result<TensorId> {
    if tape.value(pred_s).numel() != gt_s.len() {
        return Err(FlexError::ShapeMismatch(format!(
            "{} predicted lengths vs {} ground truth",
            tape.value(pred_s).numel(),
            gt_s.len()
        )));
    }
    let gt = tape.constant(Tensor::new(vec![gt_s.len()], gt_s.to_vec()));
    let pred = tape.reshape(pred_s, vec![gt_s.len()]);
    Ok(mse(tape, pred, gt))
}

/// Least-squares adversarial loss over already-computed scalar scores.
/// Discriminator: mean (real - 1)^2 + mean fake^2. Generator: mean (1 - fake)^2.
pub fn lsgan_loss(
    tape: &mut Tape,
    real_scores: &[TensorId],
    fake_scores: &[TensorId],
    role: GanRole,
) -> Result<TensorId> {
    if fake_scores.is_empty() || (role == GanRole::Discriminator && real_scores.is_empty()) {
        return Err(FlexError::ShapeMismatch("empty adversarial batch".into()));
    }
    let mean_sq_dist = |tape: &mut Tape, scores: &[TensorId], target: f64| -> TensorId {
        let mut acc: Option<TensorId> = None;
        for &s in scores {
            let c = tape.add_scalar(s, -target);
            let sq = tape.mul(c, c);
            acc = Some(match acc {
                Some(a) => tape.add(a, sq),
                None => sq,
            });
        }
        let sum = acc.expect("non-empty scores");
        let flat = tape.reshape(sum, vec![1]);
        tape.scale(flat, 1.0 / scores.len() as f64)
    };
    Ok(match role {
        GanRole::Discriminator => {
            let real_term = mean_sq_dist(tape, real_scores, 1.0);
            let fake_term = mean_sq_dist(tape, fake_scores, 0.0);
            tape.add(real_term, fake_term)
        }
        GanRole::Generator => mean_sq_dist(tape, fake_scores, 1.0),
    })
}

/// Root depth loss: MSE between the z channel of each root slot and the
/// ground-truth depths `[T x K]` (row-major).
pub fn root_depth_loss(
    tape: &mut Tape,
    root_pos_slots: &[TensorId],
    z_r: &[f64],
) -> Result<TensorId> {
    let views = root_pos_slots.len();
    if views == 0 {
        return Err(FlexError::ShapeMismatch("no root slots".into()));
    }
    let frames = tape.value(root_pos_slots[0]).shape()[0];
    if z_r.len() != frames * views {
        return Err(FlexError::ShapeMismatch(format!(
            "depth array has {} values, expected {}",
            z_r.len(),
            frames * views
        )));
    }
    let zs: Vec<TensorId> = root_pos_slots
        .iter()
        .map(|&p| tape.slice_lastdim(p, 2, 3))
        .collect();
    let stacked = tape.stack_lastdim(&zs); // [T x 1 x K]
    let pred = tape.reshape(stacked, vec![frames, views]);
    let gt = tape.constant(Tensor::new(vec![frames, views], z_r.to_vec()));
    Ok(mse(tape, pred, gt))
}

/// Foot label loss: squared error between sigmoid outputs and 0/1 labels.
pub fn foot_label_loss(tape: &mut Tape, pred_f: TensorId, gt_f: &[f64]) -> Result<TensorId> {
    let shape = tape.value(pred_f).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] * 2 != gt_f.len() {
        return Err(FlexError::ShapeMismatch(format!(
            "foot labels: predicted {shape:?} vs {} ground-truth values",
            gt_f.len()
        )));
    }
    let gt = tape.constant(Tensor::new(shape, gt_f.to_vec()));
    Ok(mse(tape, pred_f, gt))
}

/// Foot contact loss: squared foot velocity (components summed), masked by
/// the contact label of the frame the difference starts at, averaged over the
/// labeled (frame, foot) pairs and views. Zero when nothing is labeled.
pub fn foot_contact_loss(
    tape: &mut Tape,
    pred_views: &[TensorId],
    topology: &SkeletonTopology,
    gt_f: &[f64],
) -> Result<TensorId> {
    let views = pred_views.len();
    if views == 0 {
        return Err(FlexError::ShapeMismatch("no predicted views".into()));
    }
    let frames = tape.value(pred_views[0]).shape()[0];
    if gt_f.len() != frames * 2 {
        return Err(FlexError::ShapeMismatch(format!(
            "contact labels: {} values, expected {}",
            gt_f.len(),
            frames * 2
        )));
    }
    if frames < 2 {
        return Err(FlexError::TooShort { need: 2, got: frames });
    }
    let feet = ["l_foot", "r_foot"].map(|n| {
        topology
            .joint_index(n)
            .expect("topology with two labeled feet")
    });
    let mut labeled = 0.0;
    for t in 0..frames - 1 {
        labeled += gt_f[t * 2] + gt_f[t * 2 + 1];
    }
    if labeled == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }

    let mut acc: Option<TensorId> = None;
    for &view in pred_views {
        for (i, &foot) in feet.iter().enumerate() {
            let cols = tape.slice_lastdim(view, 3 * foot, 3 * foot + 3); // [T x 3]
            let later = tape.slice_rows(cols, 1, frames);
            let earlier = tape.slice_rows(cols, 0, frames - 1);
            let vel = tape.sub(later, earlier);
            let sq = tape.mul(vel, vel);
            let speed2 = tape.block_sum_lastdim(sq, 1); // [T-1 x 1]
            let mask = tape.constant(Tensor::new(
                vec![frames - 1, 1],
                (0..frames - 1).map(|t| gt_f[t * 2 + i]).collect(),
            ));
            let masked = tape.mul(speed2, mask);
            let total = tape.sum_all(masked);
            acc = Some(match acc {
                Some(a) => tape.add(a, total),
                None => total,
            });
        }
    }
    let sum = acc.expect("views >= 1");
    Ok(tape.scale(sum, 1.0 / (labeled * views as f64)))
}

/// All scalar terms entering the total objective.
pub struct LossParts {
    pub position: TensorId,
    pub skeleton: TensorId,
    /// One adversarial term per non-root joint.
    pub gan_joints: Vec<TensorId>,
    /// One adversarial term per view's root rotation stream.
    pub gan_root: Vec<TensorId>,
    pub root_depth: TensorId,
    pub foot_labels: TensorId,
    pub foot_contact: TensorId,
}

/// Weighted sum of all loss terms. Rejects non-finite components.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<TensorId> {
    w.validate()?;
    let check = |name: &str, id: TensorId| -> Result<()> {
        let v = tape.scalar_value(id);
        if !v.is_finite() {
            return Err(FlexError::NonFinite(format!("{name} loss = {v}")));
        }
        Ok(())
    };
    check("position", parts.position)?;
    check("skeleton", parts.skeleton)?;
    for &g in parts.gan_joints.iter().chain(&parts.gan_root) {
        check("adversarial", g)?;
    }
    check("root depth", parts.root_depth)?;
    check("foot labels", parts.foot_labels)?;
    check("foot contact", parts.foot_contact)?;

    let mut total = parts.position;
    let s = tape.scale(parts.skeleton, w.lambda_s);
    total = tape.add(total, s);
    for &g in parts.gan_joints.iter().chain(&parts.gan_root) {
        let gs = tape.scale(g, w.lambda_q);
        total = tape.add(total, gs);
    }
    let r = tape.scale(parts.root_depth, w.lambda_r);
    total = tape.add(total, r);
    let f = tape.scale(parts.foot_labels, w.lambda_f);
    total = tape.add(total, f);
    let fc = tape.scale(parts.foot_contact, w.lambda_fc);
    Ok(tape.add(total, fc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{assert_grads, rand_tensor};
    use crate::kinematics::{fk_root_zeroed, root_zeroed_positions, fk};
    use crate::skeleton::default_topology;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, id: TensorId) -> f64 {
        tape.scalar_value(id)
    }

    #[test]
    fn position_loss_zero_on_exact_match() {
        let motion = crate::kinematics::tests::random_motion(31, 4, 2);
        let zeroed = fk_root_zeroed(&motion).unwrap();
        let mut tape = Tape::new();
        let views: Vec<TensorId> = (0..2)
            .map(|k| {
                tape.constant(Tensor::new(
                    vec![4, 60],
                    zeroed.view_slice(k),
                ))
            })
            .collect();
        let loss = position_loss(&mut tape, &views, &zeroed).unwrap();
        assert_eq!(scalar(&tape, loss), 0.0);
    }

    #[test]
    fn position_loss_single_error_is_four_over_n() {
        let motion = crate::kinematics::tests::random_motion(32, 3, 2);
        let zeroed = fk_root_zeroed(&motion).unwrap();
        let mut tape = Tape::new();
        let mut first = zeroed.view_slice(0);
        first[7] += 2.0;
        let v0 = tape.constant(Tensor::new(vec![3, 60], first));
        let v1 = tape.constant(Tensor::new(vec![3, 60], zeroed.view_slice(1)));
        let loss = position_loss(&mut tape, &[v0, v1], &zeroed).unwrap();
        let n = (3 * 60 * 2) as f64;
        assert!((scalar(&tape, loss) - 4.0 / n).abs() < 1e-12);
    }

    // Oracle: scalar-loop MSE over the stacked views.
    #[test]
    fn position_loss_matches_scalar_loop() {
        let motion = crate::kinematics::tests::random_motion(33, 4, 3);
        let gt = root_zeroed_positions(&fk(&motion).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                gt.view_slice(k)
                    .iter()
                    .map(|v| v + rng.random_range(-0.1..0.1))
                    .collect()
            })
            .collect();
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = preds
            .iter()
            .map(|p| tape.constant(Tensor::new(vec![4, 60], p.clone())))
            .collect();
        let loss = position_loss(&mut tape, &ids, &gt).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for (k, p) in preds.iter().enumerate() {
            let gtk = gt.view_slice(k);
            for (a, b) in p.iter().zip(&gtk) {
                sum += (a - b) * (a - b);
                count += 1.0;
            }
        }
        assert!((scalar(&tape, loss) - sum / count).abs() < 1e-12);
    }

    #[test]
    fn position_loss_invariant_to_root_translation() {
        // both sides are root-zeroed, so moving either root changes nothing
        let mut motion = crate::kinematics::tests::random_motion(34, 3, 2);
        let gt = root_zeroed_positions(&fk(&motion).unwrap());
        let loss_for = |m: &crate::kinematics::MotionSequence| {
            let zeroed = fk_root_zeroed(m).unwrap();
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = (0..2)
                .map(|k| tape.constant(Tensor::new(vec![3, 60], zeroed.view_slice(k))))
                .collect();
            let loss = position_loss(&mut tape, &ids, &gt).unwrap();
            scalar(&tape, loss)
        };
        let before = loss_for(&motion);
        for t in 0..motion.frames() {
            for k in 0..motion.views() {
                let p = motion.root.pos(t, k);
                motion.root.set_pos(t, k, [p[0] + 5.0, p[1] - 2.0, p[2] + 0.5]);
            }
        }
        assert_eq!(before, loss_for(&motion));
    }

    #[test]
    fn skeleton_loss_examples() {
        let mut tape = Tape::new();
        let gt = vec![0.3, 0.4, 0.5, 0.2];
        let exact = tape.constant(Tensor::new(vec![4], gt.clone()));
        let loss = skeleton_loss(&mut tape, exact, &gt).unwrap();
        assert_eq!(scalar(&tape, loss), 0.0);
        let mut off = gt.clone();
        off[2] += 0.1;
        let offid = tape.constant(Tensor::new(vec![4], off));
        let loss = skeleton_loss(&mut tape, offid, &gt).unwrap();
        assert!((scalar(&tape, loss) - 0.01 / 4.0).abs() < 1e-15);
        assert!(matches!(
            skeleton_loss(&mut tape, exact, &[1.0; 3]),
            Err(FlexError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gan_loss_constant_discriminators() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::new(vec![1], vec![1.0]));
        let zero = tape.constant(Tensor::new(vec![1], vec![0.0]));
        // D outputs 1 on everything: disc loss = 0 + 1, gen loss = 0
        let d = lsgan_loss(&mut tape, &[one], &[one], GanRole::Discriminator).unwrap();
        assert_eq!(scalar(&tape, d), 1.0);
        let g = lsgan_loss(&mut tape, &[one], &[one], GanRole::Generator).unwrap();
        assert_eq!(scalar(&tape, g), 0.0);
        // D outputs 0 on everything: disc loss = 1 + 0, gen loss = 1
        let d = lsgan_loss(&mut tape, &[zero], &[zero], GanRole::Discriminator).unwrap();
        assert_eq!(scalar(&tape, d), 1.0);
        let g = lsgan_loss(&mut tape, &[zero], &[zero], GanRole::Generator).unwrap();
        assert_eq!(scalar(&tape, g), 1.0);
    }

    // Oracle: direct formula evaluation on random score batches.
    #[test]
    fn gan_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..2.0)).collect();
        let fake: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..2.0)).collect();
        let mut tape = Tape::new();
        let real_ids: Vec<TensorId> = real
            .iter()
            .map(|&v| tape.constant(Tensor::new(vec![1], vec![v])))
            .collect();
        let fake_ids: Vec<TensorId> = fake
            .iter()
            .map(|&v| tape.constant(Tensor::new(vec![1], vec![v])))
            .collect();
        let d = lsgan_loss(&mut tape, &real_ids, &fake_ids, GanRole::Discriminator).unwrap();
        let g = lsgan_loss(&mut tape, &real_ids, &fake_ids, GanRole::Generator).unwrap();
        let d_expect = real.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / 5.0
            + fake.iter().map(|f| f * f).sum::<f64>() / 3.0;
        let g_expect = fake.iter().map(|f| (1.0 - f) * (1.0 - f)).sum::<f64>() / 3.0;
        assert!((scalar(&tape, d) - d_expect).abs() < 1e-12);
        assert!((scalar(&tape, g) - g_expect).abs() < 1e-12);
    }

    #[test]
    fn root_depth_loss_examples() {
        let frames = 3;
        let views = 2;
        let z: Vec<f64> = (0..frames * views).map(|i| 4.0 + i as f64 * 0.1).collect();
        let mut tape = Tape::new();
        let slots: Vec<TensorId> = (0..views)
            .map(|k| {
                tape.constant(Tensor::from_fn(vec![frames, 3], |i| {
                    if i % 3 == 2 {
                        z[(i / 3) * views + k]
                    } else {
                        7.0
                    }
                }))
            })
            .collect();
        let exact = root_depth_loss(&mut tape, &slots, &z).unwrap();
        assert_eq!(scalar(&tape, exact), 0.0);
        let shifted: Vec<f64> = z.iter().map(|v| v - 0.5).collect();
        let off = root_depth_loss(&mut tape, &slots, &shifted).unwrap();
        assert!((scalar(&tape, off) - 0.25).abs() < 1e-12);
    }

    // Oracle: scalar loop over frames and views.
    #[test]
    fn root_depth_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (frames, views) = (4, 3);
        let z: Vec<f64> = (0..frames * views).map(|_| rng.random_range(3.0..5.0)).collect();
        let pred: Vec<Vec<f64>> = (0..views)
            .map(|_| (0..frames * 3).map(|_| rng.random_range(-1.0..6.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let slots: Vec<TensorId> = pred
            .iter()
            .map(|p| tape.constant(Tensor::new(vec![frames, 3], p.clone())))
            .collect();
        let loss = root_depth_loss(&mut tape, &slots, &z).unwrap();
        let mut sum = 0.0;
        for t in 0..frames {
            for k in 0..views {
                let d = pred[k][t * 3 + 2] - z[t * views + k];
                sum += d * d;
            }
        }
        assert!((scalar(&tape, loss) - sum / (frames * views) as f64).abs() < 1e-12);
    }

    #[test]
    fn foot_label_loss_examples() {
        let gt = vec![1.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let perfect = tape.constant(Tensor::new(vec![2, 2], gt.clone()));
        let l = foot_label_loss(&mut tape, perfect, &gt).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let half = tape.constant(Tensor::new(vec![2, 2], vec![0.5; 4]));
        let l = foot_label_loss(&mut tape, half, &gt).unwrap();
        assert!((scalar(&tape, l) - 0.25).abs() < 1e-15);
    }

    fn still_feet_motion(frames: usize) -> crate::kinematics::MotionSequence {
        use crate::kinematics::{MotionSequence, Rotations, RootTrajectory};
        use crate::skeleton::BoneLengths;
        let topo = default_topology();
        let joints = topo.joint_count() - 1;
        MotionSequence::new(
            topo,
            BoneLengths::new(vec![0.3; 10]).unwrap(),
            Rotations::identity(frames, joints),
            RootTrajectory::at_rest(frames, 1),
            vec![1.0; frames * 2],
        )
        .unwrap()
    }

    #[test]
    fn foot_contact_loss_zero_for_still_feet_or_no_labels() {
        let motion = still_feet_motion(5);
        let p = fk(&motion).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![5, 60], p.view_slice(0)));
        let l = foot_contact_loss(&mut tape, &[v], &motion.topology, &motion.contacts).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        // moving feet but an all-zero mask
        let moving = crate::kinematics::tests::random_motion(36, 5, 1);
        let p = fk(&moving).unwrap();
        let v = tape.constant(Tensor::new(vec![5, 60], p.view_slice(0)));
        let l = foot_contact_loss(&mut tape, &[v], &moving.topology, &vec![0.0; 10]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    // Hand case: one labeled frame, one foot moving (0.1, 0, 0) across it.
    #[test]
    fn foot_contact_loss_hand_case() {
        let topo = default_topology();
        let foot = topo.joint_index("l_foot").unwrap();
        let frames = 3;
        let mut data = vec![0.0; frames * 60];
        // place the left foot at x = 0.1 t, everything else static
        for t in 0..frames {
            data[t * 60 + 3 * foot] = 0.1 * t as f64;
        }
        let mut contacts = vec![0.0; frames * 2];
        contacts[2] = 1.0; // left foot, frame 1
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![frames, 60], data));
        let l = foot_contact_loss(&mut tape, &[v], &topo, &contacts).unwrap();
        // one labeled pair, squared speed 0.01, averaged over 1 label * 1 view
        assert!((scalar(&tape, l) - 0.01).abs() < 1e-12);
    }

    // Oracle: direct masked sum over feet, frames and views.
    #[test]
    fn foot_contact_loss_matches_masked_sum() {
        let motion = crate::kinematics::tests::random_motion(37, 6, 2);
        let mut contacts = vec![0.0; 12];
        for t in [0usize, 2, 3] {
            contacts[t * 2] = 1.0;
        }
        contacts[4 * 2 + 1] = 1.0;
        let p = fk(&motion).unwrap();
        let mut tape = Tape::new();
        let views: Vec<TensorId> = (0..2)
            .map(|k| tape.constant(Tensor::new(vec![6, 60], p.view_slice(k))))
            .collect();
        let l = foot_contact_loss(&mut tape, &views, &motion.topology, &contacts).unwrap();
        let feet = [
            motion.topology.joint_index("l_foot").unwrap(),
            motion.topology.joint_index("r_foot").unwrap(),
        ];
        let mut sum = 0.0;
        let mut labels = 0.0;
        for t in 0..5 {
            for (i, &foot) in feet.iter().enumerate() {
                if contacts[t * 2 + i] == 1.0 {
                    labels += 1.0;
                    for k in 0..2 {
                        let a = p.pos(t, foot, k);
                        let b = p.pos(t + 1, foot, k);
                        sum += (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2);
                    }
                }
            }
        }
        let expect = sum / (labels * 2.0);
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
    }

    fn unit_parts(tape: &mut Tape, gan_joints: usize, gan_root: usize) -> LossParts {
        let one = |tape: &mut Tape| tape.constant(Tensor::scalar(1.0));
        LossParts {
            position: one(tape),
            skeleton: one(tape),
            gan_joints: (0..gan_joints).map(|_| one(tape)).collect(),
            gan_root: (0..gan_root).map(|_| one(tape)).collect(),
            root_depth: one(tape),
            foot_labels: one(tape),
            foot_contact: one(tape),
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let parts = LossParts {
            position: zero,
            skeleton: zero,
            gan_joints: vec![zero],
            gan_root: vec![zero],
            root_depth: zero,
            foot_labels: zero,
            foot_contact: zero,
        };
        let t = total_loss(&mut tape, &parts, &w).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);
        // unit components, one non-root adversarial joint, K = 1:
        // 1 + 0.1 + 1*(1 + 1) + 1.3 + 0.5 + 0.5 = 5.4
        let parts = unit_parts(&mut tape, 1, 1);
        let t = total_loss(&mut tape, &parts, &w).unwrap();
        assert!((scalar(&tape, t) - 5.4).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_components() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let parts = unit_parts(&mut tape, 1, 1);
        let base_id = total_loss(&mut tape, &parts, &w).unwrap();
        let base = scalar(&tape, base_id);
        let two = tape.constant(Tensor::scalar(2.0));
        let parts2 = LossParts { position: two, ..unit_parts(&mut tape, 1, 1) };
        let bumped_id = total_loss(&mut tape, &parts2, &w).unwrap();
        assert!((scalar(&tape, bumped_id) - base - 1.0).abs() < 1e-12);
        let parts3 = LossParts { root_depth: two, ..unit_parts(&mut tape, 1, 1) };
        let bumped_id = total_loss(&mut tape, &parts3, &w).unwrap();
        assert!((scalar(&tape, bumped_id) - base - w.lambda_r).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_nan() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let nan = tape.constant(Tensor::scalar(f64::NAN));
        let parts = LossParts { position: nan, ..unit_parts(&mut tape, 1, 1) };
        assert!(matches!(
            total_loss(&mut tape, &parts, &w),
            Err(FlexError::NonFinite(_))
        ));
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let pred = rand_tensor(vec![4, 6], -1.0, 1.0, &mut rng);
        let gt: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_grads(
            "mse",
            |tape, ids| {
                let g = tape.constant(Tensor::new(vec![4, 6], gt.clone()));
                mse(tape, ids[0], g)
            },
            &[pred],
            None,
            39,
        );
        let topo = default_topology();
        let views = rand_tensor(vec![5, 60], -0.5, 0.5, &mut rng);
        let contacts: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        assert_grads(
            "foot_contact_loss",
            |tape, ids| {
                foot_contact_loss(tape, &[ids[0]], &topo, &contacts).unwrap()
            },
            &[views],
            Some(40),
            41,
        );
    }
}
