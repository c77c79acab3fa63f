//! Motion containers and forward kinematics.
//!
//! A motion is (bone lengths `s`, per-joint rotations `q`, per-view root
//! trajectory `r`, foot-contact labels `f`). FK turns it into per-view 3D
//! joint positions by walking the tree: a child sits at its parent plus the
//! parent's global rotation applied to the rest direction scaled by the bone
//! length, and inherits `global_parent * q_child` as its own global rotation.

use crate::error::{FlexError, Result};
use crate::quat::{self, Quat, Vec3};
use crate::skeleton::{BoneLengths, SkeletonTopology};

/// Tolerance for accepting quaternions as unit-norm in FK inputs.
pub const QUAT_NORM_TOL: f64 = 1e-8;

/// Per-frame, per-joint rotation coefficients, `[T][J-1][4]` row-major.
/// Entry `j - 1` holds the rotation of joint `j` (the root has none).
#[derive(Debug, Clone, PartialEq)]
pub struct Rotations {
    frames: usize,
    joints: usize,
    data: Vec<f64>,
}

impl Rotations {
    pub fn new(frames: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * joints * 4 {
            return Err(FlexError::ShapeMismatch(format!(
                "rotations: expected {} values, got {}",
                frames * joints * 4,
                data.len()
            )));
        }
        Ok(Self { frames, joints, data })
    }

    pub fn identity(frames: usize, joints: usize) -> Self {
        let mut data = vec![0.0; frames * joints * 4];
        for t in 0..frames {
            for j in 0..joints {
                data[(t * joints + j) * 4] = 1.0;
            }
        }
        Self { frames, joints, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of rotated joints, i.e. J - 1.
    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rotation of joint `joint` (1-based within the skeleton) at frame `t`.
    pub fn quat(&self, t: usize, joint: usize) -> Quat {
        debug_assert!(joint >= 1);
        let o = (t * self.joints + (joint - 1)) * 4;
        [self.data[o], self.data[o + 1], self.data[o + 2], self.data[o + 3]]
    }

    pub fn set_quat(&mut self, t: usize, joint: usize, q: Quat) {
        debug_assert!(joint >= 1);
        let o = (t * self.joints + (joint - 1)) * 4;
        self.data[o..o + 4].copy_from_slice(&q);
    }

    pub fn normalize(&mut self) {
        for i in (0..self.data.len()).step_by(4) {
            let q = quat::normalize([
                self.data[i],
                self.data[i + 1],
                self.data[i + 2],
                self.data[i + 3],
            ]);
            self.data[i..i + 4].copy_from_slice(&q);
        }
    }

    fn max_norm_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in (0..self.data.len()).step_by(4) {
            let n = quat::norm([
                self.data[i],
                self.data[i + 1],
                self.data[i + 2],
                self.data[i + 3],
            ]);
            worst = worst.max((n - 1.0).abs());
        }
        worst
    }
}

/// Per-frame, per-view root state, `[T][3+4][K]` row-major: position
/// (x, y in image-plane units up to scale, z = depth in meters) followed by
/// the root rotation quaternion relative to that camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RootTrajectory {
    frames: usize,
    views: usize,
    data: Vec<f64>,
}

impl RootTrajectory {
    pub const CHANNELS: usize = 7;

    pub fn new(frames: usize, views: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * Self::CHANNELS * views {
            return Err(FlexError::ShapeMismatch(format!(
                "root trajectory: expected {} values, got {}",
                frames * Self::CHANNELS * views,
                data.len()
            )));
        }
        Ok(Self { frames, views, data })
    }

    /// Identity rotation, origin position, for every frame and view.
    pub fn at_rest(frames: usize, views: usize) -> Self {
        let mut out = Self {
            frames,
            views,
            data: vec![0.0; frames * Self::CHANNELS * views],
        };
        for t in 0..frames {
            for k in 0..views {
                out.set_rot(t, k, quat::IDENTITY);
            }
        }
        out
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, t: usize, c: usize, k: usize) -> usize {
        (t * Self::CHANNELS + c) * self.views + k
    }

    pub fn pos(&self, t: usize, k: usize) -> Vec3 {
        [
            self.data[self.idx(t, 0, k)],
            self.data[self.idx(t, 1, k)],
            self.data[self.idx(t, 2, k)],
        ]
    }

    pub fn rot(&self, t: usize, k: usize) -> Quat {
        [
            self.data[self.idx(t, 3, k)],
            self.data[self.idx(t, 4, k)],
            self.data[self.idx(t, 5, k)],
            self.data[self.idx(t, 6, k)],
        ]
    }

    pub fn set_pos(&mut self, t: usize, k: usize, p: Vec3) {
        for c in 0..3 {
            let i = self.idx(t, c, k);
            self.data[i] = p[c];
        }
    }

    pub fn set_rot(&mut self, t: usize, k: usize, q: Quat) {
        for c in 0..4 {
            let i = self.idx(t, 3 + c, k);
            self.data[i] = q[c];
        }
    }

    pub fn normalize(&mut self) {
        for t in 0..self.frames {
            for k in 0..self.views {
                let q = quat::normalize(self.rot(t, k));
                self.set_rot(t, k, q);
            }
        }
    }

    fn max_norm_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.frames {
            for k in 0..self.views {
                worst = worst.max((quat::norm(self.rot(t, k)) - 1.0).abs());
            }
        }
        worst
    }

    /// Restrict to a subset of views (indices into the original view axis).
    pub fn select_views(&self, views: &[usize]) -> Self {
        let mut out = Self {
            frames: self.frames,
            views: views.len(),
            data: vec![0.0; self.frames * Self::CHANNELS * views.len()],
        };
        for t in 0..self.frames {
            for (nk, &k) in views.iter().enumerate() {
                out.set_pos(t, nk, self.pos(t, k));
                out.set_rot(t, nk, self.rot(t, k));
            }
        }
        out
    }
}

/// Complete description of a motion.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub topology: SkeletonTopology,
    pub lengths: BoneLengths,
    pub rotations: Rotations,
    pub root: RootTrajectory,
    /// Foot-contact labels, `[T][2]` (left, right), each 0.0 or 1.0.
    pub contacts: Vec<f64>,
}

impl MotionSequence {
    pub fn new(
        topology: SkeletonTopology,
        lengths: BoneLengths,
        rotations: Rotations,
        root: RootTrajectory,
        contacts: Vec<f64>,
    ) -> Result<Self> {
        if lengths.distinct.len() != topology.distinct_length_count() {
            return Err(FlexError::LengthCountMismatch {
                expected: topology.distinct_length_count(),
                got: lengths.distinct.len(),
            });
        }
        if rotations.joint_count() != topology.joint_count() - 1 {
            return Err(FlexError::ShapeMismatch(format!(
                "rotations cover {} joints, topology has {}",
                rotations.joint_count(),
                topology.joint_count() - 1
            )));
        }
        let t = rotations.frames();
        if root.frames() != t || contacts.len() != t * 2 {
            return Err(FlexError::ShapeMismatch(
                "frame counts of q, r and f disagree".into(),
            ));
        }
        Ok(Self {
            topology,
            lengths,
            rotations,
            root,
            contacts,
        })
    }

    pub fn frames(&self) -> usize {
        self.rotations.frames()
    }

    pub fn views(&self) -> usize {
        self.root.views()
    }

    pub fn contact(&self, t: usize, foot: usize) -> f64 {
        self.contacts[t * 2 + foot]
    }
}

/// Per-frame, per-view 3D joint positions, `[T][3J][K]` row-major with the
/// 3J axis holding (x, y, z) triplets per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Positions3D {
    frames: usize,
    joints: usize,
    views: usize,
    data: Vec<f64>,
}

impl Positions3D {
    pub fn zeros(frames: usize, joints: usize, views: usize) -> Self {
        Self {
            frames,
            joints,
            views,
            data: vec![0.0; frames * 3 * joints * views],
        }
    }

    pub fn new(frames: usize, joints: usize, views: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * 3 * joints * views {
            return Err(FlexError::ShapeMismatch(format!(
                "positions: expected {} values, got {}",
                frames * 3 * joints * views,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            joints,
            views,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, t: usize, j: usize, c: usize, k: usize) -> usize {
        (t * 3 * self.joints + 3 * j + c) * self.views + k
    }

    pub fn pos(&self, t: usize, j: usize, k: usize) -> Vec3 {
        [
            self.data[self.idx(t, j, 0, k)],
            self.data[self.idx(t, j, 1, k)],
            self.data[self.idx(t, j, 2, k)],
        ]
    }

    pub fn set_pos(&mut self, t: usize, j: usize, k: usize, p: Vec3) {
        for c in 0..3 {
            let i = self.idx(t, j, c, k);
            self.data[i] = p[c];
        }
    }

    /// One view as a `[T][3J]` row-major matrix.
    pub fn view_slice(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.frames * 3 * self.joints];
        for t in 0..self.frames {
            for j in 0..self.joints {
                for c in 0..3 {
                    out[t * 3 * self.joints + 3 * j + c] = self.data[self.idx(t, j, c, k)];
                }
            }
        }
        out
    }
}

fn validate_motion(motion: &MotionSequence) -> Result<()> {
    if motion.rotations.data().iter().any(|v| !v.is_finite())
        || motion.root.data().iter().any(|v| !v.is_finite())
        || motion.lengths.distinct.iter().any(|v| !v.is_finite())
    {
        return Err(FlexError::InvalidRotation("NaN or infinite input".into()));
    }
    let err = motion
        .rotations
        .max_norm_error()
        .max(motion.root.max_norm_error());
    if err > QUAT_NORM_TOL {
        return Err(FlexError::InvalidRotation(format!(
            "quaternion norm off by {err:e} (tolerance {QUAT_NORM_TOL:e}); normalize first"
        )));
    }
    Ok(())
}

fn fk_impl(motion: &MotionSequence, zero_root: bool) -> Result<Positions3D> {
    validate_motion(motion)?;
    let topo = &motion.topology;
    let j_count = topo.joint_count();
    let frames = motion.frames();
    let views = motion.views();
    let lengths = motion.lengths.expand(topo)?;
    let mut out = Positions3D::zeros(frames, j_count, views);

    let mut global_rot = vec![quat::IDENTITY; j_count];
    let mut global_pos = vec![[0.0; 3]; j_count];
    for k in 0..views {
        for t in 0..frames {
            global_rot[0] = motion.root.rot(t, k);
            global_pos[0] = if zero_root {
                [0.0; 3]
            } else {
                motion.root.pos(t, k)
            };
            for &j in &topo.topo_order()[1..] {
                let p = topo.parent(j).expect("non-root joint has a parent");
                let d = topo.rest_dir(j);
                let len = lengths[j];
                let offset = quat::rotate(
                    global_rot[p],
                    [d[0] * len, d[1] * len, d[2] * len],
                );
                global_pos[j] = [
                    global_pos[p][0] + offset[0],
                    global_pos[p][1] + offset[1],
                    global_pos[p][2] + offset[2],
                ];
                global_rot[j] = quat::mul(global_rot[p], motion.rotations.quat(t, j));
            }
            for j in 0..j_count {
                out.set_pos(t, j, k, global_pos[j]);
            }
        }
    }
    Ok(out)
}

/// Forward kinematics: per-view 3D joint positions of a motion.
pub fn fk(motion: &MotionSequence) -> Result<Positions3D> {
    fk_impl(motion, false)
}

/// FK with the root position forced to the origin in every view; the root
/// rotation is kept. This is the form compared by the position loss.
pub fn fk_root_zeroed(motion: &MotionSequence) -> Result<Positions3D> {
    fk_impl(motion, true)
}

/// Subtract the root joint from every joint, per frame and view. Applied to
/// ground-truth positions before the position loss (their rotation stays).
pub fn root_zeroed_positions(p: &Positions3D) -> Positions3D {
    let mut out = p.clone();
    for t in 0..p.frames() {
        for k in 0..p.views() {
            let root = p.pos(t, 0, k);
            for j in 0..p.joint_count() {
                let v = p.pos(t, j, k);
                out.set_pos(t, j, k, [v[0] - root[0], v[1] - root[1], v[2] - root[2]]);
            }
        }
    }
    out
}

/// Forward temporal difference along the first axis of a `[T x rest]` array:
/// `out[t] = x[t+1] - x[t]`, shape `[(T-1) x rest]`.
pub fn temporal_diff(data: &[f64], frames: usize) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(FlexError::TooShort { need: 2, got: frames });
    }
    if frames == 0 || data.len() % frames != 0 {
        return Err(FlexError::ShapeMismatch(format!(
            "array of {} values is not [{} x rest]",
            data.len(),
            frames
        )));
    }
    let stride = data.len() / frames;
    let mut out = vec![0.0; (frames - 1) * stride];
    for t in 0..frames - 1 {
        for i in 0..stride {
            out[t * stride + i] = data[(t + 1) * stride + i] - data[t * stride + i];
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::skeleton::default_topology;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rest_motion(frames: usize, views: usize) -> MotionSequence {
        let topo = default_topology();
        let joints = topo.joint_count() - 1;
        MotionSequence::new(
            topo,
            BoneLengths::new(vec![1.0; 10]).unwrap(),
            Rotations::identity(frames, joints),
            RootTrajectory::at_rest(frames, views),
            vec![0.0; frames * 2],
        )
        .unwrap()
    }

    pub(crate) fn random_motion(seed: u64, frames: usize, views: usize) -> MotionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = default_topology();
        let joints = topo.joint_count() - 1;
        let distinct: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..0.6)).collect();
        let mut q = Rotations::identity(frames, joints);
        for t in 0..frames {
            for j in 1..=joints {
                let raw: [f64; 4] = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                q.set_quat(t, j, quat::normalize(raw));
            }
        }
        let mut r = RootTrajectory::at_rest(frames, views);
        for t in 0..frames {
            for k in 0..views {
                r.set_pos(
                    t,
                    k,
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(2.0..5.0),
                    ],
                );
                let raw: [f64; 4] = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                r.set_rot(t, k, quat::normalize(raw));
            }
        }
        MotionSequence::new(
            default_topology(),
            BoneLengths::new(distinct).unwrap(),
            q,
            r,
            vec![0.0; frames * 2],
        )
        .unwrap()
    }

    #[test]
    fn t_pose_positions() {
        let motion = rest_motion(2, 1);
        let p = fk(&motion).unwrap();
        let topo = &motion.topology;
        let at = |name: &str| p.pos(0, topo.joint_index(name).unwrap(), 0);
        assert_eq!(at("pelvis"), [0.0, 0.0, 0.0]);
        assert_eq!(at("root_overlap"), [0.0, 0.0, 0.0]);
        assert_eq!(at("spine"), [0.0, 1.0, 0.0]);
        assert_eq!(at("neck"), [0.0, 2.0, 0.0]);
        assert_eq!(at("neck_overlap"), [0.0, 2.0, 0.0]);
        assert_eq!(at("head"), [0.0, 3.0, 0.0]);
        assert_eq!(at("l_shoulder"), [1.0, 2.0, 0.0]);
        assert_eq!(at("l_wrist"), [3.0, 2.0, 0.0]);
        assert_eq!(at("r_elbow"), [-2.0, 2.0, 0.0]);
        assert_eq!(at("l_hip"), [1.0, 0.0, 0.0]);
        assert_eq!(at("r_foot"), [-1.0, -2.0, 1.0]);
    }

    #[test]
    fn rotated_parent_moves_child_bone() {
        // Two-joint chain: root -> tip along +x; rotating the root 90 degrees
        // about z puts the tip at parent + (0, len, 0).
        let topo = SkeletonTopology::new(
            vec![
                ("root".into(), None, [0.0, 0.0, 0.0]),
                ("tip".into(), Some(0), [1.0, 0.0, 0.0]),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        let mut root = RootTrajectory::at_rest(1, 1);
        root.set_pos(0, 0, [0.5, -0.25, 2.0]);
        root.set_rot(
            0,
            0,
            quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2),
        );
        let motion = MotionSequence::new(
            topo,
            BoneLengths::new(vec![0.7]).unwrap(),
            Rotations::identity(1, 1),
            root,
            vec![0.0; 2],
        )
        .unwrap();
        let p = fk(&motion).unwrap();
        let tip = p.pos(0, 1, 0);
        assert!((tip[0] - 0.5).abs() < 1e-12);
        assert!((tip[1] - 0.45).abs() < 1e-12);
        assert!((tip[2] - 2.0).abs() < 1e-12);
    }

    // Oracle: distances between connected joints, computed directly on the
    // output, must equal the expanded bone lengths for every frame and view.
    #[test]
    fn bone_lengths_conserved_on_random_motion() {
        let motion = random_motion(7, 5, 3);
        let p = fk(&motion).unwrap();
        let lengths = motion.lengths.expand(&motion.topology).unwrap();
        for t in 0..motion.frames() {
            for k in 0..motion.views() {
                for j in 1..motion.topology.joint_count() {
                    let a = p.pos(t, j, k);
                    let b = p.pos(t, motion.topology.parent(j).unwrap(), k);
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                        .sqrt();
                    assert!(
                        (d - lengths[j]).abs() < 1e-9,
                        "bone {j} length {d} vs {}",
                        lengths[j]
                    );
                }
            }
        }
    }

    #[test]
    fn root_zeroed_is_fk_minus_root_translation() {
        let motion = random_motion(11, 4, 2);
        let full = fk(&motion).unwrap();
        let zeroed = fk_root_zeroed(&motion).unwrap();
        for t in 0..motion.frames() {
            for k in 0..motion.views() {
                let root = full.pos(t, 0, k);
                assert_eq!(zeroed.pos(t, 0, k), [0.0, 0.0, 0.0]);
                for j in 0..motion.topology.joint_count() {
                    let a = full.pos(t, j, k);
                    let b = zeroed.pos(t, j, k);
                    for c in 0..3 {
                        assert!((a[c] - root[c] - b[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn overlap_joint_decouples_descendants() {
        let mut motion = rest_motion(1, 1);
        let p0 = fk(&motion).unwrap();
        let overlap = motion.topology.joint_index("neck_overlap").unwrap();
        let head = motion.topology.joint_index("head").unwrap();
        let shoulder = motion.topology.joint_index("l_shoulder").unwrap();
        motion.rotations.set_quat(
            0,
            overlap,
            quat::from_axis_angle([0.0, 0.0, 1.0], 0.5),
        );
        let p1 = fk(&motion).unwrap();
        // overlap joint still coincides with its parent
        assert_eq!(p1.pos(0, overlap, 0), p1.pos(0, motion.topology.parent(overlap).unwrap(), 0));
        // the head moved, the shoulder did not
        assert_ne!(p0.pos(0, head, 0), p1.pos(0, head, 0));
        assert_eq!(p0.pos(0, shoulder, 0), p1.pos(0, shoulder, 0));
    }

    #[test]
    fn rejects_unnormalized_and_nan() {
        let mut motion = rest_motion(2, 1);
        motion.rotations.set_quat(0, 3, [1.1, 0.0, 0.0, 0.0]);
        assert!(matches!(fk(&motion), Err(FlexError::InvalidRotation(_))));
        let mut motion = rest_motion(2, 1);
        motion.root.set_pos(0, 0, [f64::NAN, 0.0, 0.0]);
        assert!(matches!(fk(&motion), Err(FlexError::InvalidRotation(_))));
    }

    #[test]
    fn diff_of_constant_is_zero_and_ramp_is_constant() {
        let constant = vec![3.5; 4 * 3];
        assert!(temporal_diff(&constant, 4).unwrap().iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..5).flat_map(|t| vec![2.0 * t as f64; 2]).collect();
        let d = temporal_diff(&ramp, 5).unwrap();
        assert!(d.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diff_needs_two_frames() {
        assert!(matches!(
            temporal_diff(&[1.0], 1),
            Err(FlexError::TooShort { need: 2, got: 1 })
        ));
    }

    proptest! {
        // Telescoping: the sum of forward differences is x[T-1] - x[0].
        #[test]
        fn diff_telescopes(values in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let frames = values.len();
            let d = temporal_diff(&values, frames).unwrap();
            let sum: f64 = d.iter().sum();
            prop_assert!((sum - (values[frames - 1] - values[0])).abs() < 1e-9);
        }
    }
}
