//! Synthetic studio: seed-driven generation of smooth motions, orbiting
//! camera rigs, and noisy multi-view 2D observations with confidence values,
//! plus the nearest-pose track-association heuristic for multi-person input.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraParams, CameraRig, Extrinsics, Intrinsics};
use crate::error::{FlexError, Result};
use crate::kinematics::{fk, MotionSequence, Positions3D, Rotations, RootTrajectory};
use crate::quat;
use crate::skeleton::{default_topology, BoneLengths};

/// Foot speed below this (meters per frame) counts as ground contact.
pub const CONTACT_VELOCITY_THRESHOLD: f64 = 0.01;
/// Foot height above the per-sequence minimum below which contact is allowed.
pub const CONTACT_HEIGHT_MARGIN: f64 = 0.08;

/// Network input: per-frame, per-view 2D joints with confidence,
/// `[T][3J][K]` row-major with (u, v, confidence) triplets per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiView2D {
    frames: usize,
    joints: usize,
    views: usize,
    data: Vec<f64>,
}

impl MultiView2D {
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
                "observations: expected {} values, got {}",
                frames * 3 * joints * views,
                data.len()
            )));
        }
        Ok(Self { frames, joints, views, data })
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

    pub fn uv(&self, t: usize, j: usize, k: usize) -> [f64; 2] {
        [self.data[self.idx(t, j, 0, k)], self.data[self.idx(t, j, 1, k)]]
    }

    pub fn confidence(&self, t: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(t, j, 2, k)]
    }

    pub fn set(&mut self, t: usize, j: usize, k: usize, uv: [f64; 2], confidence: f64) {
        let i0 = self.idx(t, j, 0, k);
        let i1 = self.idx(t, j, 1, k);
        let i2 = self.idx(t, j, 2, k);
        self.data[i0] = uv[0];
        self.data[i1] = uv[1];
        self.data[i2] = confidence;
    }

    /// Restrict to a subset of the view axis.
    pub fn select_views(&self, views: &[usize]) -> Self {
        let mut out = Self::zeros(self.frames, self.joints, views.len());
        for t in 0..self.frames {
            for j in 0..self.joints {
                for (nk, &k) in views.iter().enumerate() {
                    out.set(t, j, nk, self.uv(t, j, k), self.confidence(t, j, k));
                }
            }
        }
        out
    }

    /// One view as a `[T x 3J]` row-major matrix.
    pub fn view_matrix(&self, k: usize) -> Vec<f64> {
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

/// Simulated 2D-backbone error model. Two failure modes are modeled: an
/// independent per-joint miss (extra Gaussian noise, low confidence) and a
/// limb-level block, where one view loses a whole limb for a window of
/// frames and keeps reporting the position from the window's first frame.
/// With `pixel_sigma == 0` visible joints are reported at full confidence
/// (a perfect detector has nothing to hedge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub pixel_sigma: f64,
    pub occlusion_prob: f64,
    /// Extra pixel noise applied on top of `pixel_sigma` when occluded.
    pub occluded_pixel_sigma: f64,
    pub occluded_confidence: [f64; 2],
    pub visible_confidence: [f64; 2],
    /// Per-frame probability that a (view, limb) block starts.
    #[serde(default)]
    pub limb_block_prob: f64,
    /// Block length range in frames.
    #[serde(default = "default_block_len")]
    pub limb_block_len: [usize; 2],
    /// Pixel jitter around the stale position during a block.
    #[serde(default = "default_block_sigma")]
    pub limb_block_sigma: f64,
    pub seed: u64,
}

fn default_block_len() -> [usize; 2] {
    [8, 24]
}

fn default_block_sigma() -> f64 {
    3.0
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            occlusion_prob: 0.05,
            occluded_pixel_sigma: 12.0,
            occluded_confidence: [0.0, 0.3],
            visible_confidence: [0.8, 1.0],
            limb_block_prob: 0.02,
            limb_block_len: default_block_len(),
            limb_block_sigma: default_block_sigma(),
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            pixel_sigma: 0.0,
            occlusion_prob: 0.0,
            occluded_pixel_sigma: 0.0,
            limb_block_prob: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0 && r[1] <= 1.0;
        if !(0.0..=1.0).contains(&self.occlusion_prob)
            || !(0.0..=1.0).contains(&self.limb_block_prob)
            || self.pixel_sigma < 0.0
            || self.occluded_pixel_sigma < 0.0
            || self.limb_block_sigma < 0.0
            || self.limb_block_len[0] > self.limb_block_len[1]
            || self.limb_block_len[0] == 0
            || !ordered(self.occluded_confidence)
            || !ordered(self.visible_confidence)
        {
            return Err(FlexError::InvalidConfig("noise model out of range".into()));
        }
        Ok(())
    }
}

/// Scene generation parameters: sequence length, camera count and paths,
/// motion style bands, and body proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub person_count: usize,
    pub frames: usize,
    pub views: usize,
    pub dynamic_cameras: bool,
    pub fps: f64,
    /// Per-joint rotation amplitude band, radians.
    pub rot_amplitude: [f64; 2],
    /// Sinusoid frequency band, Hz.
    pub rot_frequency: [f64; 2],
    pub harmonics: usize,
    /// Multiplier band applied to the nominal bone-length table.
    pub bone_length_scale: [f64; 2],
    /// Root wander amplitude, meters.
    pub root_wander: f64,
    pub camera_distance: [f64; 2],
    pub camera_height: [f64; 2],
    pub focal_range: [f64; 2],
    pub image_size: [f64; 2],
    /// Orbit amplitude for dynamic cameras, radians.
    pub pan_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            person_count: 1,
            frames: 64,
            views: 4,
            dynamic_cameras: false,
            fps: 30.0,
            rot_amplitude: [0.2, 0.7],
            rot_frequency: [0.2, 1.2],
            harmonics: 3,
            bone_length_scale: [0.9, 1.1],
            root_wander: 0.3,
            camera_distance: [3.8, 4.2],
            camera_height: [1.0, 1.8],
            focal_range: [950.0, 1050.0],
            image_size: [1000.0, 800.0],
            pan_amplitude: 0.26,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.person_count == 0
            || self.frames < 2
            || self.views == 0
            || self.fps <= 0.0
            || self.harmonics == 0
            || !ordered(self.rot_amplitude)
            || !ordered(self.rot_frequency)
            || !ordered(self.bone_length_scale)
            || self.bone_length_scale[0] <= 0.0
            || !ordered(self.camera_distance)
            || self.camera_distance[0] <= 0.0
            || !ordered(self.camera_height)
            || !ordered(self.focal_range)
            || self.focal_range[0] <= 0.0
            || self.root_wander < 0.0
            || self.pan_amplitude < 0.0
        {
            return Err(FlexError::InvalidConfig("scene config out of range".into()));
        }
        Ok(())
    }
}

/// Nominal distinct lengths (meters): spine, neck, head, clavicle, upper arm,
/// forearm, hip, thigh, shin, foot.
const NOMINAL_LENGTHS: [f64; 10] = [0.25, 0.12, 0.20, 0.18, 0.30, 0.26, 0.12, 0.40, 0.40, 0.20];

/// Per-joint amplitude factors, indexed by joint (default topology order).
fn amplitude_factor(name: &str) -> f64 {
    match name {
        "root_overlap" | "neck_overlap" => 0.25,
        "spine" | "neck" | "head" => 0.3,
        "l_shoulder" | "r_shoulder" | "l_hip" | "r_hip" => 1.0,
        "l_elbow" | "r_elbow" | "l_knee" | "r_knee" => 0.8,
        _ => 0.4, // wrists, ankles, feet
    }
}

struct SinusoidBank {
    /// (amplitude, angular frequency rad/frame, phase) per harmonic and axis.
    terms: Vec<[(f64, f64, f64); 3]>,
}

impl SinusoidBank {
    fn sample(config: &SceneConfig, amplitude: f64, rng: &mut impl Rng) -> Self {
        let terms = (0..config.harmonics)
            .map(|_| {
                let mut axes = [(0.0, 0.0, 0.0); 3];
                for axis in &mut axes {
                    let a = rng.random_range(0.0..=1.0) * amplitude / config.harmonics as f64;
                    let f = rng.random_range(config.rot_frequency[0]..=config.rot_frequency[1]);
                    let w = 2.0 * std::f64::consts::PI * f / config.fps;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    *axis = (a, w, phase);
                }
                axes
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, t: usize) -> [f64; 3] {
        let mut v = [0.0; 3];
        for axes in &self.terms {
            for (i, &(a, w, phase)) in axes.iter().enumerate() {
                v[i] += a * (w * t as f64 + phase).sin();
            }
        }
        v
    }
}

/// Generate a smooth single-person motion. The returned sequence has one
/// "view" whose root trajectory is the world-frame root pose; cameras are
/// applied later by [`render_observations`].
pub fn gen_motion(config: &SceneConfig, rng: &mut impl Rng) -> Result<MotionSequence> {
    config.validate()?;
    let topo = default_topology();
    let joints = topo.joint_count() - 1;
    let frames = config.frames;

    let distinct: Vec<f64> = NOMINAL_LENGTHS
        .iter()
        .map(|&l| l * rng.random_range(config.bone_length_scale[0]..=config.bone_length_scale[1]))
        .collect();
    let lengths = BoneLengths::new(distinct.clone())?;

    let banks: Vec<SinusoidBank> = (1..=joints)
        .map(|j| {
            let amp = rng.random_range(config.rot_amplitude[0]..=config.rot_amplitude[1])
                * amplitude_factor(&topo.joint_names()[j]);
            SinusoidBank::sample(config, amp, rng)
        })
        .collect();
    let mut rotations = Rotations::identity(frames, joints);
    for t in 0..frames {
        for j in 1..=joints {
            let v = banks[j - 1].eval(t);
            let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let q = if angle == 0.0 {
                quat::IDENTITY
            } else {
                quat::from_axis_angle(v, angle)
            };
            rotations.set_quat(t, j, q);
        }
    }

    // world-frame root: slow wander plus a slow yaw
    let pelvis_height = distinct[7] + distinct[8]; // thigh + shin
    let wander = SinusoidBank::sample(
        &SceneConfig {
            rot_frequency: [0.05, 0.3],
            harmonics: 2,
            ..config.clone()
        },
        1.0,
        rng,
    );
    let yaw_amp = rng.random_range(0.0..=0.5);
    let yaw_freq = rng.random_range(0.05..0.3) * 2.0 * std::f64::consts::PI / config.fps;
    let yaw_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut root = RootTrajectory::at_rest(frames, 1);
    for t in 0..frames {
        let w = wander.eval(t);
        root.set_pos(
            t,
            0,
            [
                w[0] * config.root_wander,
                pelvis_height + 0.1 * w[1] * config.root_wander,
                w[2] * config.root_wander,
            ],
        );
        let yaw = yaw_amp * (yaw_freq * t as f64 + yaw_phase).sin();
        root.set_rot(t, 0, quat::from_axis_angle([0.0, 1.0, 0.0], yaw));
    }

    // contacts from world-frame foot kinematics
    let mut motion = MotionSequence::new(topo, lengths, rotations, root, vec![0.0; frames * 2])?;
    let world = fk(&motion)?;
    let feet = [
        motion.topology.joint_index("l_foot").expect("default topology"),
        motion.topology.joint_index("r_foot").expect("default topology"),
    ];
    for (i, &foot) in feet.iter().enumerate() {
        let min_y = (0..frames)
            .map(|t| world.pos(t, foot, 0)[1])
            .fold(f64::INFINITY, f64::min);
        for t in 0..frames {
            let t2 = if t + 1 < frames { t + 1 } else { t };
            let t1 = if t + 1 < frames { t } else { t - 1 };
            let a = world.pos(t1, foot, 0);
            let b = world.pos(t2, foot, 0);
            let speed = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2))
                .sqrt();
            let low = world.pos(t, foot, 0)[1] < min_y + CONTACT_HEIGHT_MARGIN;
            motion.contacts[t * 2 + i] =
                if speed < CONTACT_VELOCITY_THRESHOLD && low { 1.0 } else { 0.0 };
        }
    }
    Ok(motion)
}

/// Generate K cameras on a ring around the subject. Dynamic rigs pan slowly
/// about their home azimuth; static rigs repeat frame 0.
pub fn gen_rig(config: &SceneConfig, rng: &mut impl Rng) -> Result<CameraRig> {
    config.validate()?;
    let target = [0.0, 1.0, 0.0];
    let mut cameras = Vec::with_capacity(config.views);
    for k in 0..config.views {
        let home = std::f64::consts::TAU * k as f64 / config.views as f64
            + rng.random_range(-0.15..0.15);
        let radius = rng.random_range(config.camera_distance[0]..=config.camera_distance[1]);
        let height = rng.random_range(config.camera_height[0]..=config.camera_height[1]);
        let f = rng.random_range(config.focal_range[0]..=config.focal_range[1]);
        let intrinsics = Intrinsics::new(
            f,
            f,
            config.image_size[0] * 0.5,
            config.image_size[1] * 0.5,
            0.0,
        )?;
        let pan_freq = rng.random_range(0.05..0.2) * 2.0 * std::f64::consts::PI / config.fps;
        let pan_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut track = Vec::with_capacity(config.frames);
        for t in 0..config.frames {
            let az = if config.dynamic_cameras {
                home + config.pan_amplitude * (pan_freq * t as f64 + pan_phase).sin()
            } else {
                home
            };
            let pos = [radius * az.sin(), height, radius * az.cos()];
            let extrinsics = Extrinsics::look_at(pos, target, [0.0, 1.0, 0.0])?;
            track.push(CameraParams { intrinsics, extrinsics });
            if !config.dynamic_cameras {
                // repeat frame 0 for the remaining frames
                let first = track[0].clone();
                track.resize(config.frames, first);
                break;
            }
        }
        cameras.push(track);
    }
    CameraRig::new(cameras, config.dynamic_cameras)
}

/// Everything produced by rendering a world motion through a rig.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// Noisy 2D observations with confidence.
    pub observations: MultiView2D,
    /// Noise-free camera-frame 3D ground truth, `[T][3J][K]`.
    pub gt_positions: Positions3D,
    /// Root depth per frame and view, `[T][K]` row-major.
    pub root_depths: Vec<f64>,
    /// The motion re-expressed with a per-view root trajectory (camera-frame
    /// root position in meters plus root rotation relative to each camera).
    pub view_motion: MotionSequence,
}

/// Joint groups that occlusion blocks act on: the four limbs and the
/// spine/head chain. Joints whose names match no group (e.g. the pelvis)
/// never enter a block.
fn limb_groups(topology: &crate::skeleton::SkeletonTopology) -> Vec<Vec<usize>> {
    let groups: [&[&str]; 5] = [
        &["l_shoulder", "l_elbow", "l_wrist"],
        &["r_shoulder", "r_elbow", "r_wrist"],
        &["l_hip", "l_knee", "l_ankle", "l_foot"],
        &["r_hip", "r_knee", "r_ankle", "r_foot"],
        &["spine", "neck", "neck_overlap", "head"],
    ];
    groups
        .iter()
        .map(|names| {
            names
                .iter()
                .filter_map(|n| topology.joint_index(n))
                .collect()
        })
        .filter(|g: &Vec<usize>| !g.is_empty())
        .collect()
}

/// Project a world motion into each camera, add pixel noise, per-joint
/// misses and limb blocks, and return observations plus per-view ground
/// truth.
pub fn render_observations(
    motion: &MotionSequence,
    rig: &CameraRig,
    noise: &NoiseModel,
) -> Result<RenderedScene> {
    noise.validate()?;
    if motion.views() != 1 {
        return Err(FlexError::InvalidConfig(
            "render_observations expects a world motion with a single root track".into(),
        ));
    }
    if rig.frames() != motion.frames() {
        return Err(FlexError::ShapeMismatch(format!(
            "rig has {} frames, motion has {}",
            rig.frames(),
            motion.frames()
        )));
    }
    let frames = motion.frames();
    let views = rig.views();
    let j_count = motion.topology.joint_count();
    let world = fk(motion)?;

    let mut gt = Positions3D::zeros(frames, j_count, views);
    let mut depths = vec![0.0; frames * views];
    let mut root = RootTrajectory::at_rest(frames, views);
    // exact projections of every joint, [view][frame][joint]
    let mut exact = vec![vec![[0.0; 2]; frames * j_count]; views];
    for k in 0..views {
        for t in 0..frames {
            let cam = rig.camera(k, t);
            let cam_rot = quat::from_matrix(&cam.extrinsics.r);
            root.set_rot(t, k, quat::mul(cam_rot, motion.root.rot(t, 0)));
            let root_cam = cam.extrinsics.transform(motion.root.pos(t, 0));
            root.set_pos(t, k, root_cam);
            depths[t * views + k] = root_cam[2];
            for j in 0..j_count {
                let xc = cam.extrinsics.transform(world.pos(t, j, 0));
                gt.set_pos(t, j, k, xc);
                exact[k][t * j_count + j] = cam.intrinsics.project_camera_point(xc)?;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    // per (view, joint, frame): Some(start frame) while a limb block is live
    let groups = limb_groups(&motion.topology);
    let mut block_start = vec![vec![None::<usize>; frames * j_count]; views];
    if noise.limb_block_prob > 0.0 {
        for (k, view_blocks) in block_start.iter_mut().enumerate() {
            let _ = k;
            for group in &groups {
                let mut until = 0usize;
                let mut start = 0usize;
                for t in 0..frames {
                    if t >= until && rng.random_range(0.0..1.0) < noise.limb_block_prob {
                        start = t;
                        until =
                            t + rng.random_range(noise.limb_block_len[0]..=noise.limb_block_len[1]);
                    }
                    if t < until {
                        for &j in group {
                            view_blocks[t * j_count + j] = Some(start);
                        }
                    }
                }
            }
        }
    }

    let mut obs = MultiView2D::zeros(frames, j_count, views);
    for k in 0..views {
        for t in 0..frames {
            for j in 0..j_count {
                let truth = exact[k][t * j_count + j];
                let blocked = block_start[k][t * j_count + j];
                let occluded = blocked.is_some()
                    || (noise.occlusion_prob > 0.0
                        && rng.random_range(0.0..1.0) < noise.occlusion_prob);
                let (base, sigma) = match blocked {
                    // the detector keeps reporting the pre-block position
                    Some(start) => (exact[k][start * j_count + j], noise.limb_block_sigma),
                    None => (
                        truth,
                        noise.pixel_sigma
                            + if occluded { noise.occluded_pixel_sigma } else { 0.0 },
                    ),
                };
                let uv = if sigma > 0.0 {
                    [
                        base[0] + sigma * gauss.sample(&mut rng),
                        base[1] + sigma * gauss.sample(&mut rng),
                    ]
                } else {
                    base
                };
                let conf = if occluded {
                    rng.random_range(noise.occluded_confidence[0]..=noise.occluded_confidence[1])
                } else if noise.pixel_sigma == 0.0 {
                    noise.visible_confidence[1]
                } else {
                    rng.random_range(noise.visible_confidence[0]..=noise.visible_confidence[1])
                };
                obs.set(t, j, k, uv, conf);
            }
        }
    }

    let view_motion = MotionSequence::new(
        motion.topology.clone(),
        motion.lengths.clone(),
        motion.rotations.clone(),
        root,
        motion.contacts.clone(),
    )?;
    Ok(RenderedScene {
        observations: obs,
        gt_positions: gt,
        root_depths: depths,
        view_motion,
    })
}

/// One detected 2D skeleton: per-joint image coordinates.
pub type Skeleton2D = Vec<[f64; 2]>;

fn skeleton_distance(a: &Skeleton2D, b: &Skeleton2D) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += ((a[i][0] - b[i][0]).powi(2) + (a[i][1] - b[i][1]).powi(2)).sqrt();
    }
    sum / n as f64
}

/// Assign person IDs across frames: each detection takes the ID of the
/// geometrically closest skeleton in the previous frame, greedily in
/// ascending distance order, each previous ID used at most once. Unmatched
/// detections receive fresh IDs.
pub fn associate_tracks(detections: &[Vec<Skeleton2D>]) -> Vec<Vec<usize>> {
    let mut ids: Vec<Vec<usize>> = Vec::with_capacity(detections.len());
    let mut next_id = 0usize;
    for (t, frame) in detections.iter().enumerate() {
        if t == 0 {
            ids.push((0..frame.len()).collect());
            next_id = frame.len();
            continue;
        }
        let prev_frame = &detections[t - 1];
        let prev_ids = &ids[t - 1];
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (d, det) in frame.iter().enumerate() {
            for (p, prev) in prev_frame.iter().enumerate() {
                let dist = skeleton_distance(det, prev);
                if dist.is_finite() {
                    pairs.push((dist, d, p));
                }
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut assigned = vec![usize::MAX; frame.len()];
        let mut used_prev = vec![false; prev_frame.len()];
        for (_, d, p) in pairs {
            if assigned[d] == usize::MAX && !used_prev[p] {
                assigned[d] = prev_ids[p];
                used_prev[p] = true;
            }
        }
        for slot in assigned.iter_mut() {
            if *slot == usize::MAX {
                *slot = next_id;
                next_id += 1;
            }
        }
        next_id = next_id.max(assigned.iter().copied().max().map_or(0, |m| m + 1));
        ids.push(assigned);
    }
    ids
}
