//! BVH motion export and the matching reader. The hierarchy mirrors the
//! skeleton topology (OFFSET = rest direction x length, centimeters); motion
//! lines carry the root translation plus per-joint ZXY Euler angles in
//! degrees. Overlap joints appear as ordinary zero-offset joints.

use crate::error::{FlexError, Result};
use crate::kinematics::MotionSequence;
use crate::quat::{self, Quat, Vec3};

const METERS_TO_FILE: f64 = 100.0;

/// ZXY Euler angles (degrees, in channel order Z, X, Y) of a unit
/// quaternion, i.e. R = Rz Rx Ry. The gimbal branch (|x rotation| = 90°)
/// puts the whole z/y share into the Z channel; the result is always finite.
pub fn quat_to_euler_zxy_deg(q: Quat) -> [f64; 3] {
    let m = quat::to_matrix(q);
    let sx = m[2][1].clamp(-1.0, 1.0);
    let x = sx.asin();
    let cx = (1.0 - sx * sx).sqrt();
    let (z, y) = if cx > 1e-7 {
        (f64::atan2(-m[0][1], m[1][1]), f64::atan2(-m[2][0], m[2][2]))
    } else {
        (f64::atan2(m[1][0], m[0][0]), 0.0)
    };
    let deg = 180.0 / std::f64::consts::PI;
    // normalize -0.0 so identity prints as plain zeros
    [z * deg + 0.0, x * deg + 0.0, y * deg + 0.0]
}

/// Inverse of [`quat_to_euler_zxy_deg`].
pub fn euler_zxy_deg_to_quat(zxy: [f64; 3]) -> Quat {
    let rad = std::f64::consts::PI / 180.0;
    let qz = quat::from_axis_angle([0.0, 0.0, 1.0], zxy[0] * rad);
    let qx = quat::from_axis_angle([1.0, 0.0, 0.0], zxy[1] * rad);
    let qy = quat::from_axis_angle([0.0, 1.0, 0.0], zxy[2] * rad);
    quat::mul(qz, quat::mul(qx, qy))
}

fn fmt(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.6}")
}

/// Serialize one view of a motion as BVH text.
pub fn write_bvh(motion: &MotionSequence, view: usize, fps: f64) -> Result<String> {
    if view >= motion.views() {
        return Err(FlexError::InvalidConfig(format!(
            "view {view} out of range ({} views)",
            motion.views()
        )));
    }
    if fps <= 0.0 {
        return Err(FlexError::InvalidConfig("fps must be positive".into()));
    }
    let topo = &motion.topology;
    let lengths = motion.lengths.expand(topo)?;
    let mut out = String::from("HIERARCHY\n");

    // depth-first emission matching topo_order
    fn emit(
        out: &mut String,
        topo: &crate::skeleton::SkeletonTopology,
        lengths: &[f64],
        joint: usize,
        depth: usize,
    ) {
        let pad = "  ".repeat(depth);
        let name = &topo.joint_names()[joint];
        if joint == 0 {
            out.push_str(&format!("ROOT {name}\n{pad}{{\n"));
            out.push_str(&format!("{pad}  OFFSET 0.000000 0.000000 0.000000\n"));
            out.push_str(&format!(
                "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n"
            ));
        } else {
            let d = topo.rest_dir(joint);
            let o: Vec<String> = (0..3)
                .map(|c| fmt(d[c] * lengths[joint] * METERS_TO_FILE))
                .collect();
            out.push_str(&format!("{pad}JOINT {name}\n{pad}{{\n"));
            out.push_str(&format!("{pad}  OFFSET {} {} {}\n", o[0], o[1], o[2]));
            out.push_str(&format!("{pad}  CHANNELS 3 Zrotation Xrotation Yrotation\n"));
        }
        let children = topo.children(joint);
        if children.is_empty() {
            out.push_str(&format!(
                "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0.000000 0.000000 0.000000\n{pad}  }}\n"
            ));
        } else {
            for c in children {
                emit(out, topo, lengths, c, depth + 1);
            }
        }
        out.push_str(&format!("{pad}}}\n"));
    }
    emit(&mut out, topo, &lengths, 0, 0);

    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", motion.frames()));
    out.push_str(&format!("Frame Time: {:.8}\n", 1.0 / fps));
    for t in 0..motion.frames() {
        let mut cells: Vec<String> = Vec::new();
        let p = motion.root.pos(t, view);
        for c in 0..3 {
            cells.push(fmt(p[c] * METERS_TO_FILE));
        }
        let root_euler = quat_to_euler_zxy_deg(motion.root.rot(t, view));
        for v in root_euler {
            cells.push(fmt(v));
        }
        for &j in &topo.topo_order()[1..] {
            let e = quat_to_euler_zxy_deg(motion.rotations.quat(t, j));
            for v in e {
                cells.push(fmt(v));
            }
        }
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// One BVH channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    XPos,
    YPos,
    ZPos,
    XRot,
    YRot,
    ZRot,
}

/// A joint of a parsed BVH hierarchy (end sites are not joints).
#[derive(Debug, Clone)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    /// As written in the file (centimeters for our exports).
    pub offset: Vec3,
    pub channels: Vec<Channel>,
}

/// A parsed BVH file.
#[derive(Debug, Clone)]
pub struct BvhDocument {
    pub joints: Vec<BvhJoint>,
    pub frames: usize,
    pub frame_time: f64,
    /// `[frames x total_channels]`, row-major, file units.
    pub data: Vec<f64>,
}

struct Tokens {
    items: Vec<(usize, String)>,
    pos: usize,
}

impl Tokens {
    fn new(text: &str) -> Self {
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                items.push((ln + 1, tok.to_string()));
            }
        }
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos.min(self.items.len().saturating_sub(1)))
            .map_or(0, |t| t.0)
    }

    fn err(&self, msg: impl Into<String>) -> FlexError {
        FlexError::BvhParse { line: self.line(), msg: msg.into() }
    }

    fn next(&mut self) -> Result<String> {
        let t = self
            .items
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of file"))?
            .1
            .clone();
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, what: &str) -> Result<()> {
        let t = self.next()?;
        if t != what {
            return Err(self.err(format!("expected {what:?}, found {t:?}")));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse().map_err(|_| self.err(format!("expected a number, found {t:?}")))
    }

    fn peek(&self) -> Option<&str> {
        self.items.get(self.pos).map(|t| t.1.as_str())
    }
}

fn parse_channels(tokens: &mut Tokens) -> Result<Vec<Channel>> {
    tokens.expect("CHANNELS")?;
    let n = tokens.number()? as usize;
    let mut channels = Vec::with_capacity(n);
    for _ in 0..n {
        let t = tokens.next()?;
        channels.push(match t.as_str() {
            "Xposition" => Channel::XPos,
            "Yposition" => Channel::YPos,
            "Zposition" => Channel::ZPos,
            "Xrotation" => Channel::XRot,
            "Yrotation" => Channel::YRot,
            "Zrotation" => Channel::ZRot,
            other => return Err(tokens.err(format!("unknown channel {other:?}"))),
        });
    }
    Ok(channels)
}

fn parse_joint(
    tokens: &mut Tokens,
    parent: Option<usize>,
    joints: &mut Vec<BvhJoint>,
) -> Result<()> {
    let name = tokens.next()?;
    let idx = joints.len();
    joints.push(BvhJoint {
        name,
        parent,
        offset: [0.0; 3],
        channels: Vec::new(),
    });
    tokens.expect("{")?;
    tokens.expect("OFFSET")?;
    let offset = [tokens.number()?, tokens.number()?, tokens.number()?];
    joints[idx].offset = offset;
    joints[idx].channels = parse_channels(tokens)?;
    loop {
        match tokens.peek() {
            Some("JOINT") => {
                tokens.expect("JOINT")?;
                parse_joint(tokens, Some(idx), joints)?;
            }
            Some("End") => {
                tokens.expect("End")?;
                tokens.expect("Site")?;
                tokens.expect("{")?;
                tokens.expect("OFFSET")?;
                let _ = [tokens.number()?, tokens.number()?, tokens.number()?];
                tokens.expect("}")?;
            }
            Some("}") => {
                tokens.expect("}")?;
                return Ok(());
            }
            other => return Err(tokens.err(format!("unexpected token {other:?} in joint body"))),
        }
    }
}

/// Parse BVH text.
pub fn parse_bvh(text: &str) -> Result<BvhDocument> {
    let mut tokens = Tokens::new(text);
    tokens.expect("HIERARCHY")?;
    tokens.expect("ROOT")?;
    let mut joints = Vec::new();
    parse_joint(&mut tokens, None, &mut joints)?;
    tokens.expect("MOTION")?;
    tokens.expect("Frames:")?;
    let frames = tokens.number()? as usize;
    tokens.expect("Frame")?;
    tokens.expect("Time:")?;
    let frame_time = tokens.number()?;
    let total: usize = joints.iter().map(|j| j.channels.len()).sum();
    let mut data = Vec::with_capacity(frames * total);
    for _ in 0..frames * total {
        data.push(tokens.number()?);
    }
    if tokens.peek().is_some() {
        return Err(tokens.err("trailing tokens after motion data"));
    }
    Ok(BvhDocument { joints, frames, frame_time, data })
}

impl BvhDocument {
    /// Joint positions per frame, file units, joints in hierarchy order.
    pub fn fk(&self) -> Vec<Vec<Vec3>> {
        let total: usize = self.joints.iter().map(|j| j.channels.len()).sum();
        let mut out = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let row = &self.data[t * total..(t + 1) * total];
            let mut cursor = 0;
            let mut pos = vec![[0.0; 3]; self.joints.len()];
            let mut rot = vec![quat::IDENTITY; self.joints.len()];
            for (i, joint) in self.joints.iter().enumerate() {
                let mut local_pos = joint.offset;
                let mut local_rot = quat::IDENTITY;
                for &ch in &joint.channels {
                    let v = row[cursor];
                    cursor += 1;
                    let rad = v * std::f64::consts::PI / 180.0;
                    match ch {
                        Channel::XPos => local_pos[0] += v,
                        Channel::YPos => local_pos[1] += v,
                        Channel::ZPos => local_pos[2] += v,
                        Channel::XRot => {
                            local_rot =
                                quat::mul(local_rot, quat::from_axis_angle([1.0, 0.0, 0.0], rad))
                        }
                        Channel::YRot => {
                            local_rot =
                                quat::mul(local_rot, quat::from_axis_angle([0.0, 1.0, 0.0], rad))
                        }
                        Channel::ZRot => {
                            local_rot =
                                quat::mul(local_rot, quat::from_axis_angle([0.0, 0.0, 1.0], rad))
                        }
                    }
                }
                match joint.parent {
                    None => {
                        pos[i] = local_pos;
                        rot[i] = local_rot;
                    }
                    Some(p) => {
                        let moved = quat::rotate(rot[p], local_pos);
                        pos[i] = [
                            pos[p][0] + moved[0],
                            pos[p][1] + moved[1],
                            pos[p][2] + moved[2],
                        ];
                        rot[i] = quat::mul(rot[p], local_rot);
                    }
                }
            }
            out.push(pos);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::fk;

    fn rest_motion(frames: usize) -> MotionSequence {
        use crate::kinematics::{Rotations, RootTrajectory};
        use crate::skeleton::{default_topology, BoneLengths};
        let topo = default_topology();
        let joints = topo.joint_count() - 1;
        MotionSequence::new(
            topo,
            BoneLengths::new(vec![0.3; 10]).unwrap(),
            Rotations::identity(frames, joints),
            RootTrajectory::at_rest(frames, 1),
            vec![0.0; frames * 2],
        )
        .unwrap()
    }

    #[test]
    fn identity_rotations_export_as_zero_channels() {
        let motion = rest_motion(2);
        let text = write_bvh(&motion, 0, 30.0).unwrap();
        let motion_block = text.split("Frame Time:").nth(1).unwrap();
        for line in motion_block.lines().skip(1).filter(|l| !l.is_empty()) {
            for cell in line.split_whitespace() {
                assert_eq!(cell, "0.000000");
            }
        }
    }

    #[test]
    fn overlap_joints_written_with_zero_offset() {
        let motion = rest_motion(1);
        let text = write_bvh(&motion, 0, 30.0).unwrap();
        assert!(text.contains("JOINT root_overlap"));
        assert!(text.contains("JOINT neck_overlap"));
        let doc = parse_bvh(&text).unwrap();
        for name in ["root_overlap", "neck_overlap"] {
            let j = doc.joints.iter().find(|j| j.name == name).unwrap();
            assert_eq!(j.offset, [0.0; 3]);
        }
    }

    // Oracle: independent FK over the re-parsed file must match the
    // original FK within 1e-6 (meters).
    #[test]
    fn export_reparse_fk_round_trip() {
        for seed in [41, 42, 43] {
            let motion = crate::kinematics::tests::random_motion(seed, 5, 2);
            for view in 0..2 {
                let original = fk(&motion).unwrap();
                let text = write_bvh(&motion, view, 24.0).unwrap();
                let doc = parse_bvh(&text).unwrap();
                assert_eq!(doc.frames, motion.frames());
                assert!((doc.frame_time - 1.0 / 24.0).abs() < 1e-8);
                let parsed = doc.fk();
                let order = motion.topology.topo_order();
                for t in 0..motion.frames() {
                    for (slot, &j) in order.iter().enumerate() {
                        let expect = original.pos(t, j, view);
                        let got = parsed[t][slot];
                        for c in 0..3 {
                            assert!(
                                (got[c] / METERS_TO_FILE - expect[c]).abs() < 1e-6,
                                "seed {seed} view {view} frame {t} joint {j}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn euler_round_trip_including_gimbal() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let cases = [
            quat::from_axis_angle([0.0, 0.0, 1.0], 0.4),
            quat::from_axis_angle([1.0, 0.0, 0.0], half_pi), // exact gimbal
            quat::mul(
                quat::from_axis_angle([0.0, 0.0, 1.0], 0.3),
                quat::from_axis_angle([1.0, 0.0, 0.0], half_pi),
            ),
            quat::mul(
                quat::from_axis_angle([0.0, 0.0, 1.0], -1.2),
                quat::from_axis_angle([1.0, 0.0, 0.0], -half_pi),
            ),
            quat::normalize([0.4, -0.5, 0.6, 0.2]),
        ];
        for q in cases {
            let e = quat_to_euler_zxy_deg(q);
            assert!(e.iter().all(|v| v.is_finite()));
            let back = euler_zxy_deg_to_quat(e);
            // compare as rotations: both must rotate test vectors identically
            // asin flattens near the gimbal edge, costing ~1e-8 of accuracy;
            // the documented conversion tolerance is 1e-6 degrees
            for v in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, -0.7, 0.64]] {
                let a = quat::rotate(q, v);
                let b = quat::rotate(back, v);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-7, "{q:?} -> {e:?}");
                }
            }
        }
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(matches!(
            parse_bvh("HIERARCHY\nROOT a\n{\nOFFSET 0 0"),
            Err(FlexError::BvhParse { .. })
        ));
        assert!(matches!(
            parse_bvh("NOT_A_BVH"),
            Err(FlexError::BvhParse { .. })
        ));
        let motion = rest_motion(2);
        let text = write_bvh(&motion, 0, 30.0).unwrap();
        let truncated = &text[..text.len() - 10];
        assert!(matches!(
            parse_bvh(truncated),
            Err(FlexError::BvhParse { .. })
        ));
    }

    #[test]
    fn write_rejects_bad_view_or_fps() {
        let motion = rest_motion(2);
        assert!(write_bvh(&motion, 5, 30.0).is_err());
        assert!(write_bvh(&motion, 0, 0.0).is_err());
    }
}
