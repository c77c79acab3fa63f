//! Kinematic tree definitions: joint hierarchy, rest-pose bone directions,
//! mirrored bone pairs sharing a length, and overlap (zero-length) bones that
//! decouple the rotations of neighboring bones.
//!
//! Bones are indexed by their child joint: bone `j` connects `parent[j] -> j`
//! for `j in 1..J`. The root has no bone.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::quat::Vec3;

const UNIT_TOL: f64 = 1e-9;

/// Immutable description of a skeleton: tree structure, T-pose directions,
/// length tying via mirror groups, and overlap bones with forced length 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent: Vec<Option<usize>>,
    rest_dir: Vec<Vec3>,
    mirror_groups: Vec<(usize, usize)>,
    overlap_bones: BTreeSet<usize>,
    /// Joints in parent-before-child order (root first).
    topo_order: Vec<usize>,
    /// Per joint j >= 1: index into the distinct-length vector, None for overlap bones.
    distinct_slot: Vec<Option<usize>>,
    distinct_count: usize,
}

impl SkeletonTopology {
    /// Build and validate a topology. `joints` holds `(name, parent, rest_dir)`
    /// per joint; the root is the single joint with `parent = None`.
    pub fn new(
        joints: Vec<(String, Option<usize>, Vec3)>,
        mirror_groups: Vec<(usize, usize)>,
        overlap_bones: Vec<usize>,
    ) -> Result<Self> {
        let j_count = joints.len();
        if j_count == 0 {
            return Err(FlexError::InvalidTopology("no joints".into()));
        }
        let joint_names: Vec<String> = joints.iter().map(|j| j.0.clone()).collect();
        let parent: Vec<Option<usize>> = joints.iter().map(|j| j.1).collect();
        let rest_dir: Vec<Vec3> = joints.iter().map(|j| j.2).collect();
        let overlap: BTreeSet<usize> = overlap_bones.into_iter().collect();

        let roots: Vec<usize> = (0..j_count).filter(|&j| parent[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(FlexError::InvalidTopology(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        if root != 0 {
            return Err(FlexError::InvalidTopology("root must be joint 0".into()));
        }
        for (j, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j_count {
                    return Err(FlexError::InvalidTopology(format!(
                        "joint {j} has out-of-range parent {p}"
                    )));
                }
                if *p == j {
                    return Err(FlexError::InvalidTopology(format!("joint {j} is its own parent")));
                }
            }
        }

        // Tree property: a single traversal from the root must visit all J joints.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); j_count];
        for j in 0..j_count {
            if let Some(p) = parent[j] {
                children[p].push(j);
            }
        }
        let mut topo_order = Vec::with_capacity(j_count);
        let mut stack = vec![root];
        let mut seen = vec![false; j_count];
        while let Some(j) = stack.pop() {
            if seen[j] {
                return Err(FlexError::InvalidTopology(format!("cycle through joint {j}")));
            }
            seen[j] = true;
            topo_order.push(j);
            for &c in children[j].iter().rev() {
                stack.push(c);
            }
        }
        if topo_order.len() != j_count {
            return Err(FlexError::InvalidTopology(
                "graph is not a single connected tree".into(),
            ));
        }

        for &b in &overlap {
            if b == 0 || b >= j_count {
                return Err(FlexError::InvalidTopology(format!("overlap bone {b} out of range")));
            }
        }
        for (j, d) in rest_dir.iter().enumerate() {
            if j == 0 {
                continue;
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if overlap.contains(&j) {
                if n != 0.0 {
                    return Err(FlexError::InvalidTopology(format!(
                        "overlap bone {j} must have zero rest direction"
                    )));
                }
            } else if (n - 1.0).abs() > UNIT_TOL {
                return Err(FlexError::InvalidTopology(format!(
                    "bone {j} rest direction has norm {n}, expected 1"
                )));
            }
        }

        let mut in_group = vec![false; j_count];
        for &(a, b) in &mirror_groups {
            for &i in &[a, b] {
                if i == 0 || i >= j_count {
                    return Err(FlexError::InvalidTopology(format!("mirror bone {i} out of range")));
                }
                if overlap.contains(&i) {
                    return Err(FlexError::InvalidTopology(format!(
                        "overlap bone {i} cannot be mirrored"
                    )));
                }
                if in_group[i] {
                    return Err(FlexError::InvalidTopology(format!(
                        "bone {i} appears in more than one mirror group"
                    )));
                }
                in_group[i] = true;
            }
        }

        // Distinct-length slots in bone order; the second bone of a mirror
        // pair reuses the slot of the first.
        let mut distinct_slot: Vec<Option<usize>> = vec![None; j_count];
        let mut next = 0usize;
        for j in 1..j_count {
            if overlap.contains(&j) {
                continue;
            }
            if let Some(&(a, _)) = mirror_groups.iter().find(|&&(_, b)| b == j) {
                if distinct_slot[a].is_none() {
                    return Err(FlexError::InvalidTopology(format!(
                        "mirror pair ({a},{j}) must list the lower bone index first"
                    )));
                }
                distinct_slot[j] = distinct_slot[a];
            } else {
                distinct_slot[j] = Some(next);
                next += 1;
            }
        }
        let expected = (j_count - 1) - overlap.len() - mirror_groups.len();
        debug_assert_eq!(next, expected);

        Ok(Self {
            joint_names,
            parent,
            rest_dir,
            mirror_groups,
            overlap_bones: overlap,
            topo_order,
            distinct_slot,
            distinct_count: expected,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parent.len() - 1
    }

    /// Number of free length parameters after mirror tying and overlap removal.
    pub fn distinct_length_count(&self) -> usize {
        self.distinct_count
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn rest_dir(&self, joint: usize) -> Vec3 {
        self.rest_dir[joint]
    }

    pub fn mirror_groups(&self) -> &[(usize, usize)] {
        &self.mirror_groups
    }

    pub fn is_overlap_bone(&self, joint: usize) -> bool {
        self.overlap_bones.contains(&joint)
    }

    pub fn overlap_bones(&self) -> impl Iterator<Item = usize> + '_ {
        self.overlap_bones.iter().copied()
    }

    /// Joints in parent-before-child order; the root comes first.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn children(&self, joint: usize) -> Vec<usize> {
        (0..self.joint_count())
            .filter(|&j| self.parent[j] == Some(joint))
            .collect()
    }

    /// Distinct-length slot of bone `joint`, `None` for overlap bones.
    pub fn distinct_slot(&self, joint: usize) -> Option<usize> {
        self.distinct_slot[joint]
    }

    /// Expand distinct lengths to per-bone lengths, indexed by child joint
    /// (entry 0, the root, is 0). Mirrored bones receive equal values and
    /// overlap bones receive exactly 0.
    pub fn expand_lengths(&self, distinct: &[f64]) -> Result<Vec<f64>> {
        if distinct.len() != self.distinct_count {
            return Err(FlexError::LengthCountMismatch {
                expected: self.distinct_count,
                got: distinct.len(),
            });
        }
        let mut out = vec![0.0; self.joint_count()];
        for j in 1..self.joint_count() {
            if let Some(slot) = self.distinct_slot[j] {
                out[j] = distinct[slot];
            }
        }
        Ok(out)
    }

    /// Inverse of `expand_lengths`: read one value per distinct slot.
    pub fn extract_distinct(&self, per_bone: &[f64]) -> Result<Vec<f64>> {
        if per_bone.len() != self.joint_count() {
            return Err(FlexError::ShapeMismatch(format!(
                "per-bone lengths: expected {}, got {}",
                self.joint_count(),
                per_bone.len()
            )));
        }
        let mut out = vec![0.0; self.distinct_count];
        for j in (1..self.joint_count()).rev() {
            if let Some(slot) = self.distinct_slot[j] {
                out[slot] = per_bone[j];
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value())
            .expect("topology serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(&serde_json::from_str(text)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        let doc = TopologyJson {
            joints: (0..self.joint_count())
                .map(|j| JointJson {
                    name: self.joint_names[j].clone(),
                    parent: self.parent[j],
                    rest_dir: self.rest_dir[j],
                })
                .collect(),
            mirror_groups: self.mirror_groups.iter().map(|&(a, b)| [a, b]).collect(),
            overlap_bones: self.overlap_bones.iter().copied().collect(),
        };
        serde_json::to_value(doc).expect("topology serialization cannot fail")
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        let doc: TopologyJson = serde_json::from_value(value.clone())?;
        Self::new(
            doc.joints
                .into_iter()
                .map(|j| (j.name, j.parent, j.rest_dir))
                .collect(),
            doc.mirror_groups.iter().map(|g| (g[0], g[1])).collect(),
            doc.overlap_bones,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyJson {
    joints: Vec<JointJson>,
    mirror_groups: Vec<[usize; 2]>,
    overlap_bones: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct JointJson {
    name: String,
    parent: Option<usize>,
    rest_dir: Vec3,
}

/// A single set of distinct bone lengths (meters), constant over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneLengths {
    pub distinct: Vec<f64>,
}

impl BoneLengths {
    pub fn new(distinct: Vec<f64>) -> Result<Self> {
        if distinct.iter().any(|&v| !(v > 0.0)) {
            return Err(FlexError::InvalidConfig(
                "bone lengths must be strictly positive".into(),
            ));
        }
        Ok(Self { distinct })
    }

    pub fn expand(&self, topology: &SkeletonTopology) -> Result<Vec<f64>> {
        topology.expand_lengths(&self.distinct)
    }
}

const X: Vec3 = [1.0, 0.0, 0.0];
const NEG_X: Vec3 = [-1.0, 0.0, 0.0];
const Y: Vec3 = [0.0, 1.0, 0.0];
const NEG_Y: Vec3 = [0.0, -1.0, 0.0];
const Z: Vec3 = [0.0, 0.0, 1.0];
const ZERO: Vec3 = [0.0, 0.0, 0.0];

fn joint(name: &str, parent: usize, dir: Vec3) -> (String, Option<usize>, Vec3) {
    (name.to_string(), Some(parent), dir)
}

/// The canonical 20-joint skeleton. Extra joints overlap the pelvis and the
/// neck so that the spine and the head can rotate independently of the hips
/// and the shoulders. T-pose: arms along +/-x, legs along -y, spine along +y,
/// feet along +z.
pub fn default_topology() -> SkeletonTopology {
    let joints = vec![
        ("pelvis".to_string(), None, ZERO),
        joint("root_overlap", 0, ZERO),
        joint("spine", 1, Y),
        joint("neck", 2, Y),
        joint("neck_overlap", 3, ZERO),
        joint("head", 4, Y),
        joint("l_shoulder", 3, X),
        joint("l_elbow", 6, X),
        joint("l_wrist", 7, X),
        joint("r_shoulder", 3, NEG_X),
        joint("r_elbow", 9, NEG_X),
        joint("r_wrist", 10, NEG_X),
        joint("l_hip", 0, X),
        joint("l_knee", 12, NEG_Y),
        joint("l_ankle", 13, NEG_Y),
        joint("l_foot", 14, Z),
        joint("r_hip", 0, NEG_X),
        joint("r_knee", 16, NEG_Y),
        joint("r_ankle", 17, NEG_Y),
        joint("r_foot", 18, Z),
    ];
    let mirror_groups = vec![(6, 9), (7, 10), (8, 11), (12, 16), (13, 17), (14, 18), (15, 19)];
    let overlap_bones = vec![1, 4];
    SkeletonTopology::new(joints, mirror_groups, overlap_bones)
        .expect("built-in topology is valid")
}

/// Baseline connectivity without overlap joints: the spine and both hips
/// attach directly to the pelvis, the shoulders and the head directly to the
/// neck. Used as the comparison point for the decoupling fit.
pub fn rigid_topology() -> SkeletonTopology {
    let joints = vec![
        ("pelvis".to_string(), None, ZERO),
        joint("spine", 0, Y),
        joint("neck", 1, Y),
        joint("head", 2, Y),
        joint("l_shoulder", 2, X),
        joint("l_elbow", 4, X),
        joint("l_wrist", 5, X),
        joint("r_shoulder", 2, NEG_X),
        joint("r_elbow", 7, NEG_X),
        joint("r_wrist", 8, NEG_X),
        joint("l_hip", 0, X),
        joint("l_knee", 10, NEG_Y),
        joint("l_ankle", 11, NEG_Y),
        joint("l_foot", 12, Z),
        joint("r_hip", 0, NEG_X),
        joint("r_knee", 14, NEG_Y),
        joint("r_ankle", 15, NEG_Y),
        joint("r_foot", 16, Z),
    ];
    let mirror_groups = vec![(4, 7), (5, 8), (6, 9), (10, 14), (11, 15), (12, 16), (13, 17)];
    SkeletonTopology::new(joints, mirror_groups, vec![]).expect("built-in topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_counts() {
        let t = default_topology();
        assert_eq!(t.joint_count(), 20);
        assert_eq!(t.bone_count(), 19);
        assert_eq!(t.overlap_bones().count(), 2);
        assert_eq!(t.mirror_groups().len(), 7);
        assert_eq!(t.distinct_length_count(), 10);
    }

    #[test]
    fn overlap_bone_expands_to_zero() {
        let t = default_topology();
        assert_eq!(t.parent(1), Some(0));
        let lens = t.expand_lengths(&vec![1.0; 10]).unwrap();
        assert_eq!(lens[1], 0.0);
        assert_eq!(lens[4], 0.0);
    }

    #[test]
    fn rigid_counts_and_fanout() {
        let t = rigid_topology();
        assert_eq!(t.joint_count(), 18);
        assert_eq!(t.bone_count(), 17);
        assert_eq!(t.overlap_bones().count(), 0);
        assert_eq!(t.distinct_length_count(), 10);
        // root carries spine + both hips, neck carries head + both shoulders
        assert_eq!(t.children(0).len(), 3);
        assert_eq!(t.children(t.joint_index("neck").unwrap()).len(), 3);
    }

    #[test]
    fn rigid_is_default_minus_overlap_joints() {
        let d = default_topology();
        let r = rigid_topology();
        let d_names: Vec<&String> = d
            .joint_names()
            .iter()
            .filter(|n| !n.contains("overlap"))
            .collect();
        let r_names: Vec<&String> = r.joint_names().iter().collect();
        assert_eq!(d_names, r_names);
        assert_eq!(d.joint_count(), r.joint_count() + 2);
        // parents agree after skipping the overlap joints
        for name in r.joint_names() {
            let dj = d.joint_index(name).unwrap();
            let rj = r.joint_index(name).unwrap();
            let mut dp = d.parent(dj);
            // hop over overlap joints in the default topology
            while let Some(p) = dp {
                if d.joint_names()[p].contains("overlap") {
                    dp = d.parent(p);
                } else {
                    break;
                }
            }
            let dp_name = dp.map(|p| d.joint_names()[p].clone());
            let rp_name = r.parent(rj).map(|p| r.joint_names()[p].clone());
            assert_eq!(dp_name, rp_name, "parent mismatch at {name}");
        }
    }

    #[test]
    fn expand_all_ones() {
        let t = default_topology();
        let lens = t.expand_lengths(&vec![1.0; 10]).unwrap();
        for j in 1..20 {
            if t.is_overlap_bone(j) {
                assert_eq!(lens[j], 0.0);
            } else {
                assert_eq!(lens[j], 1.0);
            }
        }
    }

    #[test]
    fn mirrored_bones_share_length() {
        let t = default_topology();
        let distinct: Vec<f64> = (1..=10).map(|i| i as f64 * 0.1).collect();
        let lens = t.expand_lengths(&distinct).unwrap();
        for &(a, b) in t.mirror_groups() {
            assert_eq!(lens[a], lens[b]);
        }
    }

    // Oracle: the expansion written out as an explicit per-bone lookup table
    // for the default topology (bone index -> distinct slot, None = overlap).
    #[test]
    fn expansion_matches_lookup_table_oracle() {
        const TABLE: [Option<usize>; 20] = [
            None,    // pelvis (no bone)
            None,    // root_overlap
            Some(0), // spine
            Some(1), // neck
            None,    // neck_overlap
            Some(2), // head
            Some(3),
            Some(4),
            Some(5), // left arm
            Some(3),
            Some(4),
            Some(5), // right arm
            Some(6),
            Some(7),
            Some(8),
            Some(9), // left leg
            Some(6),
            Some(7),
            Some(8),
            Some(9), // right leg
        ];
        let t = default_topology();
        let distinct: Vec<f64> = vec![0.31, 0.12, 0.23, 0.44, 0.15, 0.26, 0.37, 0.48, 0.59, 0.6];
        let lens = t.expand_lengths(&distinct).unwrap();
        for j in 0..20 {
            let expected = TABLE[j].map_or(0.0, |slot| distinct[slot]);
            assert_eq!(lens[j], expected, "bone {j}");
        }
    }

    #[test]
    fn length_count_mismatch_is_an_error() {
        let t = default_topology();
        assert!(matches!(
            t.expand_lengths(&[1.0; 9]),
            Err(FlexError::LengthCountMismatch { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn traversal_visits_every_joint_once() {
        for t in [default_topology(), rigid_topology()] {
            let order = t.topo_order();
            assert_eq!(order.len(), t.joint_count());
            let mut seen = vec![false; t.joint_count()];
            for &j in order {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let t = default_topology();
        let back = SkeletonTopology::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_cycles_and_double_root() {
        let cyc = SkeletonTopology::new(
            vec![
                ("a".into(), None, ZERO),
                ("b".into(), Some(2), Y),
                ("c".into(), Some(1), Y),
            ],
            vec![],
            vec![],
        );
        assert!(cyc.is_err());
        let two_roots = SkeletonTopology::new(
            vec![("a".into(), None, ZERO), ("b".into(), None, ZERO)],
            vec![],
            vec![],
        );
        assert!(two_roots.is_err());
    }

    proptest! {
        // Expanding, extracting the distinct values, and expanding again must
        // reproduce the same per-bone lengths.
        #[test]
        fn expansion_idempotent(values in proptest::collection::vec(0.01f64..2.0, 10)) {
            let t = default_topology();
            let lens = t.expand_lengths(&values).unwrap();
            let distinct = t.extract_distinct(&lens).unwrap();
            let again = t.expand_lengths(&distinct).unwrap();
            prop_assert_eq!(lens, again);
        }
    }
}
