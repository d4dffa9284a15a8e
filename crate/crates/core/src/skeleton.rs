//! The canonical 16-joint skeleton shared by every other module.
//!
//! Joint order follows MPII: right leg, left leg, torso and head, right arm,
//! left arm. The pelvis (index 6) is the root of the bone tree.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 16;

/// Joint names in canonical order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(usize)]
pub enum Joint {
    RAnkle = 0,
    RKnee = 1,
    RHip = 2,
    LHip = 3,
    LKnee = 4,
    LAnkle = 5,
    Pelvis = 6,
    Thorax = 7,
    Neck = 8,
    HeadTop = 9,
    RWrist = 10,
    RElbow = 11,
    RShoulder = 12,
    LShoulder = 13,
    LElbow = 14,
    LWrist = 15,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::RAnkle,
        Joint::RKnee,
        Joint::RHip,
        Joint::LHip,
        Joint::LKnee,
        Joint::LAnkle,
        Joint::Pelvis,
        Joint::Thorax,
        Joint::Neck,
        Joint::HeadTop,
        Joint::RWrist,
        Joint::RElbow,
        Joint::RShoulder,
        Joint::LShoulder,
        Joint::LElbow,
        Joint::LWrist,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }

    pub fn from_index(index: usize) -> Option<Joint> {
        Joint::ALL.get(index).copied()
    }
}

pub const ROOT: Joint = Joint::Pelvis;

/// Looks up the canonical index of a joint by name.
///
/// ```
/// use hpe3d::skeleton::canonical_joint_index;
/// assert_eq!(canonical_joint_index("pelvis").unwrap(), 6);
/// assert!(canonical_joint_index("nose").is_err());
/// ```
pub fn canonical_joint_index(name: &str) -> Result<usize> {
    JOINT_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| Error::UnknownJoint {
            name: name.to_string(),
            valid: JOINT_NAMES.join(", "),
        })
}

/// A directed bone from `parent` to `child` (joint indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoneEdge {
    pub parent: usize,
    pub child: usize,
}

impl BoneEdge {
    pub const fn new(parent: Joint, child: Joint) -> Self {
        BoneEdge {
            parent: parent as usize,
            child: child as usize,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.parent < NUM_JOINTS && self.child < NUM_JOINTS && self.parent != self.child {
            Ok(self)
        } else {
            Err(Error::InvalidEdge {
                parent: self.parent,
                child: self.child,
            })
        }
    }
}

/// Named bones of the canonical tree, in a fixed order.
pub const BONES: [(&str, BoneEdge); NUM_JOINTS - 1] = [
    ("r_pelvis", BoneEdge::new(Joint::Pelvis, Joint::RHip)),
    ("r_thigh", BoneEdge::new(Joint::RHip, Joint::RKnee)),
    ("r_shank", BoneEdge::new(Joint::RKnee, Joint::RAnkle)),
    ("l_pelvis", BoneEdge::new(Joint::Pelvis, Joint::LHip)),
    ("l_thigh", BoneEdge::new(Joint::LHip, Joint::LKnee)),
    ("l_shank", BoneEdge::new(Joint::LKnee, Joint::LAnkle)),
    ("spine", BoneEdge::new(Joint::Pelvis, Joint::Thorax)),
    ("neck", BoneEdge::new(Joint::Thorax, Joint::Neck)),
    ("head", BoneEdge::new(Joint::Neck, Joint::HeadTop)),
    ("r_clavicle", BoneEdge::new(Joint::Thorax, Joint::RShoulder)),
    ("r_upper_arm", BoneEdge::new(Joint::RShoulder, Joint::RElbow)),
    ("r_forearm", BoneEdge::new(Joint::RElbow, Joint::RWrist)),
    ("l_clavicle", BoneEdge::new(Joint::Thorax, Joint::LShoulder)),
    ("l_upper_arm", BoneEdge::new(Joint::LShoulder, Joint::LElbow)),
    ("l_forearm", BoneEdge::new(Joint::LElbow, Joint::LWrist)),
];

pub fn bone_by_name(name: &str) -> Option<BoneEdge> {
    BONES.iter().find(|(n, _)| *n == name).map(|(_, e)| *e)
}

pub fn bone_name(edge: BoneEdge) -> Option<&'static str> {
    BONES.iter().find(|(_, e)| *e == edge).map(|(n, _)| *n)
}

/// Joint names, bone tree and root of the canonical skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSkeleton {
    pub joint_names: Vec<&'static str>,
    pub bone_edges: Vec<BoneEdge>,
    pub root_index: usize,
}

impl Default for CanonicalSkeleton {
    fn default() -> Self {
        CanonicalSkeleton {
            joint_names: JOINT_NAMES.to_vec(),
            bone_edges: BONES.iter().map(|(_, e)| *e).collect(),
            root_index: ROOT.index(),
        }
    }
}

impl CanonicalSkeleton {
    /// Checks the joint count, edge validity, and that the edges form a
    /// spanning tree rooted at the pelvis.
    pub fn validate(&self) -> Result<()> {
        if self.joint_names.len() != NUM_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "skeleton joints",
                expected: NUM_JOINTS.to_string(),
                found: self.joint_names.len().to_string(),
            });
        }
        if self.root_index != ROOT.index() {
            return Err(Error::InvalidConfig("skeleton root must be the pelvis".into()));
        }
        if self.bone_edges.len() != NUM_JOINTS - 1 {
            return Err(Error::InvalidConfig(format!(
                "a 16-joint tree has 15 edges, found {}",
                self.bone_edges.len()
            )));
        }
        let mut seen = [false; NUM_JOINTS];
        seen[self.root_index] = true;
        let mut pending: Vec<BoneEdge> = self
            .bone_edges
            .iter()
            .map(|e| e.validate())
            .collect::<Result<_>>()?;
        // Grow the tree from the root; an edge can attach only once its parent
        // is reached, and its child must be new (otherwise there is a cycle).
        while !pending.is_empty() {
            let before = pending.len();
            let mut i = 0;
            while i < pending.len() {
                let e = pending[i];
                if seen[e.parent] {
                    if seen[e.child] {
                        return Err(Error::InvalidEdge {
                            parent: e.parent,
                            child: e.child,
                        });
                    }
                    seen[e.child] = true;
                    pending.swap_remove(i);
                } else {
                    i += 1;
                }
            }
            if pending.len() == before {
                return Err(Error::InvalidConfig("bone edges do not form a connected tree".into()));
            }
        }
        Ok(())
    }
}

/// A 16-joint pose in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPose2D {
    pub coords: [[f64; 2]; NUM_JOINTS],
    pub visibility: [bool; NUM_JOINTS],
}

impl CanonicalPose2D {
    /// Builds a pose, zeroing the coordinates of invisible joints.
    pub fn new(mut coords: [[f64; 2]; NUM_JOINTS], visibility: [bool; NUM_JOINTS]) -> Self {
        for (c, &v) in coords.iter_mut().zip(visibility.iter()) {
            if !v {
                *c = [0.0, 0.0];
            }
        }
        CanonicalPose2D { coords, visibility }
    }

    pub fn all_visible(coords: [[f64; 2]; NUM_JOINTS]) -> Self {
        CanonicalPose2D {
            coords,
            visibility: [true; NUM_JOINTS],
        }
    }

    pub fn joint(&self, j: Joint) -> [f64; 2] {
        self.coords[j.index()]
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// Coordinate frame of a 3D pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    CameraMm,
    RootAlignedMm,
    ImageScaled,
}

/// A 16-joint 3D pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPose3D {
    pub coords: [[f64; 3]; NUM_JOINTS],
    pub frame: Frame,
    pub visibility: [bool; NUM_JOINTS],
}

impl CanonicalPose3D {
    pub fn new(coords: [[f64; 3]; NUM_JOINTS], frame: Frame) -> Self {
        CanonicalPose3D {
            coords,
            frame,
            visibility: [true; NUM_JOINTS],
        }
    }

    pub fn joint(&self, j: Joint) -> [f64; 3] {
        self.coords[j.index()]
    }

    pub fn root(&self) -> [f64; 3] {
        self.coords[ROOT.index()]
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = *self;
        for c in out.coords.iter_mut() {
            *c = c.map(|v| v * k);
        }
        out
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut out = *self;
        for c in out.coords.iter_mut() {
            c[0] += t[0];
            c[1] += t[1];
            c[2] += t[2];
        }
        out
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Euclidean length of `bone` in `pose`.
///
/// ```
/// use hpe3d::skeleton::{bone_length, BoneEdge, CanonicalPose3D, Frame};
/// let mut coords = [[0.0; 3]; 16];
/// coords[1] = [3.0, 4.0, 0.0];
/// let pose = CanonicalPose3D::new(coords, Frame::RootAlignedMm);
/// let len = bone_length(&pose, BoneEdge { parent: 0, child: 1 }).unwrap();
/// assert_eq!(len, 5.0);
/// ```
pub fn bone_length(pose: &CanonicalPose3D, bone: BoneEdge) -> Result<f64> {
    let bone = bone.validate()?;
    if pose.frame == Frame::ImageScaled {
        return Err(Error::FrameMismatch(
            "bone lengths in mm need a camera or root-aligned pose".into(),
        ));
    }
    Ok(dist3(pose.coords[bone.parent], pose.coords[bone.child]))
}

/// Bones whose length ratios to a canonical skeleton should agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneGroup {
    pub name: String,
    pub bones: Vec<BoneEdge>,
    /// Canonical length of each bone in `bones`, same order, in mm.
    pub canonical_lengths: Vec<f64>,
}

impl BoneGroup {
    pub fn new(name: impl Into<String>, bones: Vec<BoneEdge>, canonical_lengths: Vec<f64>) -> Result<Self> {
        let group = BoneGroup {
            name: name.into(),
            bones,
            canonical_lengths,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.len() < 2 {
            return Err(Error::InvalidBoneGroup(format!(
                "group `{}` needs at least two bones",
                self.name
            )));
        }
        if self.bones.len() != self.canonical_lengths.len() {
            return Err(Error::InvalidBoneGroup(format!(
                "group `{}` has {} bones but {} lengths",
                self.name,
                self.bones.len(),
                self.canonical_lengths.len()
            )));
        }
        for (bone, &len) in self.bones.iter().zip(&self.canonical_lengths) {
            bone.validate()?;
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::ZeroLengthBone {
                    bone: bone_name(*bone).unwrap_or("?").to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }
}

/// Bone names of the four default groups: arms, legs, shoulders, hips.
pub const DEFAULT_GROUPS: [(&str, &[&str]); 4] = [
    ("arms", &["r_upper_arm", "r_forearm", "l_upper_arm", "l_forearm"]),
    ("legs", &["r_thigh", "r_shank", "l_thigh", "l_shank"]),
    ("shoulders", &["r_clavicle", "l_clavicle"]),
    ("hips", &["r_pelvis", "l_pelvis"]),
];

/// Builds the arms/legs/shoulders/hips groups with canonical lengths
/// measured on `canonical_pose`.
pub fn default_bone_groups(
    skeleton: &CanonicalSkeleton,
    canonical_pose: &CanonicalPose3D,
) -> Result<Vec<BoneGroup>> {
    skeleton.validate()?;
    if canonical_pose.visibility.iter().any(|v| !v) {
        return Err(Error::InvalidConfig(
            "canonical pose must have every joint visible".into(),
        ));
    }
    DEFAULT_GROUPS
        .iter()
        .map(|(group, names)| {
            let mut bones = Vec::with_capacity(names.len());
            let mut lengths = Vec::with_capacity(names.len());
            for &name in names.iter() {
                let edge = bone_by_name(name).expect("default groups use known bones");
                if !skeleton.bone_edges.contains(&edge) {
                    return Err(Error::InvalidBoneGroup(format!(
                        "bone `{name}` is not part of the skeleton"
                    )));
                }
                let len = bone_length(canonical_pose, edge)?;
                if len <= 0.0 {
                    return Err(Error::ZeroLengthBone { bone: name.into() });
                }
                bones.push(edge);
                lengths.push(len);
            }
            BoneGroup::new(*group, bones, lengths)
        })
        .collect()
}

/// Canonical bone lengths in mm, keyed by bone name.
///
/// Stored on disk as TOML with a single `[bones]` table, for example
///
/// ```toml
/// [bones]
/// r_thigh = 442.0
/// r_shank = 454.0
/// ```
///
/// A file may list a subset of bones; the rest fall back to the built-in
/// reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSkeleton {
    pub bones: BTreeMap<String, f64>,
}

const DEFAULT_REFERENCE: &str = include_str!("../data/reference_skeleton.toml");

impl Default for ReferenceSkeleton {
    fn default() -> Self {
        ReferenceSkeleton::parse(DEFAULT_REFERENCE, BTreeMap::new()).expect("built-in reference skeleton parses")
    }
}

impl ReferenceSkeleton {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, ReferenceSkeleton::default().bones)
    }

    fn parse(text: &str, mut bones: BTreeMap<String, f64>) -> Result<Self> {
        let parsed: ReferenceSkeleton = toml::from_str(text)?;
        for (name, len) in parsed.bones {
            if bone_by_name(&name).is_none() {
                return Err(Error::InvalidConfig(format!("unknown bone `{name}` in reference skeleton")));
            }
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::ZeroLengthBone { bone: name });
            }
            bones.insert(name, len);
        }
        for (name, _) in BONES.iter() {
            if !bones.contains_key(*name) {
                return Err(Error::InvalidConfig(format!("reference skeleton lacks bone `{name}`")));
            }
        }
        Ok(ReferenceSkeleton { bones })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn length(&self, bone: &str) -> f64 {
        self.bones[bone]
    }

    /// Root-aligned standing pose (A-pose, facing the camera, image axes:
    /// x right, y down, z away from the camera) with these bone lengths.
    pub fn rest_pose(&self) -> CanonicalPose3D {
        let mut coords = [[0.0; 3]; NUM_JOINTS];
        for (name, edge) in BONES.iter() {
            let dir = rest_direction(name);
            let len = self.length(name);
            let p = coords[edge.parent];
            coords[edge.child] = [p[0] + dir[0] * len, p[1] + dir[1] * len, p[2] + dir[2] * len];
        }
        CanonicalPose3D::new(coords, Frame::RootAlignedMm)
    }
}

/// Unit direction of each bone in the rest pose. The subject faces the
/// camera, so its right side lies toward negative x.
pub(crate) fn rest_direction(bone: &str) -> [f64; 3] {
    let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
    match bone {
        "r_pelvis" | "r_clavicle" => [-1.0, 0.0, 0.0],
        "l_pelvis" | "l_clavicle" => [1.0, 0.0, 0.0],
        "r_thigh" | "r_shank" | "l_thigh" | "l_shank" => [0.0, 1.0, 0.0],
        "spine" | "neck" | "head" => [0.0, -1.0, 0.0],
        "r_upper_arm" | "r_forearm" => [-s, c, 0.0],
        "l_upper_arm" | "l_forearm" => [s, c, 0.0],
        _ => unreachable!("unknown bone {bone}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_with(a: [f64; 3], b: [f64; 3]) -> CanonicalPose3D {
        let mut coords = [[0.0; 3]; NUM_JOINTS];
        coords[0] = a;
        coords[1] = b;
        CanonicalPose3D::new(coords, Frame::CameraMm)
    }

    #[test]
    fn joint_indices_follow_mpii_order() {
        assert_eq!(canonical_joint_index("pelvis").unwrap(), 6);
        assert_eq!(canonical_joint_index("thorax").unwrap(), 7);
        assert_eq!(canonical_joint_index("head_top").unwrap(), 9);
        for (i, j) in Joint::ALL.iter().enumerate() {
            assert_eq!(j.index(), i);
            assert_eq!(canonical_joint_index(j.name()).unwrap(), i);
        }
    }

    #[test]
    fn unknown_joint_lists_valid_names() {
        let err = canonical_joint_index("nose").unwrap_err().to_string();
        assert!(err.contains("nose"));
        assert!(err.contains("head_top"));
    }

    #[test]
    fn default_skeleton_is_a_tree() {
        CanonicalSkeleton::default().validate().unwrap();
    }

    #[test]
    fn cyclic_or_disconnected_skeleton_rejected() {
        let mut sk = CanonicalSkeleton::default();
        sk.bone_edges[2] = BoneEdge::new(Joint::RHip, Joint::RKnee);
        assert!(sk.validate().is_err());
        let mut sk = CanonicalSkeleton::default();
        sk.bone_edges[0] = BoneEdge { parent: 3, child: 16 };
        assert!(sk.validate().is_err());
    }

    #[test]
    fn bone_length_examples() {
        let e = BoneEdge { parent: 0, child: 1 };
        assert_eq!(bone_length(&pose_with([0.0; 3], [0.0; 3]), e).unwrap(), 0.0);
        assert_eq!(bone_length(&pose_with([0.0; 3], [3.0, 4.0, 0.0]), e).unwrap(), 5.0);
        let l = bone_length(&pose_with([1.0; 3], [2.0; 3]), e).unwrap();
        assert!((l - 1.732_050_8).abs() < 1e-7);
        assert!(bone_length(&pose_with([0.0; 3], [0.0; 3]), BoneEdge { parent: 0, child: 16 }).is_err());
    }

    #[test]
    fn arm_group_lengths_come_from_the_pose() {
        let mut reference = ReferenceSkeleton::default();
        reference.bones.insert("r_upper_arm".into(), 280.0);
        reference.bones.insert("r_forearm".into(), 250.0);
        reference.bones.insert("l_upper_arm".into(), 280.0);
        reference.bones.insert("l_forearm".into(), 250.0);
        let groups = default_bone_groups(&CanonicalSkeleton::default(), &reference.rest_pose()).unwrap();
        assert_eq!(groups.len(), 4);
        let arms = &groups[0];
        assert_eq!(arms.name, "arms");
        let expect = [280.0, 250.0, 280.0, 250.0];
        for (got, want) in arms.canonical_lengths.iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn symmetric_reference_gives_equal_left_right() {
        let groups =
            default_bone_groups(&CanonicalSkeleton::default(), &ReferenceSkeleton::default().rest_pose()).unwrap();
        for g in &groups {
            let n = g.len() / 2;
            for i in 0..n {
                assert!((g.canonical_lengths[i] - g.canonical_lengths[i + n]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_length_forearm_is_rejected() {
        let mut pose = ReferenceSkeleton::default().rest_pose();
        pose.coords[Joint::LWrist.index()] = pose.coords[Joint::LElbow.index()];
        let err = default_bone_groups(&CanonicalSkeleton::default(), &pose).unwrap_err();
        assert!(matches!(err, Error::ZeroLengthBone { ref bone } if bone == "l_forearm"));
    }

    #[test]
    fn groups_are_disjoint() {
        let groups =
            default_bone_groups(&CanonicalSkeleton::default(), &ReferenceSkeleton::default().rest_pose()).unwrap();
        let mut all: Vec<BoneEdge> = groups.iter().flat_map(|g| g.bones.clone()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn singleton_group_rejected() {
        let e = BoneEdge::new(Joint::RHip, Joint::RKnee);
        assert!(BoneGroup::new("one", vec![e], vec![400.0]).is_err());
    }

    #[test]
    fn reference_file_overrides_defaults() {
        let r = ReferenceSkeleton::from_toml_str("[bones]\nr_thigh = 500.0\n").unwrap();
        assert_eq!(r.length("r_thigh"), 500.0);
        assert_eq!(r.length("l_thigh"), ReferenceSkeleton::default().length("l_thigh"));
        assert!(ReferenceSkeleton::from_toml_str("[bones]\ntail = 5.0\n").is_err());
        assert!(ReferenceSkeleton::from_toml_str("[bones]\nr_thigh = 0.0\n").is_err());
    }

    #[test]
    fn invisible_2d_joints_sit_at_origin() {
        let mut vis = [true; NUM_JOINTS];
        vis[3] = false;
        let p = CanonicalPose2D::new([[5.0, 7.0]; NUM_JOINTS], vis);
        assert_eq!(p.coords[3], [0.0, 0.0]);
        assert_eq!(p.coords[4], [5.0, 7.0]);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bone_length_symmetric_and_translation_invariant(
            a in prop::array::uniform3(-1e3f64..1e3),
            b in prop::array::uniform3(-1e3f64..1e3),
            t in prop::array::uniform3(-1e3f64..1e3),
        ) {
            let e = BoneEdge { parent: 0, child: 1 };
            let rev = BoneEdge { parent: 1, child: 0 };
            let p = pose_with(a, b);
            let l = bone_length(&p, e).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l, bone_length(&p, rev).unwrap());
            let moved = bone_length(&p.translated(t), e).unwrap();
            prop_assert!((moved - l).abs() <= 1e-9 * (1.0 + l));
        }
    }
}
