//! Conversion of per-dataset annotations into the canonical 16-joint format.
//!
//! Each source format is described by a joint table: the native joint
//! names, in native order, and which canonical joint each one copies into.
//! Joints the source lacks are inferred by per-dataset rules (shoulder
//! midpoints, nearest spine joint, substitutions). Missing coordinates
//! (`null` in JSON, NaN in memory) become invisible joints at `(0, 0)`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::skeleton::{dist3, CanonicalPose2D, CanonicalPose3D, Frame, Joint, NUM_JOINTS, ROOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "MPII")]
    Mpii,
    #[serde(rename = "LSP")]
    Lsp,
    #[serde(rename = "FLIC")]
    Flic,
    #[serde(rename = "H36M")]
    H36m,
    #[serde(rename = "MPII3D")]
    Mpii3d,
    #[serde(rename = "OP")]
    Op,
}

impl DatasetId {
    pub const ALL: [DatasetId; 6] = [
        DatasetId::Mpii,
        DatasetId::Lsp,
        DatasetId::Flic,
        DatasetId::H36m,
        DatasetId::Mpii3d,
        DatasetId::Op,
    ];

    pub fn is_3d(self) -> bool {
        matches!(self, DatasetId::H36m | DatasetId::Mpii3d | DatasetId::Op)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mpii => "MPII",
            DatasetId::Lsp => "LSP",
            DatasetId::Flic => "FLIC",
            DatasetId::H36m => "H36M",
            DatasetId::Mpii3d => "MPII3D",
            DatasetId::Op => "OP",
        }
    }

    pub fn parse(s: &str) -> Result<DatasetId> {
        DatasetId::ALL
            .iter()
            .copied()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unsupported(format!("unknown dataset `{s}`; expected one of MPII, LSP, FLIC, H36M, MPII3D, OP")))
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Source-native names, in native order, with the canonical joint each
/// copies into (`None` for joints that are dropped or only used by an
/// inference rule).
pub type JointTable = &'static [(&'static str, Option<Joint>)];

use Joint::*;

pub const MPII_JOINTS: JointTable = &[
    ("r_ankle", Some(RAnkle)),
    ("r_knee", Some(RKnee)),
    ("r_hip", Some(RHip)),
    ("l_hip", Some(LHip)),
    ("l_knee", Some(LKnee)),
    ("l_ankle", Some(LAnkle)),
    ("pelvis", Some(Pelvis)),
    ("thorax", Some(Thorax)),
    ("upper_neck", Some(Neck)),
    ("head_top", Some(HeadTop)),
    ("r_wrist", Some(RWrist)),
    ("r_elbow", Some(RElbow)),
    ("r_shoulder", Some(RShoulder)),
    ("l_shoulder", Some(LShoulder)),
    ("l_elbow", Some(LElbow)),
    ("l_wrist", Some(LWrist)),
];

/// LSP lacks thorax and pelvis; both are midpoints of the shoulder and hip pairs.
pub const LSP_JOINTS: JointTable = &[
    ("r_ankle", Some(RAnkle)),
    ("r_knee", Some(RKnee)),
    ("r_hip", Some(RHip)),
    ("l_hip", Some(LHip)),
    ("l_knee", Some(LKnee)),
    ("l_ankle", Some(LAnkle)),
    ("r_wrist", Some(RWrist)),
    ("r_elbow", Some(RElbow)),
    ("r_shoulder", Some(RShoulder)),
    ("l_shoulder", Some(LShoulder)),
    ("l_elbow", Some(LElbow)),
    ("l_wrist", Some(LWrist)),
    ("neck", Some(Neck)),
    ("head_top", Some(HeadTop)),
];

/// FLIC-full's 29 joints. Thorax, neck and head top come from the middle
/// torso, middle shoulder and nose.
pub const FLIC_JOINTS: JointTable = &[
    ("lsho", Some(LShoulder)),
    ("lelb", Some(LElbow)),
    ("lwri", Some(LWrist)),
    ("rsho", Some(RShoulder)),
    ("relb", Some(RElbow)),
    ("rwri", Some(RWrist)),
    ("lhip", Some(LHip)),
    ("lkne", Some(LKnee)),
    ("lank", Some(LAnkle)),
    ("rhip", Some(RHip)),
    ("rkne", Some(RKnee)),
    ("rank", Some(RAnkle)),
    ("leye", None),
    ("reye", None),
    ("lear", None),
    ("rear", None),
    ("nose", Some(HeadTop)),
    ("msho", Some(Neck)),
    ("mhip", Some(Pelvis)),
    ("mear", None),
    ("mtorso", Some(Thorax)),
    ("mluarm", None),
    ("mruarm", None),
    ("mllarm", None),
    ("mrlarm", None),
    ("mluleg", None),
    ("mruleg", None),
    ("mllleg", None),
    ("mrlleg", None),
];

/// Human3.6M's 17 joints; its spine joint stands in for the thorax.
pub const H36M_JOINTS: JointTable = &[
    ("hip", Some(Pelvis)),
    ("r_hip", Some(RHip)),
    ("r_knee", Some(RKnee)),
    ("r_foot", Some(RAnkle)),
    ("l_hip", Some(LHip)),
    ("l_knee", Some(LKnee)),
    ("l_foot", Some(LAnkle)),
    ("spine", Some(Thorax)),
    ("neck", Some(Neck)),
    ("nose", None),
    ("head", Some(HeadTop)),
    ("l_shoulder", Some(LShoulder)),
    ("l_elbow", Some(LElbow)),
    ("l_wrist", Some(LWrist)),
    ("r_shoulder", Some(RShoulder)),
    ("r_elbow", Some(RElbow)),
    ("r_wrist", Some(RWrist)),
];

/// MPI-INF-3DHP training format (28 joints). The thorax is whichever
/// `spine*` joint lies nearest the shoulder midpoint.
pub const MPII3D_TRAIN_JOINTS: JointTable = &[
    ("spine3", None),
    ("spine4", None),
    ("spine2", None),
    ("spine", None),
    ("pelvis", Some(Pelvis)),
    ("neck", Some(Neck)),
    ("head", None),
    ("head_top", Some(HeadTop)),
    ("left_clavicle", None),
    ("left_shoulder", Some(LShoulder)),
    ("left_elbow", Some(LElbow)),
    ("left_wrist", Some(LWrist)),
    ("left_hand", None),
    ("right_clavicle", None),
    ("right_shoulder", Some(RShoulder)),
    ("right_elbow", Some(RElbow)),
    ("right_wrist", Some(RWrist)),
    ("right_hand", None),
    ("left_hip", Some(LHip)),
    ("left_knee", Some(LKnee)),
    ("left_ankle", Some(LAnkle)),
    ("left_foot", None),
    ("left_toe", None),
    ("right_hip", Some(RHip)),
    ("right_knee", Some(RKnee)),
    ("right_ankle", Some(RAnkle)),
    ("right_foot", None),
    ("right_toe", None),
];

/// MPI-INF-3DHP test format (17 joints).
pub const MPII3D_TEST_JOINTS: JointTable = &[
    ("head_top", Some(HeadTop)),
    ("neck", Some(Neck)),
    ("right_shoulder", Some(RShoulder)),
    ("right_elbow", Some(RElbow)),
    ("right_wrist", Some(RWrist)),
    ("left_shoulder", Some(LShoulder)),
    ("left_elbow", Some(LElbow)),
    ("left_wrist", Some(LWrist)),
    ("right_hip", Some(RHip)),
    ("right_knee", Some(RKnee)),
    ("right_ankle", Some(RAnkle)),
    ("left_hip", Some(LHip)),
    ("left_knee", Some(LKnee)),
    ("left_ankle", Some(LAnkle)),
    ("pelvis", Some(Pelvis)),
    ("spine", None),
    ("head", None),
];

/// Occlusion Person's 15 joints. Thorax is the shoulder midpoint and the
/// head top reuses the neck.
pub const OP_JOINTS: JointTable = &[
    ("pelvis", Some(Pelvis)),
    ("r_hip", Some(RHip)),
    ("r_knee", Some(RKnee)),
    ("r_ankle", Some(RAnkle)),
    ("l_hip", Some(LHip)),
    ("l_knee", Some(LKnee)),
    ("l_ankle", Some(LAnkle)),
    ("belly", None),
    ("neck", Some(Neck)),
    ("l_shoulder", Some(LShoulder)),
    ("l_elbow", Some(LElbow)),
    ("l_wrist", Some(LWrist)),
    ("r_shoulder", Some(RShoulder)),
    ("r_elbow", Some(RElbow)),
    ("r_wrist", Some(RWrist)),
];

pub fn joint_table(dataset: DatasetId, split: Split) -> JointTable {
    match (dataset, split) {
        (DatasetId::Mpii, _) => MPII_JOINTS,
        (DatasetId::Lsp, _) => LSP_JOINTS,
        (DatasetId::Flic, _) => FLIC_JOINTS,
        (DatasetId::H36m, _) => H36M_JOINTS,
        (DatasetId::Mpii3d, Split::Train) => MPII3D_TRAIN_JOINTS,
        (DatasetId::Mpii3d, Split::Test) => MPII3D_TEST_JOINTS,
        (DatasetId::Op, _) => OP_JOINTS,
    }
}

/// One named source joint. `null` coordinates mark missing annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAnnotation {
    pub name: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

impl JointAnnotation {
    pub fn new_2d(name: &str, p: [f64; 2]) -> Self {
        JointAnnotation {
            name: name.to_string(),
            x: finite(p[0]),
            y: finite(p[1]),
            z: None,
        }
    }

    pub fn new_3d(name: &str, p: [f64; 3]) -> Self {
        JointAnnotation {
            name: name.to_string(),
            x: finite(p[0]),
            y: finite(p[1]),
            z: finite(p[2]),
        }
    }

    pub fn missing(name: &str) -> Self {
        JointAnnotation {
            name: name.to_string(),
            x: None,
            y: None,
            z: None,
        }
    }

    fn is_missing(&self, dims: usize) -> bool {
        let coords = [self.x, self.y, self.z];
        coords[..dims].iter().any(|c| !matches!(c, Some(v) if v.is_finite()))
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// A source-format annotation record, one per JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub dataset: DatasetId,
    #[serde(default)]
    pub split: Split,
    pub image: String,
    pub joints: Vec<JointAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
}

impl RawRecord {
    fn dims(&self) -> usize {
        if self.dataset.is_3d() {
            3
        } else {
            2
        }
    }

    /// Number of joints whose coordinates are missing.
    pub fn missing_count(&self) -> usize {
        let dims = self.dims();
        self.joints.iter().filter(|j| j.is_missing(dims)).count()
    }

    fn check(&self, expected: DatasetId) -> Result<()> {
        if self.dataset != expected {
            return Err(Error::Unsupported(format!(
                "{} converter given a {} record",
                expected, self.dataset
            )));
        }
        let table = joint_table(self.dataset, self.split);
        let allowed: Vec<usize> = if self.dataset == DatasetId::Mpii3d {
            vec![MPII3D_TRAIN_JOINTS.len(), MPII3D_TEST_JOINTS.len()]
        } else {
            vec![table.len()]
        };
        if !allowed.contains(&self.joints.len()) {
            return Err(Error::JointCount {
                dataset: self.dataset.to_string(),
                expected: allowed.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" or "),
                found: self.joints.len(),
            });
        }
        Ok(())
    }

    fn table(&self) -> JointTable {
        if self.dataset == DatasetId::Mpii3d {
            // Either split may be exported; the joint count identifies it.
            if self.joints.len() == MPII3D_TRAIN_JOINTS.len() {
                MPII3D_TRAIN_JOINTS
            } else {
                MPII3D_TEST_JOINTS
            }
        } else {
            joint_table(self.dataset, self.split)
        }
    }

    fn get(&self, name: &str) -> Result<Option<[f64; 3]>> {
        let joint = self
            .joints
            .iter()
            .find(|j| j.name == name)
            .ok_or_else(|| Error::MissingJoint {
                dataset: self.dataset.to_string(),
                joint: name.to_string(),
            })?;
        if joint.is_missing(self.dims()) {
            return Ok(None);
        }
        Ok(Some([joint.x.unwrap(), joint.y.unwrap(), joint.z.unwrap_or(0.0)]))
    }
}

fn midpoint(a: Option<[f64; 3]>, b: Option<[f64; 3]>) -> Option<[f64; 3]> {
    let (a, b) = (a?, b?);
    Some([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0])
}

/// Copies every mapped joint, returning 3D slots (z = 0 for 2D sources).
fn copy_mapped(record: &RawRecord) -> Result<[Option<[f64; 3]>; NUM_JOINTS]> {
    let mut out = [None; NUM_JOINTS];
    for (name, target) in record.table().iter() {
        let value = record.get(name)?;
        if let Some(j) = target {
            out[j.index()] = value;
        }
    }
    Ok(out)
}

fn to_pose2d(slots: [Option<[f64; 3]>; NUM_JOINTS]) -> CanonicalPose2D {
    let mut coords = [[0.0; 2]; NUM_JOINTS];
    let mut vis = [false; NUM_JOINTS];
    for (j, s) in slots.iter().enumerate() {
        if let Some(p) = s {
            coords[j] = [p[0], p[1]];
            vis[j] = true;
        }
    }
    CanonicalPose2D::new(coords, vis)
}

fn to_pose3d(slots: [Option<[f64; 3]>; NUM_JOINTS]) -> CanonicalPose3D {
    let mut pose = CanonicalPose3D::new([[0.0; 3]; NUM_JOINTS], Frame::CameraMm);
    for (j, s) in slots.iter().enumerate() {
        match s {
            Some(p) => pose.coords[j] = *p,
            None => pose.visibility[j] = false,
        }
    }
    pose
}

pub fn convert_mpii(record: &RawRecord) -> Result<CanonicalPose2D> {
    record.check(DatasetId::Mpii)?;
    Ok(to_pose2d(copy_mapped(record)?))
}

/// LSP (14 joints) to canonical: thorax and pelvis are midpoints of the
/// shoulder and hip pairs.
pub fn convert_lsp(record: &RawRecord) -> Result<CanonicalPose2D> {
    record.check(DatasetId::Lsp)?;
    let mut slots = copy_mapped(record)?;
    slots[Thorax.index()] = midpoint(record.get("l_shoulder")?, record.get("r_shoulder")?);
    slots[Pelvis.index()] = midpoint(record.get("l_hip")?, record.get("r_hip")?);
    Ok(to_pose2d(slots))
}

/// FLIC-full (29 joints) to canonical. NaN coordinates become invisible
/// joints at the origin; the 13 unmapped joints are dropped.
pub fn convert_flic(record: &RawRecord) -> Result<CanonicalPose2D> {
    record.check(DatasetId::Flic)?;
    Ok(to_pose2d(copy_mapped(record)?))
}

/// Human3.6M (17 joints) to canonical, thorax taken from the spine joint.
pub fn convert_h36m(record: &RawRecord) -> Result<CanonicalPose3D> {
    record.check(DatasetId::H36m)?;
    Ok(to_pose3d(copy_mapped(record)?))
}

/// MPI-INF-3DHP (28 train / 17 test joints) to canonical. The thorax is the
/// `spine*` joint nearest to the shoulder midpoint.
pub fn convert_mpii3d(record: &RawRecord) -> Result<CanonicalPose3D> {
    record.check(DatasetId::Mpii3d)?;
    let mut slots = copy_mapped(record)?;
    let spines: Vec<[f64; 3]> = record
        .table()
        .iter()
        .filter(|(n, _)| n.starts_with("spine"))
        .filter_map(|(n, _)| record.get(n).ok().flatten())
        .collect();
    if spines.is_empty() {
        return Err(Error::MissingJoint {
            dataset: record.dataset.to_string(),
            joint: "spine".into(),
        });
    }
    let thorax = match midpoint(slots[LShoulder.index()], slots[RShoulder.index()]) {
        Some(mid) => spines
            .iter()
            .copied()
            .min_by(|a, b| dist3(*a, mid).total_cmp(&dist3(*b, mid)))
            .unwrap(),
        // Without both shoulders the topmost listed spine joint is used.
        None => spines[0],
    };
    slots[Thorax.index()] = Some(thorax);
    Ok(to_pose3d(slots))
}

/// Occlusion Person (15 joints) to canonical: thorax is the shoulder
/// midpoint and the head top copies the neck.
pub fn convert_op(record: &RawRecord) -> Result<CanonicalPose3D> {
    record.check(DatasetId::Op)?;
    let mut slots = copy_mapped(record)?;
    let (l, r) = (record.get("l_shoulder")?, record.get("r_shoulder")?);
    let neck = record.get("neck")?;
    if l.is_none() || r.is_none() {
        return Err(Error::MissingJoint {
            dataset: "OP".into(),
            joint: "shoulder".into(),
        });
    }
    if neck.is_none() {
        return Err(Error::MissingJoint {
            dataset: "OP".into(),
            joint: "neck".into(),
        });
    }
    slots[Thorax.index()] = midpoint(l, r);
    slots[HeadTop.index()] = neck;
    Ok(to_pose3d(slots))
}

/// Subtracts the pelvis from every joint.
pub fn root_align(pose: &CanonicalPose3D) -> CanonicalPose3D {
    let r = pose.root();
    let mut out = pose.translated([-r[0], -r[1], -r[2]]);
    out.coords[ROOT.index()] = [0.0; 3];
    if out.frame == Frame::CameraMm {
        out.frame = Frame::RootAlignedMm;
    }
    out
}

/// Least-squares scale (pixels per mm) between a root-aligned 3D pose's xy
/// and the root-centered 2D pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScale {
    pub value: f64,
    /// Set when the fit came out non-positive; such samples are excluded
    /// from training.
    pub negative: bool,
}

/// Solves `s = Σ ⟨p2d_j − p2d_root, xy_j⟩ / Σ ‖xy_j‖²` over visible joints.
///
/// ```
/// use hpe3d::harmonize::solve_depth_scale;
/// use hpe3d::skeleton::{CanonicalPose2D, CanonicalPose3D, Frame};
/// let mut p3 = [[0.0; 3]; 16];
/// let mut p2 = [[0.0; 2]; 16];
/// p3[0] = [100.0, 0.0, 0.0];
/// p3[1] = [0.0, 100.0, 0.0];
/// p2[0] = [50.0, 0.0];
/// p2[1] = [0.0, 50.0];
/// let s = solve_depth_scale(
///     &CanonicalPose3D::new(p3, Frame::RootAlignedMm),
///     &CanonicalPose2D::all_visible(p2),
/// ).unwrap();
/// assert_eq!(s.value, 0.5);
/// ```
pub fn solve_depth_scale(pose3d: &CanonicalPose3D, pose2d: &CanonicalPose2D) -> Result<DepthScale> {
    if pose3d.frame != Frame::RootAlignedMm {
        return Err(Error::FrameMismatch("depth scale needs a root-aligned pose".into()));
    }
    let r = ROOT.index();
    if !pose2d.visibility[r] {
        return Err(Error::DegenerateScale);
    }
    let root2d = pose2d.coords[r];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used = 0;
    for j in (0..NUM_JOINTS).filter(|&j| j != r) {
        if !(pose2d.visibility[j] && pose3d.visibility[j]) {
            continue;
        }
        let [x, y, _] = pose3d.coords[j];
        let du = pose2d.coords[j][0] - root2d[0];
        let dv = pose2d.coords[j][1] - root2d[1];
        num += du * x + dv * y;
        den += x * x + y * y;
        used += 1;
    }
    if used < 2 {
        return Err(Error::NoVisibleJoints);
    }
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::DegenerateScale);
    }
    let value = num / den;
    Ok(DepthScale {
        value,
        negative: !(value > 0.0),
    })
}

/// Depth labels `z_j * s` in image-scaled units.
pub fn scale_depth(pose3d: &CanonicalPose3D, s: f64) -> Result<[f64; NUM_JOINTS]> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonPositiveScale(s));
    }
    if pose3d.frame != Frame::RootAlignedMm {
        return Err(Error::FrameMismatch("depth labels need a root-aligned pose".into()));
    }
    let mut out = [0.0; NUM_JOINTS];
    for (d, c) in out.iter_mut().zip(pose3d.coords.iter()) {
        *d = c[2] * s;
    }
    Ok(out)
}

/// Which training set a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleSource {
    #[serde(rename = "set_2d")]
    Set2d,
    #[serde(rename = "set_3d")]
    Set3d,
}

/// A sample in canonical form, ready for training or evaluation.
///
/// Samples from 3D datasets carry the root-aligned pose, the image-scaled
/// depth labels, and the scale used to produce them. A 3D sample whose
/// scale could not be solved is kept but marked `excluded` (and has no
/// depth labels).
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizedSample {
    pub source: SampleSource,
    pub pose2d: CanonicalPose2D,
    pub pose3d: Option<CanonicalPose3D>,
    pub depth: Option<[f64; NUM_JOINTS]>,
    pub scale: Option<f64>,
    pub image: String,
    pub excluded: bool,
}

impl HarmonizedSample {
    pub fn is_trainable(&self) -> bool {
        !self.excluded
            && match self.source {
                SampleSource::Set2d => true,
                SampleSource::Set3d => self.pose3d.is_some() && self.depth.is_some() && self.scale.is_some(),
            }
    }
}

/// Converts one record into a sample. 3D records need a camera, either on
/// the record or passed as `camera` (which wins), to produce the 2D pose.
pub fn harmonize_record(record: &RawRecord, camera: Option<&Camera>) -> Result<HarmonizedSample> {
    let image = record.image.clone();
    let pose3d_cam = match record.dataset {
        DatasetId::Mpii | DatasetId::Lsp | DatasetId::Flic => {
            let pose2d = match record.dataset {
                DatasetId::Mpii => convert_mpii(record)?,
                DatasetId::Lsp => convert_lsp(record)?,
                _ => convert_flic(record)?,
            };
            return Ok(HarmonizedSample {
                source: SampleSource::Set2d,
                pose2d,
                pose3d: None,
                depth: None,
                scale: None,
                image,
                excluded: false,
            });
        }
        DatasetId::H36m => convert_h36m(record)?,
        DatasetId::Mpii3d => convert_mpii3d(record)?,
        DatasetId::Op => convert_op(record)?,
    };
    let camera = camera.or(record.camera.as_ref()).ok_or(Error::MissingCamera)?;
    let pose2d = camera.project(&pose3d_cam)?;
    let mut aligned = root_align(&pose3d_cam);
    aligned.visibility = pose2d.visibility;
    let mut sample = HarmonizedSample {
        source: SampleSource::Set3d,
        pose2d,
        pose3d: Some(aligned),
        depth: None,
        scale: None,
        image,
        excluded: true,
    };
    match solve_depth_scale(&aligned, &pose2d) {
        Ok(s) if !s.negative => {
            sample.depth = Some(scale_depth(&aligned, s.value)?);
            sample.scale = Some(s.value);
            sample.excluded = false;
        }
        Ok(_) | Err(Error::DegenerateScale) | Err(Error::NoVisibleJoints) => {}
        Err(e) => return Err(e),
    }
    Ok(sample)
}

// ---- JSON-lines wire formats ----

#[derive(Serialize, Deserialize)]
struct SampleLine {
    source: SampleSource,
    pose2d: Vec<(f64, f64, u8)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    image: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    excluded: bool,
}

fn fixed<T: Copy, const N: usize>(v: &[T], what: &'static str) -> Result<[T; N]> {
    v.try_into().map_err(|_| Error::DimensionMismatch {
        what,
        expected: N.to_string(),
        found: v.len().to_string(),
    })
}

impl Serialize for HarmonizedSample {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SampleLine {
            source: self.source,
            pose2d: self
                .pose2d
                .coords
                .iter()
                .zip(self.pose2d.visibility.iter())
                .map(|(c, &v)| (c[0], c[1], v as u8))
                .collect(),
            pose3d: self.pose3d.map(|p| p.coords.to_vec()),
            depth: self.depth.map(|d| d.to_vec()),
            scale: self.scale,
            image: self.image.clone(),
            excluded: self.excluded,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HarmonizedSample {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let line = SampleLine::deserialize(deserializer)?;
        let raw2d: [(f64, f64, u8); NUM_JOINTS] = fixed(&line.pose2d, "pose2d joints").map_err(D::Error::custom)?;
        let pose2d = CanonicalPose2D::new(raw2d.map(|(x, y, _)| [x, y]), raw2d.map(|(_, _, v)| v != 0));
        let pose3d = match line.pose3d {
            Some(p) => {
                let coords: [[f64; 3]; NUM_JOINTS] = fixed(&p, "pose3d joints").map_err(D::Error::custom)?;
                Some(CanonicalPose3D {
                    coords,
                    frame: Frame::RootAlignedMm,
                    visibility: pose2d.visibility,
                })
            }
            None => None,
        };
        let depth = match line.depth {
            Some(d) => Some(fixed(&d, "depth labels").map_err(D::Error::custom)?),
            None => None,
        };
        Ok(HarmonizedSample {
            source: line.source,
            pose2d,
            pose3d,
            depth,
            scale: line.scale,
            image: line.image,
            excluded: line.excluded,
        })
    }
}

/// Parses JSON lines, skipping blank lines; errors carry 1-based line numbers.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
