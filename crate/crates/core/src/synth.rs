//! Synthetic poses, images and source-format records.
//!
//! Poses are built kinematically from a bone-length profile: every bone
//! rotates its rest direction by a small random rotation relative to its
//! parent, so bone lengths match the profile exactly. Images are stick
//! figures on a noise background. Stroke color encodes the limb (red: body
//! side, blue: segment) and green encodes depth, nearer being brighter, so
//! a small network can recover both 2D locations and relative depth.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::harmonize::{
    harmonize_record, joint_table, DatasetId, HarmonizedSample, JointAnnotation, RawRecord, Split,
};
use crate::skeleton::{
    rest_direction, CanonicalPose2D, CanonicalPose3D, Frame, Joint, ReferenceSkeleton, BONES, NUM_JOINTS, ROOT,
};

/// Intrinsics plus the distance at which the subject's pelvis is placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_offset_mm: f64,
}

impl SynthCamera {
    /// A camera that frames a standing adult in a square image of `size` pixels.
    pub fn for_image(size: usize) -> Self {
        let f = 150.0 * size as f64 / 64.0;
        SynthCamera {
            fx: f,
            fy: f,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            depth_offset_mm: 5000.0,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.fx, self.fy, self.cx, self.cy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_samples: usize,
    pub bone_length_profile: ReferenceSkeleton,
    /// Standard deviation (radians) of each limb's rotation relative to its
    /// parent; torso, clavicle and head bones use a third of it.
    pub pose_jitter: f64,
    /// Whole-body rotation about the vertical axis is uniform in ±this (radians).
    pub yaw_range: f64,
    /// Standard deviation (mm) of the pelvis position around its nominal spot.
    pub root_jitter_mm: f64,
    pub camera: SynthCamera,
    pub image_size: usize,
    /// Probability that a FLIC record reports a joint as NaN.
    pub flic_nan_probability: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            n_samples: 100,
            bone_length_profile: ReferenceSkeleton::default(),
            pose_jitter: 0.35,
            yaw_range: 0.6,
            root_jitter_mm: 60.0,
            camera: SynthCamera::for_image(64),
            image_size: 64,
            flic_nan_probability: 0.1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, &len) in &self.bone_length_profile.bones {
            if !(len > 0.0) {
                return Err(Error::ZeroLengthBone { bone: name.clone() });
            }
        }
        let extent: f64 = self.bone_length_profile.bones.values().sum();
        if self.camera.depth_offset_mm <= extent {
            return Err(Error::InvalidConfig(format!(
                "depth offset {} mm cannot keep a {} mm skeleton in front of the camera",
                self.camera.depth_offset_mm, extent
            )));
        }
        if self.image_size == 0 || !(0.0..=1.0).contains(&self.flic_nan_probability) {
            return Err(Error::InvalidConfig("bad image size or NaN probability".into()));
        }
        Ok(())
    }

    /// Generator for sample `index`; each sample owns its own ChaCha stream.
    pub fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Rotation `Rz(c) · Ry(b) · Rx(a)`.
fn euler(a: f64, b: f64, c: f64) -> Mat3 {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn is_limb(bone: &str) -> bool {
    bone.ends_with("thigh") || bone.ends_with("shank") || bone.ends_with("arm")
}

/// A camera-frame pose with the profile's bone lengths and jittered angles.
pub fn generate_pose3d(params: &SynthParams, rng: &mut impl Rng) -> CanonicalPose3D {
    let sigma = params.pose_jitter.max(0.0);
    let limb = Normal::new(0.0, sigma).expect("finite sigma");
    let trunk = Normal::new(0.0, sigma / 3.0).expect("finite sigma");
    let yaw = if params.yaw_range > 0.0 {
        rng.random_range(-params.yaw_range..=params.yaw_range)
    } else {
        0.0
    };
    let global = euler(0.0, yaw, 0.0);

    let mut rot = [IDENTITY; NUM_JOINTS];
    let mut coords = [[0.0; 3]; NUM_JOINTS];
    rot[ROOT.index()] = global;
    for (name, edge) in BONES.iter() {
        let dist = if is_limb(name) { &limb } else { &trunk };
        let local = euler(dist.sample(rng), dist.sample(rng), dist.sample(rng));
        let r = mat_mul(&rot[edge.parent], &local);
        let dir = mat_vec(&r, rest_direction(name));
        let len = params.bone_length_profile.length(name);
        let p = coords[edge.parent];
        coords[edge.child] = [p[0] + dir[0] * len, p[1] + dir[1] * len, p[2] + dir[2] * len];
        rot[edge.child] = r;
    }

    let jitter = Normal::new(0.0, params.root_jitter_mm.max(0.0)).expect("finite jitter");
    // centers the rest pose vertically: the feet hang lower than the head rises
    let root = [
        jitter.sample(rng),
        -48.0 + jitter.sample(rng),
        params.camera.depth_offset_mm,
    ];
    CanonicalPose3D::new(coords, Frame::RootAlignedMm).translated(root).with_frame(Frame::CameraMm)
}

impl CanonicalPose3D {
    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }
}

/// Pinhole projection `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project_to_2d(pose3d: &CanonicalPose3D, camera: &Camera) -> Result<CanonicalPose2D> {
    camera.project(pose3d)
}

/// A canonical pose to be re-expressed in a source format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourcePose {
    Pose2D(CanonicalPose2D),
    /// A camera-frame pose.
    Pose3D(CanonicalPose3D),
}

fn mid(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Position of a source joint that has no canonical counterpart, derived
/// from the canonical joints around it.
fn synthesize(name: &str, c: &[[f64; 3]; NUM_JOINTS], is_3d: bool) -> [f64; 3] {
    let j = |joint: Joint| c[joint.index()];
    let head = mid(j(Joint::Neck), j(Joint::HeadTop), 0.5);
    let side = mid(j(Joint::RShoulder), j(Joint::LShoulder), 0.0);
    let across = [
        (j(Joint::LShoulder)[0] - side[0]) * 0.15,
        (j(Joint::LShoulder)[1] - side[1]) * 0.15,
        (j(Joint::LShoulder)[2] - side[2]) * 0.15,
    ];
    let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
    let foot = |ankle: Joint, knee: Joint| {
        let a = j(ankle);
        let k = j(knee);
        let fwd = if is_3d { -0.15 } else { 0.0 };
        add(a, [(a[0] - k[0]) * 0.1, (a[1] - k[1]) * 0.1, (a[1] - k[1]).abs() * fwd])
    };
    match name {
        "leye" => add(mid(head, j(Joint::HeadTop), 0.3), across),
        "reye" => add(mid(head, j(Joint::HeadTop), 0.3), neg(across)),
        "lear" => add(head, mid([0.0; 3], across, 1.5)),
        "rear" => add(head, neg(mid([0.0; 3], across, 1.5))),
        "mear" | "nose" | "head" => head,
        "mluarm" => mid(j(Joint::LShoulder), j(Joint::LElbow), 0.5),
        "mruarm" => mid(j(Joint::RShoulder), j(Joint::RElbow), 0.5),
        "mllarm" => mid(j(Joint::LElbow), j(Joint::LWrist), 0.5),
        "mrlarm" => mid(j(Joint::RElbow), j(Joint::RWrist), 0.5),
        "mluleg" => mid(j(Joint::LHip), j(Joint::LKnee), 0.5),
        "mruleg" => mid(j(Joint::RHip), j(Joint::RKnee), 0.5),
        "mllleg" => mid(j(Joint::LKnee), j(Joint::LAnkle), 0.5),
        "mrlleg" => mid(j(Joint::RKnee), j(Joint::RAnkle), 0.5),
        "spine" => mid(j(Joint::Pelvis), j(Joint::Thorax), 0.25),
        "spine2" => mid(j(Joint::Pelvis), j(Joint::Thorax), 0.5),
        "spine3" => mid(j(Joint::Pelvis), j(Joint::Thorax), 0.75),
        "belly" => mid(j(Joint::Pelvis), j(Joint::Thorax), 0.5),
        "left_clavicle" => mid(j(Joint::Thorax), j(Joint::LShoulder), 0.5),
        "right_clavicle" => mid(j(Joint::Thorax), j(Joint::RShoulder), 0.5),
        "left_hand" => mid(j(Joint::LElbow), j(Joint::LWrist), 1.3),
        "right_hand" => mid(j(Joint::RElbow), j(Joint::RWrist), 1.3),
        "left_foot" => foot(Joint::LAnkle, Joint::LKnee),
        "right_foot" => foot(Joint::RAnkle, Joint::RKnee),
        "left_toe" => mid(j(Joint::LAnkle), foot(Joint::LAnkle, Joint::LKnee), 2.0),
        "right_toe" => mid(j(Joint::RAnkle), foot(Joint::RAnkle, Joint::RKnee), 2.0),
        _ => unreachable!("no synthesis rule for `{name}`"),
    }
}

/// Re-expresses a canonical pose in `target`'s native joint naming.
///
/// Joints the format keeps are copied exactly; joints it lacks are
/// synthesized from their neighbours. The MPI-INF-3DHP spine chain is laid
/// along pelvis→thorax with the top joint (`spine4`, or `spine` in the test
/// split) placed on the thorax. FLIC joints are reported missing with
/// probability `flic_nan_probability`.
pub fn emit_source_format(
    pose: &SourcePose,
    target: DatasetId,
    split: Split,
    image: &str,
    flic_nan_probability: f64,
    rng: &mut impl Rng,
) -> Result<RawRecord> {
    let (coords, vis, is_3d) = match (pose, target.is_3d()) {
        (SourcePose::Pose2D(p), false) => (p.coords.map(|c| [c[0], c[1], 0.0]), p.visibility, false),
        (SourcePose::Pose3D(p), true) => {
            if p.frame != Frame::CameraMm {
                return Err(Error::FrameMismatch("3D formats are emitted from camera-frame poses".into()));
            }
            (p.coords, p.visibility, true)
        }
        (SourcePose::Pose2D(_), true) => {
            return Err(Error::Unsupported(format!("{target} needs a 3D pose, got a 2D pose")))
        }
        (SourcePose::Pose3D(_), false) => {
            return Err(Error::Unsupported(format!("{target} is a 2D format; project the pose first")))
        }
    };
    let mpii3d_top_spine = match split {
        Split::Train => "spine4",
        Split::Test => "spine",
    };
    let joints = joint_table(target, split)
        .iter()
        .map(|(name, canonical)| {
            let (p, visible) = match canonical {
                Some(j) => (coords[j.index()], vis[j.index()]),
                None if target == DatasetId::Mpii3d && *name == mpii3d_top_spine => {
                    (coords[Joint::Thorax.index()], vis[Joint::Thorax.index()])
                }
                None => (synthesize(name, &coords, is_3d), true),
            };
            let dropped = target == DatasetId::Flic && rng.random_bool(flic_nan_probability);
            if !visible || dropped {
                JointAnnotation::missing(name)
            } else if is_3d {
                JointAnnotation::new_3d(name, p)
            } else {
                JointAnnotation::new_2d(name, [p[0], p[1]])
            }
        })
        .collect();
    Ok(RawRecord {
        dataset: target,
        split,
        image: image.to_string(),
        joints,
        camera: None,
    })
}

/// `(red, blue)` stroke code of each bone: red marks the body side, blue
/// the segment along the limb chain.
fn bone_color(name: &str) -> (f64, f64) {
    let red = if name.starts_with("r_") {
        1.0
    } else if name.starts_with("l_") {
        0.45
    } else {
        0.75
    };
    let blue = if name.ends_with("thigh") || name.ends_with("upper_arm") {
        1.0
    } else if name.ends_with("shank") || name.ends_with("forearm") {
        0.55
    } else if name.ends_with("pelvis") || name.ends_with("clavicle") {
        0.8
    } else {
        0.3
    };
    (red, blue)
}

fn pose_seed(pose: &CanonicalPose2D, depth: Option<&[f64; NUM_JOINTS]>) -> u64 {
    // FNV-1a over the coordinate bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (c, v) in pose.coords.iter().zip(pose.visibility.iter()) {
        eat(c[0].to_bits());
        eat(c[1].to_bits());
        eat(*v as u64);
    }
    if let Some(d) = depth {
        d.iter().for_each(|z| eat(z.to_bits()));
    }
    h
}

/// Image-scaled depth (same units as the 2D pose) mapped to the green channel.
fn depth_shade(z: f64, size: usize) -> f64 {
    (0.55 - z / (20.0 * size as f64 / 64.0)).clamp(0.05, 1.0)
}

/// Draws the skeleton as anti-aliased strokes over seeded noise.
///
/// `depth` holds root-relative depths in the same pixel units as the pose;
/// without it every stroke gets mid-level green. The output depends only on
/// the arguments.
pub fn render_pose_image(pose2d: &CanonicalPose2D, depth: Option<&[f64; NUM_JOINTS]>, image_size: usize) -> RgbImage {
    let size = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(pose2d, depth));
    let mut canvas: Vec<[f64; 3]> = (0..size * size)
        .map(|_| {
            [
                rng.random_range(0.0..0.25),
                rng.random_range(0.0..0.25),
                rng.random_range(0.0..0.25),
            ]
        })
        .collect();
    let half_width = 1.0 * size as f64 / 64.0;
    for (name, edge) in BONES.iter() {
        if !(pose2d.visibility[edge.parent] && pose2d.visibility[edge.child]) {
            continue;
        }
        let (red, blue) = bone_color(name);
        let a = pose2d.coords[edge.parent];
        let b = pose2d.coords[edge.child];
        let (za, zb) = depth.map_or((0.0, 0.0), |d| (d[edge.parent], d[edge.child]));
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let reach = half_width + 1.0;
        let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
        let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
        let x1 = (a[0].max(b[0]) + reach).ceil().min(size as f64 - 1.0);
        let y1 = (a[1].max(b[1]) + reach).ceil().min(size as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (px, py) = (x as f64, y as f64);
                let t = if len2 > 0.0 {
                    (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
                let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
                let alpha = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if alpha <= 0.0 {
                    continue;
                }
                let green = depth_shade(za + t * (zb - za), size);
                let px = &mut canvas[y * size + x];
                for (c, target) in px.iter_mut().zip([red, green, blue]) {
                    *c = (1.0 - alpha) * *c + alpha * target;
                }
            }
        }
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = canvas[y as usize * size + x as usize];
        Rgb(p.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// One generated sample: the source-format record, its image, and the
/// ground truth it was generated from.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub record: RawRecord,
    pub image: RgbImage,
    pub pose3d: CanonicalPose3D,
    pub pose2d: CanonicalPose2D,
}

/// Root-relative depths scaled to pixels by the camera's focal length over
/// the root distance.
fn render_depths(pose3d: &CanonicalPose3D, camera: &SynthCamera) -> [f64; NUM_JOINTS] {
    let root = pose3d.root();
    let s = camera.fx / root[2];
    pose3d.coords.map(|c| (c[2] - root[2]) * s)
}

/// Generates `params.n_samples` samples in `target`'s format. Image names
/// are `{prefix}_{index:05}.png`. 3D records carry the camera.
pub fn generate_dataset(params: &SynthParams, target: DatasetId, split: Split, prefix: &str) -> Result<Vec<SynthSample>> {
    params.validate()?;
    let camera = params.camera.camera();
    (0..params.n_samples)
        .map(|i| {
            let mut rng = params.sample_rng(i);
            let pose3d = generate_pose3d(params, &mut rng);
            let pose2d = project_to_2d(&pose3d, &camera)?;
            let image = render_pose_image(&pose2d, Some(&render_depths(&pose3d, &params.camera)), params.image_size);
            let name = format!("{prefix}_{i:05}.png");
            let source = if target.is_3d() {
                SourcePose::Pose3D(pose3d)
            } else {
                SourcePose::Pose2D(pose2d)
            };
            let mut record = emit_source_format(&source, target, split, &name, params.flic_nan_probability, &mut rng)?;
            if target.is_3d() {
                record.camera = Some(camera);
            }
            Ok(SynthSample {
                record,
                image,
                pose3d,
                pose2d,
            })
        })
        .collect()
}

/// Harmonizes generated samples, pairing each with its image.
pub fn harmonize_dataset(samples: &[SynthSample]) -> Result<Vec<(HarmonizedSample, RgbImage)>> {
    samples
        .iter()
        .map(|s| Ok((harmonize_record(&s.record, None)?, s.image.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::{convert_lsp, convert_op, root_align};
    use crate::losses::loss_geometric;
    use crate::skeleton::{bone_length, default_bone_groups, CanonicalSkeleton};

    fn params() -> SynthParams {
        SynthParams::default()
    }

    #[test]
    fn zero_jitter_gives_rest_pose() {
        let mut p = params();
        p.pose_jitter = 0.0;
        p.yaw_range = 0.0;
        p.root_jitter_mm = 0.0;
        let pose = generate_pose3d(&p, &mut p.sample_rng(0));
        let rest = p.bone_length_profile.rest_pose();
        let aligned = root_align(&pose);
        for j in 0..NUM_JOINTS {
            for a in 0..3 {
                assert!((aligned.coords[j][a] - rest.coords[j][a]).abs() < 1e-9);
            }
        }
        for (name, edge) in BONES.iter() {
            assert!((bone_length(&pose, *edge).unwrap() - p.bone_length_profile.length(name)).abs() < 1e-9);
        }
    }

    #[test]
    fn generated_poses_satisfy_the_geometric_constraint() {
        let p = params();
        let groups = default_bone_groups(&CanonicalSkeleton::default(), &p.bone_length_profile.rest_pose()).unwrap();
        for i in 0..20 {
            let pose = generate_pose3d(&p, &mut p.sample_rng(i));
            assert!(loss_geometric(&pose, &groups).unwrap() < 1e-9);
        }
    }

    #[test]
    fn seeds_give_distinct_poses() {
        let p = params();
        let a = generate_pose3d(&p, &mut p.sample_rng(0));
        let b = generate_pose3d(&p, &mut p.sample_rng(1));
        assert_ne!(a, b);
        assert_eq!(a, generate_pose3d(&p, &mut p.sample_rng(0)));
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0);
        let mut c = [[0.0, 0.0, 1000.0]; NUM_JOINTS];
        c[3] = [100.0, -50.0, 1000.0];
        let pose = CanonicalPose3D::new(c, Frame::CameraMm);
        let p = project_to_2d(&pose, &cam).unwrap();
        assert_eq!(p.coords[0], [32.0, 32.0]);
        let wide = Camera::new(200.0, 100.0, 32.0, 32.0);
        let q = project_to_2d(&pose, &wide).unwrap();
        assert!(((q.coords[3][0] - 32.0) - 2.0 * (p.coords[3][0] - 32.0)).abs() < 1e-12);
        c[5] = [0.0, 0.0, -10.0];
        assert!(project_to_2d(&CanonicalPose3D::new(c, Frame::CameraMm), &cam).is_err());
    }

    #[test]
    fn out_of_frame_joints_are_invisible() {
        let cam = Camera::new(100.0, 100.0, 32.0, 32.0);
        let mut c = [[0.0, 0.0, 1000.0]; NUM_JOINTS];
        c[2] = [5000.0, 0.0, 1000.0];
        let p = project_to_2d(&CanonicalPose3D::new(c, Frame::CameraMm), &cam).unwrap();
        assert!(!p.visibility[2]);
        assert_eq!(p.coords[2], [0.0, 0.0]);
    }

    #[test]
    fn lsp_round_trip() {
        let p = params();
        let mut rng = p.sample_rng(3);
        let pose3 = generate_pose3d(&p, &mut rng);
        let pose2 = project_to_2d(&pose3, &p.camera.camera()).unwrap();
        let rec = emit_source_format(&SourcePose::Pose2D(pose2), DatasetId::Lsp, Split::Train, "x", 0.0, &mut rng).unwrap();
        assert_eq!(rec.joints.len(), 14);
        let back = convert_lsp(&rec).unwrap();
        for j in Joint::ALL {
            if j == Joint::Thorax || j == Joint::Pelvis {
                continue;
            }
            assert_eq!(back.coords[j.index()], pose2.coords[j.index()]);
        }
        let l = pose2.joint(Joint::LShoulder);
        let r = pose2.joint(Joint::RShoulder);
        let t = back.joint(Joint::Thorax);
        assert!((t[0] - (l[0] + r[0]) / 2.0).abs() < 1e-6 && (t[1] - (l[1] + r[1]) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn op_head_top_copies_neck() {
        let p = params();
        let mut rng = p.sample_rng(4);
        let pose3 = generate_pose3d(&p, &mut rng);
        let rec = emit_source_format(&SourcePose::Pose3D(pose3), DatasetId::Op, Split::Train, "x", 0.0, &mut rng).unwrap();
        let back = convert_op(&rec).unwrap();
        let neck = rec.joints.iter().find(|j| j.name == "neck").unwrap();
        assert_eq!(back.joint(Joint::HeadTop), [neck.x.unwrap(), neck.y.unwrap(), neck.z.unwrap()]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = params();
        let mut rng = p.sample_rng(0);
        let pose2 = CanonicalPose2D::all_visible([[1.0, 1.0]; NUM_JOINTS]);
        assert!(emit_source_format(&SourcePose::Pose2D(pose2), DatasetId::H36m, Split::Train, "x", 0.0, &mut rng).is_err());
        let pose3 = generate_pose3d(&p, &mut rng);
        assert!(emit_source_format(&SourcePose::Pose3D(pose3), DatasetId::Mpii, Split::Train, "x", 0.0, &mut rng).is_err());
    }

    #[test]
    fn flic_nan_injection() {
        let p = params();
        let mut rng = p.sample_rng(0);
        let pose2 = CanonicalPose2D::all_visible([[10.0, 10.0]; NUM_JOINTS]);
        let rec = emit_source_format(&SourcePose::Pose2D(pose2), DatasetId::Flic, Split::Train, "x", 1.0, &mut rng).unwrap();
        assert_eq!(rec.missing_count(), 29);
    }

    #[test]
    fn rendering_is_deterministic_and_pose_dependent() {
        let p = params();
        let pose3 = generate_pose3d(&p, &mut p.sample_rng(0));
        let pose2 = project_to_2d(&pose3, &p.camera.camera()).unwrap();
        let a = render_pose_image(&pose2, None, 64);
        assert_eq!(a.as_raw(), render_pose_image(&pose2, None, 64).as_raw());
        let pose3b = generate_pose3d(&p, &mut p.sample_rng(1));
        let b = render_pose_image(&project_to_2d(&pose3b, &p.camera.camera()).unwrap(), None, 64);
        assert!(a.as_raw().iter().zip(b.as_raw()).any(|(x, y)| x != y));
    }

    #[test]
    fn invisible_pose_renders_background_only() {
        let pose = CanonicalPose2D::new([[30.0, 30.0]; NUM_JOINTS], [false; NUM_JOINTS]);
        let img = render_pose_image(&pose, None, 64);
        // background noise stays below 0.25 of full scale
        assert!(img.as_raw().iter().all(|&b| b <= 64));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let mut p = params();
        p.n_samples = 5;
        let a = generate_dataset(&p, DatasetId::H36m, Split::Train, "h").unwrap();
        let b = generate_dataset(&p, DatasetId::H36m, Split::Train, "h").unwrap();
        let ja = serde_json::to_string(&a.iter().map(|s| &s.record).collect::<Vec<_>>()).unwrap();
        let jb = serde_json::to_string(&b.iter().map(|s| &s.record).collect::<Vec<_>>()).unwrap();
        assert_eq!(ja, jb);
        assert!(a[0].record.camera.is_some());
    }
}
