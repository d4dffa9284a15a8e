//! Training losses: heatmap regression, Smooth-L1 depth regression, the
//! bone-ratio geometric constraint, and their per-sample combination.
//!
//! Every differentiable loss comes in two forms: `loss_*` returns the value
//! and `loss_*_grad` returns the value together with the gradient with
//! respect to the prediction. Invisible joints are masked out everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonize::SampleSource;
use crate::heatmap::Heatmap;
use crate::skeleton::{BoneGroup, CanonicalPose3D, NUM_JOINTS};

/// Sixteen predicted depths in image-scaled units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPrediction {
    pub values: [f64; NUM_JOINTS],
}

impl DepthPrediction {
    pub fn new(values: [f64; NUM_JOINTS]) -> Self {
        DepthPrediction { values }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let values: [f64; NUM_JOINTS] = values.try_into().map_err(|_| Error::DimensionMismatch {
            what: "depth prediction",
            expected: NUM_JOINTS.to_string(),
            found: values.len().to_string(),
        })?;
        Ok(DepthPrediction { values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_geo: f64,
    /// Knee of the Smooth-L1 loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.1,
            lambda_geo: 0.01,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_reg: f64, lambda_geo: f64, beta: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_reg,
            lambda_geo,
            beta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_geo >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")))
    }
}

fn check_heatmaps(pred: &Heatmap, target: &Heatmap, visibility: &[bool]) -> Result<()> {
    if !pred.same_shape(target) || pred.values.len() != target.values.len() {
        return Err(Error::DimensionMismatch {
            what: "heatmap loss",
            expected: format!("{:?}", target.shape()),
            found: format!("{:?}", pred.shape()),
        });
    }
    if visibility.len() != pred.joints {
        return Err(Error::DimensionMismatch {
            what: "heatmap visibility",
            expected: pred.joints.to_string(),
            found: visibility.len().to_string(),
        });
    }
    Ok(())
}

/// Squared error summed over every cell of every visible joint's plane.
pub fn loss_2d_heatmap(pred: &Heatmap, target: &Heatmap, visibility: &[bool]) -> Result<f64> {
    check_heatmaps(pred, target, visibility)?;
    let n = pred.plane_len();
    let mut total = 0.0;
    for (j, _) in visibility.iter().enumerate().filter(|(_, &v)| v) {
        let p = &pred.values[j * n..(j + 1) * n];
        let t = &target.values[j * n..(j + 1) * n];
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Value and gradient (same layout as `pred`) of [`loss_2d_heatmap`].
pub fn loss_2d_heatmap_grad(pred: &Heatmap, target: &Heatmap, visibility: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_heatmaps(pred, target, visibility)?;
    let n = pred.plane_len();
    let mut grad = vec![0.0; pred.values.len()];
    let mut total = 0.0;
    for (j, _) in visibility.iter().enumerate().filter(|(_, &v)| v) {
        for k in j * n..(j + 1) * n {
            let d = pred.values[k] - target.values[k];
            total += d * d;
            grad[k] = 2.0 * d;
        }
    }
    Ok((total, grad))
}

/// Smooth-L1 per joint, averaged over visible joints. Zero when no joint
/// is visible.
///
/// ```
/// use hpe3d::losses::{loss_depth_smooth_l1, DepthPrediction};
/// let mut vis = [false; 16];
/// vis[0] = true;
/// let mut pred = [0.0; 16];
/// pred[0] = 0.5;
/// let l = loss_depth_smooth_l1(&DepthPrediction::new(pred), &[0.0; 16], &vis, 1.0).unwrap();
/// assert_eq!(l, 0.125);
/// ```
pub fn loss_depth_smooth_l1(
    pred: &DepthPrediction,
    target: &[f64; NUM_JOINTS],
    visibility: &[bool; NUM_JOINTS],
    beta: f64,
) -> Result<f64> {
    loss_depth_smooth_l1_grad(pred, target, visibility, beta).map(|(v, _)| v)
}

pub fn loss_depth_smooth_l1_grad(
    pred: &DepthPrediction,
    target: &[f64; NUM_JOINTS],
    visibility: &[bool; NUM_JOINTS],
    beta: f64,
) -> Result<(f64, [f64; NUM_JOINTS])> {
    check_beta(beta)?;
    let count = visibility.iter().filter(|&&v| v).count();
    let mut grad = [0.0; NUM_JOINTS];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for j in (0..NUM_JOINTS).filter(|&j| visibility[j]) {
        let d = pred.values[j] - target[j];
        if d.abs() < beta {
            total += 0.5 * d * d / beta;
            grad[j] = d / beta * inv;
        } else {
            total += d.abs() - 0.5 * beta;
            grad[j] = d.signum() * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Per-group bones whose endpoints are both visible.
fn active_bones<'a>(pose: &CanonicalPose3D, group: &'a BoneGroup) -> Vec<(usize, &'a crate::skeleton::BoneEdge)> {
    group
        .bones
        .iter()
        .enumerate()
        .filter(|(_, e)| pose.visibility[e.parent] && pose.visibility[e.child])
        .collect()
}

/// Variance of predicted-to-canonical bone-length ratios within each group,
/// summed over groups.
///
/// Groups with fewer than two fully visible bones contribute nothing. The
/// pose should be in the canonical lengths' units (mm): scaling the pose by
/// `k` scales the loss by `k²`.
pub fn loss_geometric(pose: &CanonicalPose3D, groups: &[BoneGroup]) -> Result<f64> {
    loss_geometric_grad(pose, groups).map(|(v, _)| v)
}

pub fn loss_geometric_grad(pose: &CanonicalPose3D, groups: &[BoneGroup]) -> Result<(f64, [[f64; 3]; NUM_JOINTS])> {
    let mut grad = [[0.0; 3]; NUM_JOINTS];
    let mut total = 0.0;
    for group in groups {
        group.validate()?;
        let bones = active_bones(pose, group);
        if bones.len() < 2 {
            continue;
        }
        let n = bones.len() as f64;
        let mut diffs = Vec::with_capacity(bones.len());
        let mut ratios = Vec::with_capacity(bones.len());
        for &(k, e) in &bones {
            let a = pose.coords[e.parent];
            let b = pose.coords[e.child];
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            ratios.push(len / group.canonical_lengths[k]);
            diffs.push((d, len));
        }
        let mean = ratios.iter().sum::<f64>() / n;
        total += ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        // d/dr_e of the group term is 2 (r_e - mean) / n; the mean's own
        // dependence cancels because the deviations sum to zero.
        for (i, &(k, e)) in bones.iter().enumerate() {
            let (d, len) = diffs[i];
            if len == 0.0 {
                continue;
            }
            let coef = 2.0 * (ratios[i] - mean) / n / group.canonical_lengths[k] / len;
            for a in 0..3 {
                grad[e.child][a] += coef * d[a];
                grad[e.parent][a] -= coef * d[a];
            }
        }
    }
    Ok((total, grad))
}

/// The two candidate depth losses of one sample; only the one matching the
/// sample's source is used.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthTerms {
    /// Smooth-L1 depth loss, meaningful for 3D-annotated samples.
    pub supervised: f64,
    /// Geometric bone-ratio loss, meaningful for 2D-annotated samples.
    pub geometric: f64,
}

/// `λ_reg · L_dep,3D` for 3D samples, `λ_geo · L_geo` for 2D samples.
pub fn loss_depth_combined(source: SampleSource, terms: DepthTerms, weights: &LossWeights) -> f64 {
    match source {
        SampleSource::Set3d => weights.lambda_reg * terms.supervised,
        SampleSource::Set2d => weights.lambda_geo * terms.geometric,
    }
}

/// `L = L_2D + L_dep`; a non-finite term is reported as divergence.
pub fn loss_total(l2d: f64, ldep: f64) -> Result<f64> {
    if !l2d.is_finite() || !ldep.is_finite() {
        return Err(Error::NonFinite(format!("loss (l2d = {l2d}, ldep = {ldep})")));
    }
    Ok(l2d + ldep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{BoneEdge, Frame, Joint};

    fn two_bone_group() -> BoneGroup {
        BoneGroup::new(
            "pair",
            vec![
                BoneEdge::new(Joint::RShoulder, Joint::RElbow),
                BoneEdge::new(Joint::LShoulder, Joint::LElbow),
            ],
            vec![100.0, 100.0],
        )
        .unwrap()
    }

    fn pose_with_arm_lengths(r: f64, l: f64) -> CanonicalPose3D {
        let mut c = [[0.0; 3]; NUM_JOINTS];
        c[Joint::RShoulder.index()] = [-10.0, 0.0, 0.0];
        c[Joint::RElbow.index()] = [-10.0, r, 0.0];
        c[Joint::LShoulder.index()] = [10.0, 0.0, 0.0];
        c[Joint::LElbow.index()] = [10.0, 0.0, l];
        CanonicalPose3D::new(c, Frame::RootAlignedMm)
    }

    #[test]
    fn heatmap_loss_examples() {
        let t = Heatmap::from_values(2, 2, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let vis = [true, true];
        assert_eq!(loss_2d_heatmap(&t, &t, &vis).unwrap(), 0.0);
        let mut p = t.clone();
        p.values[5] += 0.5;
        assert!((loss_2d_heatmap(&p, &t, &vis).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(loss_2d_heatmap(&p, &t, &[true, false]).unwrap(), 0.0);
        let wrong = Heatmap::zeros(2, 2, 3);
        assert!(loss_2d_heatmap(&wrong, &t, &vis).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        let mut vis = [false; NUM_JOINTS];
        vis[3] = true;
        let mut pred = [0.0; NUM_JOINTS];
        let target = [0.0; NUM_JOINTS];
        assert_eq!(loss_depth_smooth_l1(&DepthPrediction::new(pred), &target, &vis, 1.0).unwrap(), 0.0);
        pred[3] = 0.5;
        assert_eq!(loss_depth_smooth_l1(&DepthPrediction::new(pred), &target, &vis, 1.0).unwrap(), 0.125);
        pred[3] = 2.0;
        assert_eq!(loss_depth_smooth_l1(&DepthPrediction::new(pred), &target, &vis, 1.0).unwrap(), 1.5);
        // invisible joints are ignored
        pred[4] = 100.0;
        assert_eq!(loss_depth_smooth_l1(&DepthPrediction::new(pred), &target, &vis, 1.0).unwrap(), 1.5);
        assert!(loss_depth_smooth_l1(&DepthPrediction::new(pred), &target, &vis, 0.0).is_err());
    }

    #[test]
    fn smooth_l1_is_a_mean_over_visible_joints() {
        let pred = DepthPrediction::new([2.0; NUM_JOINTS]);
        let l = loss_depth_smooth_l1(&pred, &[0.0; NUM_JOINTS], &[true; NUM_JOINTS], 1.0).unwrap();
        assert_eq!(l, 1.5);
    }

    #[test]
    fn geometric_examples() {
        let g = two_bone_group();
        assert!(loss_geometric(&pose_with_arm_lengths(130.0, 130.0), &[g.clone()]).unwrap() < 1e-30);
        let l = loss_geometric(&pose_with_arm_lengths(100.0, 120.0), &[g.clone()]).unwrap();
        assert!((l - 0.01).abs() < 1e-15, "{l}");
        let mut g2 = g.clone();
        g2.bones = vec![
            BoneEdge::new(Joint::RHip, Joint::RKnee),
            BoneEdge::new(Joint::LHip, Joint::LKnee),
        ];
        let mut pose = pose_with_arm_lengths(100.0, 120.0);
        pose.coords[Joint::RKnee.index()] = [0.0, 100.0, 0.0];
        pose.coords[Joint::LKnee.index()] = [0.0, 0.0, 120.0];
        let l = loss_geometric(&pose, &[g, g2]).unwrap();
        assert!((l - 0.02).abs() < 1e-15, "{l}");
    }

    #[test]
    fn geometric_skips_invisible_bones() {
        let mut pose = pose_with_arm_lengths(100.0, 120.0);
        pose.visibility[Joint::LElbow.index()] = false;
        assert_eq!(loss_geometric(&pose, &[two_bone_group()]).unwrap(), 0.0);
    }

    #[test]
    fn geometric_rejects_zero_canonical_length() {
        let mut g = two_bone_group();
        g.canonical_lengths[0] = 0.0;
        assert!(loss_geometric(&pose_with_arm_lengths(1.0, 1.0), &[g]).is_err());
    }

    #[test]
    fn combined_branches() {
        let w = LossWeights::new(0.1, 0.01, 1.0).unwrap();
        let t = DepthTerms {
            supervised: 2.0,
            geometric: 0.01,
        };
        assert!((loss_depth_combined(SampleSource::Set3d, t, &w) - 0.2).abs() < 1e-15);
        assert!((loss_depth_combined(SampleSource::Set2d, t, &w) - 1e-4).abs() < 1e-18);
        let stage2 = LossWeights::new(0.1, 0.0, 1.0).unwrap();
        assert_eq!(loss_depth_combined(SampleSource::Set2d, t, &stage2), 0.0);
    }

    #[test]
    fn total_examples() {
        assert!((loss_total(1.5, 0.2).unwrap() - 1.7).abs() < 1e-15);
        assert_eq!(loss_total(3.25, 0.0).unwrap(), 3.25);
        assert!(loss_total(f64::INFINITY, 0.0).is_err());
        assert!(loss_total(0.0, f64::NAN).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(-0.1, 0.0, 1.0).is_err());
        assert!(LossWeights::new(0.1, 0.0, 0.0).is_err());
    }
}
