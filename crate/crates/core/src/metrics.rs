//! MPJPE and PCKh@0.5.

use serde::{Deserialize, Serialize};

use crate::dataset::LoadedSample;
use crate::error::{Error, Result};
use crate::harmonize::SampleSource;
use crate::model::{Decode, Network};
use crate::skeleton::{
    dist2, dist3, BoneGroup, CanonicalPose2D, CanonicalPose3D, Frame, Joint, JOINT_NAMES, NUM_JOINTS, ROOT,
};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Mean Euclidean distance over visible joints, in the poses' units.
///
/// ```
/// use hpe3d::metrics::mpjpe;
/// use hpe3d::skeleton::{CanonicalPose3D, Frame};
/// let gt = CanonicalPose3D::new([[0.0; 3]; 16], Frame::RootAlignedMm);
/// let pred = CanonicalPose3D::new([[0.0, 0.0, 10.0]; 16], Frame::RootAlignedMm);
/// assert_eq!(mpjpe(&pred, &gt, &[true; 16]).unwrap(), 10.0);
/// ```
pub fn mpjpe(pred: &CanonicalPose3D, gt: &CanonicalPose3D, visibility: &[bool; NUM_JOINTS]) -> Result<f64> {
    if pred.frame != gt.frame {
        return Err(Error::FrameMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.frame, gt.frame
        )));
    }
    let mut sum = CompensatedSum::default();
    let mut count = 0usize;
    for j in (0..NUM_JOINTS).filter(|&j| visibility[j]) {
        sum.add(dist3(pred.coords[j], gt.coords[j]));
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoVisibleJoints);
    }
    Ok(sum.value() / count as f64)
}

/// Distance between head top and neck.
pub fn head_segment_length(gt: &CanonicalPose2D) -> f64 {
    dist2(gt.joint(Joint::HeadTop), gt.joint(Joint::Neck))
}

/// Correct/visible counts per joint for PCKh.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PckCounts {
    pub correct: [usize; NUM_JOINTS],
    pub visible: [usize; NUM_JOINTS],
}

impl PckCounts {
    pub fn accumulate(
        &mut self,
        sample: usize,
        pred: &CanonicalPose2D,
        gt: &CanonicalPose2D,
        threshold_fraction: f64,
    ) -> Result<()> {
        let head = head_segment_length(gt);
        if !(head > 0.0) {
            return Err(Error::ZeroHeadSegment { sample });
        }
        let threshold = threshold_fraction * head;
        for j in (0..NUM_JOINTS).filter(|&j| gt.visibility[j]) {
            self.visible[j] += 1;
            if dist2(pred.coords[j], gt.coords[j]) <= threshold {
                self.correct[j] += 1;
            }
        }
        Ok(())
    }

    pub fn percentage(&self) -> f64 {
        let v: usize = self.visible.iter().sum();
        if v == 0 {
            return 0.0;
        }
        100.0 * self.correct.iter().sum::<usize>() as f64 / v as f64
    }

    pub fn per_joint(&self) -> [f64; NUM_JOINTS] {
        let mut out = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            if self.visible[j] > 0 {
                out[j] = 100.0 * self.correct[j] as f64 / self.visible[j] as f64;
            }
        }
        out
    }
}

/// Percentage of visible ground-truth joints predicted within
/// `threshold_fraction` of the head segment (distance ≤ threshold counts).
///
/// ```
/// use hpe3d::metrics::pckh;
/// use hpe3d::skeleton::CanonicalPose2D;
/// let mut c = [[0.0; 2]; 16];
/// c[9] = [0.0, -10.0]; // head top, 10 px above the neck
/// let gt = CanonicalPose2D::all_visible(c);
/// assert_eq!(pckh(&[gt], &[gt], 0.5).unwrap(), 100.0);
/// ```
pub fn pckh(preds: &[CanonicalPose2D], gts: &[CanonicalPose2D], threshold_fraction: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            what: "pckh inputs",
            expected: gts.len().to_string(),
            found: preds.len().to_string(),
        });
    }
    let mut counts = PckCounts::default();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        counts.accumulate(i, p, g, threshold_fraction)?;
    }
    Ok(counts.percentage())
}

/// Per-joint and aggregate MPJPE accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct MpjpeAccumulator {
    sums: [CompensatedSum; NUM_JOINTS],
    counts: [usize; NUM_JOINTS],
}

impl MpjpeAccumulator {
    pub fn add(&mut self, pred: &CanonicalPose3D, gt: &CanonicalPose3D, visibility: &[bool; NUM_JOINTS]) -> Result<()> {
        // validates frames and non-empty visibility
        mpjpe(pred, gt, visibility)?;
        for j in (0..NUM_JOINTS).filter(|&j| visibility[j]) {
            self.sums[j].add(dist3(pred.coords[j], gt.coords[j]));
            self.counts[j] += 1;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn per_joint(&self) -> [f64; NUM_JOINTS] {
        let mut out = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            if self.counts[j] > 0 {
                out[j] = self.sums[j].value() / self.counts[j] as f64;
            }
        }
        out
    }

    /// Mean over every visible joint of every sample; equals the
    /// count-weighted mean of [`Self::per_joint`].
    pub fn overall(&self) -> Option<f64> {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return None;
        }
        let total: CompensatedSum = self.sums.iter().map(|s| s.value()).collect();
        Some(total.value() / n as f64)
    }
}

/// Evaluation summary laid out like a results table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub pckh_at_05: f64,
    /// `None` when the evaluated set has no usable 3D samples.
    pub mpjpe_mm: Option<f64>,
    pub per_joint_mpjpe: [f64; NUM_JOINTS],
    pub per_joint_pckh: [f64; NUM_JOINTS],
    pub sample_count: usize,
    /// Samples skipped for 3D (no pose, unsolved scale) or PCKh (no head segment).
    pub skipped: usize,
    /// Mean within-group bone-ratio variance of the predicted 3D poses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_ratio_variance: Option<f64>,
}

impl EvalReport {
    /// Plain-text table; `per_joint` adds one row per joint.
    pub fn to_table(&self, per_joint: bool) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<10} {:>8} {:>10} {:>12}\n", "Dataset", "Samples", "PCKh@0.5", "Test MPJPE"));
        let mp = self.mpjpe_mm.map_or("-".to_string(), |m| format!("{m:.2}"));
        s.push_str(&format!(
            "{:<10} {:>8} {:>10.2} {:>12}\n",
            self.dataset_id, self.sample_count, self.pckh_at_05, mp
        ));
        if per_joint {
            s.push_str(&format!("\n{:<12} {:>10} {:>12}\n", "Joint", "PCKh@0.5", "MPJPE"));
            for j in 0..NUM_JOINTS {
                s.push_str(&format!(
                    "{:<12} {:>10.2} {:>12.2}\n",
                    JOINT_NAMES[j], self.per_joint_pckh[j], self.per_joint_mpjpe[j]
                ));
            }
        }
        s
    }
}

/// Converts an image-scaled prediction to root-aligned millimetres using
/// the sample's depth scale `s`: `((x, y) - root) / s` and `z / s`.
pub fn prediction_to_mm(pred: &CanonicalPose3D, scale: f64) -> Result<CanonicalPose3D> {
    if pred.frame != Frame::ImageScaled {
        return Err(Error::FrameMismatch(format!("expected an image-scaled prediction, got {:?}", pred.frame)));
    }
    if !(scale > 0.0) {
        return Err(Error::NonPositiveScale(scale));
    }
    let r = pred.root();
    let mut out = *pred;
    for c in out.coords.iter_mut() {
        *c = [(c[0] - r[0]) / scale, (c[1] - r[1]) / scale, c[2] / scale];
    }
    out.coords[ROOT.index()] = [0.0; 3];
    out.frame = Frame::RootAlignedMm;
    Ok(out)
}

/// Runs the network over `dataset` and aggregates PCKh@0.5, MPJPE (mm)
/// and the mean within-group bone-ratio variance of the predictions.
///
/// Samples without a usable head segment are left out of PCKh; 3D samples
/// without a solved scale are left out of MPJPE. Either counts as skipped.
pub fn evaluate(
    network: &Network,
    dataset: &[LoadedSample],
    decode: Decode,
    groups: &[BoneGroup],
    dataset_id: &str,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mut pck = PckCounts::default();
    let mut mp = MpjpeAccumulator::default();
    let mut ratio_var = CompensatedSum::default();
    let mut ratio_count = 0usize;
    let mut skipped = 0;
    for (i, item) in dataset.iter().enumerate() {
        let s = &item.sample;
        let pred = network.predict_pose3d(&item.input, decode)?;
        let pred2d = CanonicalPose2D::all_visible(pred.coords.map(|c| [c[0], c[1]]));
        let mut skip = false;
        let head_ok = s.pose2d.visibility[Joint::HeadTop.index()] && s.pose2d.visibility[Joint::Neck.index()];
        match head_ok {
            true => match pck.accumulate(i, &pred2d, &s.pose2d, 0.5) {
                Ok(()) => {}
                Err(Error::ZeroHeadSegment { .. }) => skip = true,
                Err(e) => return Err(e),
            },
            false => skip = true,
        }
        if s.source == SampleSource::Set3d {
            match (&s.pose3d, s.scale, s.excluded) {
                (Some(gt), Some(scale), false) => {
                    let pred_mm = prediction_to_mm(&pred, scale)?;
                    mp.add(&pred_mm, gt, &gt.visibility)?;
                    if !groups.is_empty() {
                        ratio_var.add(crate::losses::loss_geometric(&pred_mm, groups)? / groups.len() as f64);
                        ratio_count += 1;
                    }
                }
                _ => skip = true,
            }
        }
        if skip {
            skipped += 1;
        }
    }
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        pckh_at_05: pck.percentage(),
        mpjpe_mm: mp.overall(),
        per_joint_mpjpe: mp.per_joint(),
        per_joint_pckh: pck.per_joint(),
        sample_count: dataset.len(),
        skipped,
        bone_ratio_variance: (ratio_count > 0).then(|| ratio_var.value() / ratio_count as f64),
    })
}
