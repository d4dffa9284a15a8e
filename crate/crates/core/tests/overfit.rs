use hpe3d::dataset::{synth_experiment, LoadedSample};
use hpe3d::harmonize::DatasetId;
use hpe3d::metrics::mpjpe;
use hpe3d::model::{Decode, NetworkConfig};
use hpe3d::skeleton::{CanonicalPose3D, Frame, ROOT};
use hpe3d::synth::SynthParams;
use hpe3d::trainer::{default_config, run_stage, with_epochs, Stage, StageData, StageOutcome, TrainMode};

fn samples(n: usize) -> Vec<LoadedSample> {
    let params = SynthParams { seed: 31, ..Default::default() };
    synth_experiment(&params, 1, n, 10, DatasetId::Mpii, DatasetId::H36m).unwrap().train_3d
}

fn overfit(set: &[LoadedSample], epochs: usize, batch: usize) -> StageOutcome {
    let mut cfg = with_epochs(&default_config(Stage::S2, TrainMode::ThreeDOnly).unwrap(), epochs).unwrap();
    cfg.lr_drop_epochs.clear();
    cfg.batch_size = batch;
    cfg.validation_every = epochs;
    cfg.seed = 5;
    let data = StageData { train_2d: &[], train_3d: set, val: set };
    run_stage(&cfg, &NetworkConfig::default(), data, None).unwrap()
}

/// Ground truth in the image-scaled frame: pixel offsets from the root and
/// scaled depth.
fn image_scaled_truth(s: &LoadedSample) -> CanonicalPose3D {
    let p = &s.sample.pose2d;
    let r = p.coords[ROOT.index()];
    let d = s.sample.depth.unwrap();
    CanonicalPose3D::new(std::array::from_fn(|j| [p.coords[j][0] - r[0], p.coords[j][1] - r[1], d[j]]), Frame::ImageScaled)
}

fn root_centred(pose: &CanonicalPose3D) -> CanonicalPose3D {
    let r = pose.root();
    CanonicalPose3D::new(pose.coords.map(|c| [c[0] - r[0], c[1] - r[1], c[2] - r[2]]), pose.frame)
}

#[test]
fn single_sample_loss_falls_below_one_percent() {
    let set = samples(1);
    let out = overfit(&set, 500, 1);
    let total = |e: &hpe3d::trainer::LogEntry| e.loss_2d.unwrap() + e.loss_dep.unwrap();
    let train: Vec<_> = out.log.iter().filter(|e| e.split == "train").collect();
    let (first, last) = (total(train[0]), total(train[train.len() - 1]));
    assert!(last < 0.01 * first, "loss {first} -> {last}");

    let s = &set[0].sample;
    let pred = out.network.predict_pose2d(&set[0].input, Decode::Argmax).unwrap();
    let cell = out.network.config.stride();
    for j in 0..16 {
        let dx = (pred.coords[j][0] - s.pose2d.coords[j][0]).abs();
        let dy = (pred.coords[j][1] - s.pose2d.coords[j][1]).abs();
        assert!(dx <= cell && dy <= cell, "joint {j} off by ({dx}, {dy}) px");
    }
}

#[test]
fn ten_sample_mpjpe_below_five_units() {
    let set = samples(10);
    let out = overfit(&set, 150, 2);
    let mut total = 0.0;
    for s in &set {
        let pred = root_centred(&out.network.predict_pose3d(&s.input, Decode::Argmax).unwrap());
        total += mpjpe(&pred, &image_scaled_truth(s), &s.sample.pose2d.visibility).unwrap();
    }
    let mean = total / set.len() as f64;
    assert!(mean < 5.0, "MPJPE {mean}");
}
