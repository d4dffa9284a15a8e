//! Three-stage training: 2D pre-training (s1), depth regression with
//! 2D/3D fusion (s2), and fine-tuning with the geometric loss (s3).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LoadedSample;
use crate::error::{Error, Result};
use crate::harmonize::SampleSource;
use crate::heatmap::{render_pose_heatmaps, Heatmap};
use crate::losses::{
    loss_2d_heatmap_grad, loss_depth_smooth_l1_grad, loss_geometric_grad, loss_total, DepthPrediction,
};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{assemble_geo_pose, json_digest, Checkpoint, Decode, Network, NetworkConfig, StageTag, Trace};
use crate::nn::Adam;
use crate::skeleton::{default_bone_groups, BoneGroup, CanonicalPose2D, CanonicalSkeleton, ReferenceSkeleton, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub fn tag(self) -> StageTag {
        match self {
            Stage::S1 => StageTag::S1,
            Stage::S2 => StageTag::S2,
            Stage::S3 => StageTag::S3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Stage::S1),
            "s2" | "2" => Ok(Stage::S2),
            "s3" | "3" => Ok(Stage::S3),
            _ => Err(Error::InvalidConfig(format!("unknown stage `{s}`; expected s1, s2 or s3"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "fusion")]
    Fusion,
    #[serde(rename = "three_d_only", alias = "3d-only")]
    ThreeDOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s.to_ascii_lowercase().as_str() {
            "fusion" => Ok(TrainMode::Fusion),
            "3d-only" | "three_d_only" | "3d_only" => Ok(TrainMode::ThreeDOnly),
            _ => Err(Error::InvalidConfig(format!("unknown mode `{s}`; expected fusion or 3d-only"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub lambda_reg: f64,
    pub lambda_geo: f64,
    pub beta: f64,
    /// Product of every factor applied through [`scale_epochs`].
    pub epoch_scale: usize,
    pub validation_every: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.validation_every == 0 || self.epoch_scale == 0 {
            return bad("epochs, batch_size, validation_every and epoch_scale must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) || !(self.lr_drop_factor >= 1.0) {
            return bad(format!(
                "need initial_lr > 0 and lr_drop_factor >= 1, got {} and {}",
                self.initial_lr, self.lr_drop_factor
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs must be strictly increasing: {:?}", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.last().is_some_and(|&d| d >= self.epochs) {
            return bad(format!("lr_drop_epochs {:?} must be below epochs = {}", self.lr_drop_epochs, self.epochs));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_geo >= 0.0 && self.beta > 0.0) {
            return bad("loss weights must be nonnegative and beta positive".into());
        }
        match (self.stage, self.mode) {
            (Stage::S1, TrainMode::ThreeDOnly) => return bad("3d-only training has no stage s1".into()),
            (Stage::S1, _) if self.lambda_reg != 0.0 || self.lambda_geo != 0.0 => {
                return bad("stage s1 trains the 2D loss only; lambda_reg and lambda_geo must be 0".into())
            }
            (Stage::S2, TrainMode::Fusion) if self.lambda_geo != 0.0 => {
                return bad("stage s2 in fusion mode requires lambda_geo = 0".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        json_digest(self).expect("config serializes")
    }
}

/// Published schedule constants for each stage and mode.
pub fn default_config(stage: Stage, mode: TrainMode) -> Result<TrainingConfig> {
    let base = TrainingConfig {
        stage,
        epochs: 0,
        batch_size: 32,
        initial_lr: 0.001,
        lr_drop_epochs: vec![],
        lr_drop_factor: 10.0,
        lambda_reg: 0.0,
        lambda_geo: 0.0,
        beta: 1.0,
        epoch_scale: 1,
        validation_every: 5,
        seed: 0,
        mode,
    };
    let cfg = match (stage, mode) {
        (Stage::S1, TrainMode::Fusion) => TrainingConfig {
            epochs: 140,
            lr_drop_epochs: vec![90, 120],
            ..base
        },
        (Stage::S2, TrainMode::Fusion) => TrainingConfig {
            epochs: 60,
            lr_drop_epochs: vec![45],
            lambda_reg: 0.1,
            ..base
        },
        (Stage::S3, TrainMode::Fusion) => TrainingConfig {
            epochs: 10,
            initial_lr: 0.0001,
            lambda_reg: 0.1,
            lambda_geo: 0.01,
            ..base
        },
        (Stage::S2, TrainMode::ThreeDOnly) => TrainingConfig {
            epochs: 5,
            batch_size: 128,
            lr_drop_epochs: vec![3],
            lambda_reg: 1.0,
            ..base
        },
        (Stage::S3, TrainMode::ThreeDOnly) => TrainingConfig {
            epochs: 2,
            batch_size: 128,
            initial_lr: 0.0001,
            lambda_reg: 0.1,
            ..base
        },
        (Stage::S1, TrainMode::ThreeDOnly) => {
            return Err(Error::InvalidConfig("3d-only training omits stage s1".into()))
        }
    };
    Ok(cfg)
}

/// Learning rate in effect during 0-based `epoch`.
pub fn lr_at(config: &TrainingConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} outside 0..{}",
            config.epochs
        )));
    }
    let drops = config.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(config.initial_lr / config.lr_drop_factor.powi(drops as i32))
}

/// Multiplies the epoch count and every drop epoch by `factor`.
pub fn scale_epochs(config: &TrainingConfig, factor: usize) -> Result<TrainingConfig> {
    if factor == 0 {
        return Err(Error::InvalidConfig("epoch scale factor must be at least 1".into()));
    }
    Ok(TrainingConfig {
        epochs: config.epochs * factor,
        lr_drop_epochs: config.lr_drop_epochs.iter().map(|d| d * factor).collect(),
        epoch_scale: config.epoch_scale * factor,
        ..config.clone()
    })
}

/// Shortens (or lengthens) a schedule to `epochs`, moving each drop epoch
/// to the same relative position, rounded and kept strictly increasing.
pub fn with_epochs(config: &TrainingConfig, epochs: usize) -> Result<TrainingConfig> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be positive".into()));
    }
    let mut drops: Vec<usize> = Vec::new();
    for &d in &config.lr_drop_epochs {
        let moved = ((d as f64) * epochs as f64 / config.epochs as f64).round() as usize;
        let moved = moved.max(drops.last().map_or(1, |&p| p + 1));
        if moved < epochs {
            drops.push(moved);
        }
    }
    let cfg = TrainingConfig {
        epochs,
        lr_drop_epochs: drops,
        ..config.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// One epoch's sample order for fusion training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionEpochPlan {
    pub indices_2d: Vec<usize>,
    pub indices_3d: Vec<usize>,
    /// Alternating 2D/3D visiting order over the two index lists.
    pub order: Vec<(SampleSource, usize)>,
}

/// Draws `min(n_2d, n_3d)` indices without replacement from each set and
/// interleaves them.
pub fn plan_fusion_epoch(n_2d: usize, n_3d: usize, rng: &mut impl rand::Rng) -> Result<FusionEpochPlan> {
    if n_2d == 0 || n_3d == 0 {
        return Err(Error::Empty(format!(
            "fusion training needs both sets nonempty (2D: {n_2d}, 3D: {n_3d})"
        )));
    }
    let n = n_2d.min(n_3d);
    let indices_2d = sample_indices(rng, n_2d, n).into_vec();
    let indices_3d = sample_indices(rng, n_3d, n).into_vec();
    let order = indices_2d
        .iter()
        .zip(&indices_3d)
        .flat_map(|(&a, &b)| [(SampleSource::Set2d, a), (SampleSource::Set3d, b)])
        .collect();
    Ok(FusionEpochPlan {
        indices_2d,
        indices_3d,
        order,
    })
}

/// Whether validation runs after 0-based `epoch`.
pub fn validates_after(config: &TrainingConfig, epoch: usize) -> bool {
    let e = epoch + 1;
    e % config.validation_every == 0 || e == config.epochs
}

/// One JSON-lines metric log entry.
///
/// `split` is `train` (epoch averages), `val` (scheduled validation) or
/// `baseline` (validation before the stage's first update, at epoch 0).
/// Epochs are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub split: String,
    pub pckh: Option<f64>,
    pub mpjpe: Option<f64>,
    pub loss_2d: Option<f64>,
    pub loss_dep: Option<f64>,
    pub lr: Option<f64>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_ratio_var: Option<f64>,
}

/// Gradient bookkeeping used to check that each stage trains only what it
/// should.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub steps: usize,
    pub samples_2d: usize,
    pub samples_3d: usize,
    /// Largest absolute gradient seen on any depth-head parameter.
    pub depth_head_grad_max_abs: f64,
    /// Sum over 2D samples of `|λ_geo · L_geo|`.
    pub geometric_loss_abs_sum: f64,
    /// Sum over 2D samples of the absolute geometric-loss gradient fed to
    /// the depth head.
    pub geometric_grad_abs_sum: f64,
    /// Steps in which the geometric loss was evaluated.
    pub geometric_evaluations: usize,
}

/// Training and validation data for a stage. 2D samples are only used in
/// fusion mode.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train_2d: &'a [LoadedSample],
    pub train_3d: &'a [LoadedSample],
    pub val: &'a [LoadedSample],
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub network: Network,
    pub log: Vec<LogEntry>,
    pub stats: StageStats,
    pub final_report: EvalReport,
}

/// Decoding used for validation metrics.
pub const VALIDATION_DECODE: Decode = Decode::Soft { temperature: 0.05 };

fn check_resume(config: &TrainingConfig, resume: Option<&Checkpoint>) -> Result<()> {
    let have = resume.map_or(StageTag::None, |c| c.stage());
    let ok = match (config.stage, config.mode) {
        (Stage::S1, _) => have == StageTag::None,
        (Stage::S2, TrainMode::Fusion) => have == StageTag::S1,
        (Stage::S2, TrainMode::ThreeDOnly) => matches!(have, StageTag::None | StageTag::S1),
        (Stage::S3, _) => have == StageTag::S2,
    };
    if ok {
        Ok(())
    } else {
        let need = match (config.stage, config.mode) {
            (Stage::S1, _) => "no checkpoint",
            (Stage::S2, TrainMode::Fusion) => "an s1 checkpoint",
            (Stage::S2, TrainMode::ThreeDOnly) => "no checkpoint or an s1 checkpoint",
            (Stage::S3, _) => "an s2 checkpoint",
        };
        Err(Error::StageOrder(format!(
            "stage {} ({:?}) needs {need}, got {:?}",
            config.stage.as_str(),
            config.mode,
            have
        )))
    }
}

fn visible_pose_in_cells(pose: &CanonicalPose2D, stride: f64) -> CanonicalPose2D {
    CanonicalPose2D::new(pose.coords.map(|c| [c[0] / stride, c[1] / stride]), pose.visibility)
}

/// Pixels per mm of a 2D pose, estimated as the ratio of summed projected
/// to summed canonical lengths over the grouped bones that are visible.
/// Foreshortening biases it low; the geometric loss only needs it to put
/// predicted and canonical lengths in comparable units.
fn pixels_per_mm(pose: &CanonicalPose2D, groups: &[BoneGroup]) -> Option<f64> {
    let (mut px, mut mm) = (0.0, 0.0);
    for g in groups {
        for (e, &len) in g.bones.iter().zip(&g.canonical_lengths) {
            if pose.visibility[e.parent] && pose.visibility[e.child] {
                let (a, b) = (pose.coords[e.parent], pose.coords[e.child]);
                px += (b[0] - a[0]).hypot(b[1] - a[1]);
                mm += len;
            }
        }
    }
    (px > 0.0 && mm > 0.0).then(|| px / mm)
}

pub fn default_groups() -> Vec<BoneGroup> {
    default_bone_groups(&CanonicalSkeleton::default(), &ReferenceSkeleton::default().rest_pose())
        .expect("built-in skeleton is valid")
}

/// Per-sample loss values and gradients.
struct SampleStep {
    loss_2d: f64,
    loss_dep: f64,
    dheat: Vec<f32>,
    ddepth: Option<[f32; NUM_JOINTS]>,
    geo: Option<(f64, f64)>,
}

fn sample_step(
    net: &Network,
    config: &TrainingConfig,
    groups: &[BoneGroup],
    trace: &Trace,
    sample: &LoadedSample,
) -> Result<SampleStep> {
    let nc = &net.config;
    let hs = nc.heatmap_size();
    let s = &sample.sample;
    let target = render_pose_heatmaps(&visible_pose_in_cells(&s.pose2d, nc.stride()), (hs, hs), nc.heatmap_sigma)?;
    let pred = Heatmap::from_values(NUM_JOINTS, hs, hs, trace.heatmaps().iter().map(|&v| v as f64).collect())?;
    let (l2d, g2d) = loss_2d_heatmap_grad(&pred, &target, &s.pose2d.visibility)?;
    let norm = 1.0 / NUM_JOINTS as f64;
    let dheat = g2d.iter().map(|g| (g * norm) as f32).collect();
    let mut step = SampleStep {
        loss_2d: l2d * norm,
        loss_dep: 0.0,
        dheat,
        ddepth: None,
        geo: None,
    };
    let Some(depth_out) = trace.depth() else {
        return Ok(step);
    };
    let pred_depth = DepthPrediction::from_slice(&depth_out.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    match s.source {
        SampleSource::Set3d => {
            let labels = s.depth.as_ref().ok_or_else(|| Error::InvalidConfig(format!("3D sample {} has no depth labels", s.image)))?;
            let (l, g) = loss_depth_smooth_l1_grad(&pred_depth, labels, &s.pose2d.visibility, config.beta)?;
            step.loss_dep = config.lambda_reg * l;
            step.ddepth = Some(g.map(|v| (config.lambda_reg * v) as f32));
        }
        SampleSource::Set2d => {
            let Some(scale) = pixels_per_mm(&s.pose2d, groups) else {
                return Ok(step);
            };
            let pose = assemble_geo_pose(&s.pose2d, &pred_depth).scaled(1.0 / scale);
            let (l, g) = loss_geometric_grad(&pose, groups)?;
            let weighted = config.lambda_geo * l;
            let dz = g.map(|v| config.lambda_geo * v[2] / scale);
            step.loss_dep = weighted;
            step.geo = Some((weighted.abs(), dz.iter().map(|v| v.abs()).sum()));
            if config.lambda_geo != 0.0 {
                step.ddepth = Some(dz.map(|v| v as f32));
            }
        }
    }
    Ok(step)
}

/// Runs one stage. Without `resume` the network is freshly initialized
/// from `config.seed`; otherwise it continues from the checkpoint, whose
/// stage must precede this one.
pub fn run_stage(
    config: &TrainingConfig,
    network_config: &NetworkConfig,
    data: StageData<'_>,
    resume: Option<&Checkpoint>,
) -> Result<StageOutcome> {
    config.validate()?;
    check_resume(config, resume)?;
    let mut net = match resume {
        Some(c) => Network::from_checkpoint(c)?,
        None => Network::new(network_config.clone(), config.seed)?,
    };
    let train_2d: Vec<&LoadedSample> = data.train_2d.iter().filter(|s| s.sample.is_trainable()).collect();
    let train_3d: Vec<&LoadedSample> = data.train_3d.iter().filter(|s| s.sample.is_trainable()).collect();
    if data.val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    match (config.stage, config.mode) {
        (Stage::S1, _) if train_2d.is_empty() => return Err(Error::Empty("2D training set".into())),
        (_, TrainMode::ThreeDOnly) if train_3d.is_empty() => return Err(Error::Empty("3D training set".into())),
        _ => {}
    }

    let groups = default_groups();
    let with_depth = config.stage != Stage::S1;
    let depth_range = net.depth_head_range();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stage as u64 + 1);
    let mut adam = Adam::new(net.parameter_count());
    let mut grads = vec![0.0f32; net.parameter_count()];
    let mut trace = Trace::default();
    let mut stats = StageStats::default();
    let mut log = Vec::new();
    let start = Instant::now();

    let validate = |net: &Network| evaluate(net, data.val, VALIDATION_DECODE, &groups, "val");
    let report = validate(&net)?;
    log.push(val_entry(config.stage, 0, "baseline", &report, start.elapsed().as_secs_f64()));
    let mut last_report = report;

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch)?;
        let order: Vec<&LoadedSample> = match (config.stage, config.mode) {
            (Stage::S1, _) => {
                let mut idx: Vec<usize> = (0..train_2d.len()).collect();
                idx.shuffle(&mut rng);
                idx.into_iter().map(|i| train_2d[i]).collect()
            }
            (_, TrainMode::Fusion) => plan_fusion_epoch(train_2d.len(), train_3d.len(), &mut rng)?
                .order
                .into_iter()
                .map(|(src, i)| match src {
                    SampleSource::Set2d => train_2d[i],
                    SampleSource::Set3d => train_3d[i],
                })
                .collect(),
            (_, TrainMode::ThreeDOnly) => {
                let mut idx: Vec<usize> = (0..train_3d.len()).collect();
                idx.shuffle(&mut rng);
                idx.into_iter().map(|i| train_3d[i]).collect()
            }
        };
        let (mut sum_2d, mut sum_dep) = (0.0, 0.0);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill(0.0);
            let inv_b = 1.0 / batch.len() as f32;
            let (mut batch_2d, mut batch_dep) = (0.0, 0.0);
            for sample in batch {
                net.forward_trace(&sample.input, with_depth, &mut trace)?;
                let mut step = sample_step(&net, config, &groups, &trace, sample)?;
                if let Err(Error::NonFinite(_)) = loss_total(step.loss_2d, step.loss_dep) {
                    return Err(Error::Divergence {
                        stage: config.stage.as_str().into(),
                        epoch: epoch + 1,
                        batch: b,
                        loss: step.loss_2d + step.loss_dep,
                    });
                }
                match sample.sample.source {
                    SampleSource::Set2d => stats.samples_2d += 1,
                    SampleSource::Set3d => stats.samples_3d += 1,
                }
                if let Some((l, g)) = step.geo {
                    stats.geometric_loss_abs_sum += l;
                    stats.geometric_grad_abs_sum += g;
                    stats.geometric_evaluations += 1;
                }
                for g in &mut step.dheat {
                    *g *= inv_b;
                }
                let dd = step.ddepth.map(|d| d.map(|v| v * inv_b));
                net.backward(&mut trace, &step.dheat, dd.as_ref().map(|d| &d[..]), &mut grads)?;
                batch_2d += step.loss_2d;
                batch_dep += step.loss_dep;
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage: config.stage.as_str().into(),
                    epoch: epoch + 1,
                    batch: b,
                    loss: f64::NAN,
                });
            }
            let head_max = grads[depth_range.clone()].iter().fold(0.0f64, |m, g| m.max(g.abs() as f64));
            stats.depth_head_grad_max_abs = stats.depth_head_grad_max_abs.max(head_max);
            adam.update(&mut net.params, &grads, lr as f32, &[]);
            stats.steps += 1;
            sum_2d += batch_2d;
            sum_dep += batch_dep;
        }
        let n = order.len().max(1) as f64;
        log.push(LogEntry {
            stage: config.stage,
            epoch: epoch + 1,
            split: "train".into(),
            pckh: None,
            mpjpe: None,
            loss_2d: Some(sum_2d / n),
            loss_dep: with_depth.then_some(sum_dep / n),
            lr: Some(lr),
            wall_seconds: start.elapsed().as_secs_f64(),
            bone_ratio_var: None,
        });
        if validates_after(config, epoch) {
            let report = validate(&net)?;
            log.push(val_entry(config.stage, epoch + 1, "val", &report, start.elapsed().as_secs_f64()));
            last_report = report;
        }
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("pckh".to_string(), last_report.pckh_at_05);
    if let Some(m) = last_report.mpjpe_mm {
        metrics.insert("mpjpe".to_string(), m);
    }
    let checkpoint = net.to_checkpoint(config.stage.tag(), config.digest(), metrics);
    Ok(StageOutcome {
        checkpoint,
        network: net,
        log,
        stats,
        final_report: last_report,
    })
}

fn val_entry(stage: Stage, epoch: usize, split: &str, r: &EvalReport, wall: f64) -> LogEntry {
    LogEntry {
        stage,
        epoch,
        split: split.into(),
        pckh: Some(r.pckh_at_05),
        mpjpe: r.mpjpe_mm,
        loss_2d: None,
        loss_dep: None,
        lr: None,
        wall_seconds: wall,
        bone_ratio_var: r.bone_ratio_variance,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<StageOutcome>,
    pub log: Vec<LogEntry>,
}

impl PipelineOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.stages.last().expect("pipeline has at least one stage").checkpoint
    }
}

/// Runs the stages in order, each resuming from the previous checkpoint.
pub fn train_pipeline(
    configs: &[TrainingConfig],
    network_config: &NetworkConfig,
    data: StageData<'_>,
) -> Result<PipelineOutcome> {
    if configs.is_empty() {
        return Err(Error::Empty("stage list".into()));
    }
    if configs.windows(2).any(|w| w[0].stage >= w[1].stage || w[0].mode != w[1].mode) {
        let order: Vec<_> = configs.iter().map(|c| c.stage.as_str()).collect();
        return Err(Error::StageOrder(format!(
            "stages must be strictly increasing and share one mode, got {order:?}"
        )));
    }
    let mut stages: Vec<StageOutcome> = Vec::new();
    let mut log = Vec::new();
    for cfg in configs {
        let outcome = run_stage(cfg, network_config, data, stages.last().map(|s| &s.checkpoint))?;
        log.extend(outcome.log.iter().cloned());
        stages.push(outcome);
    }
    Ok(PipelineOutcome { stages, log })
}

/// Stage-wise summary mirroring a results-table row: final validation
/// PCKh and MPJPE after each stage.
pub fn summary_table(outcome: &PipelineOutcome) -> String {
    let mut s = format!("{:<8} {:>10} {:>12} {:>14}\n", "Stage", "PCKh@0.5", "MPJPE (mm)", "Bone-ratio var");
    for st in &outcome.stages {
        let r = &st.final_report;
        s += &format!(
            "{:<8} {:>10.2} {:>12} {:>14}\n",
            st.checkpoint.stage().as_str(),
            r.pckh_at_05,
            r.mpjpe_mm.map_or("-".into(), |m| format!("{m:.2}")),
            r.bone_ratio_variance.map_or("-".into(), |v| format!("{v:.3e}")),
        );
    }
    s
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::None => "none",
            StageTag::S1 => "s1",
            StageTag::S2 => "s2",
            StageTag::S3 => "s3",
        }
    }
}
