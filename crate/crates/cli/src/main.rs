use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};

use hpe3d::camera::Camera;
use hpe3d::dataset::{load_dataset, validation_split, write_dataset, LoadedSample};
use hpe3d::harmonize::{harmonize_record, read_jsonl, write_jsonl, DatasetId, RawRecord, Split};
use hpe3d::metrics::evaluate;
use hpe3d::model::{Checkpoint, Decode, InputImage, Network, NetworkConfig};
use hpe3d::skeleton::{CanonicalPose3D, BONES};
use hpe3d::synth::{generate_dataset, harmonize_dataset, SynthCamera, SynthParams};
use hpe3d::trainer::{default_config, default_groups, run_stage, scale_epochs, with_epochs, Stage, StageData, TrainMode, TrainingConfig};
use hpe3d::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  I/O failure (missing or unreadable file)
  2  invalid command line
  3  parse failure in an input file (the message names the line)
  4  failed precondition (stage order, config, shape or checkpoint mismatch)
  5  training diverged (non-finite loss)";

#[derive(Parser)]
#[command(name = "hpe3d", version, about = "Monocular 3D human pose estimation with 2D pre-training", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert source-format annotations (JSON lines) to harmonized samples.
    #[command(after_help = EXIT_CODES)]
    Convert(ConvertArgs),
    /// Generate a synthetic dataset directory.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Run one training stage.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Draw a checkpoint's prediction for one image.
    #[command(after_help = EXIT_CODES)]
    Render(RenderArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Source records, one JSON object per line.
    #[arg(long)]
    input: PathBuf,
    /// Source dataset: MPII, LSP, FLIC, H36M, MPII3D or OP.
    #[arg(long)]
    dataset: String,
    /// Output file of harmonized samples.
    #[arg(long)]
    output: PathBuf,
    /// Camera intrinsics `fx,fy,cx,cy` for 3D records (overrides per-record cameras).
    #[arg(long, value_parser = parse_camera)]
    camera: Option<Camera>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct SynthArgs {
    /// Source format to emit.
    #[arg(long)]
    dataset: String,
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Output directory: records.jsonl, samples.jsonl and PNG images.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: String,
    /// Training mode: fusion or 3d-only.
    #[arg(long, default_value = "fusion")]
    mode: String,
    /// TOML training config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 2D-annotated dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// 3D-annotated dataset directory.
    #[arg(long)]
    data_3d: Option<PathBuf>,
    /// Validation dataset directory (default: a seeded tenth of the 3D
    /// data, or of the 2D data when there is none).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Multiply epochs and learning-rate drop epochs by N.
    #[arg(long)]
    epoch_scale: Option<usize>,
    /// Set the epoch count; learning-rate drop epochs scale proportionally.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_geo: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `<stage>.ckpt`, `metrics.jsonl` and `config_<stage>.toml`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Argmax,
    Soft,
}

#[derive(Args)]
struct DecodeOpts {
    #[arg(long, value_enum, default_value = "argmax")]
    decode: DecodeArg,
    /// Softmax temperature for `--decode soft`.
    #[arg(long, default_value_t = 0.05)]
    temperature: f64,
}

impl DecodeOpts {
    fn decode(&self) -> Decode {
        match self.decode {
            DecodeArg::Argmax => Decode::Argmax,
            DecodeArg::Soft => Decode::Soft {
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output prefix; writes `<output>.txt` and `<output>.json`.
    #[arg(long)]
    output: PathBuf,
    /// Add a per-joint breakdown to the table.
    #[arg(long)]
    per_joint: bool,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG).
    #[arg(long, conflicts_with = "sample")]
    image: Option<PathBuf>,
    /// Sample index within `--data` instead of `--image`.
    #[arg(long, requires = "data")]
    sample: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output prefix; writes `<output>_overlay.png` and `<output>_3d.svg`.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
}

fn parse_camera(s: &str) -> std::result::Result<Camera, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad camera value `{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [fx, fy, cx, cy] => Ok(Camera::new(fx, fy, cx, cy)),
        _ => Err(format!("expected fx,fy,cx,cy, got {} values", v.len())),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Image(_) => 1,
        Error::Parse { .. } | Error::Json(_) | Error::Toml(_) => 3,
        Error::Divergence { .. } => 5,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = hpe3d::Result<T>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let dataset = DatasetId::parse(&a.dataset)?;
    let records: Vec<RawRecord> = read_jsonl(BufReader::new(File::open(&a.input)?))?;
    let mut out = Vec::with_capacity(records.len());
    let (mut excluded, mut substituted) = (0, 0);
    for (i, r) in records.iter().enumerate() {
        if r.dataset != dataset {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("record is {}, expected {dataset}", r.dataset),
            });
        }
        let sample = harmonize_record(r, a.camera.as_ref()).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Parse {
                line: i + 1,
                message: other.to_string(),
            },
        })?;
        substituted += r.missing_count();
        excluded += usize::from(sample.excluded);
        out.push(sample);
    }
    let mut w = create(&a.output)?;
    write_jsonl(&mut w, &out)?;
    w.flush()?;
    println!("converted: {}", out.len());
    println!("excluded-degenerate: {excluded}");
    println!("nan-substituted: {substituted}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let dataset = DatasetId::parse(&a.dataset)?;
    let params = SynthParams {
        seed: a.seed,
        n_samples: a.n,
        image_size: a.image_size,
        camera: SynthCamera::for_image(a.image_size),
        ..SynthParams::default()
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let generated = generate_dataset(&params, dataset, split, &dataset.as_str().to_ascii_lowercase())?;
    let harmonized = harmonize_dataset(&generated)?;
    write_dataset(&a.output, &harmonized)?;
    let records: Vec<_> = generated.iter().map(|g| g.record.clone()).collect();
    let mut w = create(&a.output.join("records.jsonl"))?;
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    println!("wrote {} {dataset} samples to {}", generated.len(), a.output.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let stage = Stage::parse(&a.stage)?;
    let mode = TrainMode::parse(&a.mode)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let cfg = TrainingConfig::from_toml_str(&fs::read_to_string(p)?)?;
            if cfg.stage != stage || cfg.mode != mode {
                return Err(Error::InvalidConfig(format!(
                    "config file is for {} ({:?}), command line asks for {} ({mode:?})",
                    cfg.stage.as_str(),
                    cfg.mode,
                    stage.as_str()
                )));
            }
            cfg
        }
        None => default_config(stage, mode)?,
    };
    if let Some(e) = a.epochs {
        cfg = with_epochs(&cfg, e)?;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.initial_lr = lr;
    }
    if let Some(l) = a.lambda_reg {
        cfg.lambda_reg = l;
    }
    if let Some(l) = a.lambda_geo {
        cfg.lambda_geo = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.epoch_scale {
        cfg = scale_epochs(&cfg, f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_opt(dir: &Option<PathBuf>) -> Result<Vec<LoadedSample>> {
    dir.as_ref().map_or(Ok(Vec::new()), load_dataset)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.dry_run {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let train_2d = load_opt(&a.data)?;
    let train_3d = load_opt(&a.data_3d)?;
    let val = match &a.val {
        Some(dir) => load_dataset(dir)?,
        None => {
            let pool = if train_3d.is_empty() { &train_2d } else { &train_3d };
            validation_split(pool.len(), 0.1, cfg.seed)?.into_iter().map(|i| pool[i].clone()).collect()
        }
    };
    let input_size = train_2d
        .first()
        .or(train_3d.first())
        .map(|s| s.input.size)
        .ok_or_else(|| Error::Empty("no training data given (use --data and/or --data-3d)".into()))?;
    let network_config = match &resume {
        Some(c) => c.header.network.clone(),
        None => NetworkConfig {
            input_size,
            ..NetworkConfig::default()
        },
    };
    fs::create_dir_all(&a.out_dir)?;
    let cfg_text = cfg.to_toml_string();
    println!("{cfg_text}");
    fs::write(a.out_dir.join(format!("config_{}.toml", cfg.stage.as_str())), &cfg_text)?;
    let data = StageData {
        train_2d: &train_2d,
        train_3d: &train_3d,
        val: &val,
    };
    let outcome = run_stage(&cfg, &network_config, data, resume.as_ref())?;
    let ckpt_path = a.out_dir.join(format!("{}.ckpt", cfg.stage.as_str()));
    outcome.checkpoint.save(&ckpt_path)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(a.out_dir.join("metrics.jsonl"))?;
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry).map_err(Error::from)?;
        log.write_all(b"\n")?;
    }
    let r = &outcome.final_report;
    println!(
        "stage {} done: PCKh@0.5 {:.2}, MPJPE {}; checkpoint {}",
        cfg.stage.as_str(),
        r.pckh_at_05,
        r.mpjpe_mm.map_or("-".into(), |m| format!("{m:.2} mm")),
        ckpt_path.display()
    );
    Ok(())
}

fn with_ext(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let net = Network::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let data = load_dataset(&a.data)?;
    let name = a.data.file_name().map_or("data".into(), |n| n.to_string_lossy().into_owned());
    let report = evaluate(&net, &data, a.decode.decode(), &default_groups(), &name)?;
    let table = report.to_table(a.per_joint);
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(with_ext(&a.output, ".txt"), &table)?;
    fs::write(with_ext(&a.output, ".json"), serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    print!("{table}");
    Ok(())
}

const UPSCALE: u32 = 4;

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1) * 2;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn limb_color(name: &str) -> Rgb<u8> {
    if name.starts_with("r_") {
        Rgb([255, 80, 80])
    } else if name.starts_with("l_") {
        Rgb([80, 160, 255])
    } else {
        Rgb([255, 230, 80])
    }
}

fn overlay(img: &RgbImage, pose: &CanonicalPose3D) -> RgbImage {
    let mut out = image::imageops::resize(
        img,
        img.width() * UPSCALE,
        img.height() * UPSCALE,
        image::imageops::FilterType::Nearest,
    );
    let k = UPSCALE as f64;
    for (name, e) in BONES.iter() {
        let (p, c) = (pose.coords[e.parent], pose.coords[e.child]);
        draw_line(&mut out, [p[0] * k, p[1] * k], [c[0] * k, c[1] * k], limb_color(name));
    }
    out
}

/// Front (x-y), side (z-y) and top (x-z) views of the skeleton as SVG.
fn wireframe_svg(pose: &CanonicalPose3D) -> String {
    let r = pose.root();
    let pts: Vec<[f64; 3]> = pose.coords.iter().map(|c| [c[0] - r[0], c[1] - r[1], c[2] - r[2]]).collect();
    let extent = pts
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(1e-9, f64::max);
    let (panel, margin) = (200.0, 10.0);
    let scale = (panel / 2.0 - margin) / extent;
    let views: [(&str, usize, usize); 3] = [("front", 0, 1), ("side", 2, 1), ("top", 0, 2)];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        panel * 3.0,
        panel + 20.0
    );
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (v, (label, ax, ay)) in views.iter().enumerate() {
        let (ox, oy) = (panel * v as f64 + panel / 2.0, 20.0 + panel / 2.0);
        s += &format!("<text x=\"{:.1}\" y=\"14\" text-anchor=\"middle\">{label}</text>\n", ox);
        for (name, e) in BONES.iter() {
            let (p, c) = (pts[e.parent], pts[e.child]);
            let Rgb([cr, cg, cb]) = limb_color(name);
            s += &format!(
                "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"rgb({cr},{cg},{cb})\" stroke-width=\"2\"/>\n",
                ox + p[*ax] * scale,
                oy + p[*ay] * scale,
                ox + c[*ax] * scale,
                oy + c[*ay] * scale
            );
        }
    }
    s += "</svg>\n";
    s
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let net = Network::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let img = match (&a.image, a.sample, &a.data) {
        (Some(path), _, _) => image::open(path)?.to_rgb8(),
        (None, Some(i), Some(dir)) => {
            let data = load_dataset(dir)?;
            let s = data.get(i).ok_or_else(|| {
                Error::InvalidConfig(format!("sample {i} out of range (dataset has {})", data.len()))
            })?;
            image::open(dir.join(&s.sample.image))?.to_rgb8()
        }
        _ => return Err(Error::InvalidConfig("give --image, or --sample with --data".into())),
    };
    let pose = net.predict_pose3d(&InputImage::from_rgb(&img)?, a.decode.decode())?;
    let overlay_path = with_ext(&a.output, "_overlay.png");
    let svg_path = with_ext(&a.output, "_3d.svg");
    if let Some(dir) = overlay_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    overlay(&img, &pose).save_with_format(&overlay_path, image::ImageFormat::Png)?;
    fs::write(&svg_path, wireframe_svg(&pose))?;
    println!("wrote {} and {}", overlay_path.display(), svg_path.display());
    Ok(())
}
