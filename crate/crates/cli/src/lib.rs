use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use nvde::fit::{fit_scene, trace_csv, FitConfig};
use nvde::geometry::{Camera, PoseSE3};
use nvde::heads::GammaMode;
use nvde::io::{self, Checkpoint, PoseFile};
use nvde::metrics::{self, MetricReport};
use nvde::pipeline::{render_view, Source};
use nvde::posefit::{estimate_pose, PoseFitConfig};
use nvde::synthoracle::{generate_scene, standard_poses, SceneSpec, NEXT, PREV, SOURCE};
use nvde::Image;

#[derive(Parser)]
#[command(name = "nvde", version, about = "Single-image novel view synthesis with view-dependent effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Fit scene parameters to a frame set.
    Fit(FitArgs),
    /// Render a novel view from a checkpoint.
    Render(RenderArgs),
    /// Compare two images and print a metrics CSV row.
    Eval(EvalArgs),
    /// Estimate the relative pose between two images.
    Pose(PoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    TwoPlane,
    Specular,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Scene description (JSON). Overrides --preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "two-plane")]
    preset: Preset,
    /// Raster size for presets.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Pose file (JSON); defaults to the standard four-frame layout.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Baseline of the standard layout.
    #[arg(long, default_value_t = 0.2)]
    baseline: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseSourceArg {
    /// Poses stored with the frames.
    Gt,
    /// Two-stage photometric estimate from frame 0.
    Estimate,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaArg {
    Learnable,
    Periodic,
}

#[derive(clap::Args)]
struct FitArgs {
    /// Directory written by `synth` (or laid out the same way).
    #[arg(long)]
    frames: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fit configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_vde: bool,
    #[arg(long, value_enum)]
    gamma: Option<GammaArg>,
    #[arg(long, value_enum, default_value = "gt")]
    poses: PoseSourceArg,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Target pose `rx,ry,rz,tx,ty,tz` (axis-angle, translation).
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Optional single-channel PFM; pixels above 0.5 are evaluated.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "scene")]
    scene_id: String,
    #[arg(long, default_value = "0")]
    frame_id: String,
    /// Gaussian sigma of the low-pass PSNR.
    #[arg(long, default_value_t = metrics::LOWPASS_SIGMA)]
    sigma: f64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PoseArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Camera intrinsics JSON, either `{fx, fy, cx, cy, w, h}` or a pose file.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    iters_per_level: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    io::decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn read_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(pf) = PoseFile::parse(&text) {
        return Ok(pf.intrinsics);
    }
    let cam: Camera = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cam.validate()?;
    Ok(cam)
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let spec = match &a.spec {
        Some(p) => {
            let mut spec = io::parse_scene(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            spec
        }
        None => match a.preset {
            Preset::TwoPlane => SceneSpec::two_plane(a.size, seed),
            Preset::Specular => SceneSpec::specular(a.size, seed),
        },
    };
    let poses = match &a.poses {
        Some(p) => PoseFile::parse(&fs::read_to_string(p)?)?.decoded()?,
        None => standard_poses(a.baseline),
    };
    let frames = generate_scene(&spec, &poses)?;
    io::write_frameset(&a.out, &frames)?;
    info!("wrote {} frames to {}", frames.images.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => FitConfig::per_scene(),
    };
    if let Some(v) = a.iters {
        cfg.iters = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_vde {
        cfg.model.vde_enabled = false;
    }
    match a.gamma {
        Some(GammaArg::Learnable) => cfg.model.gamma = GammaMode::Learnable,
        Some(GammaArg::Periodic) => cfg.model.gamma = GammaMode::Periodic { frequencies: 4 },
        None => {}
    }
    let frames = io::read_frameset(&a.frames)?;
    if frames.images.len() < 3 {
        bail!("fitting needs at least three frames, found {}", frames.images.len());
    }
    let poses = match a.poses {
        PoseSourceArg::Gt => frames.poses.clone(),
        PoseSourceArg::Estimate => {
            let pcfg = PoseFitConfig::default();
            let mut poses = frames.poses.clone();
            for k in [PREV, NEXT] {
                let est = estimate_pose(&frames.images[SOURCE], &frames.images[k], &frames.cam, &pcfg)?;
                poses[k] = est.final_pose;
            }
            poses
        }
    };
    let result = fit_scene(&frames, &poses, &cfg)?;
    result.checkpoint.save(&a.out)?;
    if let Some(t) = &a.trace {
        io::write_file(t, trace_csv(&result.trace).as_bytes())?;
    }
    info!(
        "final loss {:.6}, {} skipped steps",
        result.trace.last().copied().unwrap_or(f64::NAN),
        result.skipped_steps
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let pose = io::parse_pose_string(&a.pose)?;
    let src = Source::new(ckpt.source.clone(), ckpt.cam, &ckpt.config)?;
    let view = render_view(&ckpt.config, &src, &ckpt.params, &pose)?;
    fs::create_dir_all(&a.out)?;
    io::write_file(&a.out.join("novel.png"), &io::encode_png(&view.fine)?)?;
    io::write_file(&a.out.join("coarse.png"), &io::encode_png(&view.coarse)?)?;
    io::write_file(&a.out.join("depth.pfm"), &io::encode_pfm(&view.depth)?)?;
    io::write_file(&a.out.join("novel_depth.pfm"), &io::encode_pfm(&view.novel_depth)?)?;
    io::write_file(&a.out.join("vde.pfm"), &io::encode_pfm(&view.activation)?)?;
    io::write_file(&a.out.join("occlusion.pfm"), &io::encode_pfm(&view.occlusion)?)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_png(&a.pred)?;
    let gt = read_png(&a.gt)?;
    if !pred.same_shape(&gt) {
        bail!("prediction and ground truth differ in size");
    }
    let mask = match &a.mask {
        Some(p) => Some(io::decode_pfm(&fs::read(p)?)?),
        None => None,
    };
    let mut report: MetricReport = metrics::report(&pred, &gt, mask.as_ref())?;
    let shift = |i: &Image| i.map(|v| v + 0.5);
    report.psnr_lf = metrics::psnr_lf_sigma(&shift(&pred), &shift(&gt), mask.as_ref(), a.sigma)?;
    let text = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row(&a.scene_id, &a.frame_id));
    match &a.out {
        Some(p) => io::write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct PoseOutput {
    intrinsics: Camera,
    /// Final pose as 12 row-major reals of `[R | t]`.
    pose: Vec<f64>,
    coarse: Vec<f64>,
    /// `(dR axis-angle, dt)` in the rotation-aligned frame.
    residual: [f64; 6],
    coarse_loss: f64,
    final_loss: f64,
    diverged: bool,
}

fn pose(a: PoseArgs) -> Result<()> {
    let cam = read_camera(&a.intrinsics)?;
    let source = read_png(&a.source)?;
    let target = read_png(&a.target)?;
    let mut cfg = PoseFitConfig::default();
    if let Some(n) = a.iters_per_level {
        cfg.iters_per_level = n;
    }
    let est = estimate_pose(&source, &target, &cam, &cfg)?;
    let rows = |p: &PoseSE3| p.to_rt_rows().to_vec();
    let out = PoseOutput {
        intrinsics: cam,
        pose: rows(&est.final_pose),
        coarse: rows(&est.coarse),
        residual: est.residual,
        coarse_loss: est.coarse_loss,
        final_loss: est.final_loss,
        diverged: est.diverged,
    };
    let text = serde_json::to_string_pretty(&out)? + "\n";
    match &a.out {
        Some(p) => io::write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 1 on runtime errors, 2 on usage errors.
/// `NVDE_THREADS=n` runs the work on a dedicated pool of `n` threads.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code as u8;
        }
    };
    let run = thread_pool().and_then(|pool| {
        let dispatch = || match cli.command {
            Command::Synth(a) => synth(a),
            Command::Fit(a) => fit(a),
            Command::Render(a) => render(a),
            Command::Eval(a) => eval(a),
            Command::Pose(a) => pose(a),
        };
        match pool {
            Some(p) => p.install(dispatch),
            None => dispatch(),
        }
    });
    match run {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(v) = std::env::var("NVDE_THREADS") else {
        return Ok(None);
    };
    let n: usize = v.parse().with_context(|| format!("NVDE_THREADS={v} is not a count"))?;
    if n == 0 {
        bail!("NVDE_THREADS must be positive");
    }
    Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?))
}
