//! Command-line interface. Every failure is reported as a single JSON
//! object on stderr (`{"error": ..., "kind": ...}`) with exit code 1.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use ndarray::{Array1, Array2};

use mvfusion::batch::{batch_posterior, ensure_frame_cap, LatentMatrix, DEFAULT_FRAME_CAP};
use mvfusion::error::{Error, Result};
use mvfusion::io;
use mvfusion::kernels::{gram_matrix, KernelFamily, KernelSpec};
use mvfusion::metrics::{evaluate, DepthMap};
use mvfusion::online::OnlineState;
use mvfusion::pipeline::{load_config, run_from_config, write_simulation, FusionMode, SimulateOptions};
use mvfusion::pose::relative_pose;
use mvfusion::sim::{PlaneScene, TrajectoryKind};
use mvfusion::sweep::{cost_volume, depth_planes, Intrinsics};

const LEARNED_GAMMA_SQ: f64 = 13.82;
const LEARNED_ELL: f64 = 1.098;
const LEARNED_SIGMA_SQ: f64 = 1.443;

#[derive(Parser)]
#[command(
    name = "mvfusion",
    version,
    about = "Multi-view stereo depth fusion with GP latent smoothing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a plane-sweep cost volume for one reference view.
    Costvol(CostvolArgs),
    /// Smooth latent vectors jointly over a whole trajectory.
    FuseBatch(FuseBatchArgs),
    /// Smooth latent vectors one frame at a time in constant memory.
    FuseOnline(FuseOnlineArgs),
    /// Score a predicted depth map against a reference map.
    Metrics(MetricsArgs),
    /// Render a synthetic planar-scene sequence into a directory.
    Simulate(SimulateArgs),
    /// Run the full pipeline from a JSON config file.
    Run(RunArgs),
}

#[derive(Args)]
struct CostvolArgs {
    /// Reference image tensor (channels x height x width).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Neighbor image tensor; repeat the flag for several neighbors.
    #[arg(long = "nbr", required = true)]
    neighbors: Vec<PathBuf>,
    /// Pose lines: the reference pose first, then one pose per neighbor.
    #[arg(long)]
    poses: PathBuf,
    /// Intrinsics as fx,fy,cx,cy.
    #[arg(long = "K", value_name = "FX,FY,CX,CY")]
    k: String,
    #[arg(long, default_value_t = 0.5)]
    d_min: f64,
    #[arg(long, default_value_t = 50.0)]
    d_max: f64,
    #[arg(long, default_value_t = 64)]
    num_planes: usize,
    /// Output cost volume (planes x height x width).
    #[arg(long)]
    out: PathBuf,
    /// Optional output for the depth plane values (rank-1 tensor).
    #[arg(long)]
    out_planes: Option<PathBuf>,
}

#[derive(Args)]
struct FuseBatchArgs {
    /// Latent matrix, one row per frame.
    #[arg(long)]
    latents: PathBuf,
    /// Camera poses, one line per frame.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    gamma2: f64,
    #[arg(long)]
    ell: f64,
    #[arg(long)]
    sigma2: f64,
    /// Kernel family: matern32, exponential or temporal_difference.
    #[arg(long, default_value = "matern32")]
    family: String,
    #[arg(long, default_value_t = DEFAULT_FRAME_CAP)]
    batch_cap: usize,
    /// Output fused latent matrix.
    #[arg(long)]
    out: PathBuf,
    /// Optional output for the shared per-frame posterior variance.
    #[arg(long)]
    out_var: Option<PathBuf>,
}

#[derive(Args)]
struct FuseOnlineArgs {
    /// Latent matrix, one row per frame.
    #[arg(long)]
    latents: PathBuf,
    /// Camera poses, one line per frame.
    #[arg(long)]
    poses: PathBuf,
    /// Defaults to the learned value unless resuming from a snapshot.
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    ell: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Continue from a saved filter snapshot.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the filter snapshot after the last frame.
    #[arg(long)]
    save_state: Option<PathBuf>,
    /// Output fused latent matrix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Predicted depth map (rank-2 tensor).
    #[arg(long)]
    pred: PathBuf,
    /// Reference depth map (rank-2 tensor).
    #[arg(long)]
    gt: PathBuf,
    /// Optional validity mask (rank-2 tensor, values above 0.5 are valid).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Trajectory shape: collinear, arc or random.
    #[arg(long, default_value = "collinear")]
    kind: String,
    #[arg(long, visible_alias = "n", default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 80)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64.0)]
    focal: f64,
    /// Depth of the textured scene plane.
    #[arg(long, default_value_t = 4.0)]
    d_star: f64,
    /// Texture wavelength in world units.
    #[arg(long, default_value_t = 0.75)]
    wavelength: f64,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the fusion mode: batch or online.
    #[arg(long)]
    mode: Option<String>,
    /// Skip fusion and decode the raw per-frame latents.
    #[arg(long)]
    no_gp: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            report_failure("usage", &e.render().to_string());
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_failure(e.kind(), &e.to_string());
            1
        }
    }
}

fn report_failure(kind: &str, message: &str) {
    let envelope = serde_json::json!({ "error": message, "kind": kind });
    eprintln!("{envelope}");
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Costvol(args) => costvol(args),
        Command::FuseBatch(args) => fuse_batch(args),
        Command::FuseOnline(args) => fuse_online(args),
        Command::Metrics(args) => metrics(args),
        Command::Simulate(args) => simulate(args),
        Command::Run(args) => run(args),
    }
}

fn parse_intrinsics(text: &str, width: usize, height: usize) -> Result<Intrinsics<f64>> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("expected fx,fy,cx,cy, got {text:?}")));
    }
    let mut values = [0.0; 4];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad intrinsics component {part:?}: {e}")))?;
    }
    Intrinsics::new(values[0], values[1], values[2], values[3], width, height)
}

fn costvol(args: CostvolArgs) -> Result<()> {
    let reference = io::read_image(&args.reference)?;
    let poses = io::read_poses(&args.poses)?;
    if poses.len() != args.neighbors.len() + 1 {
        return Err(Error::Config(format!(
            "pose file holds {} poses but 1 reference + {} neighbors were given",
            poses.len(),
            args.neighbors.len()
        )));
    }
    let k = parse_intrinsics(&args.k, reference.width(), reference.height())?;
    let planes = depth_planes(args.d_min, args.d_max, args.num_planes)?;
    let mut neighbors = Vec::with_capacity(args.neighbors.len());
    for (path, pose) in args.neighbors.iter().zip(&poses[1..]) {
        let image = io::read_image(path)?;
        neighbors.push((image, relative_pose(&poses[0], pose)));
    }
    let volume = cost_volume(&reference, &neighbors, &k, &planes)?;
    io::write_array3(&args.out, volume.cost())?;
    if let Some(path) = &args.out_planes {
        io::write_array1(path, &Array1::from_vec(volume.planes().to_vec()))?;
    }
    Ok(())
}

fn read_latent_rows(path: &Path) -> Result<Vec<DVector<f64>>> {
    let latents = io::read_array2(path)?;
    let (n, m) = latents.dim();
    Ok((0..n)
        .map(|i| DVector::from_iterator(m, latents.row(i).iter().copied()))
        .collect())
}

fn write_latent_rows(path: &Path, rows: &[DVector<f64>]) -> Result<()> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    let array = Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]);
    io::write_array2(path, &array)
}

fn fuse_batch(args: FuseBatchArgs) -> Result<()> {
    let family: KernelFamily = args.family.parse()?;
    let spec = KernelSpec::new(family, args.gamma2, args.ell, args.sigma2)?;
    let rows = read_latent_rows(&args.latents)?;
    let poses = io::read_poses(&args.poses)?;
    ensure_frame_cap(poses.len(), args.batch_cap)?;
    let gram = gram_matrix(&poses, &spec)?;
    let matrix = LatentMatrix::from_rows(&rows)?;
    let posterior = batch_posterior(&gram, &matrix, spec.sigma_sq())?;
    let fused: Vec<DVector<f64>> = (0..rows.len())
        .map(|i| posterior.mean.row(i).transpose())
        .collect();
    write_latent_rows(&args.out, &fused)?;
    if let Some(path) = &args.out_var {
        let variance = Array1::from_vec(posterior.variance.iter().copied().collect());
        io::write_array1(path, &variance)?;
    }
    Ok(())
}

fn fuse_online(args: FuseOnlineArgs) -> Result<()> {
    let rows = read_latent_rows(&args.latents)?;
    let poses = io::read_poses(&args.poses)?;
    if poses.len() != rows.len() {
        return Err(Error::DimensionMismatch {
            context: "streamed fusion input",
            expected: format!("{} latent rows", poses.len()),
            got: format!("{}", rows.len()),
        });
    }
    let m = rows.first().map_or(0, |r| r.len());
    let mut state = match &args.resume {
        Some(path) => {
            if args.gamma2.is_some() || args.ell.is_some() || args.sigma2.is_some() {
                return Err(Error::Config(
                    "kernel parameters come from the resumed snapshot; \
                     drop --gamma2, --ell and --sigma2"
                        .into(),
                ));
            }
            let state = io::load_state(path)?;
            if state.latent_len() != m {
                return Err(Error::DimensionMismatch {
                    context: "resumed latent length",
                    expected: format!("{}", state.latent_len()),
                    got: format!("{m}"),
                });
            }
            state
        }
        None => {
            let spec = KernelSpec::new(
                KernelFamily::Matern32,
                args.gamma2.unwrap_or(LEARNED_GAMMA_SQ),
                args.ell.unwrap_or(LEARNED_ELL),
                args.sigma2.unwrap_or(LEARNED_SIGMA_SQ),
            )?;
            OnlineState::new(spec, m)?
        }
    };
    let mut fused = Vec::with_capacity(rows.len());
    for (pose, y) in poses.iter().zip(&rows) {
        fused.push(state.step(pose, y)?);
    }
    write_latent_rows(&args.out, &fused)?;
    if let Some(path) = &args.save_state {
        io::save_state(path, &state)?;
    }
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let pred = io::read_array2(&args.pred)?;
    let gt = io::read_array2(&args.gt)?;
    let (pred, gt) = match &args.mask {
        Some(path) => {
            let mask = io::read_mask(path)?;
            (
                DepthMap::new(pred, mask.clone())?,
                DepthMap::new(gt, mask)?,
            )
        }
        None => (DepthMap::from_depth(pred)?, DepthMap::from_depth(gt)?),
    };
    let report = evaluate(&pred, &gt)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let trajectory: TrajectoryKind = args.kind.parse()?;
    let opts = SimulateOptions {
        trajectory,
        frames: args.frames,
        seed: args.seed,
        width: args.width,
        height: args.height,
        focal: args.focal,
        scene: PlaneScene::new(args.d_star, args.wavelength, args.channels)?,
    };
    let config = write_simulation(&args.out_dir, &opts)?;
    let summary = serde_json::json!({
        "out_dir": args.out_dir,
        "frames": args.frames,
        "config": args.out_dir.join("config.json"),
        "output_dir": config.output_dir,
    });
    println!("{summary}");
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(mode) = &args.mode {
        config.mode = mode.parse::<FusionMode>()?;
    }
    if args.no_gp {
        config.no_gp = true;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    let report = run_from_config(&config)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
