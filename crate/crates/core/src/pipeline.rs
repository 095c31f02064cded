//! End-to-end depth pipeline: encode plane-sweep volumes into latent
//! vectors, fuse them across frames with the pose-distance GP, and decode
//! disparity maps. The encoder and decoder are fixed pooling stand-ins for
//! learned networks, so the pipeline stays deterministic and testable.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::{batch_posterior, ensure_frame_cap, LatentMatrix, DEFAULT_FRAME_CAP};
use crate::error::{Error, Result};
use crate::io;
use crate::kernels::{gram_matrix, KernelFamily, KernelSpec};
use crate::metrics::{DepthMap, MetricsAccumulator, MetricsReport};
use crate::online::OnlineState;
use crate::pose::{relative_pose, rotation_angle, Pose};
use crate::sim::{simulate_sequence, PlaneScene, TrajectoryKind};
use crate::sweep::{cost_volume, depth_planes, CostVolume, ImageTensor, Intrinsics};

/// Latent grid shape `(channels, height, width)`; the fused vectors have
/// length `channels * height * width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidRange(format!(
                "latent dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Batch,
    Online,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "online" => Ok(Self::Online),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}, expected batch | online"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Batch => write!(f, "batch"),
            Self::Online => write!(f, "online"),
        }
    }
}

/// A previous frame qualifies as the stereo neighbor once either its viewing
/// angle or its baseline to the current frame is large enough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    #[serde(default = "default_min_angle_deg")]
    pub min_angle_deg: f64,
    #[serde(default = "default_min_baseline")]
    pub min_baseline: f64,
}

fn default_min_angle_deg() -> f64 {
    15.0
}

fn default_min_baseline() -> f64 {
    0.1
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            min_angle_deg: default_min_angle_deg(),
            min_baseline: default_min_baseline(),
        }
    }
}

/// Most recent earlier frame that clears the selection rule, scanning
/// backwards from `current`.
pub fn select_neighbor(
    poses: &[Pose<f64>],
    current: usize,
    rule: &SelectionRule,
) -> Option<usize> {
    let pose = &poses[current];
    let min_angle = rule.min_angle_deg.to_radians();
    (0..current).rev().find(|&j| {
        let angle = rotation_angle(poses[j].rotation(), pose.rotation());
        let baseline = (poses[j].translation() - pose.translation()).norm();
        angle > min_angle || baseline > rule.min_baseline
    })
}

fn pool_plane(plane: ndarray::ArrayView2<'_, f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (bh, bw) = (h / oh, w / ow);
    let norm = 1.0 / (bh * bw) as f64;
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let mut acc = 0.0;
        for y in i * bh..(i + 1) * bh {
            for x in j * bw..(j + 1) * bw {
                acc += plane[[y, x]];
            }
        }
        acc * norm
    })
}

fn check_spatial(dims: &LatentDims, h: usize, w: usize) -> Result<()> {
    if h % dims.height != 0 || w % dims.width != 0 {
        return Err(Error::DimensionMismatch {
            context: "latent pooling",
            expected: format!("spatial size divisible by {}x{}", dims.height, dims.width),
            got: format!("{h}x{w}"),
        });
    }
    Ok(())
}

/// Deterministic stand-in for a learned encoder: mean-pools the cost volume
/// onto the latent grid. Plane channels pool down when the plane count is a
/// multiple of the latent channel count, and replicate up when the latent
/// channel count is a multiple of the plane count.
pub fn toy_encoder(volume: &CostVolume<f64>, dims: &LatentDims) -> Result<DVector<f64>> {
    let (d, h, w) = volume.cost().dim();
    check_spatial(dims, h, w)?;
    let c = dims.channels;
    if d % c != 0 && c % d != 0 {
        return Err(Error::DimensionMismatch {
            context: "latent pooling",
            expected: "plane count and latent channels to divide one another".into(),
            got: format!("{d} planes vs {c} channels"),
        });
    }
    let pooled: Vec<Array2<f64>> = (0..d)
        .map(|k| {
            pool_plane(
                volume.cost().index_axis(ndarray::Axis(0), k),
                dims.height,
                dims.width,
            )
        })
        .collect();

    let mut latent = Vec::with_capacity(dims.latent_len());
    if d % c == 0 {
        let group = d / c;
        let norm = 1.0 / group as f64;
        for ci in 0..c {
            for i in 0..dims.height {
                for j in 0..dims.width {
                    let mut acc = 0.0;
                    for k in ci * group..(ci + 1) * group {
                        acc += pooled[k][[i, j]];
                    }
                    latent.push(acc * norm);
                }
            }
        }
    } else {
        let repeat = c / d;
        for k in 0..d {
            for _ in 0..repeat {
                for i in 0..dims.height {
                    for j in 0..dims.width {
                        latent.push(pooled[k][[i, j]]);
                    }
                }
            }
        }
    }
    Ok(DVector::from_vec(latent))
}

/// Encoding for frames with no usable stereo neighbor: the channel-mean
/// image is pooled onto the latent grid and replicated across every latent
/// channel.
pub fn encode_image_only(image: &ImageTensor<f64>, dims: &LatentDims) -> Result<DVector<f64>> {
    let (c, h, w) = image.data().dim();
    check_spatial(dims, h, w)?;
    let norm = 1.0 / c as f64;
    let gray = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += image.data()[[ch, y, x]];
        }
        acc * norm
    });
    let pooled = pool_plane(gray.view(), dims.height, dims.width);
    let mut latent = Vec::with_capacity(dims.latent_len());
    for _ in 0..dims.channels {
        for i in 0..dims.height {
            for j in 0..dims.width {
                latent.push(pooled[[i, j]]);
            }
        }
    }
    Ok(DVector::from_vec(latent))
}

/// Deterministic stand-in for a learned decoder: channel-means the latent
/// grid, nearest-neighbor upsamples it to the output size, and maps values
/// affinely onto the disparity range `[1/d_max, 1/d_min]` centered at the
/// midpoint (a zero latent decodes to the middle disparity).
pub fn decode_disparity(
    latent: &DVector<f64>,
    dims: &LatentDims,
    d_min: f64,
    d_max: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<f64>> {
    if latent.len() != dims.latent_len() {
        return Err(Error::DimensionMismatch {
            context: "decoder latent",
            expected: format!("{}", dims.latent_len()),
            got: format!("{}", latent.len()),
        });
    }
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder latent"));
    }
    if !(d_min.is_finite() && d_max.is_finite()) || d_min <= 0.0 || d_max <= d_min {
        return Err(Error::InvalidRange(format!(
            "need 0 < d_min < d_max, got {d_min} and {d_max}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidRange("empty decoder output".into()));
    }
    let (gh, gw) = (dims.height, dims.width);
    let cell = gh * gw;
    let norm = 1.0 / dims.channels as f64;
    let grid = Array2::from_shape_fn((gh, gw), |(i, j)| {
        let mut acc = 0.0;
        for c in 0..dims.channels {
            acc += latent[c * cell + i * gw + j];
        }
        acc * norm
    });
    let lo = 1.0 / d_max;
    let hi = 1.0 / d_min;
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    Ok(Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let v = grid[[y * gh / out_h, x * gw / out_w]];
        (mid + v * half).clamp(lo, hi)
    }))
}

pub fn toy_decoder(
    latent: &DVector<f64>,
    dims: &LatentDims,
    d_min: f64,
    d_max: f64,
    out_h: usize,
    out_w: usize,
) -> Result<DepthMap<f64>> {
    let disparity = decode_disparity(latent, dims, d_min, d_max, out_h, out_w)?;
    DepthMap::from_depth(disparity.mapv(|v| 1.0 / v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    #[serde(default = "default_gamma_sq")]
    pub gamma_sq: f64,
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_sigma_sq")]
    pub sigma_sq: f64,
}

fn default_family() -> KernelFamily {
    KernelFamily::Matern32
}

fn default_gamma_sq() -> f64 {
    13.82
}

fn default_ell() -> f64 {
    1.098
}

fn default_sigma_sq() -> f64 {
    1.443
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: default_family(),
            gamma_sq: default_gamma_sq(),
            ell: default_ell(),
            sigma_sq: default_sigma_sq(),
        }
    }
}

impl KernelConfig {
    pub fn spec(&self) -> Result<KernelSpec<f64>> {
        KernelSpec::new(self.family, self.gamma_sq, self.ell, self.sigma_sq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanesConfig {
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    #[serde(default = "default_plane_count")]
    pub count: usize,
}

fn default_d_min() -> f64 {
    0.5
}

fn default_d_max() -> f64 {
    50.0
}

fn default_plane_count() -> usize {
    64
}

impl Default for PlanesConfig {
    fn default() -> Self {
        Self {
            d_min: default_d_min(),
            d_max: default_d_max(),
            count: default_plane_count(),
        }
    }
}

impl PlanesConfig {
    pub fn planes(&self) -> Result<Vec<f64>> {
        depth_planes(self.d_min, self.d_max, self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSource {
    /// Directory holding poses.jsonl, intrinsics.json and frame_NNN.gpmv
    /// images, with optional depth_NNN.gpmv reference maps.
    Dir { path: PathBuf },
    /// Synthesized planar-scene sequence.
    Simulate {
        trajectory: TrajectoryKind,
        frames: usize,
        #[serde(default = "default_sim_width")]
        width: usize,
        #[serde(default = "default_sim_height")]
        height: usize,
        #[serde(default = "default_sim_focal")]
        focal: f64,
        #[serde(default = "default_scene")]
        scene: PlaneScene,
    },
}

fn default_sim_width() -> usize {
    80
}

fn default_sim_height() -> usize {
    64
}

fn default_sim_focal() -> f64 {
    64.0
}

fn default_scene() -> PlaneScene {
    PlaneScene {
        d_star: 4.0,
        wavelength: 0.75,
        channels: 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: InputSource,
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: FusionMode,
    #[serde(default)]
    pub no_gp: bool,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub planes: PlanesConfig,
    #[serde(default = "default_latent")]
    pub latent: LatentDims,
    #[serde(default)]
    pub selection: SelectionRule,
    #[serde(default = "default_batch_cap")]
    pub batch_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> FusionMode {
    FusionMode::Online
}

fn default_latent() -> LatentDims {
    LatentDims {
        channels: 512,
        height: 8,
        width: 10,
    }
}

fn default_batch_cap() -> usize {
    DEFAULT_FRAME_CAP
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: PipelineConfig = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &PipelineConfig) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, config)?;
    use std::io::Write;
    out.write_all(b"\n")?;
    Ok(())
}

/// In-memory sequence: equal-length pose and image lists, with optional
/// per-frame reference depth.
pub struct SequenceInput {
    pub intrinsics: Intrinsics<f64>,
    pub poses: Vec<Pose<f64>>,
    pub images: Vec<ImageTensor<f64>>,
    pub gt_depths: Option<Vec<Array2<f64>>>,
}

pub struct SequenceOutput {
    /// Per-frame encoder outputs, one row per frame.
    pub raw_latents: Array2<f64>,
    /// Per-frame latents after fusion (equal to the raw rows with `no_gp`).
    pub fused_latents: Array2<f64>,
    pub disparities: Vec<Array2<f64>>,
    pub depths: Vec<DepthMap<f64>>,
    pub metrics: Option<MetricsReport<f64>>,
}

fn rows_to_array(rows: &[DVector<f64>]) -> Array2<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((n, m), |(i, j)| rows[i][j])
}

pub fn run_sequence(input: &SequenceInput, config: &PipelineConfig) -> Result<SequenceOutput> {
    let n = input.poses.len();
    if n == 0 || input.images.len() != n {
        return Err(Error::DimensionMismatch {
            context: "sequence input",
            expected: format!("{n} images for {n} poses"),
            got: format!("{}", input.images.len()),
        });
    }
    let k = &input.intrinsics;
    let (h, w) = (k.height(), k.width());
    let channels = input.images[0].channels();
    for image in &input.images {
        if image.height() != h || image.width() != w || image.channels() != channels {
            return Err(Error::DimensionMismatch {
                context: "sequence image",
                expected: format!("{channels}x{h}x{w}"),
                got: format!("{}x{}x{}", image.channels(), image.height(), image.width()),
            });
        }
    }
    if let Some(gts) = &input.gt_depths {
        if gts.len() != n || gts.iter().any(|g| g.dim() != (h, w)) {
            return Err(Error::DimensionMismatch {
                context: "sequence reference depth",
                expected: format!("{n} maps of {h}x{w}"),
                got: format!("{} maps", gts.len()),
            });
        }
    }

    let planes = config.planes.planes()?;
    let spec = config.kernel.spec()?;

    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let latent = match select_neighbor(&input.poses, i, &config.selection) {
            Some(j) => {
                let rel = relative_pose(&input.poses[i], &input.poses[j]);
                let volume = cost_volume(
                    &input.images[i],
                    &[(input.images[j].clone(), rel)],
                    k,
                    &planes,
                )?;
                toy_encoder(&volume, &config.latent)?
            }
            None => encode_image_only(&input.images[i], &config.latent)?,
        };
        raw.push(latent);
    }

    let fused: Vec<DVector<f64>> = if config.no_gp {
        raw.clone()
    } else {
        match config.mode {
            FusionMode::Batch => {
                ensure_frame_cap(n, config.batch_cap)?;
                let gram = gram_matrix(&input.poses, &spec)?;
                let latents = LatentMatrix::from_rows(&raw)?;
                let posterior = batch_posterior(&gram, &latents, spec.sigma_sq())?;
                (0..n)
                    .map(|i| posterior.mean.row(i).transpose())
                    .collect()
            }
            FusionMode::Online => {
                let mut state = OnlineState::new(spec, config.latent.latent_len())?;
                let mut fused = Vec::with_capacity(n);
                for (pose, y) in input.poses.iter().zip(&raw) {
                    fused.push(state.step(pose, y)?);
                }
                fused
            }
        }
    };

    let mut disparities = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for latent in &fused {
        let disparity = decode_disparity(
            latent,
            &config.latent,
            config.planes.d_min,
            config.planes.d_max,
            h,
            w,
        )?;
        depths.push(DepthMap::from_depth(disparity.mapv(|v| 1.0 / v))?);
        disparities.push(disparity);
    }

    let metrics = match &input.gt_depths {
        Some(gts) => {
            let mut acc = MetricsAccumulator::new();
            for (pred, gt) in depths.iter().zip(gts) {
                acc.push(pred, &DepthMap::from_depth(gt.clone())?)?;
            }
            Some(acc.finish()?)
        }
        None => None,
    };

    Ok(SequenceOutput {
        raw_latents: rows_to_array(&raw),
        fused_latents: rows_to_array(&fused),
        disparities,
        depths,
        metrics,
    })
}

fn frame_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:03}.gpmv")
}

fn load_input(config: &PipelineConfig) -> Result<SequenceInput> {
    match &config.input {
        InputSource::Dir { path } => {
            let poses = io::read_poses(&path.join("poses.jsonl"))?;
            let intrinsics = io::read_intrinsics(&path.join("intrinsics.json"))?;
            let n = poses.len();
            let mut images = Vec::with_capacity(n);
            for i in 0..n {
                let frame = path.join(frame_name("frame", i));
                if !frame.exists() {
                    return Err(Error::Config(format!(
                        "missing frame image {}",
                        frame.display()
                    )));
                }
                images.push(io::read_image(&frame)?);
            }
            let depth_paths: Vec<PathBuf> =
                (0..n).map(|i| path.join(frame_name("depth", i))).collect();
            let found = depth_paths.iter().filter(|p| p.exists()).count();
            let gt_depths = match found {
                0 => None,
                f if f == n => {
                    let mut maps = Vec::with_capacity(n);
                    for p in &depth_paths {
                        maps.push(io::read_array2(p)?);
                    }
                    Some(maps)
                }
                f => {
                    return Err(Error::Config(format!(
                        "found {f} of {n} reference depth maps in {}",
                        path.display()
                    )));
                }
            };
            Ok(SequenceInput {
                intrinsics,
                poses,
                images,
                gt_depths,
            })
        }
        InputSource::Simulate {
            trajectory,
            frames,
            width,
            height,
            focal,
            scene,
        } => {
            let intrinsics = Intrinsics::new(
                *focal,
                *focal,
                (*width as f64 - 1.0) / 2.0,
                (*height as f64 - 1.0) / 2.0,
                *width,
                *height,
            )?;
            let scene = PlaneScene::new(scene.d_star, scene.wavelength, scene.channels)?;
            let seq = simulate_sequence(&intrinsics, trajectory, *frames, config.seed, &scene)?;
            Ok(SequenceInput {
                intrinsics,
                poses: seq.poses,
                images: seq.images,
                gt_depths: Some(seq.depths),
            })
        }
    }
}

/// What `run_from_config` produced, serialized by the CLI as its summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub frames: usize,
    pub mode: FusionMode,
    pub no_gp: bool,
    pub output_dir: PathBuf,
    pub metrics: Option<MetricsReport<f64>>,
}

/// Loads the configured input, runs the pipeline and writes `fused.gpmv`,
/// per-frame `disp_NNN.gpmv` maps and, when reference depth is available,
/// `metrics.json` into the output directory.
pub fn run_from_config(config: &PipelineConfig) -> Result<RunReport> {
    let input = load_input(config)?;
    let output = run_sequence(&input, config)?;
    std::fs::create_dir_all(&config.output_dir)?;
    io::write_array2(&config.output_dir.join("fused.gpmv"), &output.fused_latents)?;
    for (i, disparity) in output.disparities.iter().enumerate() {
        io::write_array2(&config.output_dir.join(frame_name("disp", i)), disparity)?;
    }
    if let Some(metrics) = &output.metrics {
        let mut out = std::io::BufWriter::new(std::fs::File::create(
            config.output_dir.join("metrics.json"),
        )?);
        serde_json::to_writer_pretty(&mut out, metrics)?;
        use std::io::Write;
        out.write_all(b"\n")?;
    }
    Ok(RunReport {
        frames: input.poses.len(),
        mode: config.mode,
        no_gp: config.no_gp,
        output_dir: config.output_dir.clone(),
        metrics: output.metrics,
    })
}

/// Simulation input written to disk.
#[derive(Debug, Clone, Copy)]
pub struct SimulateOptions {
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub scene: PlaneScene,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Collinear { spacing: 0.3 },
            frames: 12,
            seed: 0,
            width: default_sim_width(),
            height: default_sim_height(),
            focal: default_sim_focal(),
            scene: default_scene(),
        }
    }
}

/// Renders a synthetic sequence into `dir`: poses.jsonl, intrinsics.json,
/// frame_NNN.gpmv, depth_NNN.gpmv, plus a ready-to-run config.json whose
/// input points back at `dir`.
pub fn write_simulation(dir: &Path, opts: &SimulateOptions) -> Result<PipelineConfig> {
    std::fs::create_dir_all(dir)?;
    let intrinsics = Intrinsics::new(
        opts.focal,
        opts.focal,
        (opts.width as f64 - 1.0) / 2.0,
        (opts.height as f64 - 1.0) / 2.0,
        opts.width,
        opts.height,
    )?;
    let scene = PlaneScene::new(opts.scene.d_star, opts.scene.wavelength, opts.scene.channels)?;
    let seq = simulate_sequence(&intrinsics, &opts.trajectory, opts.frames, opts.seed, &scene)?;

    io::write_poses(&dir.join("poses.jsonl"), &seq.poses)?;
    io::write_intrinsics(&dir.join("intrinsics.json"), &intrinsics)?;
    for (i, image) in seq.images.iter().enumerate() {
        io::write_image(&dir.join(frame_name("frame", i)), image)?;
    }
    for (i, depth) in seq.depths.iter().enumerate() {
        io::write_array2(&dir.join(frame_name("depth", i)), depth)?;
    }

    let config = PipelineConfig {
        input: InputSource::Dir {
            path: dir.to_path_buf(),
        },
        output_dir: dir.join("out"),
        mode: default_mode(),
        no_gp: false,
        kernel: KernelConfig::default(),
        planes: PlanesConfig::default(),
        latent: default_latent(),
        selection: SelectionRule::default(),
        batch_cap: default_batch_cap(),
        seed: opts.seed,
    };
    save_config(&dir.join("config.json"), &config)?;
    Ok(config)
}
