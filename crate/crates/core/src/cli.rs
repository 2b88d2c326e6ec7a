//! Command-line front end and the experiment protocol it drives.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Fault, Graph, Tensor};
use crate::eval::{bone_trajectory, evaluate_tracks, EvalError, EvalOptions, MetricReport};
use crate::fusion::{
    derive_seed, FusionConfig, FusionError, FusionModel, OutputLayout, TimeEncoding,
};
use crate::losses::{KeypointTargets, LossWeights};
use crate::scene::{
    generate_scene, CoordinateNormalizer, GeneratedScene, KeypointFrame, KeypointTrack, SceneError,
    SceneSpec, SkeletonGraph,
};
use crate::trainer::{run_gradcheck_with, train, TrainBatch, TrainConfig, TrainError, TrainReport};

/// Sub-streams of the run seed.
pub const SCENE_STREAM: u64 = 10;
pub const MODEL_STREAM: u64 = 11;
pub const TRAIN_STREAM: u64 = 12;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 1 validation, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::GradcheckFailed { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Scene(inner) => inner.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_geo: bool,
    pub freeze_high_stream: bool,
    pub remove_keypoints: BTreeSet<usize>,
}

/// The four module-level configurations, in report order.
pub fn ablation_rows(remove_keypoints: &BTreeSet<usize>) -> Vec<(&'static str, Ablation)> {
    [
        ("full", false, false),
        ("no-geo", true, false),
        ("no-highfreq", false, true),
        ("neither", true, true),
    ]
    .into_iter()
    .map(|(name, disable_geo, freeze_high_stream)| {
        (
            name,
            Ablation {
                disable_geo,
                freeze_high_stream,
                remove_keypoints: remove_keypoints.clone(),
            },
        )
    })
    .collect()
}

/// Splits frame indices into (train, held-out); every `every`-th frame, offset by
/// `every / 2`, is held out. `every < 2` trains and evaluates on all frames.
pub fn holdout_split(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    if every < 2 {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let held = |i: &usize| i % every == every / 2;
    (
        (0..n).filter(|i| !held(i)).collect(),
        (0..n).filter(held).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            model: FusionConfig::default(),
            train: TrainConfig::default(),
            holdout_every: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub model: FusionModel,
    pub report: TrainReport,
    pub heldout: KeypointTrack,
    pub prediction: KeypointTrack,
    pub metrics: MetricReport,
}

/// Model predictions at the frame times of `reference`, on its skeleton.
pub fn predict_track(model: &FusionModel, reference: &KeypointTrack) -> Result<KeypointTrack> {
    let frames = model.predict_frames(&reference.times())?;
    Ok(KeypointTrack::new(reference.skeleton().clone(), frames)?)
}

/// Trains on the observed non-held-out frames (minus removed keypoints) and
/// scores predictions against clean ground truth on the held-out frames.
pub fn run_experiment(
    scene: &GeneratedScene,
    protocol: &Protocol,
    ablation: &Ablation,
    checkpoint_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let (train_idx, test_idx) = holdout_split(scene.ground_truth.len(), protocol.holdout_every);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(CliError::Validation(format!(
            "scene with {} frames is too short for hold-out every {}",
            scene.ground_truth.len(),
            protocol.holdout_every
        )));
    }
    let mut track = scene.observed.select(&train_idx)?;
    if !ablation.remove_keypoints.is_empty() {
        track = track.corrupt_keypoints(&ablation.remove_keypoints)?;
    }
    let targets = scene.targets.select(&train_idx)?;
    let heldout = scene.ground_truth.select(&test_idx)?;

    let mut model = FusionModel::for_track(
        &protocol.model,
        &track,
        targets.num_samples(),
        derive_seed(protocol.seed, MODEL_STREAM),
    )?;
    let mut config = protocol.train.clone();
    config.seed = derive_seed(protocol.seed, TRAIN_STREAM);
    if ablation.disable_geo {
        config.weights.lambda_geo = 0.0;
    }
    if ablation.freeze_high_stream {
        model.zero_high_stream();
        config.freeze_high_stream = true;
    }
    let (model, report) = train(&model, &track, &targets, &config, checkpoint_dir)?;
    let prediction = predict_track(&model, &heldout)?;
    let metrics = evaluate_tracks(&prediction, &heldout, &EvalOptions::default())?;
    Ok(ExperimentOutcome {
        model,
        report,
        heldout,
        prediction,
        metrics,
    })
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_holdout() -> usize {
    5
}

fn default_runs() -> usize {
    5
}

/// Everything one `train` or `ablate` invocation needs. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub scene: PathBuf,
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    #[serde(default)]
    pub model: FusionConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub disable_geo: bool,
    #[serde(default)]
    pub freeze_high_stream: bool,
    #[serde(default)]
    pub remove_keypoints: Vec<usize>,
    #[serde(default = "default_holdout")]
    pub holdout_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seeds per configuration for `ablate`.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut manifest: ExperimentManifest = serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("{}: line {}: {e}", path.display(), e.line()))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        manifest.scene = resolve(&manifest.scene);
        manifest.train_config = manifest.train_config.as_ref().map(resolve);
        manifest.output_dir = resolve(&manifest.output_dir);
        Ok(manifest)
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_geo: self.disable_geo,
            freeze_high_stream: self.freeze_high_stream,
            remove_keypoints: self.remove_keypoints.iter().copied().collect(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let Some(path) = &self.train_config else {
            return Ok(TrainConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!("{}: line {}: {e}", path.display(), e.line()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        Ok(Protocol {
            model: self.model.clone(),
            train: self.train_config()?,
            holdout_every: self.holdout_every,
            seed: self.seed,
        })
    }
}

/// Scene spec with its seed replaced by one derived from `seed`, if given.
pub fn seeded_spec(mut spec: SceneSpec, seed: Option<u64>) -> SceneSpec {
    if let Some(s) = seed {
        spec.seed = derive_seed(s, SCENE_STREAM);
    }
    spec
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Polyline chart with one line per series; returns a standalone SVG document.
pub fn svg_line_chart(title: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.1.iter()).filter(finite);
    let ys = series.iter().flat_map(|s| s.2.iter()).filter(finite);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let (y0, y1) = ys.fold((0.0f64, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let sx = if x1 > x0 {
        (W - 2.0 * PAD) / (x1 - x0)
    } else {
        0.0
    };
    let sy = if y1 > y0 {
        (H - 2.0 * PAD) / (y1 - y0)
    } else {
        0.0
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        title
    );
    let _ = writeln!(
        out,
        r##"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="#444"/>"##,
        H - PAD,
        W - PAD
    );
    if y1.is_finite() {
        let _ = writeln!(
            out,
            r#"<text x="4" y="{PAD}" font-family="sans-serif" font-size="10">{y1:.3e}</text>"#
        );
    }
    for (k, (name, x, y)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = x
            .iter()
            .zip(y.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", PAD + (a - x0) * sx, H - PAD - (b - y0) * sy))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            W - PAD - 90.0,
            PAD + 14.0 * (k as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Parser)]
#[command(
    name = "sirenpose",
    version,
    about = "Frequency-fused SIREN keypoint trajectories on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene (track.jsonl, targets.jsonl) from a spec.
    GenScene(GenSceneArgs),
    /// Train a model from an experiment manifest.
    Train(TrainArgs),
    /// Score a checkpoint or a predicted track against a ground-truth track.
    Eval(EvalArgs),
    /// Compare backprop against finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Run the four module ablations over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Scene spec JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment manifest JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the manifest's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub disable_geo: bool,
    #[arg(long)]
    pub freeze_high_stream: bool,
    /// Keypoint indices to drop from supervision, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub remove_keypoints: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "prediction")]
    pub checkpoint: Option<PathBuf>,
    /// Predicted track JSONL, scored instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub prediction: Option<PathBuf>,
    /// Ground-truth track JSONL.
    #[arg(long)]
    pub track: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame gap for relative pose error.
    #[arg(long, default_value_t = 1)]
    pub delta: usize,
    /// Also write per-frame SVG charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Gradcheck model spec JSON; built-in small model when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub disable_geo: bool,
    #[arg(long)]
    pub freeze_high_stream: bool,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First seed; runs use consecutive seeds from here.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub remove_keypoints: Vec<usize>,
    #[arg(long)]
    pub svg: bool,
}

pub fn cmd_gen_scene(args: &GenSceneArgs) -> Result<()> {
    let spec = seeded_spec(SceneSpec::load(&args.config)?, args.seed);
    let scene = generate_scene(&spec)?;
    create_dir(&args.out)?;
    scene.ground_truth.save(&args.out.join("track.jsonl"))?;
    scene.targets.save(&args.out.join("targets.jsonl"))?;
    if spec.noise_sigma > 0.0 {
        scene.observed.save(&args.out.join("observed.jsonl"))?;
    }
    eprintln!(
        "gen-scene: {} frames, {} keypoints, {} samples -> {}",
        scene.ground_truth.len(),
        scene.ground_truth.num_keypoints(),
        scene.targets.num_samples(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<ExperimentOutcome> {
    let mut manifest = ExperimentManifest::load(&args.config)?;
    manifest.disable_geo |= args.disable_geo;
    manifest.freeze_high_stream |= args.freeze_high_stream;
    if !args.remove_keypoints.is_empty() {
        manifest.remove_keypoints = args.remove_keypoints.clone();
    }
    if let Some(s) = args.seed {
        manifest.seed = s;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| manifest.output_dir.clone());
    let spec = seeded_spec(SceneSpec::load(&manifest.scene)?, args.seed);
    let scene = generate_scene(&spec)?;
    create_dir(&out)?;
    let outcome = run_experiment(
        &scene,
        &manifest.protocol()?,
        &manifest.ablation(),
        Some(&out),
    )?;
    write(&out.join("checkpoint.json"), outcome.model.to_json()?)?;
    write(&out.join("train_report.csv"), outcome.report.to_csv())?;
    write(
        &out.join("train_summary.json"),
        outcome.report.summary_json() + "\n",
    )?;
    outcome.heldout.save(&out.join("heldout.jsonl"))?;
    let last = outcome.report.final_breakdown();
    eprintln!(
        "train: {} steps, final l_total {:.6e} (l_pos {:.3e}, l_geo {:.3e}, l_recon {:.3e}), held-out epe {:.4e} -> {}",
        outcome.report.history.len(),
        last.l_total,
        last.l_pos,
        last.l_geo,
        last.l_recon,
        outcome.metrics.epe,
        out.display()
    );
    Ok(outcome)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    let gt = KeypointTrack::load(&args.track)?;
    let pred = match (&args.checkpoint, &args.prediction) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            predict_track(&FusionModel::from_json(&text)?, &gt)?
        }
        (None, Some(path)) => KeypointTrack::load(path)?,
        (None, None) => {
            return Err(CliError::Validation(
                "either --checkpoint or --prediction is required".into(),
            ))
        }
    };
    let options = EvalOptions {
        rpe_delta: args.delta,
        ..EvalOptions::default()
    };
    let report = evaluate_tracks(&pred, &gt, &options)?;
    create_dir(&args.out)?;
    report.save(&args.out, "metrics")?;
    let first = &gt.frames()[0];
    let (i, j) = gt.skeleton().edges()[options.reference_edge];
    let reference =
        nalgebra::Vector3::from(first.positions[j]) - nalgebra::Vector3::from(first.positions[i]);
    bone_trajectory(&pred, options.reference_edge, &reference)?
        .save(&args.out.join("pred_trajectory.csv"))?;
    bone_trajectory(&gt, options.reference_edge, &reference)?
        .save(&args.out.join("gt_trajectory.csv"))?;
    if args.svg {
        let t = &report.series.times;
        write(
            &args.out.join("frame_errors.svg"),
            svg_line_chart(
                "per-frame error",
                &[
                    ("epe", t, &report.series.epe),
                    ("ate", t, &report.series.ate),
                ],
            ),
        )?;
    }
    eprintln!(
        "eval: {} frames, epe {:.4e}, mse {:.4e}, ate {:.4e}, rpe {:.4e} / {:.4e} deg, geometric accuracy {:.4} -> {}",
        report.frames,
        report.epe,
        report.mse,
        report.ate_rmse,
        report.rpe_trans_rmse,
        report.rpe_rot_rmse,
        report.geometric_accuracy,
        args.out.display()
    );
    Ok(report)
}

/// Small model and batch used by `gradcheck`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub hidden: Vec<usize>,
    /// Keypoints on a chain skeleton (`M - 1` edges).
    pub keypoints: usize,
    pub samples: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            hidden: vec![16, 16],
            keypoints: 4,
            samples: 6,
            batch: 4,
            weights: LossWeights::default(),
            step: 1e-6,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub num_parameters: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random small fusion model, batch and chain skeleton for gradient checks.
pub fn gradcheck_fixture(spec: &GradcheckSpec) -> Result<(FusionModel, TrainBatch, SkeletonGraph)> {
    let m = spec.keypoints;
    if m < 2 || spec.batch == 0 || spec.samples == 0 {
        return Err(CliError::Validation(
            "gradcheck needs at least 2 keypoints, 1 sample and 1 frame".into(),
        ));
    }
    let skeleton = SkeletonGraph::new(
        m,
        (0..m - 1).map(|i| (i, i + 1)).collect(),
        vec![1.0; m - 1],
    )?;
    let config = FusionConfig {
        hidden: spec.hidden.clone(),
        zero_high_head: false,
        ..FusionConfig::default()
    };
    let encoding = TimeEncoding {
        t_min: 0.0,
        t_max: 1.0,
        fourier_order: config.fourier_order,
    };
    let layout = OutputLayout {
        num_keypoints: m,
        num_samples: spec.samples,
    };
    let model = FusionModel::new(
        &config,
        layout,
        encoding,
        CoordinateNormalizer::default(),
        spec.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 99));
    let times: Vec<f64> = (0..spec.batch)
        .map(|b| b as f64 / spec.batch as f64)
        .collect();
    let frames: Vec<KeypointFrame> = times
        .iter()
        .map(|&t| {
            KeypointFrame::new(
                t,
                (0..m)
                    .map(|_| {
                        [
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ]
                    })
                    .collect(),
            )
        })
        .collect();
    let signal: Vec<f64> = (0..spec.batch * 3 * spec.samples)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    let batch = TrainBatch {
        times,
        keypoints: KeypointTargets::from_frames(&frames)
            .map_err(|e| CliError::Validation(e.to_string()))?,
        signal: Tensor::matrix(spec.batch, 3 * spec.samples, signal)
            .map_err(|e| CliError::Validation(e.to_string()))?,
    };
    Ok((model, batch, skeleton))
}

pub fn run_gradcheck_spec(
    spec: &GradcheckSpec,
    freeze_high: bool,
    fault: Option<Fault>,
) -> Result<GradcheckOutcome> {
    let (model, batch, skeleton) = gradcheck_fixture(spec)?;
    let make_graph = || fault.map_or_else(Graph::new, Graph::with_fault);
    let report = run_gradcheck_with(
        make_graph,
        &model,
        &batch,
        &skeleton,
        &spec.weights,
        freeze_high,
        spec.step,
    )?;
    Ok(GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        worst_index: report.worst_index,
        num_parameters: report.analytic.len(),
        tolerance: spec.tolerance,
        passed: report.max_rel_error < spec.tolerance,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Validation(format!("{}: line {}: {e}", path.display(), e.line()))
            })?
        }
        None => GradcheckSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if args.disable_geo {
        spec.weights.lambda_geo = 0.0;
    }
    spec.weights
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let fault = args.inject_fault.then_some(Fault::NegatedSinDerivative);
    let outcome = run_gradcheck_spec(&spec, args.freeze_high_stream, fault)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(
            &out.join("gradcheck.json"),
            serde_json::to_string_pretty(&outcome).expect("serializable") + "\n",
        )?;
    }
    println!(
        "gradcheck: {} parameters, max relative error {:.3e} at parameter {} (tolerance {:.0e}): {}",
        outcome.num_parameters,
        outcome.max_rel_error,
        outcome.worst_index,
        outcome.tolerance,
        if outcome.passed { "PASS" } else { "FAIL" }
    );
    if outcome.passed {
        Ok(outcome)
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} at parameter {}",
            outcome.max_rel_error, outcome.worst_index
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub config: &'static str,
    pub seed: u64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const METRIC_COLUMNS: &str =
    "mse,epe,mse_score,epe_score,geometric_accuracy,temporal_consistency,motion_smoothness,ate_rmse,rpe_trans_rmse,rpe_rot_rmse";

fn metric_values(m: &MetricReport) -> [f64; 10] {
    [
        m.mse,
        m.epe,
        m.mse_score,
        m.epe_score,
        m.geometric_accuracy,
        m.temporal_consistency,
        m.motion_smoothness,
        m.ate_rmse,
        m.rpe_trans_rmse,
        m.rpe_rot_rmse,
    ]
}

impl AblationTable {
    pub fn configs(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.config) {
                names.push(r.config);
            }
        }
        names
    }

    /// Median of `metric` over the seeds of `config`.
    pub fn median_of(&self, config: &str, metric: impl Fn(&MetricReport) -> f64) -> f64 {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.config == config)
            .map(|r| metric(&r.metrics))
            .collect();
        median(&mut v)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = format!("config,seed,{METRIC_COLUMNS}\n");
        for r in &self.runs {
            let vals: Vec<String> = metric_values(&r.metrics)
                .iter()
                .map(f64::to_string)
                .collect();
            let _ = writeln!(out, "{},{},{}", r.config, r.seed, vals.join(","));
        }
        out
    }

    /// One row per configuration holding the per-metric medians.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("config,{METRIC_COLUMNS}\n");
        for name in self.configs() {
            let vals: Vec<String> = (0..10)
                .map(|k| self.median_of(name, |m| metric_values(m)[k]).to_string())
                .collect();
            let _ = writeln!(out, "{},{}", name, vals.join(","));
        }
        out
    }
}

/// Runs `rows` for seeds `base..base + runs`, one thread per row. Each seed
/// also regenerates the scene noise from its derived scene seed.
pub fn run_ablation(
    spec: &SceneSpec,
    protocol: &Protocol,
    rows: &[(&'static str, Ablation)],
    base_seed: u64,
    runs: usize,
) -> Result<AblationTable> {
    let seeds: Vec<u64> = (0..runs as u64).map(|k| base_seed + k).collect();
    let scenes: Vec<GeneratedScene> = seeds
        .iter()
        .map(|&s| generate_scene(&seeded_spec(spec.clone(), Some(s))))
        .collect::<std::result::Result<_, _>>()?;
    let results: Vec<Result<Vec<AblationRun>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = rows
            .iter()
            .map(|(name, ablation)| {
                let (seeds, scenes) = (&seeds, &scenes);
                scope.spawn(move || {
                    seeds
                        .iter()
                        .zip(scenes)
                        .map(|(&seed, scene)| {
                            let p = Protocol {
                                seed,
                                ..protocol.clone()
                            };
                            let outcome = run_experiment(scene, &p, ablation, None)?;
                            Ok(AblationRun {
                                config: name,
                                seed,
                                metrics: outcome.metrics,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut table = AblationTable { runs: Vec::new() };
    for r in results {
        table.runs.extend(r?);
    }
    Ok(table)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationTable> {
    let manifest = ExperimentManifest::load(&args.config)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| manifest.output_dir.clone());
    let mut protocol = manifest.protocol()?;
    let base = args.seed.unwrap_or(manifest.seed);
    protocol.seed = base;
    let removed: BTreeSet<usize> = if args.remove_keypoints.is_empty() {
        manifest.remove_keypoints.iter().copied().collect()
    } else {
        args.remove_keypoints.iter().copied().collect()
    };
    let spec = SceneSpec::load(&manifest.scene)?;
    let table = run_ablation(
        &spec,
        &protocol,
        &ablation_rows(&removed),
        base,
        manifest.runs.max(1),
    )?;
    create_dir(&out)?;
    write(&out.join("ablation_runs.csv"), table.runs_csv())?;
    write(&out.join("ablation.csv"), table.summary_csv())?;
    if args.svg {
        let names = table.configs();
        let series: Vec<(String, Vec<f64>, Vec<f64>)> = names
            .iter()
            .map(|n| {
                let runs: Vec<&AblationRun> =
                    table.runs.iter().filter(|r| r.config == *n).collect();
                (
                    n.to_string(),
                    runs.iter().map(|r| r.seed as f64).collect(),
                    runs.iter().map(|r| r.metrics.mse).collect(),
                )
            })
            .collect();
        let refs: Vec<(&str, &[f64], &[f64])> = series
            .iter()
            .map(|(n, x, y)| (n.as_str(), &x[..], &y[..]))
            .collect();
        write(
            &out.join("ablation_mse.svg"),
            svg_line_chart("held-out keypoint MSE by seed", &refs),
        )?;
    }
    println!(
        "{:<12} {:>12} {:>12} {:>10} {:>10}",
        "config", "median mse", "median epe", "geo acc", "mse score"
    );
    for name in table.configs() {
        println!(
            "{:<12} {:>12.4e} {:>12.4e} {:>10.4} {:>10.3}",
            name,
            table.median_of(name, |m| m.mse),
            table.median_of(name, |m| m.epe),
            table.median_of(name, |m| m.geometric_accuracy),
            table.median_of(name, |m| m.mse_score)
        );
    }
    Ok(table)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenScene(a) => cmd_gen_scene(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (tr, te) = holdout_split(23, 5);
        assert_eq!(te, vec![2, 7, 12, 17, 22]);
        assert_eq!(tr.len() + te.len(), 23);
        assert!(tr.iter().all(|i| !te.contains(i)));
        let (a, b) = holdout_split(4, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn rows_in_table_order() {
        let rows = ablation_rows(&BTreeSet::new());
        let names: Vec<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names, ["full", "no-geo", "no-highfreq", "neither"]);
        assert!(rows[3].1.disable_geo && rows[3].1.freeze_high_stream);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::Validation(String::new()).exit_code(), 1);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 2);
        assert_eq!(CliError::Io(String::new()).exit_code(), 3);
        let nf: CliError = TrainError::NonFinite {
            step: 3,
            breakdown: Default::default(),
        }
        .into();
        assert_eq!(nf.exit_code(), 2);
    }

    #[test]
    fn gradcheck_default_passes_and_fault_fails() {
        let spec = GradcheckSpec::default();
        assert!(run_gradcheck_spec(&spec, false, None).unwrap().passed);
        let broken = run_gradcheck_spec(&spec, false, Some(Fault::NegatedSinDerivative)).unwrap();
        assert!(!broken.passed);
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_line_chart("t", &[("a", &[0.0, 1.0], &[1.0, 2.0])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("polyline"));
    }
}
