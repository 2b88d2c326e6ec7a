//! Adam training of a [`FusionModel`] under the composite objective.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{finite_difference_check, AutodiffError, GradCheckReport, Graph, Tensor};
use crate::fusion::{derive_seed, FusionError, FusionModel};
use crate::losses::{
    composite_loss, loss_recon, KeypointTargets, LossBreakdown, LossError, LossWeights,
};
use crate::scene::{CoordinateNormalizer, KeypointTrack, SceneError, SignalTargets, SkeletonGraph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training track has no frames")]
    EmptyTrack,
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite {
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error(
        "gradient check failed: max relative error {max_rel_error:e} at parameter {worst_index}"
    )]
    GradcheckFailed {
        max_rel_error: f64,
        worst_index: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Which objective the optimizer minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_recon + λ_sp L_sirenpose`
    #[default]
    Composite,
    /// `L_recon` alone.
    ReconOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Run a gradient check every this many steps (0 disables).
    pub gradcheck_every: usize,
    pub gradcheck_tolerance: f64,
    pub max_grad_norm: Option<f64>,
    pub freeze_high_stream: bool,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            gradcheck_every: 0,
            gradcheck_tolerance: 1e-5,
            max_grad_norm: None,
            freeze_high_stream: false,
            objective: Objective::Composite,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {n}"));
            }
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Mismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Normalized supervision for every frame of a track.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    times: Vec<f64>,
    keypoints: KeypointTargets,
    signal: Tensor,
    skeleton: SkeletonGraph,
}

/// Supervision rows for one optimizer step.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub times: Vec<f64>,
    pub keypoints: KeypointTargets,
    pub signal: Tensor,
}

impl TrainingSet {
    pub fn new(
        track: &KeypointTrack,
        targets: &SignalTargets,
        normalizer: &CoordinateNormalizer,
    ) -> Result<Self> {
        if track.is_empty() {
            return Err(TrainError::EmptyTrack);
        }
        if targets.len() != track.len() {
            return Err(TrainError::Mismatch(format!(
                "{} target frames for {} track frames",
                targets.len(),
                track.len()
            )));
        }
        let frames: Vec<_> = track
            .frames()
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.positions
                    .iter_mut()
                    .for_each(|p| *p = normalizer.apply(*p));
                f
            })
            .collect();
        let keypoints = KeypointTargets::from_frames(&frames)?;
        let s = targets.num_samples();
        let signal_values = targets
            .points
            .iter()
            .flat_map(|row| row.iter().flat_map(|p| normalizer.apply(*p)))
            .collect();
        Ok(TrainingSet {
            times: track.times(),
            keypoints,
            signal: Tensor::matrix(track.len(), 3 * s, signal_values)?,
            skeleton: track.skeleton().clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn skeleton(&self) -> &SkeletonGraph {
        &self.skeleton
    }

    pub fn num_samples(&self) -> usize {
        self.signal.cols() / 3
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch> {
        let kc = self.keypoints.positions.cols();
        let m = self.keypoints.num_keypoints();
        let sc = self.signal.cols();
        let mut pos = Vec::with_capacity(indices.len() * kc);
        let mut mask = Vec::with_capacity(indices.len() * m);
        let mut sig = Vec::with_capacity(indices.len() * sc);
        let mut times = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(TrainError::Mismatch(format!("frame {i} out of range")));
            }
            times.push(self.times[i]);
            pos.extend_from_slice(&self.keypoints.positions.values()[i * kc..(i + 1) * kc]);
            mask.extend_from_slice(&self.keypoints.mask.values()[i * m..(i + 1) * m]);
            sig.extend_from_slice(&self.signal.values()[i * sc..(i + 1) * sc]);
        }
        let rows = indices.len();
        Ok(TrainBatch {
            times,
            keypoints: KeypointTargets {
                positions: Tensor::matrix(rows, kc, pos)?,
                mask: Tensor::matrix(rows, m, mask)?,
            },
            signal: Tensor::matrix(rows, sc, sig)?,
        })
    }

    pub fn all(&self) -> Result<TrainBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Loss value, breakdown and flat gradient of the trainable parameters.
pub fn evaluate(
    model: &FusionModel,
    batch: &TrainBatch,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
    freeze_high: bool,
    objective: Objective,
) -> Result<(LossBreakdown, Vec<f64>)> {
    evaluate_on(
        &Graph::new(),
        model,
        batch,
        skeleton,
        weights,
        freeze_high,
        objective,
    )
}

fn evaluate_on(
    graph: &Graph,
    model: &FusionModel,
    batch: &TrainBatch,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
    freeze_high: bool,
    objective: Objective,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let bound = model.bind(graph, freeze_high);
    let out = bound.forward(graph, &batch.times)?;
    let (root, breakdown) = match objective {
        Objective::Composite => {
            let loss = composite_loss(
                out.keypoints,
                out.samples,
                &batch.keypoints,
                &batch.signal,
                skeleton,
                weights,
            )?;
            (loss.total, loss.breakdown())
        }
        Objective::ReconOnly => {
            let per_row = 1.0 / batch.times.len().max(1) as f64;
            let recon = loss_recon(out.samples, &batch.signal)?.scale(per_row);
            let value = recon.item();
            let breakdown = LossBreakdown {
                l_recon: value,
                l_total: value,
                ..LossBreakdown::default()
            };
            (recon, breakdown)
        }
    };
    let grads = graph.backward(root)?;
    let flat = bound
        .parameters()
        .into_iter()
        .flat_map(|p| grads.wrt(p).into_values())
        .collect();
    Ok((breakdown, flat))
}

/// Compares backprop of the objective with central differences over every
/// trainable parameter.
pub fn run_gradcheck(
    model: &FusionModel,
    batch: &TrainBatch,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
    freeze_high: bool,
    step: f64,
) -> Result<GradCheckReport> {
    run_gradcheck_with(
        Graph::new,
        model,
        batch,
        skeleton,
        weights,
        freeze_high,
        step,
    )
}

/// [`run_gradcheck`] with a custom graph factory (used for fault injection).
#[doc(hidden)]
pub fn run_gradcheck_with(
    make_graph: impl Fn() -> Graph,
    model: &FusionModel,
    batch: &TrainBatch,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
    freeze_high: bool,
    step: f64,
) -> Result<GradCheckReport> {
    let full = model.flat_parameters();
    let n_train = if freeze_high {
        model.low_stream().num_parameters()
    } else {
        full.len()
    };
    let mut scratch = model.clone();
    let f = |p: &[f64]| -> crate::autodiff::Result<(f64, Vec<f64>)> {
        let mut params = full.clone();
        params[..n_train].copy_from_slice(p);
        let mut m = scratch.clone();
        m.set_flat_parameters(&params)
            .map_err(|e| AutodiffError::InvalidArgument {
                op: "gradcheck",
                reason: e.to_string(),
            })?;
        let g = make_graph();
        evaluate_on(
            &g,
            &m,
            batch,
            skeleton,
            weights,
            freeze_high,
            Objective::Composite,
        )
        .map(|(b, grad)| (b.l_total, grad))
        .map_err(|e| AutodiffError::InvalidArgument {
            op: "gradcheck",
            reason: e.to_string(),
        })
    };
    let report = finite_difference_check(f, &full[..n_train], step)?;
    scratch.set_flat_parameters(&full)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRecord {
    pub step: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
    pub wall_time_secs: f64,
    pub param_checksum: String,
    pub gradchecks: Vec<GradcheckRecord>,
}

impl TrainReport {
    pub fn final_breakdown(&self) -> LossBreakdown {
        self.history.last().copied().unwrap_or_default()
    }

    /// `step,l_pos,l_geo,l_sirenpose,l_recon,l_total` rows, steps counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_pos,l_geo,l_sirenpose,l_recon,l_total\n");
        for (i, b) in self.history.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                b.l_pos,
                b.l_geo,
                b.l_sirenpose,
                b.l_recon,
                b.l_total
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = serde_json::json!({
            "steps": self.history.len(),
            "final": self.final_breakdown(),
            "param_checksum": self.param_checksum,
            "wall_time_secs": self.wall_time_secs,
            "gradchecks": self.gradchecks,
        });
        serde_json::to_string_pretty(&summary).expect("serializable")
    }
}

/// FNV-1a over the little-endian bytes of every parameter.
pub fn parameter_checksum(params: &[f64]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in params.iter().flat_map(|v| v.to_le_bytes()) {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Frame indices for one step: every frame when the track is no longer than
/// the batch, otherwise a seeded draw with replacement.
pub fn sample_batch(rng: &mut ChaCha8Rng, num_frames: usize, batch_size: usize) -> Vec<usize> {
    if num_frames <= batch_size {
        (0..num_frames).collect()
    } else {
        (0..batch_size)
            .map(|_| rng.random_range(0..num_frames))
            .collect()
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Optimizes `model` on `track`/`targets`. When `checkpoint_dir` is given,
/// `checkpoint.json` there is replaced atomically at the configured cadence.
pub fn train(
    model: &FusionModel,
    track: &KeypointTrack,
    targets: &SignalTargets,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(FusionModel, TrainReport)> {
    config.validate()?;
    let data = TrainingSet::new(track, targets, model.normalizer())?;
    if data.num_samples() != model.layout().num_samples
        || track.num_keypoints() != model.layout().num_keypoints
    {
        return Err(TrainError::Mismatch(format!(
            "data has {} keypoints and {} samples, model expects {:?}",
            track.num_keypoints(),
            data.num_samples(),
            model.layout()
        )));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let mut params = model.flat_parameters();
    let n_train = if config.freeze_high_stream {
        model.low_stream().num_parameters()
    } else {
        params.len()
    };
    let mut state = AdamState::new(n_train);
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let mut history = Vec::with_capacity(config.steps);
    let mut gradchecks = Vec::new();

    for step in 1..=config.steps {
        let indices = sample_batch(&mut rng, data.len(), config.batch_size);
        let batch = data.batch(&indices)?;
        let (breakdown, mut grads) = evaluate(
            &model,
            &batch,
            data.skeleton(),
            &config.weights,
            config.freeze_high_stream,
            config.objective,
        )?;
        if !breakdown.l_total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step, breakdown });
        }
        if let Some(max_norm) = config.max_grad_norm {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam_step(&mut params[..n_train], &grads, &mut state, &adam)?;
        model.set_flat_parameters(&params)?;
        history.push(breakdown);

        if config.gradcheck_every > 0 && step % config.gradcheck_every == 0 {
            let small: Vec<usize> = indices.iter().copied().take(4).collect();
            let report = run_gradcheck(
                &model,
                &data.batch(&small)?,
                data.skeleton(),
                &config.weights,
                config.freeze_high_stream,
                1e-6,
            )?;
            gradchecks.push(GradcheckRecord {
                step,
                max_rel_error: report.max_rel_error,
                worst_index: report.worst_index,
            });
            if report.max_rel_error > config.gradcheck_tolerance {
                return Err(TrainError::GradcheckFailed {
                    max_rel_error: report.max_rel_error,
                    worst_index: report.worst_index,
                });
            }
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                write_atomic(&dir.join("checkpoint.json"), model.to_json()?.as_bytes())?;
            }
        }
    }

    let report = TrainReport {
        history,
        wall_time_secs: started.elapsed().as_secs_f64(),
        param_checksum: parameter_checksum(&params),
        gradchecks,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut state = AdamState {
            m: vec![0.5, -0.5],
            v: vec![0.25, 0.25],
            t: 3,
        };
        let cfg = AdamConfig::default();
        let before = state.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut state, &cfg).unwrap();
        assert_eq!(state.m, vec![0.45, -0.45]);
        assert!((state.v[0] - 0.24975).abs() < 1e-15);
        assert!(state.m[0].abs() < before.m[0].abs());
        // moments are nonzero, so the parameters still move along the old direction
        assert!(p[0] < 1.0 && p[1] > -2.0);

        let mut fresh = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut fresh, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(fresh, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        let v_hat = (0.001 * 1.0) / (1.0 - 0.999);
        let expected = -1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut s = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + (k as f64).sin()).collect();
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.learning_rate, 1e-4);
        assert_eq!(ok.batch_size, 64);
        for bad in [
            TrainConfig {
                steps: 0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"steps": 10}"#).unwrap();
        assert_eq!(parsed.steps, 10);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stpes": 10}"#).is_err());
    }

    #[test]
    fn batch_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_batch(&mut rng, 5, 64), vec![0, 1, 2, 3, 4]);
        let b = sample_batch(&mut rng, 100, 64);
        assert_eq!(b.len(), 64);
        assert!(b.iter().all(|&i| i < 100));
    }

    #[test]
    fn checksum_is_stable() {
        assert_eq!(parameter_checksum(&[]), "cbf29ce484222325");
        assert_ne!(parameter_checksum(&[0.0]), parameter_checksum(&[-0.0]));
    }
}
