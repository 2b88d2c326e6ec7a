//! Frequency-fused keypoint field: `f(t) = f_low(t) + λ f_high(t)`.
//!
//! Both streams are [`SirenNetwork`]s over the same encoded time input and the
//! same output layout: `3 * M` keypoint coordinates followed by `3 * S` dense
//! signal coordinates. The low stream uses a small `omega0`, the high stream the
//! usual 30. Outputs live in normalized coordinates; the embedded
//! [`CoordinateNormalizer`] maps them back to scene units.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::scene::{CoordinateNormalizer, KeypointFrame, KeypointTrack, Point3};
use crate::siren::{BoundSiren, SirenError, SirenNetwork};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Siren(#[from] SirenError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub num_keypoints: usize,
    pub num_samples: usize,
}

impl OutputLayout {
    pub fn output_dim(&self) -> usize {
        3 * (self.num_keypoints + self.num_samples)
    }

    pub fn keypoint_cols(&self) -> usize {
        3 * self.num_keypoints
    }
}

/// Maps time onto `u ∈ [-1, 1]` over the training span, optionally followed by
/// `sin(kπu), cos(kπu)` for `k = 1..=fourier_order`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub t_min: f64,
    pub t_max: f64,
    pub fourier_order: usize,
}

impl TimeEncoding {
    pub fn dim(&self) -> usize {
        1 + 2 * self.fourier_order
    }

    pub fn unit(&self, t: f64) -> f64 {
        let span = self.t_max - self.t_min;
        if span > 0.0 {
            2.0 * (t - self.t_min) / span - 1.0
        } else {
            0.0
        }
    }

    /// `[times.len(), dim]` input rows.
    pub fn encode(&self, times: &[f64]) -> Tensor {
        let mut values = Vec::with_capacity(times.len() * self.dim());
        for &t in times {
            let u = self.unit(t);
            values.push(u);
            for k in 1..=self.fourier_order {
                let a = k as f64 * PI * u;
                values.push(a.sin());
                values.push(a.cos());
            }
        }
        Tensor::matrix(times.len(), self.dim(), values).expect("shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: Vec<usize>,
    pub low_omega0: f64,
    pub high_omega0: f64,
    /// Frequency of the high stream's sine layers after the first; `None` reuses `high_omega0`.
    pub high_hidden_omega0: Option<f64>,
    /// Start the high stream's linear head at zero so it contributes nothing until trained.
    pub zero_high_head: bool,
    pub lambda_blend: f64,
    pub fourier_order: usize,
    /// Largest half-extent of the training track after normalization.
    pub coordinate_extent: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            hidden: vec![64, 64],
            low_omega0: 1.0,
            high_omega0: 30.0,
            high_hidden_omega0: Some(0.1),
            zero_high_head: true,
            lambda_blend: 1.0,
            fourier_order: 0,
            coordinate_extent: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    low: SirenNetwork,
    high: SirenNetwork,
    lambda_blend: f64,
    encoding: TimeEncoding,
    layout: OutputLayout,
    normalizer: CoordinateNormalizer,
}

/// Model-space outputs for a batch of times.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[batch, M, 3]`
    pub keypoints: Tensor,
    /// `[batch, S, 3]`
    pub samples: Tensor,
}

impl FusionModel {
    /// Samples both streams; the high stream's seed is derived from `seed`.
    pub fn new(
        config: &FusionConfig,
        layout: OutputLayout,
        encoding: TimeEncoding,
        normalizer: CoordinateNormalizer,
        seed: u64,
    ) -> Result<Self> {
        if !config.lambda_blend.is_finite() {
            return Err(FusionError::Config(format!(
                "lambda_blend must be finite, got {}",
                config.lambda_blend
            )));
        }
        if layout.num_keypoints == 0 {
            return Err(FusionError::Config(
                "layout needs at least one keypoint".into(),
            ));
        }
        let in_dim = encoding.dim();
        let out_dim = layout.output_dim();
        let low = SirenNetwork::new(in_dim, &config.hidden, out_dim, config.low_omega0, seed)?;
        let mut omegas = vec![config.high_omega0];
        omegas.resize(
            config.hidden.len(),
            config.high_hidden_omega0.unwrap_or(config.high_omega0),
        );
        let mut high = SirenNetwork::with_layer_omegas(
            in_dim,
            &config.hidden,
            out_dim,
            &omegas,
            derive_seed(seed, 1),
        )?;
        if config.zero_high_head {
            let mut params = high.flat_parameters();
            let head = high
                .layers()
                .last()
                .map_or(0, |l| l.weight.numel() + l.bias.numel());
            let n = params.len();
            params[n - head..].iter_mut().for_each(|v| *v = 0.0);
            high.set_flat_parameters(&params)?;
        }
        Self::from_streams(low, high, config.lambda_blend, encoding, layout, normalizer)
    }

    /// Model whose time span and coordinate normalization are fitted to `track`.
    pub fn for_track(
        config: &FusionConfig,
        track: &KeypointTrack,
        num_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let times = track.times();
        let encoding = TimeEncoding {
            t_min: times.first().copied().unwrap_or(0.0),
            t_max: times.last().copied().unwrap_or(0.0),
            fourier_order: config.fourier_order,
        };
        let layout = OutputLayout {
            num_keypoints: track.num_keypoints(),
            num_samples,
        };
        let normalizer = CoordinateNormalizer::fit_to_extent(track, config.coordinate_extent);
        Self::new(config, layout, encoding, normalizer, seed)
    }

    pub fn from_streams(
        low: SirenNetwork,
        high: SirenNetwork,
        lambda_blend: f64,
        encoding: TimeEncoding,
        layout: OutputLayout,
        normalizer: CoordinateNormalizer,
    ) -> Result<Self> {
        let model = FusionModel {
            low,
            high,
            lambda_blend,
            encoding,
            layout,
            normalizer,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let (low, high) = (&self.low, &self.high);
        if low.input_dim() != high.input_dim() || low.output_dim() != high.output_dim() {
            return Err(FusionError::Mismatch(format!(
                "streams disagree: low {}→{}, high {}→{}",
                low.input_dim(),
                low.output_dim(),
                high.input_dim(),
                high.output_dim()
            )));
        }
        if low.input_dim() != self.encoding.dim() {
            return Err(FusionError::Mismatch(format!(
                "encoding yields {} features, streams expect {}",
                self.encoding.dim(),
                low.input_dim()
            )));
        }
        if low.output_dim() != self.layout.output_dim() {
            return Err(FusionError::Mismatch(format!(
                "layout needs {} outputs, streams emit {}",
                self.layout.output_dim(),
                low.output_dim()
            )));
        }
        if !self.lambda_blend.is_finite() {
            return Err(FusionError::Config("lambda_blend must be finite".into()));
        }
        Ok(())
    }

    pub fn low_stream(&self) -> &SirenNetwork {
        &self.low
    }

    pub fn high_stream(&self) -> &SirenNetwork {
        &self.high
    }

    pub fn lambda_blend(&self) -> f64 {
        self.lambda_blend
    }

    pub fn encoding(&self) -> &TimeEncoding {
        &self.encoding
    }

    pub fn layout(&self) -> OutputLayout {
        self.layout
    }

    pub fn normalizer(&self) -> &CoordinateNormalizer {
        &self.normalizer
    }

    /// Zeroes every high-stream parameter, so the stream contributes nothing.
    pub fn zero_high_stream(&mut self) {
        self.high.zero_parameters();
    }

    pub fn num_parameters(&self) -> usize {
        self.low.num_parameters() + self.high.num_parameters()
    }

    /// Low-stream parameters followed by high-stream parameters.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut p = self.low.flat_parameters();
        p.extend(self.high.flat_parameters());
        p
    }

    pub fn set_flat_parameters(&mut self, params: &[f64]) -> Result<()> {
        let n_low = self.low.num_parameters();
        if params.len() != self.num_parameters() {
            return Err(FusionError::Mismatch(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.num_parameters()
            )));
        }
        self.low.set_flat_parameters(&params[..n_low])?;
        self.high.set_flat_parameters(&params[n_low..])?;
        Ok(())
    }

    fn check_times(&self, t: &Tensor) -> Result<()> {
        if t.shape().len() != 2 || t.shape()[1] != 1 {
            return Err(FusionError::Mismatch(format!(
                "time batch must be [batch, 1], got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(FusionError::Mismatch("time batch is not finite".into()));
        }
        Ok(())
    }

    /// Per-stream raw outputs `(f_low, f_high)`, each `[batch, output_dim]`.
    pub fn decompose(&self, t: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_times(t)?;
        let x = self.encoding.encode(t.values());
        Ok((self.low.forward(&x)?, self.high.forward(&x)?))
    }

    /// Fused raw output `[batch, output_dim]`.
    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let (low, high) = self.decompose(t)?;
        let values = low
            .values()
            .iter()
            .zip(high.values())
            .map(|(l, h)| l + self.lambda_blend * h)
            .collect();
        Ok(Tensor::new(low.shape().to_vec(), values)?)
    }

    /// Keypoints `[batch, M, 3]` and samples `[batch, S, 3]` in model space.
    pub fn predict(&self, t: &Tensor) -> Result<Prediction> {
        let out = self.forward(t)?;
        let batch = out.rows();
        let cols = out.cols();
        let kc = self.layout.keypoint_cols();
        let mut kp = Vec::with_capacity(batch * kc);
        let mut sm = Vec::with_capacity(batch * (cols - kc));
        for row in out.values().chunks(cols) {
            kp.extend_from_slice(&row[..kc]);
            sm.extend_from_slice(&row[kc..]);
        }
        Ok(Prediction {
            keypoints: Tensor::new(vec![batch, self.layout.num_keypoints, 3], kp)?,
            samples: Tensor::new(vec![batch, self.layout.num_samples, 3], sm)?,
        })
    }

    /// Keypoint frames in scene units at the given times, all marked visible.
    pub fn predict_frames(&self, times: &[f64]) -> Result<Vec<KeypointFrame>> {
        let t = Tensor::matrix(times.len(), 1, times.to_vec())?;
        let pred = self.predict(&t)?;
        let m = self.layout.num_keypoints;
        Ok(times
            .iter()
            .zip(pred.keypoints.values().chunks(3 * m))
            .map(|(&time, row)| {
                let positions = row
                    .chunks(3)
                    .map(|p| self.normalizer.invert([p[0], p[1], p[2]]))
                    .collect::<Vec<Point3>>();
                KeypointFrame::new(time, positions)
            })
            .collect())
    }

    /// Registers the model on a graph. With `freeze_high` the high stream is
    /// bound as constants and receives no gradient.
    pub fn bind<'g>(&self, graph: &'g Graph, freeze_high: bool) -> BoundFusion<'g> {
        let low = self.low.bind(graph);
        let high = if freeze_high {
            self.high.bind_frozen(graph)
        } else {
            self.high.bind(graph)
        };
        BoundFusion {
            low,
            high,
            freeze_high,
            lambda_blend: self.lambda_blend,
            encoding: self.encoding,
            layout: self.layout,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| FusionError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FusionModel =
            serde_json::from_str(text).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    /// Binary container: metadata followed by the two stream checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FUSION_MAGIC);
        for v in [
            self.lambda_blend,
            self.encoding.t_min,
            self.encoding.t_max,
            self.normalizer.center[0],
            self.normalizer.center[1],
            self.normalizer.center[2],
            self.normalizer.scale,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            self.encoding.fourier_order,
            self.layout.num_keypoints,
            self.layout.num_samples,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for stream in [&self.low, &self.high] {
            let bytes = stream.to_bytes();
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || FusionError::Checkpoint("truncated fusion checkpoint".into());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let chunk = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(chunk)
        };
        if take(4)? != FUSION_MAGIC {
            return Err(FusionError::Checkpoint("bad magic".into()));
        }
        let mut floats = [0.0; 7];
        for f in &mut floats {
            *f = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let mut ints = [0usize; 3];
        for i in &mut ints {
            *i = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        }
        let mut streams = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            streams.push(SirenNetwork::from_bytes(take(len)?)?);
        }
        if pos != bytes.len() {
            return Err(FusionError::Checkpoint("trailing bytes".into()));
        }
        let high = streams.pop().unwrap();
        let low = streams.pop().unwrap();
        FusionModel::from_streams(
            low,
            high,
            floats[0],
            TimeEncoding {
                t_min: floats[1],
                t_max: floats[2],
                fourier_order: ints[0],
            },
            OutputLayout {
                num_keypoints: ints[1],
                num_samples: ints[2],
            },
            CoordinateNormalizer {
                center: [floats[3], floats[4], floats[5]],
                scale: floats[6],
            },
        )
    }
}

const FUSION_MAGIC: &[u8; 4] = b"SPFM";

/// Fixed mixing of a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fusion model registered on a graph.
pub struct BoundFusion<'g> {
    low: BoundSiren<'g>,
    high: BoundSiren<'g>,
    freeze_high: bool,
    lambda_blend: f64,
    encoding: TimeEncoding,
    layout: OutputLayout,
}

/// Graph outputs of [`BoundFusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionOutputs<'g> {
    /// `[batch, 3M]`
    pub keypoints: Var<'g>,
    /// `[batch, 3S]`
    pub samples: Var<'g>,
}

impl<'g> BoundFusion<'g> {
    /// Differentiable parameters in [`FusionModel::flat_parameters`] order;
    /// the high stream is omitted when frozen.
    pub fn parameters(&self) -> Vec<Var<'g>> {
        let mut p: Vec<Var<'g>> = self.low.parameters().collect();
        if !self.freeze_high {
            p.extend(self.high.parameters());
        }
        p
    }

    pub fn forward(&self, graph: &'g Graph, times: &[f64]) -> Result<FusionOutputs<'g>> {
        let x = graph.constant(self.encoding.encode(times));
        let low = self.low.forward(x)?;
        let high = self.high.forward(x)?;
        let fused = low.add(high.scale(self.lambda_blend))?;
        let kc = self.layout.keypoint_cols();
        Ok(FusionOutputs {
            keypoints: fused.slice_cols(0, kc)?,
            samples: fused.slice_cols(kc, self.layout.output_dim())?,
        })
    }
}
