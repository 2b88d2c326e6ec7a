//! Sine-activated coordinate networks.
//!
//! Every layer except the last computes `h = sin(omega0 * (W h_prev + b))`.
//! The last layer is linear so that outputs can leave `[-1, 1]`.
//!
//! Initialization: the first layer draws from `U(-1/n_in, 1/n_in)`, all later
//! layers from `U(-sqrt(6/n_in), sqrt(6/n_in))`, whose variance is `2/n_in`.
//! Biases use the same bound as their layer's weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Smallest batch accepted by [`SirenNetwork::preactivation_stats`].
pub const MIN_STATS_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum SirenError {
    #[error("{what} must be at least 1")]
    ZeroDimension { what: String },
    #[error("omega0 must be positive and finite, got {0}")]
    BadOmega(f64),
    #[error("expected input with {expected} columns, got shape {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("batch of {got} rows is too small for statistics (need {min})")]
    BatchTooSmall { min: usize, got: usize },
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("parameter vector has {got} entries, network needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = SirenError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirenLayer {
    /// `[n_out, n_in]`
    pub weight: Tensor,
    /// `[n_out]`
    pub bias: Tensor,
    pub omega0: f64,
    pub is_first: bool,
    pub is_linear_output: bool,
}

impl SirenLayer {
    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Half-width of the uniform initialization interval.
    pub fn init_bound(n_in: usize, is_first: bool) -> f64 {
        if is_first {
            1.0 / n_in as f64
        } else {
            (6.0 / n_in as f64).sqrt()
        }
    }

    fn sample(
        rng: &mut ChaCha8Rng,
        n_in: usize,
        n_out: usize,
        omega0: f64,
        is_first: bool,
        is_linear_output: bool,
    ) -> Self {
        let bound = Self::init_bound(n_in, is_first);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = Tensor::new(vec![n_out, n_in], draw(n_out * n_in)).expect("shape");
        let bias = Tensor::vector(draw(n_out));
        SirenLayer {
            weight,
            bias,
            omega0,
            is_first,
            is_linear_output,
        }
    }
}

/// Per-layer pre-activation statistics over a batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    /// Mean and variance of `W h + b`.
    pub unscaled_mean: f64,
    pub unscaled_var: f64,
    /// Mean and variance of `omega0 (W h + b)`; equal to the unscaled values for the linear head.
    pub scaled_mean: f64,
    pub scaled_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct SirenNetwork {
    layers: Vec<SirenLayer>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    layers: Vec<SirenLayer>,
    seed: u64,
}

impl TryFrom<RawNetwork> for SirenNetwork {
    type Error = SirenError;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        SirenNetwork::from_layers(raw.layers, raw.seed)
    }
}

impl From<SirenNetwork> for RawNetwork {
    fn from(net: SirenNetwork) -> Self {
        RawNetwork {
            layers: net.layers,
            seed: net.seed,
        }
    }
}

impl SirenNetwork {
    /// Samples a network with every sine layer using `omega0`.
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        omega0: f64,
        seed: u64,
    ) -> Result<Self> {
        let omegas = vec![omega0; hidden_dims.len()];
        Self::with_layer_omegas(input_dim, hidden_dims, output_dim, &omegas, seed)
    }

    /// Like [`SirenNetwork::new`] with an individual frequency per sine layer.
    pub fn with_layer_omegas(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        omegas: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(SirenError::ZeroDimension {
                what: "input_dim".into(),
            });
        }
        if output_dim == 0 {
            return Err(SirenError::ZeroDimension {
                what: "output_dim".into(),
            });
        }
        if let Some(i) = hidden_dims.iter().position(|&d| d == 0) {
            return Err(SirenError::ZeroDimension {
                what: format!("hidden layer {i}"),
            });
        }
        if omegas.len() != hidden_dims.len() {
            return Err(SirenError::InvalidLayer {
                layer: omegas.len(),
                reason: format!(
                    "{} frequencies for {} sine layers",
                    omegas.len(),
                    hidden_dims.len()
                ),
            });
        }
        if let Some(&w) = omegas.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(SirenError::BadOmega(w));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
        let mut n_in = input_dim;
        for (l, (&n_out, &omega0)) in hidden_dims.iter().zip(omegas).enumerate() {
            layers.push(SirenLayer::sample(
                &mut rng,
                n_in,
                n_out,
                omega0,
                l == 0,
                false,
            ));
            n_in = n_out;
        }
        let head_omega = omegas.last().copied().unwrap_or(DEFAULT_OMEGA0);
        layers.push(SirenLayer::sample(
            &mut rng,
            n_in,
            output_dim,
            head_omega,
            hidden_dims.is_empty(),
            true,
        ));
        Ok(SirenNetwork { layers, seed })
    }

    /// Validates and assembles a network from explicit layers.
    pub fn from_layers(layers: Vec<SirenLayer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(SirenError::InvalidLayer {
                layer: 0,
                reason: "network has no layers".into(),
            });
        }
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let bad = |reason: String| SirenError::InvalidLayer { layer: l, reason };
            if layer.weight.shape().len() != 2 {
                return Err(bad(format!("weight shape {:?}", layer.weight.shape())));
            }
            if layer.n_in() == 0 || layer.n_out() == 0 {
                return Err(bad("zero-sized weight".into()));
            }
            if layer.bias.numel() != layer.n_out() {
                return Err(bad(format!(
                    "bias has {} entries for {} outputs",
                    layer.bias.numel(),
                    layer.n_out()
                )));
            }
            if !(layer.omega0 > 0.0 && layer.omega0.is_finite()) {
                return Err(SirenError::BadOmega(layer.omega0));
            }
            if layer.is_first != (l == 0) || layer.is_linear_output != (l == last) {
                return Err(bad("first/output flags out of place".into()));
            }
            if l > 0 && layers[l - 1].n_out() != layer.n_in() {
                return Err(bad(format!(
                    "expects {} inputs but previous layer emits {}",
                    layer.n_in(),
                    layers[l - 1].n_out()
                )));
            }
        }
        Ok(SirenNetwork { layers, seed })
    }

    pub fn layers(&self) -> &[SirenLayer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(SirenLayer::n_out)
            .collect()
    }

    /// Number of layers `L`, including the linear head.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Parameters flattened in layer order, weight before bias, row-major.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.values());
            out.extend_from_slice(layer.bias.values());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.num_parameters();
        if params.len() != expected {
            return Err(SirenError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weight.numel();
            let nb = layer.bias.numel();
            layer.weight = Tensor::new(
                layer.weight.shape().to_vec(),
                params[offset..offset + nw].to_vec(),
            )?;
            offset += nw;
            layer.bias = Tensor::vector(params[offset..offset + nb].to_vec());
            offset += nb;
        }
        Ok(())
    }

    /// Sets every weight and bias to zero.
    pub fn zero_parameters(&mut self) {
        let zeros = vec![0.0; self.num_parameters()];
        self.set_flat_parameters(&zeros).expect("same size");
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(SirenError::InputShape {
                expected: self.input_dim(),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Value-only forward pass: `x` is `[batch, input_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_hidden(x)?.0)
    }

    /// Forward pass that also returns every hidden activation.
    pub fn forward_with_hidden(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x.shape())?;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for layer in &self.layers {
            let z = affine(&h, layer)?;
            if layer.is_linear_output {
                return Ok((z, hidden));
            }
            h = z.map(|v| (layer.omega0 * v).sin());
            hidden.push(h.clone());
        }
        unreachable!("last layer is linear")
    }

    /// Registers every parameter as a differentiable leaf, in
    /// [`SirenNetwork::flat_parameters`] order.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundSiren<'g> {
        let params = self
            .layers
            .iter()
            .map(|l| (graph.param(l.weight.clone()), graph.param(l.bias.clone())))
            .collect();
        BoundSiren {
            params,
            omegas: self.layers.iter().map(|l| l.omega0).collect(),
            input_dim: self.input_dim(),
        }
    }

    /// Like [`SirenNetwork::bind`] but as constants, for frozen streams.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundSiren<'g> {
        let params = self
            .layers
            .iter()
            .map(|l| {
                (
                    graph.constant(l.weight.clone()),
                    graph.constant(l.bias.clone()),
                )
            })
            .collect();
        BoundSiren {
            params,
            omegas: self.layers.iter().map(|l| l.omega0).collect(),
            input_dim: self.input_dim(),
        }
    }

    /// Mean and variance of each layer's pre-activation over `x`.
    pub fn preactivation_stats(&self, x: &Tensor) -> Result<Vec<LayerStats>> {
        self.check_input(x.shape())?;
        if x.rows() < MIN_STATS_BATCH {
            return Err(SirenError::BatchTooSmall {
                min: MIN_STATS_BATCH,
                got: x.rows(),
            });
        }
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = affine(&h, layer)?;
            let (mean, var) = mean_var(z.values());
            let scale = if layer.is_linear_output {
                1.0
            } else {
                layer.omega0
            };
            stats.push(LayerStats {
                unscaled_mean: mean,
                unscaled_var: var,
                scaled_mean: scale * mean,
                scaled_var: scale * scale * var,
            });
            if !layer.is_linear_output {
                h = z.map(|v| (layer.omega0 * v).sin());
            }
        }
        Ok(stats)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| SirenError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SirenError::Checkpoint(e.to_string()))
    }

    /// Little-endian binary checkpoint; round trips bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.n_out() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.n_in() as u32).to_le_bytes());
            out.extend_from_slice(&layer.omega0.to_le_bytes());
            let flags = u8::from(layer.is_first) | (u8::from(layer.is_linear_output) << 1);
            out.push(flags);
            for v in layer.weight.values().iter().chain(layer.bias.values()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(SirenError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SirenError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let seed = r.u64()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let n_out = r.u32()? as usize;
            let n_in = r.u32()? as usize;
            let omega0 = r.f64()?;
            let flags = r.take(1)?[0];
            let weight = (0..n_out * n_in)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let bias = (0..n_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(SirenLayer {
                weight: Tensor::new(vec![n_out, n_in], weight)?,
                bias: Tensor::vector(bias),
                omega0,
                is_first: flags & 1 != 0,
                is_linear_output: flags & 2 != 0,
            });
        }
        if r.pos != bytes.len() {
            return Err(SirenError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        SirenNetwork::from_layers(layers, seed)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SIRN";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| SirenError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn affine(h: &Tensor, layer: &SirenLayer) -> Result<Tensor> {
    // h · Wᵀ + b
    let (rows, n_in) = (h.rows(), layer.n_in());
    let n_out = layer.n_out();
    let w = layer.weight.values();
    let b = layer.bias.values();
    let mut out = Vec::with_capacity(rows * n_out);
    for row in h.values().chunks(n_in) {
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            out.push(b[o] + wr.iter().zip(row).map(|(a, x)| a * x).sum::<f64>());
        }
    }
    Ok(Tensor::new(vec![rows, n_out], out)?)
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// A network whose parameters live on a [`Graph`].
pub struct BoundSiren<'g> {
    params: Vec<(Var<'g>, Var<'g>)>,
    omegas: Vec<f64>,
    input_dim: usize,
}

impl<'g> BoundSiren<'g> {
    /// Parameter handles in [`SirenNetwork::flat_parameters`] order.
    pub fn parameters(&self) -> impl Iterator<Item = Var<'g>> + '_ {
        self.params.iter().flat_map(|(w, b)| [*w, *b])
    }

    /// Differentiable forward pass; `x` is `[batch, input_dim]`.
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(SirenError::InputShape {
                expected: self.input_dim,
                got: shape,
            });
        }
        let last = self.params.len() - 1;
        let mut h = x;
        for (l, ((w, b), &omega0)) in self.params.iter().zip(&self.omegas).enumerate() {
            let z = h.matmul(w.transpose()?)?.add_row(*b)?;
            h = if l == last { z } else { z.scale(omega0).sin() };
        }
        Ok(h)
    }
}

/// Flattens the gradients of a bound network in parameter order.
pub fn collect_gradients(bound: &BoundSiren<'_>, grads: &crate::autodiff::Gradients) -> Vec<f64> {
    bound
        .parameters()
        .flat_map(|p| grads.wrt(p).into_values())
        .collect()
}

/// `[rows, cols]` uniform samples in `[lo, hi]`.
pub fn uniform_batch(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols)
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    Tensor::new(vec![rows, cols], values).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    #[test]
    fn networks_are_shareable_across_threads() {
        fn check<T: Send + Sync>() {}
        check::<SirenNetwork>();
        check::<Tensor>();
    }

    #[test]
    fn first_layer_bound_is_one_over_fan_in() {
        let net = SirenNetwork::new(3, &[32, 32], 2, 30.0, 7).unwrap();
        let first = &net.layers()[0];
        assert!(first.is_first);
        assert!(first.weight.values().iter().all(|w| w.abs() <= 1.0 / 3.0));
        assert!(first.bias.values().iter().all(|w| w.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn hidden_bound_and_variance() {
        assert!((SirenLayer::init_bound(100, false) - 0.244_948_974_278_317_8).abs() < 1e-15);
        let net = SirenNetwork::new(1, &[100, 256], 1, 30.0, 11).unwrap();
        let w = net.layers()[1].weight.values();
        assert_eq!(w.len(), 256 * 100);
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        let (_, var) = mean_var(w);
        assert!((var - 0.02).abs() < 0.002, "var {var}");
    }

    #[test]
    fn same_seed_same_network() {
        let a = SirenNetwork::new(2, &[8, 8], 3, 30.0, 42).unwrap();
        let b = SirenNetwork::new(2, &[8, 8], 3, 30.0, 42).unwrap();
        let c = SirenNetwork::new(2, &[8, 8], 3, 30.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_dims_and_omega() {
        assert!(matches!(
            SirenNetwork::new(0, &[4], 1, 30.0, 0),
            Err(SirenError::ZeroDimension { .. })
        ));
        assert!(matches!(
            SirenNetwork::new(1, &[4, 0], 1, 30.0, 0),
            Err(SirenError::ZeroDimension { .. })
        ));
        assert!(matches!(
            SirenNetwork::new(1, &[4], 0, 30.0, 0),
            Err(SirenError::ZeroDimension { .. })
        ));
        assert!(matches!(
            SirenNetwork::new(1, &[4], 1, -1.0, 0),
            Err(SirenError::BadOmega(_))
        ));
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut net = SirenNetwork::new(2, &[4, 4], 3, 30.0, 1).unwrap();
        net.zero_parameters();
        let mut layers = net.layers().to_vec();
        layers.last_mut().unwrap().bias = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let net = SirenNetwork::from_layers(layers, 1).unwrap();
        let x = uniform_batch(5, 2, -1.0, 1.0, 3);
        let (out, hidden) = net.forward_with_hidden(&x).unwrap();
        assert!(hidden.iter().all(|h| h.values().iter().all(|&v| v == 0.0)));
        for row in out.values().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn single_unit_hits_sine_peak() {
        let layers = vec![
            SirenLayer {
                weight: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                bias: Tensor::vector(vec![0.0]),
                omega0: 30.0,
                is_first: true,
                is_linear_output: false,
            },
            SirenLayer {
                weight: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
                bias: Tensor::vector(vec![0.5]),
                omega0: 30.0,
                is_first: false,
                is_linear_output: true,
            },
        ];
        let net = SirenNetwork::from_layers(layers, 0).unwrap();
        let x = Tensor::matrix(1, 1, vec![std::f64::consts::PI / 60.0]).unwrap();
        let (out, hidden) = net.forward_with_hidden(&x).unwrap();
        assert!((hidden[0].item() - 1.0).abs() < 1e-15);
        assert!((out.item() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn hidden_activations_bounded() {
        let net = SirenNetwork::new(3, &[64, 64, 64], 5, 30.0, 9).unwrap();
        for seed in 0..4 {
            let x = uniform_batch(64, 3, -1.0, 1.0, seed);
            let (out, hidden) = net.forward_with_hidden(&x).unwrap();
            assert!(out.is_finite());
            for h in hidden {
                assert!(h.values().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn input_shape_checked() {
        let net = SirenNetwork::new(3, &[4], 1, 30.0, 0).unwrap();
        let x = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            net.forward(&x),
            Err(SirenError::InputShape { expected: 3, .. })
        ));
    }

    #[test]
    fn graph_and_value_forward_agree() {
        let net = SirenNetwork::new(2, &[16, 16], 4, 30.0, 5).unwrap();
        let x = uniform_batch(8, 2, -1.0, 1.0, 1);
        let g = Graph::new();
        let bound = net.bind(&g);
        let y = bound.forward(g.constant(x.clone())).unwrap().value();
        let expected = net.forward(&x).unwrap();
        for (a, b) in y.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gradients_pass_fd_check() {
        let net = SirenNetwork::new(2, &[6, 5], 3, 30.0, 21).unwrap();
        let x = uniform_batch(4, 2, -1.0, 1.0, 2);
        let f = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_parameters(p).unwrap();
            let g = Graph::new();
            let bound = n.bind(&g);
            let loss = bound
                .forward(g.constant(x.clone()))
                .unwrap()
                .square()
                .mean();
            let grads = g.backward(loss)?;
            Ok((loss.item(), collect_gradients(&bound, &grads)))
        };
        let report = finite_difference_check(f, &net.flat_parameters(), 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn depth_one_has_single_stats_entry() {
        let net = SirenNetwork::new(2, &[], 3, 30.0, 0).unwrap();
        assert_eq!(net.depth(), 1);
        let stats = net
            .preactivation_stats(&uniform_batch(32, 2, -1.0, 1.0, 0))
            .unwrap();
        assert_eq!(stats.len(), 1);
    }

    #[test]
    fn stats_reject_small_batch() {
        let net = SirenNetwork::new(2, &[4], 1, 30.0, 0).unwrap();
        assert!(matches!(
            net.preactivation_stats(&Tensor::zeros(vec![8, 2])),
            Err(SirenError::BatchTooSmall { min: 16, got: 8 })
        ));
    }

    #[test]
    fn zero_input_variance_comes_from_bias() {
        let net = SirenNetwork::new(3, &[64, 64], 1, 30.0, 4).unwrap();
        let stats = net
            .preactivation_stats(&Tensor::zeros(vec![32, 3]))
            .unwrap();
        let (_, bias_var) = mean_var(net.layers()[0].bias.values());
        assert!((stats[0].unscaled_var - bias_var).abs() < 1e-12);
        assert!((stats[0].scaled_var - 900.0 * bias_var).abs() < 1e-9);
    }

    #[test]
    fn periodic_in_first_layer_weight() {
        let net = SirenNetwork::new(1, &[8, 8], 2, 30.0, 13).unwrap();
        let x_val = 0.37;
        let x = Tensor::matrix(1, 1, vec![x_val]).unwrap();
        let base = net.forward(&x).unwrap();
        let period = 2.0 * std::f64::consts::PI / (30.0 * x_val);
        for k in [0usize, 3, 7] {
            let mut p = net.flat_parameters();
            p[k] += period;
            let mut shifted = net.clone();
            shifted.set_flat_parameters(&p).unwrap();
            let out = shifted.forward(&x).unwrap();
            for (a, b) in out.values().iter().zip(base.values()) {
                assert!((a - b).abs() < 1e-10, "weight {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn binary_checkpoint_is_bit_exact() {
        let net = SirenNetwork::new(3, &[16, 8], 5, 30.0, 99).unwrap();
        let back = SirenNetwork::from_bytes(&net.to_bytes()).unwrap();
        let a: Vec<u64> = net.flat_parameters().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flat_parameters().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(net, back);
        let mut bytes = net.to_bytes();
        bytes.pop();
        assert!(SirenNetwork::from_bytes(&bytes).is_err());
    }

    #[test]
    fn json_checkpoint_round_trip() {
        let net = SirenNetwork::new(2, &[12], 4, 30.0, 5).unwrap();
        let back = SirenNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn json_checkpoint_validates_chain() {
        let net = SirenNetwork::new(2, &[12, 6], 4, 30.0, 5).unwrap();
        let mut layers = net.layers().to_vec();
        layers.remove(1);
        let raw = serde_json::json!({ "layers": layers, "seed": 5 });
        assert!(SirenNetwork::from_json(&raw.to_string()).is_err());
    }
}
