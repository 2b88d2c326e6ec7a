//! Keypoint and reconstruction objectives.
//!
//! Predictions are `[batch, 3 * M]` rows laid out keypoint-major
//! (`x0, y0, z0, x1, ...`). Every term sums over keypoints, edges and batch
//! rows; invisible keypoints contribute nothing.
//!
//! * `L_pos = sum_i |k̂_i - k_i|²`
//! * `L_geo = sum_(i,j)∈E |sin(ω(k̂_i - k̂_j)) - sin(ω(k_i - k_j))|²`, sine taken per component
//! * `L_sirenpose = L_pos + λ_geo L_geo`
//! * `L_total = L_recon + λ_sp L_sirenpose`
//!
//! The sine wraps once a relative offset error exceeds `π / ω`, so coordinates
//! should be normalized (see [`crate::scene::CoordinateNormalizer`]) first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::scene::{KeypointFrame, SkeletonGraph};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0}")]
    Mismatch(String),
    #[error("edge ({i}, {j}) is outside 0..{m}")]
    InvalidEdge { i: usize, j: usize, m: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub lambda_sp: f64,
    pub omega0_loss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_geo: 0.1,
            lambda_sp: 1.0,
            omega0_loss: 30.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda_geo) || !ok(self.lambda_sp) {
            return Err(LossError::Weights(format!(
                "lambda_geo = {}, lambda_sp = {} must be non-negative",
                self.lambda_geo, self.lambda_sp
            )));
        }
        if !(self.omega0_loss > 0.0 && self.omega0_loss.is_finite()) {
            return Err(LossError::Weights(format!(
                "omega0_loss must be positive, got {}",
                self.omega0_loss
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pos: f64,
    pub l_geo: f64,
    pub l_sirenpose: f64,
    pub l_recon: f64,
    pub l_total: f64,
}

/// Ground-truth keypoints and visibility for a batch of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTargets {
    /// `[batch, 3 * M]`
    pub positions: Tensor,
    /// `[batch, M]`, 1 for visible and 0 for hidden
    pub mask: Tensor,
}

impl KeypointTargets {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a KeypointFrame>) -> Result<Self> {
        let mut positions = Vec::new();
        let mut mask = Vec::new();
        let mut rows = 0;
        let mut m = None;
        for f in frames {
            if *m.get_or_insert(f.num_keypoints()) != f.num_keypoints() {
                return Err(LossError::Mismatch(
                    "frames disagree on keypoint count".into(),
                ));
            }
            positions.extend(f.positions.iter().flatten());
            mask.extend(f.visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }));
            rows += 1;
        }
        let m = m.unwrap_or(0);
        Ok(KeypointTargets {
            positions: Tensor::matrix(rows, 3 * m, positions)?,
            mask: Tensor::matrix(rows, m, mask)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.positions.rows()
    }

    pub fn num_keypoints(&self) -> usize {
        self.mask.cols()
    }

    /// Replaces the mask (e.g. all-hidden) keeping the positions.
    pub fn with_mask(&self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.mask.shape() {
            return Err(LossError::Mismatch(format!(
                "mask shape {:?} vs {:?}",
                mask.shape(),
                self.mask.shape()
            )));
        }
        Ok(KeypointTargets {
            positions: self.positions.clone(),
            mask,
        })
    }

    fn coordinate_mask(&self) -> Tensor {
        let values = self.mask.values().iter().flat_map(|&v| [v, v, v]).collect();
        Tensor::new(vec![self.batch(), 3 * self.num_keypoints()], values).expect("shape")
    }
}

fn check_pred(pred: &Var<'_>, targets: &KeypointTargets) -> Result<()> {
    let shape = pred.shape();
    if shape != targets.positions.shape() {
        return Err(LossError::Mismatch(format!(
            "predictions {:?} vs ground truth {:?} (M = {})",
            shape,
            targets.positions.shape(),
            targets.num_keypoints()
        )));
    }
    Ok(())
}

/// Masked sum of squared keypoint errors.
pub fn loss_pos<'g>(pred: Var<'g>, targets: &KeypointTargets) -> Result<Var<'g>> {
    check_pred(&pred, targets)?;
    let g = pred.graph();
    let diff = pred.sub(g.constant(targets.positions.clone()))?;
    let masked = diff.square().mul(g.constant(targets.coordinate_mask()))?;
    Ok(masked.sum())
}

/// `[3M, 3E]` matrix mapping keypoint rows to per-edge relative offsets `k_i - k_j`.
fn edge_difference_matrix(skeleton: &SkeletonGraph) -> Tensor {
    let m = skeleton.num_keypoints();
    let e = skeleton.num_edges();
    let mut values = vec![0.0; 3 * m * 3 * e];
    for (c, &(i, j)) in skeleton.edges().iter().enumerate() {
        for d in 0..3 {
            values[(3 * i + d) * 3 * e + 3 * c + d] = 1.0;
            values[(3 * j + d) * 3 * e + 3 * c + d] = -1.0;
        }
    }
    Tensor::matrix(3 * m, 3 * e, values).expect("shape")
}

/// Sine-domain relative-position loss over the skeleton's edges. An edge counts
/// only when both endpoints are visible.
pub fn loss_geo<'g>(
    pred: Var<'g>,
    targets: &KeypointTargets,
    skeleton: &SkeletonGraph,
    omega0: f64,
) -> Result<Var<'g>> {
    check_pred(&pred, targets)?;
    let m = targets.num_keypoints();
    if skeleton.num_keypoints() != m {
        return Err(LossError::Mismatch(format!(
            "skeleton has {} keypoints, targets have {m}",
            skeleton.num_keypoints()
        )));
    }
    for &(i, j) in skeleton.edges() {
        if i >= m || j >= m {
            return Err(LossError::InvalidEdge { i, j, m });
        }
    }
    let g = pred.graph();
    let e = skeleton.num_edges();
    let batch = targets.batch();
    if e == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }

    let pos = targets.positions.values();
    let vis = targets.mask.values();
    let mut gt_sin = Vec::with_capacity(batch * 3 * e);
    let mut edge_mask = Vec::with_capacity(batch * 3 * e);
    for b in 0..batch {
        let row = &pos[b * 3 * m..(b + 1) * 3 * m];
        for &(i, j) in skeleton.edges() {
            let w = vis[b * m + i] * vis[b * m + j];
            for d in 0..3 {
                gt_sin.push((omega0 * (row[3 * i + d] - row[3 * j + d])).sin());
                edge_mask.push(w);
            }
        }
    }
    let rel = pred.matmul(g.constant(edge_difference_matrix(skeleton)))?;
    let diff = rel
        .scale(omega0)
        .sin()
        .sub(g.constant(Tensor::matrix(batch, 3 * e, gt_sin)?))?;
    let masked = diff
        .square()
        .mul(g.constant(Tensor::matrix(batch, 3 * e, edge_mask)?))?;
    Ok(masked.sum())
}

/// Component nodes of the keypoint loss.
#[derive(Clone, Copy, Debug)]
pub struct SirenPoseTerms<'g> {
    pub pos: Var<'g>,
    pub geo: Var<'g>,
    pub sirenpose: Var<'g>,
}

/// `L_pos + λ_geo L_geo`.
pub fn loss_sirenpose<'g>(
    pred: Var<'g>,
    targets: &KeypointTargets,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
) -> Result<SirenPoseTerms<'g>> {
    weights.validate()?;
    let pos = loss_pos(pred, targets)?;
    if weights.lambda_geo == 0.0 {
        // disabled term is reported as zero rather than evaluated
        let geo = pred.graph().constant(Tensor::scalar(0.0));
        return Ok(SirenPoseTerms {
            pos,
            geo,
            sirenpose: pos,
        });
    }
    let geo = loss_geo(pred, targets, skeleton, weights.omega0_loss)?;
    let sirenpose = pos.add(geo.scale(weights.lambda_geo))?;
    Ok(SirenPoseTerms {
        pos,
        geo,
        sirenpose,
    })
}

/// Sum of squared differences between predicted and target signals.
pub fn loss_recon<'g>(pred: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(LossError::Mismatch(format!(
            "signal {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let g = pred.graph();
    Ok(pred.sub(g.constant(target.clone()))?.square().sum())
}

/// `L_recon + λ_sp L_sirenpose`.
pub fn loss_total<'g>(
    recon: Var<'g>,
    sirenpose: Var<'g>,
    weights: &LossWeights,
) -> Result<Var<'g>> {
    for (name, v) in [("recon", &recon), ("sirenpose", &sirenpose)] {
        if v.value().numel() != 1 {
            return Err(LossError::Mismatch(format!(
                "{name} term must be scalar, got {:?}",
                v.shape()
            )));
        }
    }
    Ok(recon.add(sirenpose.scale(weights.lambda_sp))?)
}

/// All terms of the composite objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct CompositeLoss<'g> {
    pub pos: Var<'g>,
    pub geo: Var<'g>,
    pub sirenpose: Var<'g>,
    pub recon: Var<'g>,
    pub total: Var<'g>,
}

impl CompositeLoss<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_pos: self.pos.item(),
            l_geo: self.geo.item(),
            l_sirenpose: self.sirenpose.item(),
            l_recon: self.recon.item(),
            l_total: self.total.item(),
        }
    }
}

/// Builds `L_total` averaged over the batch rows.
pub fn composite_loss<'g>(
    pred_keypoints: Var<'g>,
    pred_signal: Var<'g>,
    targets: &KeypointTargets,
    signal_target: &Tensor,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
) -> Result<CompositeLoss<'g>> {
    let per_row = 1.0 / targets.batch().max(1) as f64;
    let terms = loss_sirenpose(pred_keypoints, targets, skeleton, weights)?;
    let pos = terms.pos.scale(per_row);
    let geo = terms.geo.scale(per_row);
    let sirenpose = terms.sirenpose.scale(per_row);
    let recon = loss_recon(pred_signal, signal_target)?.scale(per_row);
    let total = loss_total(recon, sirenpose, weights)?;
    Ok(CompositeLoss {
        pos,
        geo,
        sirenpose,
        recon,
        total,
    })
}

/// Value-only `L_sirenpose` for a single predicted frame.
pub fn frame_sirenpose(
    pred: &KeypointFrame,
    gt: &KeypointFrame,
    skeleton: &SkeletonGraph,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if pred.num_keypoints() != gt.num_keypoints() {
        return Err(LossError::Mismatch(format!(
            "{} predicted keypoints vs {} ground truth",
            pred.num_keypoints(),
            gt.num_keypoints()
        )));
    }
    let targets = KeypointTargets::from_frames([gt])?;
    let g = Graph::new();
    let p = g.constant(Tensor::matrix(
        1,
        3 * pred.num_keypoints(),
        pred.positions.iter().flatten().copied().collect(),
    )?);
    let terms = loss_sirenpose(p, &targets, skeleton, weights)?;
    Ok(LossBreakdown {
        l_pos: terms.pos.item(),
        l_geo: terms.geo.item(),
        l_sirenpose: terms.sirenpose.item(),
        l_recon: 0.0,
        l_total: weights.lambda_sp * terms.sirenpose.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Point3;
    use std::f64::consts::PI;

    fn frame(points: &[Point3]) -> KeypointFrame {
        KeypointFrame::new(0.0, points.to_vec())
    }

    fn row<'g>(g: &'g Graph, points: &[Point3]) -> Var<'g> {
        g.param(
            Tensor::matrix(
                1,
                3 * points.len(),
                points.iter().flatten().copied().collect(),
            )
            .unwrap(),
        )
    }

    fn chain(m: usize) -> SkeletonGraph {
        SkeletonGraph::new(
            m,
            (0..m - 1).map(|i| (i, i + 1)).collect(),
            vec![1.0; m - 1],
        )
        .unwrap()
    }

    #[test]
    fn pos_examples() {
        let g = Graph::new();
        let gt = KeypointTargets::from_frames([&frame(&[[0.0; 3]])]).unwrap();
        assert_eq!(loss_pos(row(&g, &[[0.0; 3]]), &gt).unwrap().item(), 0.0);
        assert_eq!(
            loss_pos(row(&g, &[[0.5, 0.0, 0.0]]), &gt).unwrap().item(),
            0.25
        );
        let gt2 = KeypointTargets::from_frames([&frame(&[[0.0; 3], [1.0, 1.0, 1.0]])]).unwrap();
        let pred = row(&g, &[[1.0, 0.0, 0.0], [1.0, 3.0, 1.0]]);
        assert_eq!(loss_pos(pred, &gt2).unwrap().item(), 5.0);
    }

    #[test]
    fn keypoint_count_mismatch_rejected() {
        let g = Graph::new();
        let gt = KeypointTargets::from_frames([&frame(&[[0.0; 3], [0.0; 3]])]).unwrap();
        assert!(matches!(
            loss_pos(row(&g, &[[0.0; 3]]), &gt),
            Err(LossError::Mismatch(_))
        ));
    }

    #[test]
    fn geo_identity_and_quarter_period() {
        let g = Graph::new();
        let sk = chain(2);
        let gt = KeypointTargets::from_frames([&frame(&[[0.0; 3], [0.0; 3]])]).unwrap();
        let same = loss_geo(row(&g, &[[0.0; 3], [0.0; 3]]), &gt, &sk, 30.0).unwrap();
        assert_eq!(same.item(), 0.0);
        let pred = row(&g, &[[PI / 60.0, 0.0, 0.0], [0.0; 3]]);
        let l = loss_geo(pred, &gt, &sk, 30.0).unwrap().item();
        assert!((l - 1.0).abs() < 1e-15, "{l}");
    }

    #[test]
    fn geo_translation_invariant() {
        let g = Graph::new();
        let sk = chain(3);
        let gt_pts = [[0.1, 0.2, -0.3], [0.4, -0.1, 0.0], [0.2, 0.3, 0.5]];
        let pred_pts = [[0.15, 0.1, -0.25], [0.3, -0.2, 0.05], [0.1, 0.35, 0.4]];
        let gt = KeypointTargets::from_frames([&frame(&gt_pts)]).unwrap();
        let base = loss_geo(row(&g, &pred_pts), &gt, &sk, 30.0).unwrap().item();
        let c = [0.731, -1.9, 12.5];
        let shifted: Vec<Point3> = pred_pts
            .iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect();
        let moved = loss_geo(row(&g, &shifted), &gt, &sk, 30.0).unwrap().item();
        assert!(base > 0.0);
        assert!((moved - base).abs() <= 1e-12 * base, "{moved} vs {base}");
    }

    #[test]
    fn geo_periodic_in_relative_offset() {
        let g = Graph::new();
        let sk = chain(2);
        let gt = KeypointTargets::from_frames([&frame(&[[0.0; 3], [0.3, 0.1, -0.2]])]).unwrap();
        let p = [[0.05, -0.02, 0.01], [0.2, 0.15, -0.1]];
        let base = loss_geo(row(&g, &p), &gt, &sk, 30.0).unwrap().item();
        let period = 2.0 * PI / 30.0;
        let q = [[p[0][0] + period, p[0][1] + period, p[0][2] + period], p[1]];
        let shifted = loss_geo(row(&g, &q), &gt, &sk, 30.0).unwrap().item();
        assert!((shifted - base).abs() < 1e-12, "{shifted} vs {base}");
    }

    #[test]
    fn hidden_endpoint_removes_edge_and_gradient() {
        let g = Graph::new();
        let sk = chain(3);
        let mut f = frame(&[[0.0; 3], [0.2, 0.0, 0.0], [0.4, 0.0, 0.0]]);
        f.visibility[2] = false;
        let gt = KeypointTargets::from_frames([&f]).unwrap();
        let pred = row(&g, &[[0.0; 3], [0.2, 0.0, 0.0], [0.9, 0.3, -0.2]]);
        let l = loss_geo(pred, &gt, &sk, 30.0).unwrap();
        assert_eq!(l.item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(pred).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_edge_rejected() {
        let g = Graph::new();
        let gt = KeypointTargets::from_frames([&frame(&[[0.0; 3], [0.0; 3], [0.0; 3]])]).unwrap();
        let sk = chain(4);
        assert!(loss_geo(row(&g, &[[0.0; 3]; 3]), &gt, &sk, 30.0).is_err());
    }

    #[test]
    fn sirenpose_combines_terms() {
        let sk = chain(2);
        let gt = frame(&[[0.0; 3], [0.0; 3]]);
        // pos contribution 0.25 from keypoint 0 offset; geo = sin²(π/2) = 1
        let pred = frame(&[[PI / 60.0, 0.0, 0.0], [0.0; 3]]);
        let w = LossWeights {
            lambda_geo: 2.0,
            ..LossWeights::default()
        };
        let b = frame_sirenpose(&pred, &gt, &sk, &w).unwrap();
        let pos = (PI / 60.0).powi(2);
        assert!((b.l_pos - pos).abs() < 1e-15);
        assert!((b.l_geo - 1.0).abs() < 1e-15);
        assert!((b.l_sirenpose - (pos + 2.0)).abs() < 1e-14);

        // components 0.25 and 1.0: k0 - k1 = π/60 along x with |k0|² + |k1|² = 0.25
        let d = PI / 60.0;
        let s = (0.5 - d * d).sqrt();
        let (a, c) = ((d + s) / 2.0, (s - d) / 2.0);
        let pred2 = frame(&[[a, 0.0, 0.0], [c, 0.0, 0.0]]);
        let b2 = frame_sirenpose(&pred2, &gt, &sk, &w).unwrap();
        assert!((b2.l_pos - 0.25).abs() < 1e-15);
        assert!((b2.l_geo - 1.0).abs() < 1e-15);
        assert!((b2.l_sirenpose - 2.25).abs() < 1e-14);

        let no_geo = LossWeights {
            lambda_geo: 0.0,
            ..LossWeights::default()
        };
        let b0 = frame_sirenpose(&pred, &gt, &sk, &no_geo).unwrap();
        assert_eq!(b0.l_sirenpose, b0.l_pos);
        let id = frame_sirenpose(&gt, &gt, &sk, &w).unwrap();
        assert_eq!(id.l_sirenpose, 0.0);
    }

    #[test]
    fn recon_examples() {
        let g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            loss_recon(a, &Tensor::vector(vec![1.0, 2.0]))
                .unwrap()
                .item(),
            0.0
        );
        let s = g.param(Tensor::scalar(1.0));
        assert_eq!(loss_recon(s, &Tensor::scalar(3.0)).unwrap().item(), 4.0);
        assert!(loss_recon(a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn recon_matches_elementwise_accumulation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut expected = 0.0;
        for k in 0..60 {
            expected += (a[k] - b[k]) * (a[k] - b[k]);
        }
        let g = Graph::new();
        let p = g.param(Tensor::matrix(4, 15, a).unwrap());
        let l = loss_recon(p, &Tensor::matrix(4, 15, b).unwrap()).unwrap();
        assert!((l.item() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn total_examples() {
        let g = Graph::new();
        let r = g.constant(Tensor::scalar(4.0));
        let s = g.constant(Tensor::scalar(2.25));
        let w = LossWeights::default();
        assert_eq!(loss_total(r, s, &w).unwrap().item(), 6.25);
        let pure = LossWeights {
            lambda_sp: 0.0,
            ..w
        };
        assert_eq!(loss_total(r, s, &pure).unwrap().item(), 4.0);
    }

    #[test]
    fn weights_validated() {
        let w = LossWeights {
            lambda_geo: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            omega0_loss: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let parsed: LossWeights = serde_json::from_str(r#"{"lambda_geo": 0.5}"#).unwrap();
        assert_eq!(parsed.lambda_sp, 1.0);
    }
}
