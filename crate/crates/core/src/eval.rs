//! Trajectory alignment and error metrics for poses and keypoint tracks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{distance, KeypointTrack, Point3};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {min} poses, got {got}")]
    TooFewPoses { min: usize, got: usize },
    #[error("degenerate point set: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("unknown metric `{0}` (expected epe, mse, geo or ate)")]
    UnknownMetric(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Timestamped rigid poses.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    times: Vec<f64>,
    rotations: Vec<UnitQuaternion<f64>>,
    translations: Vec<Vector3<f64>>,
}

impl PoseTrajectory {
    pub fn new(
        times: Vec<f64>,
        rotations: Vec<UnitQuaternion<f64>>,
        translations: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        if times.len() != rotations.len() || times.len() != translations.len() {
            return Err(EvalError::Invalid(format!(
                "{} times, {} rotations, {} translations",
                times.len(),
                rotations.len(),
                translations.len()
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(EvalError::Invalid(format!(
                "timestamps must increase strictly (frame {})",
                i + 1
            )));
        }
        for (i, (q, t)) in rotations.iter().zip(&translations).enumerate() {
            if (q.norm() - 1.0).abs() > 1e-9 || !q.coords.iter().all(|v| v.is_finite()) {
                return Err(EvalError::Invalid(format!(
                    "frame {i}: quaternion is not unit"
                )));
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(EvalError::Invalid(format!(
                    "frame {i}: non-finite translation"
                )));
            }
        }
        Ok(PoseTrajectory {
            times,
            rotations,
            translations,
        })
    }

    /// Translation-only poses (identity rotations).
    pub fn from_translations(times: Vec<f64>, translations: Vec<Vector3<f64>>) -> Result<Self> {
        let rotations = vec![UnitQuaternion::identity(); translations.len()];
        Self::new(times, rotations, translations)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn rotations(&self) -> &[UnitQuaternion<f64>] {
        &self.rotations
    }

    pub fn translations(&self) -> &[Vector3<f64>] {
        &self.translations
    }

    /// `x -> scale * R x + t` applied on the left of every pose.
    pub fn transformed(&self, transform: &SimilarityTransform) -> Self {
        PoseTrajectory {
            times: self.times.clone(),
            rotations: self
                .rotations
                .iter()
                .map(|q| transform.rotation * q)
                .collect(),
            translations: self
                .translations
                .iter()
                .map(|t| transform.apply(t))
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,tx,ty,tz,qw,qx,qy,qz\n");
        for ((t, q), p) in self
            .times
            .iter()
            .zip(&self.rotations)
            .zip(&self.translations)
        {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t, p.x, p.y, p.z, q.w, q.i, q.j, q.k
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "t,tx,ty,tz,qw,qx,qy,qz" => {}
            Some((i, _)) => {
                return Err(EvalError::Parse {
                    line: i + 1,
                    message: "expected header t,tx,ty,tz,qw,qx,qy,qz".into(),
                })
            }
            None => {
                return Err(EvalError::Parse {
                    line: 1,
                    message: "empty trajectory file".into(),
                })
            }
        }
        let (mut times, mut rotations, mut translations) = (vec![], vec![], vec![]);
        for (i, line) in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| EvalError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if vals.len() != 8 {
                return Err(EvalError::Parse {
                    line: i + 1,
                    message: format!("expected 8 fields, got {}", vals.len()),
                });
            }
            let q = nalgebra::Quaternion::new(vals[4], vals[5], vals[6], vals[7]);
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(EvalError::Parse {
                    line: i + 1,
                    message: format!("quaternion norm {} is not 1", q.norm()),
                });
            }
            times.push(vals[0]);
            translations.push(Vector3::new(vals[1], vals[2], vals[3]));
            rotations.push(UnitQuaternion::new_unchecked(q));
        }
        Self::new(times, rotations, translations)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `x -> scale * R x + translation`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HornOptions {
    pub with_scale: bool,
    /// Residual RMS above this fraction of the target spread marks the fit as suspect.
    pub flag_ratio: f64,
}

impl Default for HornOptions {
    fn default() -> Self {
        HornOptions {
            with_scale: false,
            flag_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    pub aligned: PoseTrajectory,
    pub residual_rmse: f64,
    /// Set when the residual is large relative to the target spread, e.g. for
    /// mirrored correspondences that no proper rotation can match.
    pub flagged: bool,
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Closed-form least-squares alignment of `est` positions onto `gt` via the
/// unit quaternion maximizing `Σ gt'·R est'`.
pub fn horn_align(
    est: &PoseTrajectory,
    gt: &PoseTrajectory,
    options: &HornOptions,
) -> Result<Alignment> {
    if est.len() != gt.len() {
        return Err(EvalError::Mismatch(format!(
            "{} estimated poses vs {} ground-truth poses",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(EvalError::TooFewPoses {
            min: 3,
            got: est.len(),
        });
    }
    if let Some(i) = est
        .times
        .iter()
        .zip(&gt.times)
        .position(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
    {
        return Err(EvalError::Mismatch(format!(
            "timestamps differ at frame {i}"
        )));
    }
    let (e, g) = (&est.translations, &gt.translations);
    let (ce, cg) = (centroid(e), centroid(g));
    for (name, pts, c) in [("estimate", e, ce), ("ground truth", g, cg)] {
        let cov: Matrix3<f64> = pts.iter().map(|p| (p - c) * (p - c).transpose()).sum();
        let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if ev[1] <= 1e-12 * ev[0].max(1e-300) {
            return Err(EvalError::Degenerate(format!(
                "{name} positions are collinear or coincident"
            )));
        }
    }

    let s: Matrix3<f64> = e
        .iter()
        .zip(g)
        .map(|(a, b)| (a - ce) * (b - cg).transpose())
        .sum();
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let best = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(best);
    let rotation =
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));

    let scale = if options.with_scale {
        let num: f64 = e
            .iter()
            .zip(g)
            .map(|(a, b)| (b - cg).dot(&(rotation * (a - ce))))
            .sum();
        let den: f64 = e.iter().map(|a| (a - ce).norm_squared()).sum();
        num / den
    } else {
        1.0
    };
    let transform = SimilarityTransform {
        rotation,
        translation: cg - rotation * ce * scale,
        scale,
    };
    let aligned = est.transformed(&transform);
    let residual_rmse = ate(&aligned, gt)?;
    let spread = (g.iter().map(|p| (p - cg).norm_squared()).sum::<f64>() / g.len() as f64).sqrt();
    Ok(Alignment {
        transform,
        aligned,
        residual_rmse,
        flagged: residual_rmse > options.flag_ratio * spread,
    })
}

/// Horn alignment, falling back to matching centroids when the positions do
/// not span a plane (e.g. a static trajectory).
pub fn align_or_translate(
    est: &PoseTrajectory,
    gt: &PoseTrajectory,
    options: &HornOptions,
) -> Result<Alignment> {
    match horn_align(est, gt, options) {
        Err(EvalError::Degenerate(_)) => {
            let transform = SimilarityTransform {
                translation: centroid(&gt.translations) - centroid(&est.translations),
                ..SimilarityTransform::identity()
            };
            let aligned = est.transformed(&transform);
            let residual_rmse = ate(&aligned, gt)?;
            Ok(Alignment {
                transform,
                aligned,
                residual_rmse,
                flagged: false,
            })
        }
        other => other,
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(EvalError::Mismatch(format!("{a} vs {b} frames")));
    }
    if a == 0 {
        return Err(EvalError::TooFewPoses { min: 1, got: 0 });
    }
    Ok(())
}

/// Root mean square translation error.
pub fn ate(est: &PoseTrajectory, gt: &PoseTrajectory) -> Result<f64> {
    check_lengths(est.len(), gt.len())?;
    let sq: f64 = est
        .translations
        .iter()
        .zip(&gt.translations)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok((sq / est.len() as f64).sqrt())
}

/// Rotation angle of `q` in degrees, in `[0, 180]`.
pub fn rotation_angle_deg(q: &UnitQuaternion<f64>) -> f64 {
    let w = q.w.abs().min(1.0);
    let v = q.imag().norm();
    (2.0 * v.atan2(w)).to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePoseError {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
}

/// Relative pose error over frame pairs `(i, i + delta)`.
pub fn rpe(est: &PoseTrajectory, gt: &PoseTrajectory, delta: usize) -> Result<RelativePoseError> {
    check_lengths(est.len(), gt.len())?;
    if delta == 0 || delta >= est.len() {
        return Err(EvalError::Mismatch(format!(
            "delta {delta} must lie in 1..{}",
            est.len()
        )));
    }
    let rel = |traj: &PoseTrajectory, i: usize| {
        let (qa, qb) = (traj.rotations[i], traj.rotations[i + delta]);
        let inv = qa.inverse();
        (
            inv * qb,
            inv * (traj.translations[i + delta] - traj.translations[i]),
        )
    };
    let pairs = est.len() - delta;
    let (mut trans, mut rot) = (0.0, 0.0);
    for i in 0..pairs {
        let (qg, tg) = rel(gt, i);
        let (qe, te) = rel(est, i);
        // E = G⁻¹ Ê for rigid motions G = (qg, tg), Ê = (qe, te)
        let inv = qg.inverse();
        let qerr = inv * qe;
        let terr = inv * (te - tg);
        trans += terr.norm_squared();
        rot += rotation_angle_deg(&qerr).powi(2);
    }
    Ok(RelativePoseError {
        trans_rmse: (trans / pairs as f64).sqrt(),
        rot_rmse_deg: (rot / pairs as f64).sqrt(),
    })
}

fn vec3(p: Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn rotation_onto(from: &Vector3<f64>, to: &Vector3<f64>) -> UnitQuaternion<f64> {
    if from.norm() < 1e-12 || to.norm() < 1e-12 {
        return UnitQuaternion::identity();
    }
    UnitQuaternion::rotation_between(from, to).unwrap_or_else(|| {
        // antiparallel: half turn about any axis orthogonal to `from`
        let helper = if from.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(from.cross(&helper)),
            std::f64::consts::PI,
        )
    })
}

/// Pose of one bone per frame: translation is the bone's child keypoint and
/// rotation takes `reference` onto the bone direction.
pub fn bone_trajectory(
    track: &KeypointTrack,
    edge: usize,
    reference: &Vector3<f64>,
) -> Result<PoseTrajectory> {
    let &(i, j) = track.skeleton().edges().get(edge).ok_or_else(|| {
        EvalError::Mismatch(format!(
            "edge {edge} out of range for {} edges",
            track.skeleton().num_edges()
        ))
    })?;
    let mut rotations = Vec::with_capacity(track.len());
    let mut translations = Vec::with_capacity(track.len());
    for f in track.frames() {
        let dir = vec3(f.positions[j]) - vec3(f.positions[i]);
        rotations.push(rotation_onto(reference, &dir));
        translations.push(vec3(f.positions[j]));
    }
    PoseTrajectory::new(track.times(), rotations, translations)
}

/// Keypoint error summary. Definitions:
/// * `mse`, `epe`: mean squared / Euclidean error over visible ground-truth keypoints
/// * `geometric_accuracy`: mean over edges and frames of `1 - min(1, |len_pred - len_gt| / len_gt)`
/// * `temporal_consistency`: `1 - min(1, v / L)` where `v` is the mean change of the
///   per-keypoint error vector between consecutive frames and `L` the mean rest length
/// * `motion_smoothness`: fraction of interior frames whose largest predicted second
///   difference stays within `1.5 * max(gt second difference) + 1e-3 * L`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMetrics {
    pub mse: f64,
    pub epe: f64,
    pub geometric_accuracy: f64,
    pub temporal_consistency: f64,
    pub motion_smoothness: f64,
}

/// `100 / (1 + error)`, higher is better.
pub fn score(error: f64) -> f64 {
    100.0 / (1.0 + error)
}

fn check_tracks(pred: &KeypointTrack, gt: &KeypointTrack) -> Result<()> {
    if pred.num_keypoints() != gt.num_keypoints() {
        return Err(EvalError::Mismatch(format!(
            "{} predicted keypoints vs {} ground truth",
            pred.num_keypoints(),
            gt.num_keypoints()
        )));
    }
    check_lengths(pred.len(), gt.len())
}

fn edge_accuracy(pred: &[Point3], gt: &[Point3], i: usize, j: usize) -> f64 {
    let lg = distance(gt[i], gt[j]);
    let lp = distance(pred[i], pred[j]);
    if lg <= 0.0 {
        return if lp == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ((lp - lg).abs() / lg).min(1.0)
}

fn second_difference(a: Point3, b: Point3, c: Point3) -> f64 {
    let d = [
        a[0] - 2.0 * b[0] + c[0],
        a[1] - 2.0 * b[1] + c[1],
        a[2] - 2.0 * b[2] + c[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn keypoint_metrics(pred: &KeypointTrack, gt: &KeypointTrack) -> Result<KeypointMetrics> {
    check_tracks(pred, gt)?;
    let m = gt.num_keypoints();
    let (pf, gf) = (pred.frames(), gt.frames());

    let (mut sq, mut eu, mut n) = (0.0, 0.0, 0usize);
    for (p, g) in pf.iter().zip(gf) {
        for k in (0..m).filter(|&k| g.visibility[k]) {
            let d = distance(p.positions[k], g.positions[k]);
            sq += d * d;
            eu += d;
            n += 1;
        }
    }
    let (mse, epe) = if n > 0 {
        (sq / n as f64, eu / n as f64)
    } else {
        (0.0, 0.0)
    };

    let edges = gt.skeleton().edges();
    let geometric_accuracy = if edges.is_empty() {
        1.0
    } else {
        let total: f64 = pf
            .iter()
            .zip(gf)
            .flat_map(|(p, g)| {
                edges
                    .iter()
                    .map(|&(i, j)| edge_accuracy(&p.positions, &g.positions, i, j))
            })
            .sum();
        total / (edges.len() * gt.len()) as f64
    };

    let rest = gt.skeleton().mean_rest_length().max(1e-12);
    let (mut var, mut vn) = (0.0, 0usize);
    for f in 1..gt.len() {
        for k in (0..m).filter(|&k| gf[f].visibility[k] && gf[f - 1].visibility[k]) {
            let mut d = 0.0;
            for c in 0..3 {
                let now = pf[f].positions[k][c] - gf[f].positions[k][c];
                let before = pf[f - 1].positions[k][c] - gf[f - 1].positions[k][c];
                d += (now - before) * (now - before);
            }
            var += d.sqrt();
            vn += 1;
        }
    }
    let temporal_consistency = if vn > 0 {
        1.0 - (var / vn as f64 / rest).min(1.0)
    } else {
        1.0
    };

    let motion_smoothness = if gt.len() < 3 {
        1.0
    } else {
        let worst = |fr: &[crate::scene::KeypointFrame], f: usize| {
            (0..m)
                .map(|k| {
                    second_difference(
                        fr[f - 1].positions[k],
                        fr[f].positions[k],
                        fr[f + 1].positions[k],
                    )
                })
                .fold(0.0, f64::max)
        };
        let gt_max = (1..gt.len() - 1).map(|f| worst(gf, f)).fold(0.0, f64::max);
        let threshold = 1.5 * gt_max + 1e-3 * rest;
        let smooth = (1..gt.len() - 1)
            .filter(|&f| worst(pf, f) <= threshold)
            .count();
        smooth as f64 / (gt.len() - 2) as f64
    };

    Ok(KeypointMetrics {
        mse,
        epe,
        geometric_accuracy,
        temporal_consistency,
        motion_smoothness,
    })
}

/// Per-frame metric ids accepted by [`frame_error_series`].
pub const SERIES_METRICS: [&str; 4] = ["epe", "mse", "geo", "ate"];

/// One value per frame. `epe`/`mse` average over that frame's visible keypoints,
/// `geo` is the frame's mean edge accuracy and `ate` is the translation error of
/// the reference bone after alignment.
pub fn frame_error_series(
    pred: &KeypointTrack,
    gt: &KeypointTrack,
    metric: &str,
    options: &EvalOptions,
) -> Result<Vec<f64>> {
    check_tracks(pred, gt)?;
    let m = gt.num_keypoints();
    let frames = pred.frames().iter().zip(gt.frames());
    match metric {
        "epe" | "mse" => Ok(frames
            .map(|(p, g)| {
                let vis: Vec<usize> = (0..m).filter(|&k| g.visibility[k]).collect();
                if vis.is_empty() {
                    return 0.0;
                }
                let sum: f64 = vis
                    .iter()
                    .map(|&k| {
                        let d = distance(p.positions[k], g.positions[k]);
                        if metric == "mse" {
                            d * d
                        } else {
                            d
                        }
                    })
                    .sum();
                sum / vis.len() as f64
            })
            .collect()),
        "geo" => {
            let edges = gt.skeleton().edges();
            Ok(frames
                .map(|(p, g)| {
                    if edges.is_empty() {
                        return 1.0;
                    }
                    edges
                        .iter()
                        .map(|&(i, j)| edge_accuracy(&p.positions, &g.positions, i, j))
                        .sum::<f64>()
                        / edges.len() as f64
                })
                .collect())
        }
        "ate" => {
            let (est, truth) = trajectories(pred, gt, options)?;
            let al = align_or_translate(&est, &truth, &options.horn)?;
            Ok(al
                .aligned
                .translations()
                .iter()
                .zip(truth.translations())
                .map(|(a, b)| (a - b).norm())
                .collect())
        }
        other => Err(EvalError::UnknownMetric(other.to_string())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Skeleton edge whose pose forms the trajectory for ATE/RPE.
    pub reference_edge: usize,
    pub rpe_delta: usize,
    pub horn: HornOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            reference_edge: 0,
            rpe_delta: 1,
            horn: HornOptions::default(),
        }
    }
}

fn trajectories(
    pred: &KeypointTrack,
    gt: &KeypointTrack,
    options: &EvalOptions,
) -> Result<(PoseTrajectory, PoseTrajectory)> {
    let &(i, j) = gt
        .skeleton()
        .edges()
        .get(options.reference_edge)
        .ok_or_else(|| {
            EvalError::Mismatch(format!(
                "reference edge {} does not exist",
                options.reference_edge
            ))
        })?;
    let first = &gt.frames()[0];
    let reference = vec3(first.positions[j]) - vec3(first.positions[i]);
    Ok((
        bone_trajectory(pred, options.reference_edge, &reference)?,
        bone_trajectory(gt, options.reference_edge, &reference)?,
    ))
}

/// Per-frame values exported next to a [`MetricReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSeries {
    pub times: Vec<f64>,
    pub epe: Vec<f64>,
    pub mse: Vec<f64>,
    pub geo: Vec<f64>,
    pub ate: Vec<f64>,
}

impl FrameSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,t,epe,mse,geo,ate\n");
        for f in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                f, self.times[f], self.epe[f], self.mse[f], self.geo[f], self.ate[f]
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub ate_rmse: f64,
    pub rpe_trans_rmse: f64,
    pub rpe_rot_rmse: f64,
    pub alignment_flagged: bool,
    pub mse: f64,
    pub epe: f64,
    pub mse_score: f64,
    pub epe_score: f64,
    pub geometric_accuracy: f64,
    pub temporal_consistency: f64,
    pub motion_smoothness: f64,
    #[serde(skip)]
    pub series: FrameSeries,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Writes `<stem>.json` and `<stem>_frames.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json() + "\n").map_err(|e| io_error(&json, e))?;
        let csv = dir.join(format!("{stem}_frames.csv"));
        fs::write(&csv, self.series.to_csv()).map_err(|e| io_error(&csv, e))
    }
}

/// Full report for a predicted track against ground truth.
pub fn evaluate_tracks(
    pred: &KeypointTrack,
    gt: &KeypointTrack,
    options: &EvalOptions,
) -> Result<MetricReport> {
    let km = keypoint_metrics(pred, gt)?;
    let (est, truth) = trajectories(pred, gt, options)?;
    let alignment = if est.len() >= 3 {
        align_or_translate(&est, &truth, &options.horn)?
    } else {
        Alignment {
            transform: SimilarityTransform::identity(),
            aligned: est.clone(),
            residual_rmse: ate(&est, &truth)?,
            flagged: false,
        }
    };
    let rel = if est.len() > options.rpe_delta {
        rpe(&est, &truth, options.rpe_delta)?
    } else {
        RelativePoseError {
            trans_rmse: 0.0,
            rot_rmse_deg: 0.0,
        }
    };
    let series = FrameSeries {
        times: gt.times(),
        epe: frame_error_series(pred, gt, "epe", options)?,
        mse: frame_error_series(pred, gt, "mse", options)?,
        geo: frame_error_series(pred, gt, "geo", options)?,
        ate: alignment
            .aligned
            .translations()
            .iter()
            .zip(truth.translations())
            .map(|(a, b)| (a - b).norm())
            .collect(),
    };
    Ok(MetricReport {
        frames: gt.len(),
        ate_rmse: alignment.residual_rmse,
        rpe_trans_rmse: rel.trans_rmse,
        rpe_rot_rmse: rel.rot_rmse_deg,
        alignment_flagged: alignment.flagged,
        mse: km.mse,
        epe: km.epe,
        mse_score: score(km.mse),
        epe_score: score(km.epe),
        geometric_accuracy: km.geometric_accuracy,
        temporal_consistency: km.temporal_consistency,
        motion_smoothness: km.motion_smoothness,
        series,
    })
}
