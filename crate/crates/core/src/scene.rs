//! Keypoint tracks, skeleton graphs, JSON Lines I/O and a synthetic
//! articulated-scene generator.
//!
//! Track files are JSON Lines: a header record
//! `{"m": 3, "edges": [[0,1],[1,2]], "rest_lengths": [1.0, 0.8]}` followed by
//! one `{"t": 0.0, "pos": [[x,y,z], ...], "vis": [true, ...]}` record per frame.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

pub const DEFAULT_SAMPLES_PER_BONE: usize = 8;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("invalid track: {0}")]
    Track(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SceneError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SceneError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub time: f64,
    pub positions: Vec<Point3>,
    pub visibility: Vec<bool>,
}

impl KeypointFrame {
    pub fn new(time: f64, positions: Vec<Point3>) -> Self {
        let visibility = vec![true; positions.len()];
        KeypointFrame {
            time,
            positions,
            visibility,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.positions.len()
    }
}

/// Undirected edge set over keypoint indices with per-edge rest lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    num_keypoints: usize,
    edges: Vec<(usize, usize)>,
    rest_lengths: Vec<f64>,
}

impl SkeletonGraph {
    pub fn new(
        num_keypoints: usize,
        edges: Vec<(usize, usize)>,
        rest_lengths: Vec<f64>,
    ) -> Result<Self> {
        let bad = |m: String| Err(SceneError::Skeleton(m));
        if num_keypoints == 0 {
            return bad("skeleton needs at least one keypoint".into());
        }
        if edges.len() != rest_lengths.len() {
            return bad(format!(
                "{} edges but {} rest lengths",
                edges.len(),
                rest_lengths.len()
            ));
        }
        let mut seen = HashSet::new();
        for (e, &(i, j)) in edges.iter().enumerate() {
            if i >= num_keypoints || j >= num_keypoints {
                return bad(format!(
                    "edge {e} ({i}, {j}) references a keypoint outside 0..{num_keypoints}"
                ));
            }
            if i == j {
                return bad(format!("edge {e} ({i}, {j}) is a self loop"));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return bad(format!("edge {e} ({i}, {j}) is a duplicate"));
            }
            let len = rest_lengths[e];
            if !(len > 0.0 && len.is_finite()) {
                return bad(format!("edge {e} ({i}, {j}) has rest length {len}"));
            }
        }
        // connectivity by flood fill from keypoint 0
        let mut adjacency = vec![Vec::new(); num_keypoints];
        for &(i, j) in &edges {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        let mut reached = vec![false; num_keypoints];
        let mut stack = vec![0];
        reached[0] = true;
        while let Some(k) = stack.pop() {
            for &n in &adjacency[k] {
                if !reached[n] {
                    reached[n] = true;
                    stack.push(n);
                }
            }
        }
        if let Some(k) = reached.iter().position(|r| !r) {
            return bad(format!("keypoint {k} is not connected to keypoint 0"));
        }
        Ok(SkeletonGraph {
            num_keypoints,
            edges,
            rest_lengths,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn mean_rest_length(&self) -> f64 {
        if self.rest_lengths.is_empty() {
            1.0
        } else {
            self.rest_lengths.iter().sum::<f64>() / self.rest_lengths.len() as f64
        }
    }
}

/// Time-ordered frames over one skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointTrack {
    skeleton: SkeletonGraph,
    frames: Vec<KeypointFrame>,
}

impl KeypointTrack {
    pub fn new(skeleton: SkeletonGraph, frames: Vec<KeypointFrame>) -> Result<Self> {
        let m = skeleton.num_keypoints();
        for (f, frame) in frames.iter().enumerate() {
            check_frame(frame, m, f)?;
            if f > 0 && frame.time <= frames[f - 1].time {
                return Err(SceneError::Track(format!(
                    "frame {f}: time {} does not increase (previous {})",
                    frame.time,
                    frames[f - 1].time
                )));
            }
        }
        Ok(KeypointTrack { skeleton, frames })
    }

    pub fn skeleton(&self) -> &SkeletonGraph {
        &self.skeleton
    }

    pub fn frames(&self) -> &[KeypointFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.skeleton.num_keypoints()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    /// Frames at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| {
                    SceneError::Track(format!("frame index {i} out of range 0..{}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        KeypointTrack::new(self.skeleton.clone(), frames)
    }

    /// Same positions, every keypoint visible.
    pub fn with_full_visibility(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.visibility.iter_mut().for_each(|v| *v = true);
        }
        out
    }

    /// Marks the given keypoints invisible in every frame. Positions stay.
    pub fn corrupt_keypoints(&self, remove: &BTreeSet<usize>) -> Result<Self> {
        let m = self.num_keypoints();
        if let Some(&k) = remove.iter().find(|&&k| k >= m) {
            return Err(SceneError::Track(format!(
                "cannot remove keypoint {k}: track has {m} keypoints"
            )));
        }
        if remove.len() == m {
            return Err(SceneError::Track(
                "removal set must leave at least one keypoint".into(),
            ));
        }
        let mut out = self.clone();
        for f in &mut out.frames {
            for &k in remove {
                f.visibility[k] = false;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| SceneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| SceneError::io(path, e))?;
        let lines = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| SceneError::io(path, e))?;
        Self::from_lines(lines.iter().map(String::as_str))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        let header = TrackHeader {
            m: self.skeleton.num_keypoints,
            edges: self.skeleton.edges.iter().map(|&(i, j)| [i, j]).collect(),
            rest_lengths: self.skeleton.rest_lengths.clone(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("serializable")
        )
        .unwrap();
        for f in &self.frames {
            let rec = FrameRecord {
                t: f.time,
                pos: f.positions.clone(),
                vis: f.visibility.clone(),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&rec).expect("serializable")
            )
            .unwrap();
        }
        String::from_utf8(out).expect("utf8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines())
    }

    fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut lines = lines
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or(SceneError::Parse {
            line: 1,
            message: "missing header record".into(),
        })?;
        let header: TrackHeader = serde_json::from_str(htext).map_err(|e| SceneError::Parse {
            line: hline,
            message: format!("header: {e}"),
        })?;
        let edges = header.edges.iter().map(|e| (e[0], e[1])).collect();
        let skeleton = SkeletonGraph::new(header.m, edges, header.rest_lengths).map_err(|e| {
            SceneError::Parse {
                line: hline,
                message: e.to_string(),
            }
        })?;
        let mut frames: Vec<KeypointFrame> = Vec::new();
        for (line, text) in lines {
            let rec: FrameRecord = serde_json::from_str(text).map_err(|e| SceneError::Parse {
                line,
                message: e.to_string(),
            })?;
            let frame = KeypointFrame {
                time: rec.t,
                positions: rec.pos,
                visibility: rec.vis,
            };
            let index = frames.len();
            check_frame(&frame, header.m, index).map_err(|e| SceneError::Parse {
                line,
                message: e.to_string(),
            })?;
            if let Some(prev) = frames.last() {
                if frame.time <= prev.time {
                    return Err(SceneError::Parse {
                        line,
                        message: format!(
                            "frame {index}: time {} does not increase (previous {})",
                            frame.time, prev.time
                        ),
                    });
                }
            }
            frames.push(frame);
        }
        KeypointTrack::new(skeleton, frames)
    }
}

fn check_frame(frame: &KeypointFrame, m: usize, index: usize) -> Result<()> {
    if frame.positions.len() != m || frame.visibility.len() != m {
        return Err(SceneError::Track(format!(
            "frame {index}: {} positions and {} visibility flags for {m} keypoints",
            frame.positions.len(),
            frame.visibility.len()
        )));
    }
    if !frame.time.is_finite() {
        return Err(SceneError::Track(format!(
            "frame {index}: time is not finite"
        )));
    }
    if frame.positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SceneError::Track(format!(
            "frame {index}: non-finite position"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackHeader {
    m: usize,
    edges: Vec<[usize; 2]>,
    rest_lengths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    pos: Vec<Point3>,
    vis: Vec<bool>,
}

/// Dense 3D samples along every bone, one row of points per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalTargets {
    pub samples_per_bone: usize,
    pub times: Vec<f64>,
    pub points: Vec<Vec<Point3>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsHeader {
    s: usize,
    samples_per_bone: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsRecord {
    t: f64,
    pts: Vec<Point3>,
}

impl SignalTargets {
    /// Samples at fractions `(s + 0.5) / n` along each edge, for every frame.
    pub fn from_track(track: &KeypointTrack, samples_per_bone: usize) -> Self {
        let points = track
            .frames()
            .iter()
            .map(|f| bone_samples(&f.positions, track.skeleton().edges(), samples_per_bone))
            .collect();
        SignalTargets {
            samples_per_bone,
            times: track.times(),
            points,
        }
    }

    /// Points per frame.
    pub fn num_samples(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut times = Vec::with_capacity(indices.len());
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SceneError::Track(format!(
                    "target index {i} out of range 0..{}",
                    self.len()
                )));
            }
            times.push(self.times[i]);
            points.push(self.points[i].clone());
        }
        Ok(SignalTargets {
            samples_per_bone: self.samples_per_bone,
            times,
            points,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        let header = TargetsHeader {
            s: self.num_samples(),
            samples_per_bone: self.samples_per_bone,
        };
        writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
        for (t, pts) in self.times.iter().zip(&self.points) {
            let rec = TargetsRecord {
                t: *t,
                pts: pts.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
        }
        String::from_utf8(out).unwrap()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or(SceneError::Parse {
            line: 1,
            message: "missing header record".into(),
        })?;
        let header: TargetsHeader = serde_json::from_str(htext).map_err(|e| SceneError::Parse {
            line: hline,
            message: format!("header: {e}"),
        })?;
        let mut times = Vec::new();
        let mut points = Vec::new();
        for (line, text) in lines {
            let rec: TargetsRecord = serde_json::from_str(text).map_err(|e| SceneError::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.pts.len() != header.s {
                return Err(SceneError::Parse {
                    line,
                    message: format!("{} points, header says {}", rec.pts.len(), header.s),
                });
            }
            times.push(rec.t);
            points.push(rec.pts);
        }
        Ok(SignalTargets {
            samples_per_bone: header.samples_per_bone,
            times,
            points,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| SceneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

pub fn bone_samples(positions: &[Point3], edges: &[(usize, usize)], n: usize) -> Vec<Point3> {
    let mut out = Vec::with_capacity(edges.len() * n);
    for &(i, j) in edges {
        let (a, b) = (positions[i], positions[j]);
        for s in 0..n {
            let u = (s as f64 + 0.5) / n as f64;
            out.push([
                a[0] + u * (b[0] - a[0]),
                a[1] + u * (b[1] - a[1]),
                a[2] + u * (b[2] - a[2]),
            ]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Double pendulum: pivot, elbow, tip.
    Pendulum,
    /// Nine-keypoint stick figure with swinging limbs.
    Biped,
    /// Two double pendulums whose pivots are joined by a rigid bar.
    #[serde(alias = "multi-object")]
    MultiObject,
}

/// Keypoint `keypoint` is hidden for `start <= t < end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub keypoint: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub template: Template,
    /// Oscillation frequencies in Hz, cycled over the template's joints.
    pub frequencies: Vec<f64>,
    /// Joint swing amplitudes in radians, cycled like `frequencies`.
    pub amplitudes: Vec<f64>,
    /// Template bone lengths; template defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_lengths: Option<Vec<f64>>,
    pub duration: f64,
    pub frame_rate: f64,
    #[serde(default)]
    pub occlusion: Vec<Occlusion>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_samples_per_bone")]
    pub samples_per_bone: usize,
    pub seed: u64,
}

fn default_samples_per_bone() -> usize {
    DEFAULT_SAMPLES_PER_BONE
}

impl SceneSpec {
    pub fn pendulum(frequencies: Vec<f64>, amplitudes: Vec<f64>, seed: u64) -> Self {
        SceneSpec {
            template: Template::Pendulum,
            frequencies,
            amplitudes,
            bone_lengths: None,
            duration: 2.0,
            frame_rate: 30.0,
            occlusion: Vec::new(),
            noise_sigma: 0.0,
            samples_per_bone: DEFAULT_SAMPLES_PER_BONE,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text).map_err(|e| SceneError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn num_keypoints(&self) -> usize {
        match self.template {
            Template::Pendulum => 3,
            Template::Biped => 9,
            Template::MultiObject => 6,
        }
    }

    pub fn num_frames(&self) -> usize {
        ((self.duration * self.frame_rate).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Spec(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.frequencies.is_empty() || self.amplitudes.is_empty() {
            return bad("frequencies and amplitudes need at least one entry".into());
        }
        if self
            .frequencies
            .iter()
            .chain(&self.amplitudes)
            .any(|v| !v.is_finite())
        {
            return bad("frequencies and amplitudes must be finite".into());
        }
        if self.samples_per_bone == 0 {
            return bad("samples_per_bone must be at least 1".into());
        }
        if let Some(lengths) = &self.bone_lengths {
            let want = default_bone_lengths(self.template).len();
            if lengths.len() != want {
                return bad(format!(
                    "{:?} takes {want} bone lengths, got {}",
                    self.template,
                    lengths.len()
                ));
            }
            if lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return bad("bone lengths must be positive".into());
            }
        }
        let m = self.num_keypoints();
        for occ in &self.occlusion {
            if occ.keypoint >= m {
                return bad(format!(
                    "occlusion references keypoint {} but template has {m}",
                    occ.keypoint
                ));
            }
            if !(occ.start <= occ.end) {
                return bad(format!(
                    "occlusion interval {}..{} is empty",
                    occ.start, occ.end
                ));
            }
        }
        Ok(())
    }

    fn freq(&self, i: usize) -> f64 {
        self.frequencies[i % self.frequencies.len()]
    }

    fn amp(&self, i: usize) -> f64 {
        self.amplitudes[i % self.amplitudes.len()]
    }

    fn bones(&self) -> Vec<f64> {
        self.bone_lengths
            .clone()
            .unwrap_or_else(|| default_bone_lengths(self.template))
    }
}

pub fn default_bone_lengths(template: Template) -> Vec<f64> {
    match template {
        Template::Pendulum => vec![1.0, 0.8],
        // spine, neck-head, thigh, shin, arm
        Template::Biped => vec![0.5, 0.2, 0.45, 0.45, 0.55],
        Template::MultiObject => vec![0.6, 0.5, 0.6, 0.5],
    }
}

/// Generator output: clean ground truth, the supervision track (ground truth
/// plus noise) and dense bone samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub ground_truth: KeypointTrack,
    pub observed: KeypointTrack,
    pub targets: SignalTargets,
}

const MULTI_PIVOT_HALF_SPAN: f64 = 0.75;

/// Angle of a planar pendulum joint at time `t`.
pub fn joint_angle(amplitude: f64, frequency: f64, t: f64) -> f64 {
    amplitude * (2.0 * PI * frequency * t).sin()
}

fn hang(origin: Point3, angle: f64, length: f64) -> Point3 {
    [
        origin[0] + length * angle.sin(),
        origin[1] - length * angle.cos(),
        origin[2],
    ]
}

fn double_pendulum(pivot: Point3, a1: f64, a2: f64, l1: f64, l2: f64) -> [Point3; 3] {
    let elbow = hang(pivot, a1, l1);
    let tip = hang(elbow, a1 + a2, l2);
    [pivot, elbow, tip]
}

/// Unit direction swinging by `angle` in the x-y plane, tilted sideways by `splay`.
fn limb(origin: Point3, angle: f64, splay: f64, length: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    [
        origin[0] + length * s * splay.cos(),
        origin[1] - length * c * splay.cos(),
        origin[2] + length * splay.sin(),
    ]
}

fn template_skeleton(spec: &SceneSpec) -> Result<SkeletonGraph> {
    let b = spec.bones();
    let (m, edges, lengths) = match spec.template {
        Template::Pendulum => (3, vec![(0, 1), (1, 2)], vec![b[0], b[1]]),
        Template::Biped => (
            9,
            vec![
                (0, 1),
                (1, 2),
                (0, 3),
                (3, 4),
                (0, 5),
                (5, 6),
                (1, 7),
                (1, 8),
            ],
            vec![b[0], b[1], b[2], b[3], b[2], b[3], b[4], b[4]],
        ),
        Template::MultiObject => (
            6,
            vec![(0, 1), (1, 2), (3, 4), (4, 5), (0, 3)],
            vec![b[0], b[1], b[2], b[3], 2.0 * MULTI_PIVOT_HALF_SPAN],
        ),
    };
    SkeletonGraph::new(m, edges, lengths)
}

fn template_pose(spec: &SceneSpec, t: f64) -> Vec<Point3> {
    let b = spec.bones();
    match spec.template {
        Template::Pendulum => {
            let a1 = joint_angle(spec.amp(0), spec.freq(0), t);
            let a2 = joint_angle(spec.amp(1), spec.freq(1), t);
            double_pendulum([0.0; 3], a1, a2, b[0], b[1]).to_vec()
        }
        Template::MultiObject => {
            let mut out = Vec::with_capacity(6);
            for (side, pivot_x) in [(0usize, -MULTI_PIVOT_HALF_SPAN), (1, MULTI_PIVOT_HALF_SPAN)] {
                let a1 = joint_angle(spec.amp(2 * side), spec.freq(2 * side), t);
                let a2 = joint_angle(spec.amp(2 * side + 1), spec.freq(2 * side + 1), t);
                let l1 = b[2 * side];
                let l2 = b[2 * side + 1];
                out.extend(double_pendulum([pivot_x, 0.0, 0.0], a1, a2, l1, l2));
            }
            out
        }
        Template::Biped => {
            let (spine, head, thigh, shin, arm) = (b[0], b[1], b[2], b[3], b[4]);
            let f = spec.freq(0);
            let phase = 2.0 * PI * f * t;
            let (hip_amp, knee_amp, arm_amp, bob) =
                (spec.amp(0), spec.amp(1), spec.amp(2), spec.amp(3));
            let pelvis = [0.0, 1.0 + 0.1 * bob * (2.0 * phase).sin(), 0.0];
            let neck = [pelvis[0], pelvis[1] + spine, pelvis[2]];
            let head_pt = [neck[0], neck[1] + head, neck[2]];
            let mut pts = vec![pelvis, neck, head_pt];
            for (sign, offset) in [(1.0, 0.0), (-1.0, PI)] {
                let hip = hip_amp * (phase + offset).sin();
                let knee = hip - knee_amp * 0.5 * (1.0 - (phase + offset).cos());
                let knee_pt = limb(pelvis, hip, sign * 0.1, thigh);
                let foot = limb(knee_pt, knee, sign * 0.1, shin);
                pts.push(knee_pt);
                pts.push(foot);
            }
            for (sign, offset) in [(1.0, PI), (-1.0, 0.0)] {
                let swing = arm_amp * (phase + offset).sin();
                pts.push(limb(neck, swing, sign * 0.3, arm));
            }
            pts
        }
    }
}

/// Deterministic articulated scene from a spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let skeleton = template_skeleton(spec)?;
    let m = skeleton.num_keypoints();
    let frames: Vec<KeypointFrame> = (0..spec.num_frames())
        .map(|k| {
            let t = k as f64 / spec.frame_rate;
            let positions = template_pose(spec, t);
            let visibility = (0..m)
                .map(|i| {
                    !spec
                        .occlusion
                        .iter()
                        .any(|o| o.keypoint == i && o.start <= t && t < o.end)
                })
                .collect();
            KeypointFrame {
                time: t,
                positions,
                visibility,
            }
        })
        .collect();
    let ground_truth = KeypointTrack::new(skeleton, frames)?;
    let clean_targets = SignalTargets::from_track(&ground_truth, spec.samples_per_bone);

    let mut observed = ground_truth.clone();
    let mut targets = clean_targets;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| SceneError::Spec(format!("noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for f in &mut observed.frames {
            for p in f.positions.iter_mut().flatten() {
                *p += normal.sample(&mut rng);
            }
        }
        for p in targets.points.iter_mut().flatten().flatten() {
            *p += normal.sample(&mut rng);
        }
    }
    Ok(GeneratedScene {
        ground_truth,
        observed,
        targets,
    })
}

/// Affine map `x -> (x - center) * scale` that brings a track into roughly `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateNormalizer {
    pub center: Point3,
    pub scale: f64,
}

impl Default for CoordinateNormalizer {
    fn default() -> Self {
        CoordinateNormalizer {
            center: [0.0; 3],
            scale: 1.0,
        }
    }
}

impl CoordinateNormalizer {
    /// Centers the bounding box of all positions and maps its largest half-extent to 1.
    pub fn fit(track: &KeypointTrack) -> Self {
        Self::fit_to_extent(track, 1.0)
    }

    /// As [`fit`](Self::fit) but maps the largest half-extent to `extent`.
    pub fn fit_to_extent(track: &KeypointTrack, extent: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in track.frames().iter().flat_map(|f| &f.positions) {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            return Self::default();
        }
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let half = (0..3).map(|d| 0.5 * (hi[d] - lo[d])).fold(0.0, f64::max);
        let scale = if half > 1e-12 { extent / half } else { extent };
        CoordinateNormalizer { center, scale }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        [
            (p[0] - self.center[0]) * self.scale,
            (p[1] - self.center[1]) * self.scale,
            (p[2] - self.center[2]) * self.scale,
        ]
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        [
            p[0] / self.scale + self.center[0],
            p[1] / self.scale + self.center[1],
            p[2] / self.scale + self.center[2],
        ]
    }
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
