use std::collections::BTreeSet;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use sirenpose::autodiff::{finite_difference_check, Graph, Tensor, Var};
use sirenpose::cli::{gradcheck_fixture, GradcheckSpec};
use sirenpose::eval::{
    ate, horn_align, keypoint_metrics, rotation_angle_deg, rpe, HornOptions, PoseTrajectory,
    SimilarityTransform,
};
use sirenpose::fusion::{FusionConfig, FusionModel, OutputLayout, TimeEncoding};
use sirenpose::losses::{loss_geo, KeypointTargets, LossWeights};
use sirenpose::scene::{
    distance, generate_scene, CoordinateNormalizer, KeypointFrame, KeypointTrack, SceneSpec,
    SkeletonGraph,
};
use sirenpose::siren::{uniform_batch, SirenNetwork};
use sirenpose::trainer::{evaluate, Objective};

/// Builds a random composition of library ops over `x`, reduced to a scalar.
fn compose<'g>(g: &'g Graph, x: Var<'g>, ops: &[u8], seed: u64) -> Var<'g> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut y = x;
    for (k, op) in ops.iter().enumerate() {
        let s = seed.wrapping_add(k as u64);
        y = match op % 7 {
            0 => y.sin(),
            1 => y.square().scale(0.3),
            2 => y
                .mul(g.constant(uniform_batch(r, c, -1.0, 1.0, s)))
                .unwrap(),
            3 => y
                .add(g.constant(uniform_batch(r, c, -1.0, 1.0, s)))
                .unwrap(),
            4 => y
                .matmul(g.constant(uniform_batch(c, c, -0.6, 0.6, s)))
                .unwrap(),
            5 => y
                .add_row(g.constant(uniform_batch(1, c, -1.0, 1.0, s)))
                .unwrap(),
            _ => y.sub(y.sin().mul(x).unwrap()).unwrap(),
        };
    }
    if ops.len().is_multiple_of(2) {
        y.sum()
    } else {
        y.mean()
    }
}

fn graph_objective(shape: (usize, usize), ops: &[u8], seed: u64, p: &[f64]) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let x = g.param(Tensor::matrix(shape.0, shape.1, p.to_vec()).unwrap());
    let out = compose(&g, x, ops, seed);
    let grads = g.backward(out).unwrap();
    (out.item(), grads.wrt(x).into_values())
}

fn small_model(lambda: f64, seed: u64) -> FusionModel {
    let config = FusionConfig {
        hidden: vec![8, 8],
        lambda_blend: lambda,
        zero_high_head: false,
        ..FusionConfig::default()
    };
    let layout = OutputLayout {
        num_keypoints: 3,
        num_samples: 2,
    };
    let encoding = TimeEncoding {
        t_min: 0.0,
        t_max: 1.0,
        fourier_order: 0,
    };
    FusionModel::new(
        &config,
        layout,
        encoding,
        CoordinateNormalizer::default(),
        seed,
    )
    .unwrap()
}

fn pose_track(n: usize, seed: u64) -> PoseTrajectory {
    let v = uniform_batch(n, 6, -1.0, 1.0, seed);
    let rows: Vec<&[f64]> = v.values().chunks(6).collect();
    PoseTrajectory::new(
        (0..n).map(|i| i as f64).collect(),
        rows.iter()
            .map(|r| UnitQuaternion::from_euler_angles(r[0] * 3.0, r[1], r[2] * 3.0))
            .collect(),
        rows.iter()
            .map(|r| Vector3::new(r[3], r[4], r[5]) * 2.0)
            .collect(),
    )
    .unwrap()
}

fn rigid() -> impl Strategy<Value = SimilarityTransform> {
    (
        -3.0..3.0f64,
        -1.5..1.5f64,
        -3.0..3.0f64,
        prop::array::uniform3(-5.0..5.0f64),
    )
        .prop_map(|(a, b, c, t)| SimilarityTransform {
            rotation: UnitQuaternion::from_euler_angles(a, b, c),
            translation: Vector3::from(t),
            scale: 1.0,
        })
}

fn keypoint_track(frames: usize, m: usize, seed: u64) -> KeypointTrack {
    let v = uniform_batch(frames, 3 * m, -1.0, 1.0, seed);
    let skeleton = SkeletonGraph::new(
        m,
        (0..m - 1).map(|i| (i, i + 1)).collect(),
        vec![1.0; m - 1],
    )
    .unwrap();
    let frames = v
        .values()
        .chunks(3 * m)
        .enumerate()
        .map(|(i, row)| {
            KeypointFrame::new(
                i as f64,
                row.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            )
        })
        .collect();
    KeypointTrack::new(skeleton, frames).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_graphs_match_central_differences(
        r in 1usize..4, c in 1usize..4, ops in prop::collection::vec(0u8..7, 1..6), seed in any::<u64>()
    ) {
        let p = uniform_batch(r, c, -1.0, 1.0, seed).into_values();
        let report = finite_difference_check(|q| Ok(graph_objective((r, c), &ops, seed, q)), &p, 1e-6).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{:?}", report);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical(
        ops in prop::collection::vec(0u8..7, 1..6), seed in any::<u64>()
    ) {
        let p = uniform_batch(3, 2, -1.0, 1.0, seed).into_values();
        let g = Graph::new();
        let x = g.param(Tensor::matrix(3, 2, p).unwrap());
        let out = compose(&g, x, &ops, seed);
        let a = g.backward(out).unwrap().wrt(x).into_values();
        let b = g.backward(out).unwrap().wrt(x).into_values();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn gradient_is_linear_in_objectives(
        a in -3.0..3.0f64, b in -3.0..3.0f64, seed in any::<u64>()
    ) {
        let g = Graph::new();
        let x = g.param(uniform_batch(2, 3, -1.0, 1.0, seed));
        let f = compose(&g, x, &[0, 4, 1], seed);
        let h = compose(&g, x, &[2, 6, 5], seed ^ 1);
        let both = f.scale(a).add(h.scale(b)).unwrap();
        let (gf, gh, gb) = (g.backward(f).unwrap().wrt(x), g.backward(h).unwrap().wrt(x), g.backward(both).unwrap().wrt(x));
        for k in 0..6 {
            let expect = a * gf.values()[k] + b * gh.values()[k];
            prop_assert!((gb.values()[k] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn hidden_activations_are_bounded(seed in any::<u64>(), omega in 1.0..60.0f64) {
        let net = SirenNetwork::new(2, &[16, 16, 16], 3, omega, seed).unwrap();
        let (_, hidden) = net.forward_with_hidden(&uniform_batch(20, 2, -5.0, 5.0, seed)).unwrap();
        prop_assert!(hidden.iter().flat_map(|h| h.values()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn geo_loss_is_translation_invariant(
        shift in prop::array::uniform3(-20.0..20.0f64), seed in any::<u64>(), omega in 0.5..40.0f64
    ) {
        let (b, m) = (3, 4);
        let skel = SkeletonGraph::new(m, vec![(0, 1), (1, 2), (1, 3)], vec![1.0; 3]).unwrap();
        let gt = uniform_batch(b, 3 * m, -1.0, 1.0, seed);
        let targets = KeypointTargets {
            positions: gt,
            mask: Tensor::full(vec![b, m], 1.0),
        };
        let pred = uniform_batch(b, 3 * m, -1.0, 1.0, seed ^ 7);
        let moved = Tensor::matrix(b, 3 * m, pred.values().iter().enumerate().map(|(k, v)| v + shift[k % 3]).collect()).unwrap();
        let eval = |p: Tensor| {
            let g = Graph::new();
            loss_geo(g.constant(p), &targets, &skel, omega).unwrap().item()
        };
        let (l0, l1) = (eval(pred), eval(moved));
        prop_assert!(l0 >= 0.0);
        prop_assert!((l0 - l1).abs() <= 1e-12 * l0.max(1e-300) + 1e-13, "{} vs {}", l0, l1);
    }

    #[test]
    fn hidden_endpoint_removes_edge_from_geo(seed in any::<u64>(), hidden_kp in 0usize..3) {
        let (b, m, omega) = (2, 3, 30.0);
        let skel = SkeletonGraph::new(m, vec![(0, 1), (1, 2)], vec![1.0; 2]).unwrap();
        let mut mask = vec![1.0; b * m];
        mask[hidden_kp] = 0.0;
        let targets = KeypointTargets {
            positions: uniform_batch(b, 3 * m, -1.0, 1.0, seed),
            mask: Tensor::matrix(b, m, mask).unwrap(),
        };
        let base = uniform_batch(b, 3 * m, -1.0, 1.0, seed ^ 3);
        // moving the hidden keypoint in frame 0 changes nothing
        let mut v = base.values().to_vec();
        for d in 0..3 { v[3 * hidden_kp + d] += 0.37; }
        let g = Graph::new();
        let p = g.param(base);
        let l = loss_geo(p, &targets, &skel, omega).unwrap();
        let grad = g.backward(l).unwrap().wrt(p);
        let g2 = Graph::new();
        let l2 = loss_geo(g2.constant(Tensor::matrix(b, 3 * m, v).unwrap()), &targets, &skel, omega).unwrap();
        prop_assert_eq!(l.item(), l2.item());
        for d in 0..3 { prop_assert_eq!(grad.values()[3 * hidden_kp + d], 0.0); }
    }

    #[test]
    fn loss_breakdown_identities_hold(
        lambda_geo in 0.0..2.0f64, lambda_sp in 0.0..2.0f64, seed in 0u64..1000
    ) {
        let spec = GradcheckSpec { seed, ..GradcheckSpec::default() };
        let (model, batch, skel) = gradcheck_fixture(&spec).unwrap();
        let w = LossWeights { lambda_geo, lambda_sp, omega0_loss: 30.0 };
        let (l, _) = evaluate(&model, &batch, &skel, &w, false, Objective::Composite).unwrap();
        for v in [l.l_pos, l.l_geo, l.l_sirenpose, l.l_recon, l.l_total] { prop_assert!(v >= 0.0); }
        let sp = l.l_pos + lambda_geo * l.l_geo;
        prop_assert!((l.l_sirenpose - sp).abs() <= 1e-12 * sp.max(1e-300));
        let tot = l.l_recon + lambda_sp * l.l_sirenpose;
        prop_assert!((l.l_total - tot).abs() <= 1e-12 * tot.max(1e-300));
    }

    #[test]
    fn fused_output_is_low_plus_scaled_high(lambda in -2.0..2.0f64, seed in any::<u64>()) {
        let model = small_model(lambda, seed);
        let t = Tensor::matrix(4, 1, vec![0.0, 0.3, 0.71, 1.0]).unwrap();
        let (low, high) = model.decompose(&t).unwrap();
        let fused = model.forward(&t).unwrap();
        for k in 0..fused.numel() {
            prop_assert_eq!(fused.values()[k], low.values()[k] + lambda * high.values()[k]);
        }
    }

    #[test]
    fn high_stream_gradient_scales_with_blend(lambda in 0.1..2.0f64, seed in 0u64..1000) {
        let grads = |lam: f64| {
            let model = small_model(lam, seed);
            let g = Graph::new();
            let bound = model.bind(&g, false);
            let out = bound.forward(&g, &[0.1, 0.5, 0.9]).unwrap();
            let loss = out.keypoints.sum().add(out.samples.sum()).unwrap();
            let grads = g.backward(loss).unwrap();
            let n_low = model.low_stream().num_parameters();
            bound.parameters().into_iter().flat_map(|p| grads.wrt(p).into_values()).skip(n_low).collect::<Vec<f64>>()
        };
        let (unit, scaled, zero) = (grads(1.0), grads(lambda), grads(0.0));
        prop_assert!(zero.iter().all(|v| *v == 0.0));
        for (u, s) in unit.iter().zip(&scaled) {
            prop_assert!((s - lambda * u).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn scene_bones_are_rigid_and_generation_deterministic(
        f1 in 0.0..6.0f64, f2 in 0.0..6.0f64, a1 in 0.0..1.5f64, a2 in 0.0..1.5f64, seed in any::<u64>()
    ) {
        let mut spec = SceneSpec::pendulum(vec![f1, f2], vec![a1, a2], seed);
        spec.duration = 0.5;
        let scene = generate_scene(&spec).unwrap();
        let track = &scene.ground_truth;
        let skel = track.skeleton();
        for frame in track.frames() {
            for (e, &(i, j)) in skel.edges().iter().enumerate() {
                let d = distance(frame.positions[i], frame.positions[j]);
                prop_assert!((d - skel.rest_lengths()[e]).abs() < 1e-9);
            }
        }
        prop_assert_eq!(generate_scene(&spec).unwrap().observed.to_jsonl(), scene.observed.to_jsonl());
    }

    #[test]
    fn removing_no_keypoints_is_identity(seed in any::<u64>()) {
        let track = keypoint_track(4, 3, seed);
        prop_assert_eq!(track.corrupt_keypoints(&BTreeSet::new()).unwrap(), track);
    }

    #[test]
    fn horn_absorbs_rigid_pretransform(t in rigid(), seed in any::<u64>()) {
        let gt = pose_track(12, seed);
        let est = pose_track(12, seed ^ 5);
        let opts = HornOptions::default();
        let base = ate(&horn_align(&est, &gt, &opts).unwrap().aligned, &gt).unwrap();
        let moved = ate(&horn_align(&est.transformed(&t), &gt, &opts).unwrap().aligned, &gt).unwrap();
        prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
    }

    #[test]
    fn rpe_ignores_global_rigid_motion(t in rigid(), seed in any::<u64>(), delta in 1usize..4) {
        let gt = pose_track(10, seed);
        let est = pose_track(10, seed ^ 9);
        let base = rpe(&est, &gt, delta).unwrap();
        for (e, g) in [(est.transformed(&t), gt.clone()), (est.clone(), gt.transformed(&t))] {
            let r = rpe(&e, &g, delta).unwrap();
            prop_assert!((r.trans_rmse - base.trans_rmse).abs() < 1e-9);
            prop_assert!((r.rot_rmse_deg - base.rot_rmse_deg).abs() < 1e-7);
        }
    }

    #[test]
    fn metrics_scale_with_tracks(s in 0.1..10.0f64, seed in any::<u64>()) {
        let gt = keypoint_track(6, 4, seed);
        let pred = keypoint_track(6, 4, seed ^ 2);
        let scaled = |t: &KeypointTrack| scale_track(t, s);
        let m1 = keypoint_metrics(&pred, &gt).unwrap();
        let ms = keypoint_metrics(&scaled(&pred), &scaled(&gt)).unwrap();
        prop_assert!((ms.mse - s * s * m1.mse).abs() <= 1e-9 * ms.mse);
        prop_assert!((ms.epe - s * m1.epe).abs() <= 1e-9 * ms.epe);
        let same = keypoint_metrics(&scaled(&gt), &scaled(&gt)).unwrap();
        prop_assert_eq!(same.geometric_accuracy, 1.0);
    }

    #[test]
    fn rotation_angle_in_range(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
        let angle = rotation_angle_deg(&UnitQuaternion::from_euler_angles(a, b, c));
        prop_assert!((0.0..=180.0).contains(&angle));
        prop_assert_eq!(rotation_angle_deg(&UnitQuaternion::identity()), 0.0);
    }
}

fn scale_track(src: &KeypointTrack, s: f64) -> KeypointTrack {
    let frames = src
        .frames()
        .iter()
        .map(|f| {
            let mut g = f.clone();
            g.positions
                .iter_mut()
                .for_each(|p| p.iter_mut().for_each(|c| *c *= s));
            g
        })
        .collect();
    KeypointTrack::new(src.skeleton().clone(), frames).unwrap()
}
