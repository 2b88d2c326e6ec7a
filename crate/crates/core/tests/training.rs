use sirenpose::autodiff::Tensor;
use sirenpose::cli::{gradcheck_fixture, GradcheckSpec};
use sirenpose::fusion::{FusionConfig, FusionModel};
use sirenpose::losses::LossWeights;
use sirenpose::scene::{generate_scene, GeneratedScene, SceneSpec};
use sirenpose::trainer::{evaluate, train, Objective, TrainConfig, TrainError};

fn small_scene() -> GeneratedScene {
    let mut spec = SceneSpec::pendulum(vec![1.5, 0.75], vec![0.4, 0.2], 11);
    spec.duration = 1.0;
    generate_scene(&spec).unwrap()
}

fn small_model(scene: &GeneratedScene) -> FusionModel {
    let cfg = FusionConfig {
        hidden: vec![12, 12],
        ..FusionConfig::default()
    };
    FusionModel::for_track(&cfg, &scene.observed, scene.targets.num_samples(), 5).unwrap()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        checkpoint_every: 0,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn single_step_moves_parameters() {
    let scene = small_scene();
    let model = small_model(&scene);
    let (trained, report) =
        train(&model, &scene.observed, &scene.targets, &config(1), None).unwrap();
    assert_eq!(report.history.len(), 1);
    let (a, b) = (model.flat_parameters(), trained.flat_parameters());
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    // Adam's first step has magnitude lr wherever the gradient is nonzero
    let max = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max <= 1e-3 * (1.0 + 1e-9), "{max}");
}

#[test]
fn zero_keypoint_weights_match_recon_only() {
    let scene = small_scene();
    let model = small_model(&scene);
    let mut composite = config(15);
    composite.weights.lambda_sp = 0.0;
    composite.weights.lambda_geo = 0.0;
    let recon = TrainConfig {
        objective: Objective::ReconOnly,
        ..config(15)
    };
    let (ma, ra) = train(&model, &scene.observed, &scene.targets, &composite, None).unwrap();
    let (mb, rb) = train(&model, &scene.observed, &scene.targets, &recon, None).unwrap();
    for (x, y) in ra.history.iter().zip(&rb.history) {
        assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        assert_eq!(x.l_recon.to_bits(), y.l_recon.to_bits());
    }
    assert_eq!(ma.flat_parameters(), mb.flat_parameters());
}

#[test]
fn invisible_keypoints_contribute_no_gradient() {
    let (model, batch, skeleton) = gradcheck_fixture(&GradcheckSpec::default()).unwrap();
    let mask = Tensor::zeros(batch.keypoints.mask.shape().to_vec());
    let mut hidden = batch.clone();
    hidden.keypoints = batch.keypoints.with_mask(mask).unwrap();
    let weights = LossWeights::default();
    let (loss, grads) = evaluate(
        &model,
        &hidden,
        &skeleton,
        &weights,
        false,
        Objective::Composite,
    )
    .unwrap();
    let (_, recon) = evaluate(
        &model,
        &hidden,
        &skeleton,
        &weights,
        false,
        Objective::ReconOnly,
    )
    .unwrap();
    assert_eq!(loss.l_pos, 0.0);
    assert_eq!(loss.l_geo, 0.0);
    for (g, r) in grads.iter().zip(&recon) {
        assert!((g - r).abs() <= 1e-15 * r.abs().max(1.0));
    }
}

#[test]
fn training_is_reproducible() {
    let scene = small_scene();
    let model = small_model(&scene);
    let cfg = TrainConfig {
        seed: 3,
        ..config(25)
    };
    let (ma, ra) = train(&model, &scene.observed, &scene.targets, &cfg, None).unwrap();
    let (mb, rb) = train(&model, &scene.observed, &scene.targets, &cfg, None).unwrap();
    assert_eq!(ra.param_checksum, rb.param_checksum);
    assert_eq!(ra.to_csv(), rb.to_csv());
    assert_eq!(ma.to_json().unwrap(), mb.to_json().unwrap());
    let other = TrainConfig { seed: 4, ..cfg };
    let (_, rc) = train(&model, &scene.observed, &scene.targets, &other, None).unwrap();
    assert_ne!(ra.param_checksum, rc.param_checksum);
}

#[test]
fn loss_decreases_on_small_scene() {
    let scene = small_scene();
    let model = small_model(&scene);
    let (_, report) = train(&model, &scene.observed, &scene.targets, &config(300), None).unwrap();
    let first = report.history[0].l_total;
    let last = report.final_breakdown().l_total;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn frozen_high_stream_is_untouched() {
    let scene = small_scene();
    let mut model = small_model(&scene);
    model.zero_high_stream();
    let cfg = TrainConfig {
        freeze_high_stream: true,
        ..config(10)
    };
    let (trained, _) = train(&model, &scene.observed, &scene.targets, &cfg, None).unwrap();
    assert_eq!(trained.high_stream(), model.high_stream());
    assert_ne!(trained.low_stream(), model.low_stream());
}

#[test]
fn checkpoints_are_written() {
    let scene = small_scene();
    let model = small_model(&scene);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..config(8)
    };
    let (trained, _) = train(
        &model,
        &scene.observed,
        &scene.targets,
        &cfg,
        Some(dir.path()),
    )
    .unwrap();
    let text = std::fs::read_to_string(dir.path().join("checkpoint.json")).unwrap();
    let restored = FusionModel::from_json(&text).unwrap();
    assert_eq!(restored.flat_parameters(), trained.flat_parameters());
}

#[test]
fn invalid_config_is_rejected() {
    let scene = small_scene();
    let model = small_model(&scene);
    let cfg = TrainConfig {
        learning_rate: -1.0,
        ..config(1)
    };
    let err = train(&model, &scene.observed, &scene.targets, &cfg, None).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn divergence_is_reported_as_non_finite() {
    let scene = small_scene();
    let model = small_model(&scene);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config(50)
    };
    match train(&model, &scene.observed, &scene.targets, &cfg, None) {
        Err(TrainError::NonFinite { .. }) => {}
        other => panic!(
            "expected non-finite failure, got {:?}",
            other.map(|r| r.1.final_breakdown())
        ),
    }
}
