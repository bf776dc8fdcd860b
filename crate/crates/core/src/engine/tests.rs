use super::*;
use crate::modelzoo::{build_oracle_vlm, build_toy_suite_with, ToyConfig, BLUE, GREEN, RED};
use crate::objective::TargetSpec;

const PROMPT: &str = "what is the color : [target] ?";

fn oracle_config(iterations: usize) -> InversionConfig {
    let mut cfg = InversionConfig::vlm(
        PromptSpec::new(PROMPT, "red", None),
        TargetSpec::vlm(vec![RED]),
    );
    cfg.iterations = iterations;
    cfg
}

#[test]
fn init_image_is_seeded_standard_normal() {
    let a = init_image(3, (3, 336, 336)).unwrap();
    assert_eq!(a, init_image(3, (3, 336, 336)).unwrap());
    assert_ne!(a, init_image(4, (3, 336, 336)).unwrap());
    let n = a.data().len() as f64;
    let mean = a.data().iter().sum::<f64>() / n;
    let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 0.02, "{mean}");
    assert!((0.98..=1.02).contains(&std), "{std}");
    let batch = init_batch(3, 2, (3, 4, 4)).unwrap();
    assert_eq!(batch[0], init_image(3, (3, 4, 4)).unwrap());
    assert_ne!(batch[0], batch[1]);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 0.1, 0.01), 0.1);
    assert!((cosine_lr(100, 100, 0.1, 0.01) - 0.01).abs() < 1e-15);
    assert!((cosine_lr(50, 100, 0.1, 0.01) - 0.055).abs() < 1e-15);
}

fn state(n: usize) -> RunState {
    RunState::new(&[ImageTensor::filled((1, 1, n), 0.5).unwrap()]).unwrap()
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut s = state(3);
    adam_step(&mut s, &[0.0; 3], 0.1, &AdamParams::default()).unwrap();
    assert_eq!(s.image, vec![0.5; 3]);
    assert_eq!(s.step, 1);
}

#[test]
fn adam_first_step_hand_unrolled() {
    let mut s = state(1);
    let p = AdamParams::default();
    adam_step(&mut s, &[1.0], 0.1, &p).unwrap();
    assert!((s.image[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adam_matches_reference_recurrence() {
    let p = AdamParams {
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-6,
    };
    let grads = [[0.3, -2.0], [0.7, 1.5], [-0.1, 0.0]];
    let mut s = RunState::new(&[ImageTensor::new((1, 1, 2), vec![1.0, -1.0]).unwrap()]).unwrap();
    let (mut x, mut m, mut v) = ([1.0f64, -1.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut s, g, 0.01, &p).unwrap();
        for i in 0..2 {
            m[i] = 0.8 * m[i] + 0.2 * g[i];
            v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.8f64.powi(t as i32 + 1));
            let vh = v[i] / (1.0 - 0.95f64.powi(t as i32 + 1));
            x[i] -= 0.01 * mh / (vh.sqrt() + 1e-6);
        }
    }
    for i in 0..2 {
        assert!((s.image[i] - x[i]).abs() < 1e-12);
    }
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut s = state(2);
    assert!(matches!(
        adam_step(&mut s, &[f64::NAN, 0.0], 0.1, &AdamParams::default()),
        Err(Error::NonFinite(_))
    ));
    assert!(adam_step(&mut s, &[0.0], 0.1, &AdamParams::default()).is_err());
}

#[test]
fn config_validation() {
    let cfg = oracle_config(10);
    assert!(cfg.validate().is_ok());
    assert!(InversionConfig {
        iterations: 0,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(InversionConfig {
        lr: 0.0,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(InversionConfig {
        seeds: vec![],
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(InversionConfig {
        batch_size: 2,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(InversionConfig {
        prompt: None,
        ..cfg
    }
    .validate()
    .is_err());
    // 24 runs per concept, one image each
    let mut grid = InversionConfig::vit(TargetSpec::vit(0));
    grid.seeds = (0..24).collect();
    grid.batch_size = 5;
    assert!(grid.validate().is_ok());
}

#[test]
fn single_iteration_run() {
    let suite = build_oracle_vlm().unwrap();
    let r = run_inversion(&oracle_config(1), 0, &suite, ReferenceStats::default()).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].step, 0);
    assert_ne!(r.final_images[0], init_image(0, (3, 32, 32)).unwrap());
}

#[test]
fn trace_length_follows_log_cadence() {
    let suite = build_oracle_vlm().unwrap();
    let cfg = InversionConfig {
        log_every: 3,
        checkpoint_every: 4,
        ..oracle_config(10)
    };
    let r = run_inversion(&cfg, 0, &suite, ReferenceStats::default()).unwrap();
    assert_eq!(
        r.trace.iter().map(|t| t.step).collect::<Vec<_>>(),
        vec![0, 3, 6, 9]
    );
    assert_eq!(
        r.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
        vec![4, 8]
    );
}

#[test]
fn oracle_inversion_turns_image_red() {
    let suite = build_oracle_vlm().unwrap();
    let cfg = oracle_config(200);
    let r = run_inversion(&cfg, 1, &suite, ReferenceStats::default()).unwrap();
    let img = &r.final_images[0];
    let score = img.channel_mean(0) - 0.5 * (img.channel_mean(1) + img.channel_mean(2));
    assert!(score > 0.2, "{score}");
    assert!(r.trace.last().unwrap().breakdown.total < r.trace[0].breakdown.total);
    let _ = (GREEN, BLUE);
}

#[test]
fn runs_are_deterministic_and_weights_stay_frozen() {
    let suite = build_oracle_vlm().unwrap();
    let cfg = oracle_config(20);
    let a = run_inversion(&cfg, 2, &suite, ReferenceStats::default()).unwrap();
    let b = run_inversion(&cfg, 2, &suite, ReferenceStats::default()).unwrap();
    assert_eq!(a.final_images, b.final_images);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.weights_checksum, suite.weights_checksum());
}

#[test]
fn quadratic_prior_descends_every_iteration() {
    let suite = build_toy_suite_with(&ToyConfig::default().with_image_size(16), 0).unwrap();
    let mut cfg = InversionConfig::vit(TargetSpec::vit(0));
    cfg.weights = ObjectiveWeights {
        alpha3: 1.0,
        ..Default::default()
    };
    cfg.iterations = 30;
    cfg.batch_size = 2;
    cfg.schedule = Schedule::Constant;
    for lr in [0.01, 0.05, 0.1] {
        cfg.lr = lr;
        let r = run_inversion(&cfg, 0, &suite, ReferenceStats::default()).unwrap();
        for w in r.trace.windows(2) {
            assert!(
                w[1].breakdown.total < w[0].breakdown.total,
                "lr {lr} step {}",
                w[1].step
            );
        }
    }
}

#[test]
fn multi_seed_matches_serial_runs_for_any_worker_count() {
    let suite = build_oracle_vlm().unwrap();
    let mut cfg = oracle_config(5);
    cfg.seeds = vec![5, 1, 3];
    let serial: Vec<RunResult> = cfg
        .seeds
        .iter()
        .map(|&s| run_inversion(&cfg, s, &suite, ReferenceStats::default()).unwrap())
        .collect();
    for workers in [1, 3] {
        let par = run_multi_seed(&cfg, &suite, ReferenceStats::default(), workers).unwrap();
        assert_eq!(
            par.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![5, 1, 3]
        );
        for (a, b) in par.iter().zip(&serial) {
            assert_eq!(a.final_images, b.final_images);
            assert_eq!(a.trace, b.trace);
        }
    }
}

#[test]
fn exploding_loss_aborts_with_last_finite_image() {
    let suite = build_toy_suite_with(&ToyConfig::default().with_image_size(16), 0).unwrap();
    let mut cfg = InversionConfig::vit(TargetSpec::vit(0));
    cfg.weights = ObjectiveWeights {
        alpha3: 1e308,
        ..Default::default()
    };
    cfg.iterations = 5;
    cfg.batch_size = 1;
    match run_inversion(&cfg, 0, &suite, ReferenceStats::default()) {
        Err(Error::Aborted { step, partial, .. }) => {
            assert_eq!(step, 0);
            assert!(partial.final_images[0].data().iter().all(|v| v.is_finite()));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn run_dir_layout() {
    let dir = tempfile::tempdir().unwrap();
    let suite = build_oracle_vlm().unwrap();
    let cfg = InversionConfig {
        checkpoint_every: 2,
        ..oracle_config(4)
    };
    let r = run_inversion(&cfg, 0, &suite, ReferenceStats::default()).unwrap();
    let manifest = RunManifest::new(&r, &suite.arch().hash()).unwrap();
    write_run_dir(&r, &manifest, dir.path()).unwrap();
    for f in [
        "manifest.json",
        "trace.csv",
        "final.png",
        "final.f32",
        "images/step_000002.png",
        "images/step_000004.png",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let trace =
        parse_trace_csv(&std::fs::read_to_string(dir.path().join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace, r.trace);
    let back: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(back, manifest);
    let imgs = read_f32_images(dir.path().join("final.f32"), (3, 32, 32)).unwrap();
    let max_diff = imgs[0]
        .data()
        .iter()
        .zip(r.final_images[0].data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-5);
}
