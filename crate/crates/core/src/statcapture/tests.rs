use super::*;
use crate::modelzoo::{
    build_oracle_vlm, build_toy_suite, encode_image, train, ToyConfig, ToySuiteParts,
};
use dataset::{blob_dataset, BlobConfig};

fn random_image(seed: u64) -> ImageTensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(
        (3, 32, 32),
        (0..3 * 32 * 32)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs()))
}

fn all_layers() -> Vec<usize> {
    (0..=5).collect()
}

#[test]
fn duplicated_images_leave_statistics_unchanged() {
    let suite = build_toy_suite(0).unwrap();
    let img = random_image(1);
    for mode in [
        AveragingMode::AverageThenStats,
        AveragingMode::StatsThenAverage,
    ] {
        let one = capture_encoder_stats(
            suite.encoder.as_ref(),
            std::slice::from_ref(&img),
            &all_layers(),
            mode,
        )
        .unwrap();
        let many = capture_encoder_stats(
            suite.encoder.as_ref(),
            &vec![img.clone(); 5],
            &all_layers(),
            mode,
        )
        .unwrap();
        for (a, b) in one.layers.iter().zip(&many.layers) {
            assert!(close(&a.mean, &b.mean, 1e-12));
            assert!(close(&a.spread, &b.spread, 1e-12));
        }
        assert_eq!(many.provenance.image_count, 5);
    }
}

#[test]
fn two_images_average_elementwise() {
    let suite = build_toy_suite(0).unwrap();
    let (a, b) = (random_image(2), random_image(3));
    let stats = capture_encoder_stats(
        suite.encoder.as_ref(),
        &[a.clone(), b.clone()],
        &[2],
        AveragingMode::AverageThenStats,
    )
    .unwrap();
    let (_, za) = encode_image(suite.encoder.as_ref(), &a).unwrap();
    let (_, zb) = encode_image(suite.encoder.as_ref(), &b).unwrap();
    let za = ops::flat(&za[&2]).unwrap();
    let zb = ops::flat(&zb[&2]).unwrap();
    let (d, w) = (64, 64);
    let avg: Vec<f64> = za.iter().zip(&zb).map(|(x, y)| (x + y) / 2.0).collect();
    let mut mean = vec![0.0; w];
    let mut std = vec![0.0; w];
    for c in 0..w {
        let col: Vec<f64> = (0..d).map(|r| avg[r * w + c]).collect();
        mean[c] = col.iter().sum::<f64>() / d as f64;
        std[c] = (col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / d as f64).sqrt();
    }
    assert_eq!(stats.layer_ids(), vec![2]);
    assert!(close(&stats.layers[0].mean, &mean, 1e-12));
    assert!(close(&stats.layers[0].spread, &std, 1e-12));
}

#[test]
fn permutation_invariant() {
    let suite = build_toy_suite(0).unwrap();
    let imgs: Vec<ImageTensor> = (0..4).map(|i| random_image(10 + i)).collect();
    let rev: Vec<ImageTensor> = imgs.iter().rev().cloned().collect();
    let a = capture_encoder_stats(
        suite.encoder.as_ref(),
        &imgs,
        &all_layers(),
        AveragingMode::AverageThenStats,
    )
    .unwrap();
    let b = capture_encoder_stats(
        suite.encoder.as_ref(),
        &rev,
        &all_layers(),
        AveragingMode::AverageThenStats,
    )
    .unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert!(close(&x.mean, &y.mean, 1e-12));
        assert!(close(&x.spread, &y.spread, 1e-12));
    }
}

#[test]
fn capture_errors() {
    let suite = build_toy_suite(0).unwrap();
    assert!(capture_encoder_stats(
        suite.encoder.as_ref(),
        &[],
        &[0],
        AveragingMode::AverageThenStats
    )
    .is_err());
    assert!(capture_encoder_stats(
        suite.encoder.as_ref(),
        &[random_image(1)],
        &[],
        AveragingMode::AverageThenStats
    )
    .is_err());
    assert!(matches!(
        capture_encoder_stats(
            suite.encoder.as_ref(),
            &[random_image(1)],
            &[17],
            AveragingMode::AverageThenStats
        ),
        Err(Error::LayerMismatch { .. })
    ));
    let small = ImageTensor::filled((3, 16, 16), 0.0).unwrap();
    assert!(capture_encoder_stats(
        suite.encoder.as_ref(),
        &[random_image(1), small],
        &[0],
        AveragingMode::AverageThenStats
    )
    .is_err());
}

#[test]
fn fresh_verifier_bn_stats_are_identity() {
    let suite = build_toy_suite(0).unwrap();
    let bn = extract_bn_stats(suite.verifier().unwrap()).unwrap();
    assert_eq!(bn.channel_counts(), vec![8, 16, 32]);
    for l in &bn.layers {
        assert!(l.mean.iter().all(|&m| m == 0.0));
        assert!(l.spread.iter().all(|&v| v == 1.0));
    }
    assert_eq!(bn, extract_bn_stats(suite.verifier().unwrap()).unwrap());
    assert!(
        extract_bn_stats(suite.verifier().unwrap())
            .unwrap()
            .model_hash
            .len()
            == 64
    );
}

#[test]
fn training_updates_running_statistics_by_momentum() {
    let cfg = ToyConfig::default();
    let mut parts = ToySuiteParts::new(&cfg, 0).unwrap();
    let data = blob_dataset(&BlobConfig {
        per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let opts = train::TrainOptions {
        max_epochs: 1,
        batch_size: 6,
        ..Default::default()
    };
    // one step on a single batch: running = 0.9·init + 0.1·batch stats (of the
    // pre-update weights)
    let images: Vec<ImageTensor> = data.iter().map(|d| d.0.clone()).collect();
    let batch = ImageTensor::stack(&images).unwrap();
    let before = parts
        .verifier
        .forward_mode(&batch, crate::modelzoo::BnMode::Train)
        .unwrap();
    let expected: Vec<(Vec<f64>, Vec<f64>)> = before
        .bn_stats
        .iter()
        .map(|s| {
            let m = ops::flat(&s.mean)
                .unwrap()
                .iter()
                .map(|v| 0.1 * v)
                .collect();
            let v = ops::flat(&s.var)
                .unwrap()
                .iter()
                .map(|v| 0.9 + 0.1 * v)
                .collect();
            (m, v)
        })
        .collect();
    train::train_verifier(&mut parts.verifier, &data, &opts).unwrap();
    let after = extract_bn_stats(&parts.verifier).unwrap();
    for (l, (m, v)) in after.layers.iter().zip(&expected) {
        // stored at f32 precision after freezing
        assert!(close(&l.mean, m, 1e-6));
        assert!(close(&l.spread, v, 1e-6));
    }
    let fresh = extract_bn_stats(&ToySuiteParts::new(&cfg, 0).unwrap().verifier).unwrap();
    assert_ne!(after.layers, fresh.layers);
}

#[test]
fn stats_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let suite = build_toy_suite(0).unwrap();
    let enc = capture_encoder_stats(
        suite.encoder.as_ref(),
        &[random_image(4), random_image(5)],
        &[0, 3, 5],
        AveragingMode::StatsThenAverage,
    )
    .unwrap();
    let path = dir.path().join("enc.json");
    save_stats(&StatsDocument::from(&enc), &path).unwrap();
    let back =
        load_encoder_stats(&path, Some(&[0, 3, 5]), Some(&enc.provenance.model_hash)).unwrap();
    assert_eq!(back, enc);
    assert!(matches!(
        load_encoder_stats(&path, Some(&[0, 1]), None),
        Err(Error::LayerMismatch { .. })
    ));
    // a different model only warns
    assert!(load_encoder_stats(&path, None, Some("0000")).is_ok());
    assert!(load_bn_stats(&path, None).is_err());

    let bn = extract_bn_stats(suite.verifier().unwrap()).unwrap();
    let bpath = dir.path().join("bn.json");
    save_stats(&StatsDocument::from(&bn), &bpath).unwrap();
    assert_eq!(load_bn_stats(&bpath, None).unwrap(), bn);
}

#[test]
fn hand_written_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hand.json");
    std::fs::write(
        &path,
        r#"{"kind": "encoder", "model_hash": "ab", "lambda": [4], "image_count": 2,
            "mode": "average-then-stats",
            "layers": [{"id": 4, "mean": [0.5, -1], "std_or_var": [1.0, 0.25]}]}"#,
    )
    .unwrap();
    let s = load_encoder_stats(&path, Some(&[4]), None).unwrap();
    assert_eq!(s.layers[0].mean, vec![0.5, -1.0]);
    assert_eq!(s.layers[0].spread, vec![1.0, 0.25]);
    assert_eq!(s.provenance.image_count, 2);
}

#[test]
fn malformed_files_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let cases = [
        (
            r#"{"kind": "encoder", "model_hash": "ab", "lambda": [4], "image_count": 2, "mode": "average-then-stats", "layers": [{"id": 4, "mean": [0.5], "std_or_var": ["x"]}]}"#,
            "std_or_var",
        ),
        (
            r#"{"kind": "encoder", "model_hash": "ab", "lambda": [1], "image_count": 2, "mode": "average-then-stats", "layers": [{"id": 4, "mean": [0.5], "std_or_var": [1]}]}"#,
            "lambda",
        ),
        (
            r#"{"kind": "encoder", "model_hash": "ab", "lambda": [4], "image_count": 2, "mode": "average-then-stats", "layers": [{"id": 4, "mean": [0.5], "std_or_var": [-1]}]}"#,
            "std_or_var",
        ),
        (
            r#"{"kind": "weird", "model_hash": "ab", "lambda": [], "image_count": 2, "mode": "x", "layers": []}"#,
            "kind",
        ),
    ];
    for (text, field) in cases {
        std::fs::write(&path, text).unwrap();
        match read_stats(&path) {
            Err(Error::StatsFile(msg)) => assert!(msg.contains(field), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn oracle_encoder_stats_are_patch_colour_moments() {
    let suite = build_oracle_vlm().unwrap();
    let img =
        ImageTensor::from_fn((3, 32, 32), |c, _, x| if x < 16 { c as f64 } else { 0.0 }).unwrap();
    let s = capture_encoder_stats(
        suite.encoder.as_ref(),
        &[img],
        &[0],
        AveragingMode::AverageThenStats,
    )
    .unwrap();
    assert!(close(&s.layers[0].mean, &[0.0, 0.5, 1.0], 1e-12));
    assert!(close(&s.layers[0].spread, &[0.0, 0.5, 1.0], 1e-12));
}
