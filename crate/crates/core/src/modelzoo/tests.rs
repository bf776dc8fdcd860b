use candle_core::Tensor;

use super::*;
use crate::gradcheck::{check_gradient, GradCheckOptions};
use crate::ops::{self, device};

fn random_image(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2;
    ImageTensor::new(
        shape,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

fn small_suite() -> ModelSuite {
    build_toy_suite_with(&ToyConfig::default().with_image_size(16), 7).unwrap()
}

/// Fixed random projection that turns any tensor into a scalar.
fn probe(t: &Tensor, seed: u64) -> Tensor {
    let w = random_image((1, 1, t.elem_count()), seed)
        .to_tensor()
        .unwrap();
    (t.flatten_all().unwrap() * w.flatten_all().unwrap())
        .unwrap()
        .sum_all()
        .unwrap()
}

fn assert_grad_ok<F: Fn(&Tensor) -> crate::Result<Tensor>>(f: F, x: &Tensor) {
    let opts = GradCheckOptions {
        samples: 40,
        ..Default::default()
    };
    let r = check_gradient(f, x, &opts).unwrap();
    assert!(r.pass_fraction() >= 0.99, "{r:?}");
}

#[test]
fn toy_suite_is_deterministic_per_seed() {
    let a = build_toy_suite(0).unwrap();
    let b = build_toy_suite(0).unwrap();
    let c = build_toy_suite(1).unwrap();
    assert_eq!(a.weights_checksum(), b.weights_checksum());
    assert_ne!(a.weights_checksum(), c.weights_checksum());
}

#[test]
fn zero_image_activation_shapes() {
    let suite = build_toy_suite(0).unwrap();
    let img = ImageTensor::filled((3, 32, 32), 0.0).unwrap();
    let (tokens, acts) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    assert_eq!(tokens.dims(), &[64, 64]);
    assert_eq!(
        acts.keys().copied().collect::<Vec<_>>(),
        (0..=5).collect::<Vec<_>>()
    );
    for a in acts.values() {
        assert_eq!(a.dims(), &[1, 64, 64]);
    }
}

#[test]
fn encode_is_repeatable_and_checks_shape() {
    let suite = build_toy_suite(0).unwrap();
    let img = random_image((3, 32, 32), 1);
    let (t1, _) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    let (t2, _) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    assert_eq!(ops::flat(&t1).unwrap(), ops::flat(&t2).unwrap());
    let wrong = ImageTensor::filled((3, 16, 16), 0.0).unwrap();
    match encode_image(suite.encoder.as_ref(), &wrong) {
        Err(Error::Shape { expected, received }) => {
            assert_eq!(expected, "3x32x32");
            assert_eq!(received, "3x16x16");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let suite = small_suite();
    let x = random_image((3, 16, 16), 2)
        .to_tensor()
        .unwrap()
        .unsqueeze(0)
        .unwrap();
    let enc = suite.encoder.clone();
    assert_grad_ok(
        |t| {
            let out = enc.forward(t)?;
            let mut total = probe(&out.tokens, 10);
            for (id, a) in &out.activations {
                total = (total + probe(a, 11 + *id as u64))?;
            }
            Ok(total)
        },
        &x,
    );
}

#[test]
fn classifier_and_verifier_gradients_match_finite_differences() {
    let suite = small_suite();
    let x = Tensor::cat(
        &[
            random_image((3, 16, 16), 3)
                .to_tensor()
                .unwrap()
                .unsqueeze(0)
                .unwrap(),
            random_image((3, 16, 16), 4)
                .to_tensor()
                .unwrap()
                .unsqueeze(0)
                .unwrap(),
        ],
        0,
    )
    .unwrap();
    let clf = suite.classifier.clone().unwrap();
    assert_grad_ok(|t| Ok(probe(&clf.forward(t)?.logits, 20)), &x);
    let ver = suite.verifier.clone().unwrap();
    assert_grad_ok(
        |t| {
            let out = ver.forward(t)?;
            let mut total = probe(&out.logits, 21);
            for (k, s) in out.bn_stats.iter().enumerate() {
                total = (total + probe(&s.mean, 30 + k as u64))?;
                total = (total + probe(&s.var, 40 + k as u64))?;
            }
            Ok(total)
        },
        &x,
    );
}

#[test]
fn lm_gradients_reach_image_tokens() {
    let suite = small_suite();
    let prompt = PromptSpec::new(
        "what is shown in the picture : a. [target] concept ?",
        "red",
        None,
    );
    let text = embed_text(&suite, &prompt).unwrap();
    let tokens = random_image((1, 16, 64), 5)
        .to_tensor()
        .unwrap()
        .squeeze(0)
        .unwrap();
    let lm = suite.lm.clone();
    assert_grad_ok(
        |img| {
            let seq = MultimodalSequence::new(&text.embeddings, img)?;
            Ok(probe(&lm_forward(lm.as_ref(), &seq)?.probs, 50))
        },
        &tokens,
    );
}

#[test]
fn lm_is_causal_and_normalized() {
    let suite = build_toy_suite(3).unwrap();
    let emb = random_image((1, 6, 64), 6)
        .to_tensor()
        .unwrap()
        .squeeze(0)
        .unwrap();
    let a = suite.lm.forward(&emb).unwrap();
    // swap rows 3 and 5
    let idx = Tensor::new(&[0u32, 1, 2, 5, 4, 3], &device()).unwrap();
    let b = suite
        .lm
        .forward(&emb.index_select(&idx, 0).unwrap())
        .unwrap();
    for row in 0..3 {
        assert_eq!(
            ops::flat(&a.get(row).unwrap()).unwrap(),
            ops::flat(&b.get(row).unwrap()).unwrap()
        );
    }
    let probs = LogitSequence::from_raw(a).unwrap().probs;
    for s in ops::flat(&probs.sum(1).unwrap()).unwrap() {
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lm_rejects_wrong_width() {
    let suite = build_toy_suite(0).unwrap();
    let emb = Tensor::zeros((3, 8), ops::DTYPE, &device()).unwrap();
    assert!(suite.lm.forward(&emb).is_err());
}

fn oracle_sequence(suite: &ModelSuite, rgb: [f64; 3]) -> MultimodalSequence {
    let img = ImageTensor::from_fn((3, 32, 32), |c, _, _| rgb[c]).unwrap();
    let prompt = PromptSpec::new("what is the color : [target] ?", "red", None);
    let text = embed_text(suite, &prompt).unwrap();
    let (tokens, _) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    MultimodalSequence::new(&text.embeddings, &tokens).unwrap()
}

#[test]
fn oracle_names_dominant_channel() {
    let suite = build_oracle_vlm().unwrap();
    let seq = oracle_sequence(&suite, [1.0, 0.0, 0.0]);
    let logits = lm_forward(suite.lm.as_ref(), &seq).unwrap();
    let last = ops::flat(&logits.raw_logits.get(seq.total_len() - 1).unwrap()).unwrap();
    assert_eq!(ops::argmax(&last), RED as usize);
    let decoded = greedy_decode(suite.lm.as_ref(), &seq, 3).unwrap();
    assert!(decoded.contains(&RED));

    let seq = oracle_sequence(&suite, [0.1, 1.0, 0.2]);
    assert_eq!(
        greedy_decode(suite.lm.as_ref(), &seq, 1).unwrap(),
        vec![GREEN]
    );
}

#[test]
fn oracle_red_logit_closed_form() {
    let suite = build_oracle_vlm().unwrap();
    let seq = oracle_sequence(&suite, [0.8, 0.1, 0.1]);
    let logits = lm_forward(suite.lm.as_ref(), &seq).unwrap();
    let last = ops::flat(&logits.raw_logits.get(seq.total_len() - 1).unwrap()).unwrap();
    assert!((last[RED as usize] - 7.0).abs() < 1e-12);
    assert!((last[GREEN as usize] + 3.5).abs() < 1e-12);
    let others: f64 = last
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < 16 || *i > 18)
        .map(|(_, v)| v.abs())
        .sum();
    assert_eq!(others, 0.0);
}

#[test]
fn oracle_gray_image_ties() {
    let suite = build_oracle_vlm().unwrap();
    let seq = oracle_sequence(&suite, [0.4, 0.4, 0.4]);
    let logits = lm_forward(suite.lm.as_ref(), &seq).unwrap();
    let last = ops::flat(&logits.raw_logits.get(seq.total_len() - 1).unwrap()).unwrap();
    assert_eq!(last[RED as usize], last[GREEN as usize]);
    assert_eq!(last[GREEN as usize], last[BLUE as usize]);
    // every logit is equal, so the lowest id wins
    assert_eq!(greedy_decode(suite.lm.as_ref(), &seq, 1).unwrap(), vec![0]);
}

struct AlwaysEos(Vocab);

impl Params for AlwaysEos {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &Tensor)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {}
}

impl LanguageModel for AlwaysEos {
    fn width(&self) -> usize {
        2
    }
    fn vocab(&self) -> &Vocab {
        &self.0
    }
    fn embed_tokens(&self, ids: &[u32]) -> crate::Result<Tensor> {
        Ok(Tensor::zeros((ids.len(), 2), ops::DTYPE, &device())?)
    }
    fn forward(&self, embeddings: &Tensor) -> crate::Result<Tensor> {
        let t = embeddings.dims()[0];
        let mut data = vec![0.0; t * self.0.len()];
        for row in 0..t {
            data[row * self.0.len() + EOS as usize] = 1.0;
        }
        Ok(Tensor::from_vec(data, (t, self.0.len()), &device())?)
    }
}

#[test]
fn greedy_decode_length_rules() {
    let suite = build_toy_suite(0).unwrap();
    let prompt = PromptSpec::new(
        "what is shown in the picture : a. [target] concept ?",
        "red",
        None,
    );
    let text = embed_text(&suite, &prompt).unwrap();
    let img = random_image((3, 32, 32), 8);
    let (tokens, _) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    let seq = MultimodalSequence::new(&text.embeddings, &tokens).unwrap();
    assert_eq!(seq.total_len(), seq.text_len + 64);
    assert_eq!(greedy_decode(suite.lm.as_ref(), &seq, 1).unwrap().len(), 1);
    assert!(greedy_decode(suite.lm.as_ref(), &seq, 4).unwrap().len() <= 4);
    assert!(greedy_decode(suite.lm.as_ref(), &seq, 0).is_err());

    let eos = AlwaysEos(Vocab::toy());
    let seq = MultimodalSequence::new(
        &Tensor::zeros((2, 2), ops::DTYPE, &device()).unwrap(),
        &Tensor::zeros((1, 2), ops::DTYPE, &device()).unwrap(),
    )
    .unwrap();
    assert_eq!(greedy_decode(&eos, &seq, 10).unwrap(), vec![EOS]);
}

#[test]
fn embed_text_ids() {
    let suite = build_toy_suite(0).unwrap();
    let p = PromptSpec::new(
        "what is shown in the picture : a. [target] concept {, or b. [negative] concept}",
        "red",
        None,
    );
    let e = embed_text(&suite, &p).unwrap();
    assert_eq!(e.target_ids, vec![RED]);
    assert_eq!(e.tokens.ids()[0], BOS);
    assert!(e.tokens.ids().contains(&RED));
    assert!(!e.tokens.ids().contains(&suite.vocab().id("or").unwrap()));
    assert_eq!(e.embeddings.dims(), &[e.tokens.len(), 64]);
    let again = embed_text(&suite, &p).unwrap();
    assert_eq!(e.tokens, again.tokens);
    let bad = PromptSpec::new("[target] zebra", "red", None);
    assert!(matches!(embed_text(&suite, &bad), Err(Error::UnknownWords(w)) if w == vec!["zebra"]));
}

#[test]
fn verifier_forward_leaves_running_stats_alone() {
    let suite = build_toy_suite(0).unwrap();
    let v = suite.verifier().unwrap();
    let before = v.running_stats().unwrap();
    verifier_forward(v, &[random_image((3, 32, 32), 9)]).unwrap();
    assert_eq!(before, v.running_stats().unwrap());
    assert!(verifier_forward(v, &[]).is_err());
}

#[test]
fn verifier_stats_of_identical_batch_equal_single_image() {
    let suite = build_toy_suite(0).unwrap();
    let v = suite.verifier().unwrap();
    let img = random_image((3, 32, 32), 10);
    let one = verifier_forward(v, std::slice::from_ref(&img)).unwrap();
    let three = verifier_forward(v, &[img.clone(), img.clone(), img]).unwrap();
    for (a, b) in one.bn_stats.iter().zip(&three.bn_stats) {
        for (x, y) in ops::flat(&a.var)
            .unwrap()
            .iter()
            .zip(ops::flat(&b.var).unwrap())
        {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn verifier_first_stage_stats_of_constant_image() {
    let suite = build_toy_suite(0).unwrap();
    let v = suite.verifier().unwrap();
    let mut weight = None;
    let mut bias = None;
    suite.visit(&mut |name, _, t| match name {
        "verifier.stages.0.conv.weight" => weight = Some(ops::flat(t).unwrap()),
        "verifier.stages.0.conv.bias" => bias = Some(ops::flat(t).unwrap()),
        _ => {}
    });
    let (w, b) = (weight.unwrap(), bias.unwrap());
    let value = 0.7;
    let img = ImageTensor::filled((3, 32, 32), value).unwrap();
    let out = verifier_forward(v, &[img]).unwrap();
    let (mean, var) = (
        ops::flat(&out.bn_stats[0].mean).unwrap(),
        ops::flat(&out.bn_stats[0].var).unwrap(),
    );
    let n = 32usize;
    for o in 0..b.len() {
        let mut vals = Vec::with_capacity(n * n);
        for y in 0..n as isize {
            for x in 0..n as isize {
                let mut z = b[o];
                for c in 0..3 {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (yy, xx) = (y + ky - 1, x + kx - 1);
                            if (0..n as isize).contains(&yy) && (0..n as isize).contains(&xx) {
                                z += w[((o * 3 + c) * 3 + ky as usize) * 3 + kx as usize] * value;
                            }
                        }
                    }
                }
                vals.push(z);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = vals.iter().map(|z| (z - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((mean[o] - m).abs() < 1e-12);
        assert!((var[o] - s).abs() < 1e-12);
    }
}

#[test]
fn classifier_logits_shape_and_repeatability() {
    let suite = build_toy_suite(0).unwrap();
    let c = suite.classifier().unwrap();
    let img = random_image((3, 32, 32), 11);
    let a = classifier_forward(c, &img).unwrap();
    assert_eq!(a.dims(), &[3]);
    assert_eq!(
        ops::flat(&a).unwrap(),
        ops::flat(&classifier_forward(c, &img).unwrap()).unwrap()
    );
}

#[test]
fn weight_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.mimicwt");
    let suite = build_toy_suite(4).unwrap();
    weights::save_weights(&suite, &path).unwrap();
    let loaded = weights::load_weights(&path, Some(suite.arch())).unwrap();
    assert_eq!(suite.weights_checksum(), loaded.weights_checksum());
    let img = random_image((3, 32, 32), 12);
    let (a, _) = encode_image(suite.encoder.as_ref(), &img).unwrap();
    let (b, _) = encode_image(loaded.encoder.as_ref(), &img).unwrap();
    assert_eq!(ops::flat(&a).unwrap(), ops::flat(&b).unwrap());

    let other = SuiteArch::Toy(ToyConfig::default().with_image_size(16));
    assert!(matches!(
        weights::load_weights(&path, Some(&other)),
        Err(Error::ArchitectureMismatch { .. })
    ));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.mimicwt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert!(weights::load_weights(&cut, None).is_err());
}

#[test]
fn oracle_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.mimicwt");
    let suite = build_oracle_vlm().unwrap();
    weights::save_weights(&suite, &path).unwrap();
    let loaded = weights::load_weights(&path, None).unwrap();
    assert_eq!(loaded.arch(), suite.arch());
}
