//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion with its pinned tolerance, and fails if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use mimic_cli::ablate::{cmd_ablate, parse_leaderboard, AblateOptions, GridSummary, LEADERBOARD_FILE};
use mimic_cli::commands::{cmd_invert, seed_dir};
use mimic_cli::config::{parse_config_str, ABLATION_PRESETS};
use mimic_cli::report::cmd_report;
use mimic_cli::setup::reference_stats;
use mimic_core::engine::{init_image, read_f32_images, run_inversion};
use mimic_core::gradcheck::{check_gradient, GradCheckOptions};
use mimic_core::metrics::{
    bleu, clip_score, fid, inception_score, lpips_like, rouge_l, score_infinity, top_k_accuracy, verifier_logits,
    BleuOptions, ClipOptions, FeatureSet, IdentityExtractor, InfinityOptions,
};
use mimic_core::modelzoo::train::train_toy_suite;
use mimic_core::modelzoo::{build_toy_suite_with, ImageTensor, PromptSpec, ToyConfig, ToySuiteParts};
use mimic_core::objective::{
    base_loss_kl, base_loss_l2, l2_penalty, patch_regularizer, prior_regularizer, total_objective, tv1, tv2,
    verifier_regularizer, BaseLossVariant, ObjectiveWeights, ReferenceStats, Spread, TargetSpec,
};
use mimic_core::statcapture::dataset::{blob_dataset, CLASS_NAMES};
use mimic_core::statcapture::{
    capture_classifier_stats, capture_encoder_stats, extract_bn_stats, AveragingMode, BNStatistics, LayerStat,
};
use mimic_core::{ops, Result as CoreResult};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn scalar(t: &Tensor) -> f64 {
    ops::scalar(t).expect("scalar")
}

const TABLE2: [(&str, &str, f64, f64); 3] = [
    ("It is a fishfish", "It is a goldfish", 0.750, 0.749),
    ("The image depicts a fishfish", "The image depicts a goldfish", 0.800, 0.799),
    ("It is an image of a fishfish", "It is an image of a goldfish", 0.857, 0.857),
];

fn criterion_1() -> Outcome {
    let opts = BleuOptions::default();
    ensure(opts.max_n == 1, "BLEU default is not unigram")?;
    let mut detail = Vec::new();
    for (cand, reference, rouge_expected, bleu_reported) in TABLE2 {
        let r = rouge_l(cand, reference).map_err(e)?;
        let b = bleu(cand, reference, &opts).map_err(e)?;
        ensure((r - rouge_expected).abs() <= 1e-3, format!("ROUGE-L {r} vs {rouge_expected}"))?;
        ensure((b - bleu_reported).abs() <= 5e-3, format!("BLEU {b} vs {bleu_reported}"))?;
        detail.push(format!("{r:.4}/{b:.4}"));
    }
    Ok(format!("ROUGE-L/BLEU = {} (tol 1e-3 / 5e-3)", detail.join(", ")))
}

fn grad_fraction<F>(name: &str, f: F, x: &Tensor, worst: &mut f64) -> Result<f64, String>
where
    F: Fn(&Tensor) -> CoreResult<Tensor>,
{
    let opts = GradCheckOptions { samples: 200, tolerance: 1e-4, ..GradCheckOptions::default() };
    let r = check_gradient(f, x, &opts).map_err(|err| format!("{name}: {err}"))?;
    ensure(r.checked == 200, format!("{name}: only {} coordinates", r.checked))?;
    ensure(r.pass_fraction() >= 0.99, format!("{name}: {:.3} of coordinates within 1e-4", r.pass_fraction()))?;
    *worst = worst.min(r.pass_fraction());
    Ok(r.pass_fraction())
}

fn criterion_2() -> Outcome {
    let suite = build_toy_suite_with(&ToyConfig::default().with_image_size(16), 5).map_err(e)?;
    let reals: Vec<ImageTensor> = (0..4).map(|i| init_image(100 + i, (3, 16, 16))).collect::<CoreResult<_>>().map_err(e)?;
    let enc = suite.encoder.as_ref();
    let clf = suite.classifier().map_err(e)?;
    let enc_stats = capture_encoder_stats(enc, &reals, &enc.layer_ids(), AveragingMode::AverageThenStats).map_err(e)?;
    let clf_stats = capture_classifier_stats(clf, &reals, &clf.layer_ids(), AveragingMode::AverageThenStats).map_err(e)?;
    let bn = extract_bn_stats(suite.verifier().map_err(e)?).map_err(e)?;
    let prompt = PromptSpec::new("what is shown in the picture : a. [target] concept ?", "red", None);
    let x = init_image(7, (3, 16, 16)).and_then(|i| i.to_tensor()).map_err(e)?;
    let xb = x.unsqueeze(0).map_err(e)?;
    let mut worst = 1.0f64;
    let mut n = 0;

    let only = |set: fn(&mut ObjectiveWeights)| {
        let mut w = ObjectiveWeights::default();
        set(&mut w);
        w
    };
    let terms: Vec<(&str, ObjectiveWeights)> = vec![
        ("total", ObjectiveWeights::unit()),
        ("task", only(|w| w.gamma1 = 1.0)),
        ("base", only(|w| w.gamma2 = 1.0)),
        ("verifier", only(|w| w.beta1 = 1.0)),
    ];
    for (mode, target) in [("vit", TargetSpec::vit(1)), ("vlm", TargetSpec { answer_len: Some(2), ..TargetSpec::vlm(vec![16]) })] {
        let p = (mode == "vlm").then_some(&prompt);
        let refs = ReferenceStats { encoder: Some(if mode == "vlm" { &enc_stats } else { &clf_stats }), bn: Some(&bn) };
        for variant in [BaseLossVariant::L2, BaseLossVariant::Kl] {
            let target = target.clone().with_base_loss(variant);
            for (name, w) in &terms {
                if *name != "total" && *name != "base" && variant == BaseLossVariant::Kl {
                    continue;
                }
                let label = format!("{mode}/{variant:?}/{name}");
                grad_fraction(
                    &label,
                    |t| Ok(total_objective(&suite, t, p, &target, refs, w, &Default::default())?.total),
                    &xb,
                    &mut worst,
                )?;
                n += 1;
            }
        }
    }
    let regs: Vec<(&str, Box<dyn Fn(&Tensor) -> CoreResult<Tensor>>)> = vec![
        ("tv1", Box::new(tv1)),
        ("tv2", Box::new(tv2)),
        ("l2", Box::new(|t| l2_penalty(t, false))),
        ("prior", Box::new(|t| prior_regularizer(t, 3e-4, 1e-4, 1e-5, false))),
        ("patch", Box::new(|t| patch_regularizer(t, 4))),
    ];
    for (name, f) in &regs {
        grad_fraction(name, f, &x, &mut worst)?;
        n += 1;
    }
    Ok(format!("{n} terms, worst pass fraction {worst:.3} (rel err <= 1e-4 on >= 99% of 200 coords)"))
}

fn features(rows: &[&[f64]]) -> FeatureSet {
    FeatureSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), "test").expect("features")
}

fn criterion_3() -> Outcome {
    let x = features(&[&[0.0, 1.0], &[2.0, -1.0], &[1.0, 3.0], &[-2.0, 0.5]]);
    let self_fid = fid(&x, &x).map_err(e)?;
    ensure(self_fid.abs() <= 1e-6, format!("fid(X, X) = {self_fid}"))?;
    // (0, 1) vs (1, 1): two-point sets with those means and unit variances.
    let a = features(&[&[-1.0], &[1.0]]);
    let b = features(&[&[0.0], &[2.0]]);
    let scalar_fid = fid(&a, &b).map_err(e)?;
    ensure((scalar_fid - 1.0).abs() <= 1e-9, format!("scalar fid {scalar_fid}"))?;
    let uniform = inception_score(&vec![vec![0.25; 4]; 6]).map_err(e)?;
    ensure((uniform - 1.0).abs() <= 1e-9, format!("IS uniform {uniform}"))?;
    let opposite = inception_score(&[vec![1.0, 0.0], vec![0.0, 1.0]]).map_err(e)?;
    ensure((opposite - 2.0).abs() <= 1e-9, format!("IS one-hots {opposite}"))?;
    let fit = score_infinity(400, &[50, 100, 200], &InfinityOptions::default(), |idx| Ok(7.0 - 30.0 / idx.len() as f64))
        .map_err(e)?;
    ensure((fit.intercept - 7.0).abs() <= 1e-6, format!("intercept {}", fit.intercept))?;
    let img = ImageTensor::filled((3, 4, 4), 1.5).map_err(e)?;
    let neg = ImageTensor::filled((3, 4, 4), -1.5).map_err(e)?;
    let same = lpips_like(&IdentityExtractor, &img, &img).map_err(e)?;
    let flip = lpips_like(&IdentityExtractor, &img, &neg).map_err(e)?;
    ensure(same == 0.0, format!("lpips identity {same}"))?;
    ensure((flip - 4.0).abs() <= 1e-9, format!("lpips sign flip {flip}"))?;
    let clip = clip_score(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0], &ClipOptions::default()).map_err(e)?;
    ensure((clip - 100.0).abs() <= 1e-9, format!("clip {clip}"))?;
    Ok(format!(
        "fid(X,X)={self_fid:.1e} scalar={scalar_fid} IS={uniform}/{opposite} IS_inf intercept={:.9} lpips={same}/{flip} clip={clip}",
        fit.intercept
    ))
}

fn channel_means(img: &ImageTensor) -> [f64; 3] {
    let (c, h, w) = img.shape();
    assert_eq!(c, 3);
    let d = img.data();
    let n = (h * w) as f64;
    [0, 1, 2].map(|k| d[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / n)
}

fn criterion_4(tmp: &Path) -> Outcome {
    let cfg = parse_config_str(r#"{"presets": ["oracle_red"]}"#).map_err(e)?;
    let inv = &cfg.inversion;
    ensure(
        inv.iterations == 1000 && inv.lr == 0.05 && inv.seeds == [0, 1, 2] && inv.weights == ObjectiveWeights::task_only(),
        "oracle preset differs from the pinned setup",
    )?;
    let out = tmp.join("oracle");
    let outcome = cmd_invert(&cfg, &out, 1).map_err(e)?;
    let mut gaps = Vec::new();
    for (r, answers) in outcome.results.iter().zip(&outcome.answers) {
        let answer = &answers[0];
        ensure(answer.split_whitespace().any(|w| w == "red"), format!("seed {} decoded {answer:?}", r.seed))?;
        let log = fs::read_to_string(seed_dir(&out, r.seed).join("decode.txt")).map_err(e)?;
        ensure(log.contains("red"), "decode log lacks the target word")?;
        ensure(seed_dir(&out, r.seed).join("final.png").exists(), "final.png missing")?;
        let [red, green, blue] = channel_means(&r.final_images[0]);
        let gap = red - 0.5 * (green + blue);
        ensure(gap > 0.2, format!("seed {} colour gap {gap}", r.seed))?;
        gaps.push(format!("{gap:.3}"));
    }
    ensure(gaps.len() == 3, "expected 3 seeds")?;
    Ok(format!("decode contains \"red\" for 3/3 seeds, R-(G+B)/2 = [{}] (> 0.2)", gaps.join(", ")))
}

fn criterion_5() -> Outcome {
    let base = parse_config_str(
        r#"{"presets": ["appendix_a"],
            "inversion": {"iterations": 500, "batch_size": 8, "seeds": [0], "checkpoint_every": 500, "log_every": 100}}"#,
    )
    .map_err(e)?;
    let inv = &base.inversion;
    let w = inv.weights;
    ensure(
        (w.gamma1, w.gamma2, w.beta1, w.beta2, w.alpha1, w.alpha2, w.alpha3) == (0.3, 5e-5, 1e-4, 4e-3, 3e-4, 1e-4, 1e-5),
        "preset weights differ from the pinned values",
    )?;
    ensure(
        inv.schedule == mimic_core::engine::Schedule::Cosine && inv.batch_size == 8 && inv.iterations == 500,
        "schedule, batch or iterations differ",
    )?;
    let mimic_cli::config::SuiteSpec::Toy { seed, image_size, train: Some(train) } = &base.suite else {
        return Err("expected a trained toy suite".into());
    };
    let mut parts = ToySuiteParts::new(&ToyConfig::default().with_image_size(*image_size), *seed).map_err(e)?;
    let data = blob_dataset(&base.data).map_err(e)?;
    let (c, _v) = train_toy_suite(&mut parts, &data, &train.options()).map_err(e)?;
    ensure(c.accuracy >= 0.95, format!("classifier train accuracy {}", c.accuracy))?;
    let suite = parts.into_suite();
    let mut tops = Vec::new();
    for concept in CLASS_NAMES {
        let cfg = base.with_concept(concept);
        let inv = cfg.resolved_inversion(suite.vocab()).map_err(e)?;
        let stats = reference_stats(&cfg, &inv, &suite).map_err(e)?;
        let r = run_inversion(&inv, 0, &suite, stats.refs()).map_err(e)?;
        let label = cfg.concept_label().ok_or("concept is not a class")?;
        let logits = verifier_logits(suite.verifier().map_err(e)?, &r.final_images).map_err(e)?;
        let top1 = top_k_accuracy(&logits, label, 1).map_err(e)?;
        ensure(top1 >= 0.6, format!("{concept}: verifier top-1 {top1}"))?;
        tops.push(format!("{concept} {top1:.3}"));
    }
    Ok(format!(
        "classifier train acc {:.3} (>= 0.95), verifier top-1 {} (>= 0.6)",
        c.accuracy,
        tops.join(", ")
    ))
}

fn criterion_6() -> Outcome {
    let constant = ImageTensor::filled((3, 16, 16), 0.7).and_then(|i| i.to_tensor()).map_err(e)?;
    for (name, v) in [
        ("tv1", scalar(&tv1(&constant).map_err(e)?)),
        ("tv2", scalar(&tv2(&constant).map_err(e)?)),
        ("patch", scalar(&patch_regularizer(&constant, 4).map_err(e)?)),
    ] {
        ensure(v == 0.0, format!("{name} on a constant image = {v}"))?;
    }
    let square = ImageTensor::new((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).and_then(|i| i.to_tensor()).map_err(e)?;
    let (t1, t2) = (scalar(&tv1(&square).map_err(e)?), scalar(&tv2(&square).map_err(e)?));
    ensure(t1 == 6.0 && t2 == 10.0, format!("tv1 {t1}, tv2 {t2} on [[0,1],[2,3]]"))?;

    // Statistics captured from the very images they are compared with.
    let suite = build_toy_suite_with(&ToyConfig::default().with_image_size(16), 3).map_err(e)?;
    let img = init_image(11, (3, 16, 16)).map_err(e)?;
    let batch = ImageTensor::stack(std::slice::from_ref(&img)).map_err(e)?;
    let enc = suite.encoder.as_ref();
    let stats = capture_encoder_stats(enc, std::slice::from_ref(&img), &enc.layer_ids(), AveragingMode::AverageThenStats)
        .map_err(e)?;
    let acts = enc.forward(&batch).map_err(e)?.activations;
    let l2 = scalar(&base_loss_l2(&acts, &stats, Spread::Std).map_err(e)?);
    let kl = scalar(&base_loss_kl(&acts, &stats).map_err(e)?);
    let batch4 = ImageTensor::stack(
        &(0..4).map(|i| init_image(20 + i, (3, 16, 16))).collect::<CoreResult<Vec<_>>>().map_err(e)?,
    )
    .map_err(e)?;
    let out = suite.verifier().map_err(e)?.forward(&batch4).map_err(e)?;
    let matched = BNStatistics {
        layers: out
            .bn_stats
            .iter()
            .enumerate()
            .map(|(id, s)| LayerStat { id, mean: ops::flat(&s.mean).unwrap(), spread: ops::flat(&s.var).unwrap() })
            .collect(),
        model_hash: String::new(),
    };
    let rv = scalar(&verifier_regularizer(&out.bn_stats, &matched, Spread::Var).map_err(e)?);
    for (name, v) in [("base_loss_l2", l2), ("base_loss_kl", kl), ("verifier_regularizer", rv)] {
        ensure(v.abs() <= 1e-9, format!("{name} at matched statistics = {v}"))?;
    }
    Ok(format!("constant: tv1=tv2=patch=0; hand tv1={t1} tv2={t2}; matched: l2={l2:.1e} kl={kl:.1e} rv={rv:.1e} (<= 1e-9)"))
}

fn max_abs_diff(a: &[ImageTensor], b: &[ImageTensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

const SMALL_GRID: &str = r#"{
    "inversion": {"iterations": 40, "log_every": 20, "checkpoint_every": 20},
    "ablation": {"presets": ["baseline", "+base", "+patch", "+prior", "+rv", "aggregated"],
                 "concepts": ["red", "green"], "seeds": [0, 1, 2]}
}"#;

fn criterion_7(tmp: &Path) -> Outcome {
    let cfg = parse_config_str(r#"{"inversion": {"iterations": 60, "seeds": [3], "log_every": 10, "checkpoint_every": 30}}"#)
        .map_err(e)?;
    let (a, b) = (tmp.join("det_a"), tmp.join("det_b"));
    cmd_invert(&cfg, &a, 1).map_err(e)?;
    cmd_invert(&cfg, &b, 1).map_err(e)?;
    let shape = (3, 16, 16);
    let fa = read_f32_images(seed_dir(&a, 3).join("final.f32"), shape).map_err(e)?;
    let fb = read_f32_images(seed_dir(&b, 3).join("final.f32"), shape).map_err(e)?;
    let diff = max_abs_diff(&fa, &fb);
    ensure(diff <= 1e-6, format!("final images differ by {diff}"))?;
    let ta = fs::read(seed_dir(&a, 3).join("trace.csv")).map_err(e)?;
    let tb = fs::read(seed_dir(&b, 3).join("trace.csv")).map_err(e)?;
    ensure(ta == tb, "trace.csv differs between runs")?;

    let grid = parse_config_str(SMALL_GRID).map_err(e)?;
    let serial = tmp.join("grid");
    let parallel = tmp.join("grid_w4");
    if !serial.join(LEADERBOARD_FILE).exists() {
        cmd_ablate(&grid, &serial, &AblateOptions { workers: 1, max_cells: None }).map_err(e)?;
    }
    cmd_ablate(&grid, &parallel, &AblateOptions { workers: 4, max_cells: None }).map_err(e)?;
    let l1 = fs::read_to_string(serial.join(LEADERBOARD_FILE)).map_err(e)?;
    let l4 = fs::read_to_string(parallel.join(LEADERBOARD_FILE)).map_err(e)?;
    ensure(l1 == l4, "leaderboard differs between --workers 1 and 4")?;
    Ok(format!("final max-abs diff {diff:.1e} (<= 1e-6), trace.csv identical, leaderboard identical for workers 1/4"))
}

fn criterion_8(tmp: &Path) -> Outcome {
    let cfg = parse_config_str(SMALL_GRID).map_err(e)?;
    let dir = tmp.join("grid");
    let first = cmd_ablate(&cfg, &dir, &AblateOptions { workers: 1, max_cells: Some(10) }).map_err(e)?;
    ensure(first.cells.len() == 10 && first.computed() == 10, format!("interrupted run finished {} cells", first.cells.len()))?;
    ensure(!dir.join(LEADERBOARD_FILE).exists(), "leaderboard written before the grid finished")?;
    let marks: Vec<_> = first
        .cells
        .iter()
        .map(|c| fs::metadata(dir.join(&c.dir).join("metrics.json")).and_then(|m| m.modified()).map_err(e))
        .collect::<Result<_, _>>()?;
    let resumed: GridSummary = cmd_ablate(&cfg, &dir, &AblateOptions { workers: 1, max_cells: None }).map_err(e)?;
    ensure(resumed.cells.len() == 36, format!("{} cells, expected 6 x 2 x 3 = 36", resumed.cells.len()))?;
    ensure(resumed.computed() == 26, format!("resume recomputed {} cells, expected 26", resumed.computed()))?;
    for (c, mark) in first.cells.iter().zip(&marks) {
        let now = fs::metadata(dir.join(&c.dir).join("metrics.json")).and_then(|m| m.modified()).map_err(e)?;
        ensure(now == *mark, format!("{} was rewritten on resume", c.dir.display()))?;
    }
    ensure(resumed.succeeded() == 36, format!("{} cells failed", 36 - resumed.succeeded()))?;
    let text = fs::read_to_string(dir.join(LEADERBOARD_FILE)).map_err(e)?;
    ensure(
        text.lines().next() == Some("Optimization Objective,Top-1,Top-5,IS_inf[verifier],IS_inf[classifier],FID_inf,IS,FID,LPIPS,CLIPScore"),
        "leaderboard header",
    )?;
    let rows = parse_leaderboard(&text).map_err(e)?;
    let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    ensure(labels == ABLATION_PRESETS, format!("rows {labels:?}"))?;
    let data = cmd_report(&dir, &tmp.join("report")).map_err(e)?;
    for ((label, values), group) in rows.iter().zip(&data.presets) {
        ensure(&group.label == label && group.top1 == values[0] && group.clip_score == values[8], format!("chart for {label} differs"))?;
    }
    Ok(format!("36 cells, resume computed 26 and reused 10, rows {}", labels.join(" > ")))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    type Criterion<'a> = (&'a str, &'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("1", "text metrics on the target-length pairs", Box::new(criterion_1)),
        ("2", "analytic vs finite-difference gradients", Box::new(criterion_2)),
        ("3", "metric oracles", Box::new(criterion_3)),
        ("4", "oracle VLM inversion to RED", Box::new(|| criterion_4(root))),
        ("5", "toy classifier inversion recognized by the verifier", Box::new(criterion_5)),
        ("6", "regularizer fixed points", Box::new(criterion_6)),
        ("8", "ablation grid shape and resume", Box::new(|| criterion_8(root))),
        ("7", "determinism of invert and grid", Box::new(|| criterion_7(root))),
    ];
    let limits = [("1", 1), ("2", 120), ("3", 30), ("4", 120), ("5", 300), ("6", 30), ("7", 600), ("8", 600)];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, f) in &criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = t.elapsed();
        let limit = Duration::from_secs(limits.iter().find(|(k, _)| k == id).map_or(600, |(_, s)| *s));
        let line = match result {
            Ok(detail) if elapsed <= limit => {
                format!("criterion {id} PASS: {name}: {detail} [{:.1} s, budget {} s]", elapsed.as_secs_f64(), limit.as_secs())
            }
            Ok(detail) => {
                failed += 1;
                format!("criterion {id} FAIL: {name}: {detail} but took {:.1} s > {} s", elapsed.as_secs_f64(), limit.as_secs())
            }
            Err(why) => {
                failed += 1;
                format!("criterion {id} FAIL: {name}: {why} [{:.1} s]", elapsed.as_secs_f64())
            }
        };
        println!("{line}");
        lines.push((id.to_string(), line));
    }
    lines.sort();
    println!("\nsummary:");
    for (_, l) in &lines {
        println!("  {l}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
