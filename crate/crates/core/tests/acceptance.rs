//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{brute_force_mask, random_convex_polygon};
use rescuenet::autodiff::Tape;
use rescuenet::data::io::{encode_pgm, encode_ppm};
use rescuenet::data::{
    generate_dataset, rasterize_polygons, GeneratorConfig, PolygonLabel, ScenePair,
};
use rescuenet::gradcheck::{end_to_end_check, run_suite, END_TO_END_TOLERANCE, SUITE_TOLERANCE};
use rescuenet::layers::Mode;
use rescuenet::losses::{change_head_loss, dice_loss, locaware_loss, plain_ce_loss, LossTargets};
use rescuenet::metrics::{harmonic_mean, overall_score, ConfusionMatrix};
use rescuenet::model::{
    build_model, forward_pair, Architecture, Binding, LossMode, ModelConfig, SegHead,
};
use rescuenet::rng::SplitMix64;
use rescuenet::tensor::Tensor;
use rescuenet::train::{
    evaluate, load_checkpoint, run_ablations, save_checkpoint, TrainConfig, TrainEvent, Trainer,
};

const HM_EXPECTED: f64 = 0.7348;
const HM_TOL: f64 = 1e-4;
const SCORE_EXPECTED: f64 = 0.770;
const SCORE_TOL: f64 = 1e-3;
const GRAD_TRIALS: usize = 100;
const LOSS_TOL_LOOSE: f64 = 1e-4;
const LOSS_TOL_TIGHT: f64 = 1e-6;
const OVERFIT_STEPS: u64 = 500;
const OVERFIT_MIN_SCORE: f64 = 0.95;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_STEPS: u64 = 300;
const ABLATION_TRAIN_SCENES: usize = 40;
const ABLATION_EVAL_SCENES: usize = 20;
const ABLATION_DICE_SLACK: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| outcome(false, "panicked"));
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    println!(
        "{} {id:>2} {name}: {} [{:.2}s / budget {}s{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn planes(values: &[f64], c: usize) -> Tensor<f64> {
    Tensor::from_f64([1, c, 1, values.len() / c], values).unwrap()
}

fn criterion_1() -> Outcome {
    let hm = harmonic_mean(&[0.8832, 0.5628, 0.7711, 0.8079]);
    outcome(
        (hm - HM_EXPECTED).abs() <= HM_TOL,
        format!("harmonic mean {hm:.6}, expected {HM_EXPECTED} +/- {HM_TOL}"),
    )
}

fn criterion_2() -> Outcome {
    let s = overall_score(0.84, 0.74);
    outcome(
        (s - SCORE_EXPECTED).abs() <= SCORE_TOL,
        format!("score {s:.6}, expected {SCORE_EXPECTED} +/- {SCORE_TOL}"),
    )
}

fn criterion_3() -> Outcome {
    let results = run_suite(GRAD_TRIALS, 2024);
    let worst = results
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("non-empty suite");
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed(SUITE_TOLERANCE) || r.trials < GRAD_TRIALS)
        .map(|r| r.name)
        .collect();
    outcome(
        failing.is_empty(),
        format!(
            "{} ops/losses x {GRAD_TRIALS} trials, worst {} = {:.3e} (tol {SUITE_TOLERANCE:e}){}",
            results.len(),
            worst.name,
            worst.max_error,
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {failing:?}")
            }
        ),
    )
}

fn criterion_4() -> Outcome {
    let config = ModelConfig::default();
    let params = build_model(&config, 5).unwrap();
    match end_to_end_check(&config, &params, 8, 17) {
        Ok(e) => outcome(
            e <= END_TO_END_TOLERANCE,
            format!("max relative error {e:.3e} (tol {END_TO_END_TOLERANCE:e})"),
        ),
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

#[allow(clippy::approx_constant)]
fn criterion_5() -> Outcome {
    let mut t = Tape::<f64>::new();
    let fg = LossTargets::from_labels(&[1], 1, 1, 1).unwrap();
    let bg = LossTargets::from_labels(&[0], 1, 1, 1).unwrap();
    let p = t.constant(planes(&[0.5], 1));
    let q = t.constant(planes(&[0.25; 4], 4));
    let fg_loss = locaware_loss(&mut t, p, q, &fg).unwrap().total;
    let bg_loss = locaware_loss(&mut t, p, q, &bg).unwrap().total;

    let y = LossTargets::from_labels(&[1, 1, 0, 0], 1, 1, 4).unwrap();
    let yhat = t.constant(planes(&[1.0, 0.0, 0.0, 0.0], 1));
    let dice = dice_loss(&mut t, yhat, &y, 0.0).unwrap();

    let uniform = t.constant(planes(&[0.0; 5], 5));
    let ce = plain_ce_loss(&mut t, uniform, &fg).unwrap();

    let checks = [
        (
            "locaware fg",
            t.value(fg_loss).item(),
            0.5f64.ln().mul_add(-1.0, -0.25f64.ln()),
            2.0794,
            LOSS_TOL_LOOSE,
        ),
        (
            "locaware bg",
            t.value(bg_loss).item(),
            -0.5f64.ln(),
            0.6931,
            LOSS_TOL_LOOSE,
        ),
        (
            "dice",
            t.value(dice).item(),
            1.0 / 3.0,
            0.3333,
            LOSS_TOL_TIGHT,
        ),
        (
            "uniform ce",
            t.value(ce).item(),
            5f64.ln(),
            5f64.ln(),
            LOSS_TOL_TIGHT,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, got, exact, printed, tol) in checks {
        let ok = (got - exact).abs() <= tol && (got - printed).abs() <= tol.max(1e-4);
        pass &= ok;
        parts.push(format!("{name}={got:.6}"));
    }
    outcome(pass, parts.join(" "))
}

fn criterion_6() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = SplitMix64::new(8);
    for head in [SegHead::Simple, SegHead::EncoderDecoder] {
        let config = ModelConfig {
            seg_head: head,
            ..ModelConfig::default()
        };
        let params = build_model(&config, 1).unwrap();
        let arch = Architecture::new(&config).unwrap();
        for size in (8..=64).step_by(8) {
            for (h, w) in [(size, size), (size, 72 - size)] {
                let img =
                    |rng: &mut SplitMix64| Tensor::<f64>::from_fn([2, 3, h, w], |_| rng.next_f64());
                let pre = img(&mut rng);
                let mut tape = Tape::<f64>::new();
                let binding = Binding::new(&mut tape, &params, false);
                let a = tape.constant(pre.clone());
                let b = tape.constant(pre);
                let out =
                    forward_pair(&mut tape, &binding, &arch, &config, a, b, Mode::Train).unwrap();
                let bshape = tape.shape(out.backbone_out).to_vec();
                if bshape[2] * 8 != h || bshape[3] * 8 != w {
                    problems.push(format!("{h}x{w}: backbone {bshape:?}"));
                }
                if tape.shape(out.damage_logits_seg)[2..] != [h, w] {
                    problems.push(format!("{h}x{w}: logits not full resolution"));
                }
                if tape
                    .value(out.change_input)
                    .data()
                    .iter()
                    .any(|&v| v != 0.0)
                {
                    problems.push(format!("{h}x{w}: change input not zero"));
                }
            }
        }
    }

    let labels: Vec<u8> = (0..64).map(|i| [0, 1, 0, 3, 255, 4, 0, 2][i % 8]).collect();
    let targets = LossTargets::from_labels(&labels, 1, 1, 64).unwrap();
    let base: Vec<f64> = (0..256).map(|_| rng.uniform(-3.0, 3.0)).collect();
    let mut perturbed = base.clone();
    for ch in 0..4 {
        for (i, &l) in labels.iter().enumerate() {
            if !(1..=4).contains(&l) {
                perturbed[ch * 64 + i] += rng.uniform(-100.0, 100.0);
            }
        }
    }
    let eval = |v: &[f64]| {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(planes(v, 4), true);
        let (l, _) = change_head_loss(&mut t, x, &targets).unwrap();
        let value = t.value(l).item();
        (value, t.backward(l).unwrap().get(x).unwrap().clone())
    };
    let (a, grad) = eval(&base);
    let (b, _) = eval(&perturbed);
    if a.to_bits() != b.to_bits() {
        problems.push("background logits change the change-head loss".into());
    }
    let leaked = (0..256).any(|k| !(1..=4).contains(&labels[k % 64]) && grad.data()[k] != 0.0);
    if leaked {
        problems.push("background pixels receive change-head gradient".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "stride 8 for 16 shapes x 2 heads; zero change input; background contributes 0"
                .to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn overfit_scenes() -> Vec<ScenePair> {
    generate_dataset(&GeneratorConfig::default(), 10, 0).unwrap()
}

fn criterion_7() -> Outcome {
    let pairs = overfit_scenes();
    let config = TrainConfig {
        steps: OVERFIT_STEPS,
        augment: false,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        loss_mode: LossMode::LocawareDice,
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let mut losses = Vec::new();
    if let Err(e) = trainer.run(&pairs, None, 1, |e| {
        if let TrainEvent::Step(l) = e {
            losses.push(l.loss.total);
        }
    }) {
        return outcome(false, format!("training failed: {e}"));
    }
    let report = evaluate(&trainer.net, &pairs, trainer.config.fusion, 1).unwrap();
    let avg = |end: usize| losses[end - 50..end].iter().sum::<f64>() / 50.0;
    let (early, late) = (avg(50), avg(losses.len()));
    outcome(
        report.overall >= OVERFIT_MIN_SCORE && late < early,
        format!(
            "training-set score {:.4} after {OVERFIT_STEPS} steps (min {OVERFIT_MIN_SCORE}); \
             50-step mean loss {early:.4} at step 50 -> {late:.4} at step {}",
            report.overall,
            losses.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let g = GeneratorConfig::default();
    let train = generate_dataset(&g, ABLATION_TRAIN_SCENES, 100).unwrap();
    let held_out = generate_dataset(&g, ABLATION_EVAL_SCENES, 200).unwrap();
    let config = TrainConfig {
        steps: ABLATION_STEPS,
        ..TrainConfig::default()
    };
    let report = match run_ablations(
        &train,
        &held_out,
        &ModelConfig::default(),
        &config,
        &ABLATION_SEEDS,
        1,
        |_, _, _| {},
    ) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    for line in report.to_string().lines() {
        println!("     | {line}");
    }
    let median = |label: &str| report.row(label).expect("table row").median;
    let ce = median("Cross-Entropy Loss");
    let la = median("Localization Aware Loss");
    let lad = median("Localization Aware Loss + Dice Loss");
    outcome(
        report.rows.len() == 7 && la >= ce && lad >= la - ABLATION_DICE_SLACK,
        format!("median ce={ce:.4} locaware={la:.4} locaware+dice={lad:.4} over seeds {ABLATION_SEEDS:?}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = SplitMix64::new(9);
    let mut raster_mismatch = 0;
    for i in 0..200 {
        let labels = vec![PolygonLabel {
            polygon: random_convex_polygon(&mut rng, 32.0),
            damage: Some(1 + (i % 4) as u8),
        }];
        if rasterize_polygons(&labels, 32, 32).0 != brute_force_mask(&labels, 32, 32) {
            raster_mismatch += 1;
        }
    }
    let mut metric_mismatch = 0;
    for _ in 0..200 {
        let gt: Vec<u8> = (0..256)
            .map(|_| {
                if rng.below(10) == 0 {
                    255
                } else {
                    rng.below(5) as u8
                }
            })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.below(5) as u8).collect();
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred, None).unwrap();
        let mut counts = [[0u64; 5]; 5];
        for (&g, &p) in gt.iter().zip(&pred) {
            if g != 255 {
                counts[g as usize][p as usize] += 1;
            }
        }
        let f1 = |is: &dyn Fn(u8) -> bool| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&g, &p) in gt.iter().zip(&pred).filter(|(&g, _)| g != 255) {
                match (is(g), is(p)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            if 2 * tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            }
        };
        let same = cm.counts == counts
            && cm.loc_f1() == f1(&|c| c > 0)
            && (1..=4u8).all(|k| cm.class_f1(k as usize) == f1(&|c| c == k));
        if !same {
            metric_mismatch += 1;
        }
    }
    outcome(
        raster_mismatch == 0 && metric_mismatch == 0,
        format!(
            "rasterizer mismatches {raster_mismatch}/200, metric mismatches {metric_mismatch}/200"
        ),
    )
}

fn criterion_10() -> Outcome {
    let pairs = overfit_scenes();
    let config = TrainConfig {
        steps: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let train = |until: u64| {
        let mut t = Trainer::new(model.clone(), config.clone()).unwrap();
        t.run_until(until, &pairs, None, 1, |_| {}).unwrap();
        t
    };
    let a = train(20).checkpoint().to_bytes();
    let b = train(20).checkpoint().to_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&train(10).checkpoint(), &path).unwrap();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    resumed.run(&pairs, None, 1, |_| {}).unwrap();
    let c = resumed.checkpoint().to_bytes();

    let encode = |ps: &[ScenePair]| -> Vec<u8> {
        ps.iter()
            .flat_map(|p| [encode_ppm(&p.pre), encode_ppm(&p.post), encode_pgm(&p.mask)].concat())
            .collect()
    };
    let gen_same = encode(&pairs) == encode(&overfit_scenes());
    outcome(
        a == b && a == c && gen_same,
        format!(
            "repeat run identical: {}, resume bit-exact: {}, generator identical: {gen_same}",
            a == b,
            a == c
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run("1", "harmonic mean oracle", secs(1), criterion_1),
        run("2", "overall score oracle", secs(1), criterion_2),
        run("3", "gradient suite", secs(120), criterion_3),
        run("4", "end-to-end gradient", secs(60), criterion_4),
        run("5", "loss value oracles", secs(1), criterion_5),
        run("6", "structural contracts", secs(60), criterion_6),
        run("7", "overfit", secs(600), criterion_7),
        run("8", "directional ablation", secs(2700), criterion_8),
        run("9", "oracle equivalence", secs(60), criterion_9),
        run("10", "determinism", secs(300), criterion_10),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
