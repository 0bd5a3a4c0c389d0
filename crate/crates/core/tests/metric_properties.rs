use proptest::prelude::*;
use rescuenet::mask::Mask;
use rescuenet::metrics::{evaluate_dataset, harmonic_mean, ConfusionMatrix, EvalReport};
use rescuenet::rng::SplitMix64;

/// Independent per-pixel counter: F1 of `class_set` membership.
fn brute_f1(gt: &[u8], pred: &[u8], in_class: impl Fn(u8) -> bool) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&g, &p) in gt.iter().zip(pred) {
        if g == 255 {
            continue;
        }
        match (in_class(g), in_class(p)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

fn random_pair(rng: &mut SplitMix64) -> (Vec<u8>, Vec<u8>) {
    let gt = (0..256)
        .map(|_| match rng.below(12) {
            11 => 255,
            v => (v % 5) as u8,
        })
        .collect();
    let pred = (0..256).map(|_| rng.below(5) as u8).collect();
    (gt, pred)
}

#[test]
fn matches_brute_force_on_random_masks() {
    let mut rng = SplitMix64::new(42);
    for _ in 0..200 {
        let (gt, pred) = random_pair(&mut rng);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&gt, &pred, None).unwrap();
        let mut counts = [[0u64; 5]; 5];
        for (&g, &p) in gt.iter().zip(&pred) {
            if g != 255 {
                counts[g as usize][p as usize] += 1;
            }
        }
        assert_eq!(cm.counts, counts);
        assert_eq!(cm.loc_f1(), brute_f1(&gt, &pred, |c| c > 0));
        for k in 1..=4u8 {
            assert_eq!(cm.class_f1(k as usize), brute_f1(&gt, &pred, |c| c == k));
        }
        let r = cm.report();
        let per: Vec<f64> = (1..=4u8)
            .map(|k| brute_f1(&gt, &pred, |c| c == k))
            .collect();
        assert_eq!(r.f1_per_class.to_vec(), per);
        let hm = if per.contains(&0.0) {
            0.0
        } else {
            4.0 / per.iter().map(|f| 1.0 / f).sum::<f64>()
        };
        assert!((r.harmonic_mean - hm).abs() < 1e-12);
    }
}

#[test]
fn hand_example_dataset() {
    let gt = Mask::new(2, 2, vec![0, 1, 1, 2]).unwrap();
    let pred = Mask::new(2, 2, vec![0, 1, 2, 2]).unwrap();
    let r = evaluate_dataset([&gt], [&pred]).unwrap();
    assert_eq!(r.f1_loc, 1.0);
    assert!((r.f1_per_class[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.harmonic_mean - 0.8).abs() < 1e-12);
    assert!((r.overall - 0.86).abs() < 1e-12);
    let twice = evaluate_dataset([&gt, &gt], [&pred, &pred]).unwrap();
    assert_eq!(twice.overall, r.overall);
    assert!(evaluate_dataset([&gt, &gt], [&pred]).is_err());
}

fn report_of(gt: &[u8], pred: &[u8]) -> EvalReport {
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(gt, pred, None).unwrap();
    cm.report()
}

fn mask_values() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![8 => 0u8..5, 1 => Just(255u8)], n),
            prop::collection::vec(0u8..5, n),
        )
    })
}

proptest! {
    #[test]
    fn merge_equals_concatenation((gt, pred) in mask_values(), cut in any::<prop::sample::Index>()) {
        let k = cut.index(gt.len() + 1);
        let mut a = ConfusionMatrix::new();
        a.accumulate(&gt[..k], &pred[..k], None).unwrap();
        let mut b = ConfusionMatrix::new();
        b.accumulate(&gt[k..], &pred[k..], None).unwrap();
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        let whole = report_of(&gt, &pred);
        prop_assert_eq!(ab.report(), whole);
        prop_assert_eq!(ba.report(), whole);
        prop_assert_eq!(ab.total(), gt.iter().filter(|&&g| g != 255).count() as u64);
    }

    #[test]
    fn report_ranges((gt, pred) in mask_values()) {
        let r = report_of(&gt, &pred);
        for v in [r.f1_loc, r.harmonic_mean, r.overall].iter().chain(&r.f1_per_class) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert_eq!(r.overall, 0.3 * r.f1_loc + 0.7 * r.harmonic_mean);
        if r.f1_per_class.iter().all(|&f| f > 0.0) {
            let lo = r.f1_per_class.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = r.f1_per_class.iter().cloned().fold(0.0, f64::max);
            prop_assert!(r.harmonic_mean >= lo - 1e-12 && r.harmonic_mean <= hi + 1e-12);
        }
    }

    #[test]
    fn relabeling_damage_classes((gt, pred) in mask_values(), perm in Just(vec![1u8, 2, 3, 4]).prop_shuffle()) {
        let map = |v: u8| if (1..=4).contains(&v) { perm[v as usize - 1] } else { v };
        let g2: Vec<u8> = gt.iter().map(|&v| map(v)).collect();
        let p2: Vec<u8> = pred.iter().map(|&v| map(v)).collect();
        let a = report_of(&gt, &pred);
        let b = report_of(&g2, &p2);
        for (k, &to) in perm.iter().enumerate().take(4) {
            prop_assert_eq!(a.f1_per_class[k], b.f1_per_class[to as usize - 1]);
        }
        prop_assert_eq!(a.f1_loc, b.f1_loc);
        prop_assert!((a.harmonic_mean - b.harmonic_mean).abs() < 1e-12);
        prop_assert!((a.overall - b.overall).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0u8..5, 1..100)) {
        let r = report_of(&gt, &gt);
        prop_assert_eq!(r.overall, 1.0);
        prop_assert_eq!(harmonic_mean(&r.f1_per_class), 1.0);
    }
}
