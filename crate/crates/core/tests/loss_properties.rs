use proptest::prelude::*;
use rescuenet::autodiff::Tape;
use rescuenet::losses::{
    change_head_loss, dice_loss, locaware_loss, plain_ce_loss, LossTargets, DICE_SMOOTH,
};
use rescuenet::tensor::Tensor;

/// Labels over `len` pixels with at least one non-ignored pixel.
fn labels(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![4 => 0u8..5, 1 => Just(255u8)], len).prop_map(|mut v| {
        if v.iter().all(|&l| l == 255) {
            v[0] = 1;
        }
        v
    })
}

fn case() -> impl Strategy<Value = (Vec<u8>, Vec<f64>, Vec<f64>, Vec<usize>)> {
    (2usize..24).prop_flat_map(|len| {
        (
            labels(len),
            prop::collection::vec(-6.0f64..6.0, len),
            prop::collection::vec(-6.0f64..6.0, 5 * len),
            Just((0..len).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

/// `[1, c, 1, len]` tensor from channel-major values.
fn planes(values: &[f64], c: usize) -> Tensor<f64> {
    Tensor::from_f64([1, c, 1, values.len() / c], values).unwrap()
}

fn permute(values: &[f64], c: usize, perm: &[usize]) -> Vec<f64> {
    let len = perm.len();
    (0..c)
        .flat_map(|ch| perm.iter().map(move |&p| values[ch * len + p]))
        .collect()
}

struct Values {
    locaware: f64,
    dice: f64,
    ce: f64,
    change: Option<f64>,
}

fn all_losses(labels: &[u8], loc: &[f64], dmg: &[f64]) -> Values {
    let len = labels.len();
    let targets = LossTargets::from_labels(labels, 1, 1, len).unwrap();
    let mut t = Tape::<f64>::new();
    let l = t.constant(planes(loc, 1));
    let p = t.sigmoid(l);
    let d4 = t.constant(planes(&dmg[..4 * len], 4));
    let q = t.softmax(d4, 1).unwrap();
    let d5 = t.constant(planes(dmg, 5));
    let la = locaware_loss(&mut t, p, q, &targets).unwrap();
    let dice = dice_loss(&mut t, p, &targets, DICE_SMOOTH).unwrap();
    let ce = plain_ce_loss(&mut t, d5, &targets).unwrap();
    let change = if targets.foreground_count() > 0 {
        let (c, _) = change_head_loss(&mut t, d4, &targets).unwrap();
        Some(t.value(c).item())
    } else {
        None
    };
    Values {
        locaware: t.value(la.total).item(),
        dice: t.value(dice).item(),
        ce: t.value(ce).item(),
        change,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn losses_are_permutation_invariant((labels, loc, dmg, perm) in case()) {
        let a = all_losses(&labels, &loc, &dmg);
        let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let b = all_losses(&pl, &permute(&loc, 1, &perm), &permute(&dmg, 5, &perm));
        prop_assert_eq!(a.locaware.to_bits(), b.locaware.to_bits());
        prop_assert_eq!(a.dice.to_bits(), b.dice.to_bits());
        prop_assert_eq!(a.ce.to_bits(), b.ce.to_bits());
        prop_assert_eq!(a.change.map(f64::to_bits), b.change.map(f64::to_bits));
    }

    #[test]
    fn losses_are_nonnegative_and_dice_bounded((labels, loc, dmg, _) in case()) {
        let v = all_losses(&labels, &loc, &dmg);
        prop_assert!(v.locaware >= 0.0 && v.ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&v.dice));
        prop_assert!(v.change.is_none_or(|c| c >= 0.0));
    }

    #[test]
    fn background_pixels_do_not_affect_change_loss(
        (labels, _, dmg, _) in case(),
        noise in prop::collection::vec(-50.0f64..50.0, 4 * 24),
    ) {
        let targets = LossTargets::from_labels(&labels, 1, 1, labels.len()).unwrap();
        prop_assume!(targets.foreground_count() > 0);
        let len = labels.len();
        let base = &dmg[..4 * len];
        let mut perturbed = base.to_vec();
        for ch in 0..4 {
            for (i, l) in labels.iter().enumerate().take(len) {
                if !(1..=4).contains(l) {
                    perturbed[ch * len + i] += noise[ch * len + i];
                }
            }
        }
        let eval = |v: &[f64]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(planes(v, 4), true);
            let (l, n) = change_head_loss(&mut t, x, &targets).unwrap();
            let value = t.value(l).item();
            let g = t.backward(l).unwrap().get(x).unwrap().clone();
            (value, n, g)
        };
        let (a, na, ga) = eval(base);
        let (b, nb, _) = eval(&perturbed);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(na, targets.foreground_count());
        prop_assert_eq!(na, nb);
        for ch in 0..4 {
            for (i, l) in labels.iter().enumerate().take(len) {
                if !(1..=4).contains(l) {
                    prop_assert_eq!(ga.data()[ch * len + i], 0.0);
                }
            }
        }
    }
}
