//! Central-difference gradient checking in 64-bit precision, and the
//! randomized suite that covers every differentiable operation and loss.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::layers::{ConvGeom, Mode};
use crate::losses::{self, LossTargets, LossWeights};
use crate::model::{forward_pair, Architecture, Binding, ModelConfig, ModelParams};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Tolerance every op and loss must meet in the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for the scalar function `f` at `x`. Any error or non-finite value in `f`
/// yields `NaN`, which fails every tolerance comparison.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_inner(&f, x, h).unwrap_or(f64::NAN)
}

fn check_inner<F>(f: &F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads
        .take(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Result of one suite entry.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_error <= tol
    }
}

type Case = fn(&mut SplitMix64) -> f64;
type UnaryOp = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(lo, hi))
}

/// Values in `[lo, hi]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut SplitMix64, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.uniform(gap, hi);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_shape(rng: &mut SplitMix64, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(3)).collect()
}

/// Weighted sum of an op output, so that ops with constant sums (softmax)
/// still have informative gradients.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_unary_op(
    rng: &mut SplitMix64,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: Tensor<f64>,
) -> f64 {
    let out_shape = {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        match op(&mut t, v) {
            Ok(y) => t.shape(y).to_vec(),
            Err(_) => return f64::NAN,
        }
    };
    let w = rand_tensor(rng, &out_shape, -1.0, 1.0);
    finite_difference_check(
        |t, v| {
            let y = op(t, v)?;
            project(t, y, &w)
        },
        &x,
        DEFAULT_STEP,
    )
}

fn check_binary(rng: &mut SplitMix64, kind: crate::autodiff::BinaryKind) -> f64 {
    use crate::autodiff::BinaryKind;
    let rank = 1 + rng.below(3);
    let shape = small_shape(rng, rank);
    // Sometimes broadcast the second operand along a trailing suffix.
    let other: Vec<usize> = if rng.bernoulli(0.5) {
        shape[rng.below(shape.len())..].to_vec()
    } else {
        shape.clone()
    };
    let other = if other.is_empty() { vec![1] } else { other };
    let a = rand_tensor(rng, &shape, -2.0, 2.0);
    let b = if kind == BinaryKind::Div {
        away_from_zero(rng, &other, 0.5, 2.0)
    } else {
        rand_tensor(rng, &other, -2.0, 2.0)
    };
    let out = crate::tensor::broadcast_shape(&shape, &other).expect("suffix broadcasts");
    let w = rand_tensor(rng, &out, -1.0, 1.0);
    let wa = w.clone();
    let b2 = b.clone();
    let ea = finite_difference_check(
        move |t, v| {
            let c = t.constant(b2.clone());
            let y = t.binary(kind, v, c)?;
            project(t, y, &wa)
        },
        &a,
        DEFAULT_STEP,
    );
    let eb = finite_difference_check(
        |t, v| {
            let c = t.constant(a.clone());
            let y = t.binary(kind, c, v)?;
            project(t, y, &w)
        },
        &b,
        DEFAULT_STEP,
    );
    ea.max(eb)
}

fn case_add(rng: &mut SplitMix64) -> f64 {
    check_binary(rng, crate::autodiff::BinaryKind::Add)
}
fn case_sub(rng: &mut SplitMix64) -> f64 {
    check_binary(rng, crate::autodiff::BinaryKind::Sub)
}
fn case_mul(rng: &mut SplitMix64) -> f64 {
    check_binary(rng, crate::autodiff::BinaryKind::Mul)
}
fn case_div(rng: &mut SplitMix64) -> f64 {
    check_binary(rng, crate::autodiff::BinaryKind::Div)
}

fn case_neg(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    check_unary_op(rng, |t, v| Ok(t.neg(v)), x)
}

fn case_log(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    let x = rand_tensor(rng, &s, 0.2, 3.0);
    check_unary_op(rng, |t, v| Ok(t.log(v)), x)
}

fn case_exp(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    check_unary_op(rng, |t, v| Ok(t.exp(v)), x)
}

fn case_sigmoid(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    let x = rand_tensor(rng, &s, -4.0, 4.0);
    check_unary_op(rng, |t, v| Ok(t.sigmoid(v)), x)
}

fn case_relu(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    let x = away_from_zero(rng, &s, 1e-2, 2.0);
    check_unary_op(rng, |t, v| Ok(t.relu(v)), x)
}

fn case_clamp(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 2);
    // Values strictly inside or strictly outside the interval.
    let x = Tensor::from_fn(s, |_| {
        if rng.bernoulli(0.7) {
            rng.uniform(0.1, 0.9)
        } else {
            rng.uniform(1.1, 2.0)
        }
    });
    check_unary_op(rng, |t, v| Ok(t.clamp(v, 0.05, 0.95)), x)
}

fn case_softmax(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 3);
    let axis = rng.below(3);
    let x = rand_tensor(rng, &s, -3.0, 3.0);
    let ops: [UnaryOp; 3] = [
        |t, v| t.softmax(v, 0),
        |t, v| t.softmax(v, 1),
        |t, v| t.softmax(v, 2),
    ];
    check_unary_op(rng, ops[axis], x)
}

fn case_log_softmax(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 3);
    let axis = rng.below(3);
    let x = rand_tensor(rng, &s, -3.0, 3.0);
    let ops: [UnaryOp; 3] = [
        |t, v| t.log_softmax(v, 0),
        |t, v| t.log_softmax(v, 1),
        |t, v| t.log_softmax(v, 2),
    ];
    check_unary_op(rng, ops[axis], x)
}

fn case_matmul(rng: &mut SplitMix64) -> f64 {
    let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
    let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
    let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
    let (b2, w2) = (b.clone(), w.clone());
    let ea = finite_difference_check(
        move |t, v| {
            let c = t.constant(b2.clone());
            let y = t.matmul(v, c)?;
            project(t, y, &w2)
        },
        &a,
        DEFAULT_STEP,
    );
    let eb = finite_difference_check(
        |t, v| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, v)?;
            project(t, y, &w)
        },
        &b,
        DEFAULT_STEP,
    );
    ea.max(eb)
}

fn case_reductions(rng: &mut SplitMix64) -> f64 {
    let s = small_shape(rng, 3);
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    let e1 = finite_difference_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP);
    let e2 = finite_difference_check(|t, v| Ok(t.mean(v)), &x, DEFAULT_STEP);
    e1.max(e2)
}

fn case_shape_ops(rng: &mut SplitMix64) -> f64 {
    let (a, b, c) = (1 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3));
    let x = rand_tensor(rng, &[a, b, c], -2.0, 2.0);
    let start = rng.below(b - 1);
    let e_narrow = check_unary_op(
        rng,
        |t, v| {
            let n = t.narrow(v, 1, 0, 1)?;
            let m = t.narrow(v, 1, 1, 1)?;
            let j = t.concat(&[m, n, v], 1)?;
            t.reshape(j, vec![t.value(j).len()])
        },
        x.clone(),
    );
    let e_narrow2 = {
        let w = rand_tensor(rng, &[a, b - start, c], -1.0, 1.0);
        finite_difference_check(
            |t, v| {
                let n = t.narrow(v, 1, start, b - start)?;
                project(t, n, &w)
            },
            &x,
            DEFAULT_STEP,
        )
    };
    let small = rand_tensor(rng, &[1, c], -2.0, 2.0);
    let w = rand_tensor(rng, &[a, b, c], -1.0, 1.0);
    let e_expand = finite_difference_check(
        |t, v| {
            let y = t.expand(v, vec![a, b, c])?;
            project(t, y, &w)
        },
        &small,
        DEFAULT_STEP,
    );
    e_narrow.max(e_narrow2).max(e_expand)
}

fn case_conv2d(rng: &mut SplitMix64) -> f64 {
    let (n, c, o) = (1 + rng.below(2), 1 + rng.below(2), 1 + rng.below(2));
    let k = [1, 3][rng.below(2)];
    let geom = ConvGeom::new(1 + rng.below(2), 1 + rng.below(3), rng.below(3));
    let extent = geom.effective_extent(k);
    let h = extent.saturating_sub(2 * geom.padding).max(1) + rng.below(4);
    let w_ = extent.saturating_sub(2 * geom.padding).max(1) + rng.below(4);
    let x = rand_tensor(rng, &[n, c, h, w_], -1.0, 1.0);
    let wt = rand_tensor(rng, &[o, c, k, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[o], -1.0, 1.0);
    let (ho, wo) = match (geom.output_size(h, k), geom.output_size(w_, k)) {
        (Some(a), Some(b)) => (a, b),
        _ => return f64::NAN,
    };
    let proj = rand_tensor(rng, &[n, o, ho, wo], -1.0, 1.0);
    let (wt1, b1, p1) = (wt.clone(), b.clone(), proj.clone());
    let ex = finite_difference_check(
        move |t, v| {
            let w = t.constant(wt1.clone());
            let bb = t.constant(b1.clone());
            let y = t.conv2d(v, w, Some(bb), geom)?;
            project(t, y, &p1)
        },
        &x,
        DEFAULT_STEP,
    );
    let (x2, b2, p2) = (x.clone(), b.clone(), proj.clone());
    let ew = finite_difference_check(
        move |t, v| {
            let xx = t.constant(x2.clone());
            let bb = t.constant(b2.clone());
            let y = t.conv2d(xx, v, Some(bb), geom)?;
            project(t, y, &p2)
        },
        &wt,
        DEFAULT_STEP,
    );
    let eb = finite_difference_check(
        |t, v| {
            let xx = t.constant(x.clone());
            let w = t.constant(wt.clone());
            let y = t.conv2d(xx, w, Some(v), geom)?;
            project(t, y, &proj)
        },
        &b,
        DEFAULT_STEP,
    );
    ex.max(ew).max(eb)
}

fn case_batch_norm(rng: &mut SplitMix64) -> f64 {
    let (n, c, h, w) = (
        1 + rng.below(2),
        1 + rng.below(3),
        1 + rng.below(3),
        2 + rng.below(2),
    );
    let x = rand_tensor(rng, &[n, c, h, w], -2.0, 2.0);
    let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
    let beta = rand_tensor(rng, &[c], -1.0, 1.0);
    let rm = rand_tensor(rng, &[c], -0.5, 0.5);
    let rv = rand_tensor(rng, &[c], 0.5, 2.0);
    let proj = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let eps = crate::layers::BN_EPS;
    let train = |which: usize| {
        let (x, gamma, beta, proj) = (x.clone(), gamma.clone(), beta.clone(), proj.clone());
        let input = [&x, &gamma, &beta][which].clone();
        finite_difference_check(
            move |t, v| {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let xv = args[0].unwrap_or_else(|| t.constant(x.clone()));
                let gv = args[1].unwrap_or_else(|| t.constant(gamma.clone()));
                let bv = args[2].unwrap_or_else(|| t.constant(beta.clone()));
                let (y, _) = t.batch_norm_train(xv, gv, bv, eps)?;
                project(t, y, &proj)
            },
            &input,
            DEFAULT_STEP,
        )
    };
    let eval = |which: usize| {
        let (x, gamma, beta, proj) = (x.clone(), gamma.clone(), beta.clone(), proj.clone());
        let (rm, rv) = (rm.clone(), rv.clone());
        let input = [&x, &gamma, &beta][which].clone();
        finite_difference_check(
            move |t, v| {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let xv = args[0].unwrap_or_else(|| t.constant(x.clone()));
                let gv = args[1].unwrap_or_else(|| t.constant(gamma.clone()));
                let bv = args[2].unwrap_or_else(|| t.constant(beta.clone()));
                let y = t.batch_norm_eval(xv, gv, bv, rm.data(), rv.data(), eps)?;
                project(t, y, &proj)
            },
            &input,
            DEFAULT_STEP,
        )
    };
    (0..3)
        .map(train)
        .chain((0..3).map(eval))
        .fold(0.0, f64::max)
}

fn case_upsample(rng: &mut SplitMix64) -> f64 {
    let s = [
        1 + rng.below(2),
        1 + rng.below(2),
        1 + rng.below(3),
        1 + rng.below(3),
    ];
    let factor = 1 + rng.below(4);
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    let ops: [UnaryOp; 4] = [
        |t, v| t.upsample_bilinear(v, 1),
        |t, v| t.upsample_bilinear(v, 2),
        |t, v| t.upsample_bilinear(v, 3),
        |t, v| t.upsample_bilinear(v, 4),
    ];
    check_unary_op(rng, ops[factor - 1], x)
}

fn case_global_avg_pool(rng: &mut SplitMix64) -> f64 {
    let s = [
        1 + rng.below(2),
        1 + rng.below(3),
        1 + rng.below(4),
        1 + rng.below(4),
    ];
    let x = rand_tensor(rng, &s, -2.0, 2.0);
    check_unary_op(rng, |t, v| t.global_avg_pool(v), x)
}

/// Random combined label map `N x H x W` with values in {0..4} and a few
/// 255 (ignore) entries.
/// Random labels with at least one scored pixel.
fn rand_labels(rng: &mut SplitMix64, n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n * h * w)
        .map(|_| match rng.below(12) {
            0 => 255,
            v => (v % 5) as u8,
        })
        .collect();
    labels[0] = rng.below(5) as u8;
    labels
}

fn case_locaware(rng: &mut SplitMix64) -> f64 {
    let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let labels = rand_labels(rng, n, h, w);
    let targets = LossTargets::from_labels(&labels, n, h, w).expect("valid labels");
    let loc = rand_tensor(rng, &[n, 1, h, w], -3.0, 3.0);
    let dmg = rand_tensor(rng, &[n, 4, h, w], -3.0, 3.0);
    let (t1, d1) = (targets.clone(), dmg.clone());
    let e_loc = finite_difference_check(
        move |t, v| {
            let p = t.sigmoid(v);
            let d = t.constant(d1.clone());
            let q = t.softmax(d, 1)?;
            Ok(losses::locaware_loss(t, p, q, &t1)?.total)
        },
        &loc,
        DEFAULT_STEP,
    );
    let e_dmg = finite_difference_check(
        |t, v| {
            let l = t.constant(loc.clone());
            let p = t.sigmoid(l);
            let q = t.softmax(v, 1)?;
            Ok(losses::locaware_loss(t, p, q, &targets)?.total)
        },
        &dmg,
        DEFAULT_STEP,
    );
    e_loc.max(e_dmg)
}

fn case_dice(rng: &mut SplitMix64) -> f64 {
    let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let labels = rand_labels(rng, n, h, w);
    let targets = LossTargets::from_labels(&labels, n, h, w).expect("valid labels");
    let loc = rand_tensor(rng, &[n, 1, h, w], -3.0, 3.0);
    let smooth = [0.0, 1.0][rng.below(2)];
    finite_difference_check(
        |t, v| {
            let p = t.sigmoid(v);
            losses::dice_loss(t, p, &targets, smooth)
        },
        &loc,
        DEFAULT_STEP,
    )
}

fn case_plain_ce(rng: &mut SplitMix64) -> f64 {
    let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let labels = rand_labels(rng, n, h, w);
    let targets = LossTargets::from_labels(&labels, n, h, w).expect("valid labels");
    let logits = rand_tensor(rng, &[n, 5, h, w], -3.0, 3.0);
    finite_difference_check(
        |t, v| losses::plain_ce_loss(t, v, &targets),
        &logits,
        DEFAULT_STEP,
    )
}

fn case_change_head(rng: &mut SplitMix64) -> f64 {
    let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let labels = rand_labels(rng, n, h, w);
    let targets = LossTargets::from_labels(&labels, n, h, w).expect("valid labels");
    let logits = rand_tensor(rng, &[n, 4, h, w], -3.0, 3.0);
    finite_difference_check(
        |t, v| Ok(losses::change_head_loss(t, v, &targets)?.0),
        &logits,
        DEFAULT_STEP,
    )
}

/// Every differentiable op, in the order reported.
pub const OP_CASES: &[(&str, Case)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("div", case_div),
    ("neg", case_neg),
    ("log", case_log),
    ("exp", case_exp),
    ("sigmoid", case_sigmoid),
    ("relu", case_relu),
    ("clamp", case_clamp),
    ("softmax", case_softmax),
    ("log_softmax", case_log_softmax),
    ("matmul", case_matmul),
    ("sum_mean", case_reductions),
    ("narrow_concat_expand", case_shape_ops),
    ("conv2d", case_conv2d),
    ("batch_norm", case_batch_norm),
    ("upsample_bilinear", case_upsample),
    ("global_avg_pool", case_global_avg_pool),
];

/// Every loss, differentiated with respect to logits.
pub const LOSS_CASES: &[(&str, Case)] = &[
    ("locaware_loss", case_locaware),
    ("dice_loss", case_dice),
    ("plain_ce_loss", case_plain_ce),
    ("change_head_loss", case_change_head),
];

/// Runs `trials` randomized checks of every op and loss.
pub fn run_suite(trials: usize, seed: u64) -> Vec<CheckResult> {
    let root = SplitMix64::new(seed);
    OP_CASES
        .iter()
        .chain(LOSS_CASES)
        .enumerate()
        .map(|(i, &(name, case))| {
            let mut rng = root.derive(i as u64);
            let max_error = (0..trials).fold(0.0f64, |m, _| {
                let e = case(&mut rng);
                if m.is_nan() || e.is_nan() {
                    f64::NAN
                } else {
                    m.max(e)
                }
            });
            CheckResult {
                name,
                trials,
                max_error,
            }
        })
        .collect()
}

/// Path of the first convolution of the network.
pub const FIRST_CONV_WEIGHT: &str = "backbone.stem.0.conv.weight";

/// Tolerance of the end-to-end check.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Checks d(total loss)/d(first conv weight) of the full train-mode network
/// on a random batch of two `size x size` pairs, in 64-bit precision.
pub fn end_to_end_check(
    config: &ModelConfig,
    params: &ModelParams,
    size: usize,
    seed: u64,
) -> Result<f64> {
    let arch = Architecture::new(config)?;
    let mut rng = SplitMix64::new(seed);
    let (n, h, w) = (2, size, size);
    let pre = rand_tensor(&mut rng, &[n, 3, h, w], 0.0, 1.0);
    let post = rand_tensor(&mut rng, &[n, 3, h, w], 0.0, 1.0);
    let labels: Vec<u8> = (0..n * h * w).map(|_| rng.below(5) as u8).collect();
    let targets = LossTargets::from_labels(&labels, n, h, w)?;
    let weight = params
        .get(FIRST_CONV_WEIGHT)
        .map(|t| t.cast::<f64>())
        .ok_or_else(|| crate::Error::Internal(format!("no `{FIRST_CONV_WEIGHT}`")))?;
    let weights = LossWeights::default();
    Ok(finite_difference_check(
        |t, v| {
            let mut binding = Binding::new(t, params, false);
            binding.replace(FIRST_CONV_WEIGHT, v)?;
            let a = t.constant(pre.clone());
            let b = t.constant(post.clone());
            let out = forward_pair(t, &binding, &arch, config, a, b, Mode::Train)?;
            Ok(losses::total_loss(t, &out, &targets, config, &weights)?.total)
        },
        &weight,
        DEFAULT_STEP,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_within_tolerance() {
        let mut rng = SplitMix64::new(3);
        let x = rand_tensor(&mut rng, &[4], -2.0, 2.0);
        let e = finite_difference_check(
            |t, v| {
                let y = t.mul(v, v)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let mut rng = SplitMix64::new(4);
        let x = away_from_zero(&mut rng, &[6], 0.1, 2.0);
        let e = finite_difference_check(
            |t, v| {
                let y = t.relu(v);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let e = finite_difference_check(
            |t, _| {
                let c = t.constant(Tensor::from_f64([2], &[4.0, 5.0]).unwrap());
                Ok(t.sum(c))
            },
            &x,
            1e-5,
        );
        assert_eq!(e, 0.0);
    }

    #[test]
    fn failures_report_nan() {
        let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let e = finite_difference_check(|t, v| t.softmax(v, 3), &x, 1e-5);
        assert!(e.is_nan());
        let neg = Tensor::from_f64([2], &[-1.0, 2.0]).unwrap();
        let e = finite_difference_check(
            |t, v| {
                let y = t.log(v);
                Ok(t.sum(y))
            },
            &neg,
            1e-5,
        );
        assert!(e.is_nan());
    }

    #[test]
    fn suite_smoke() {
        for r in run_suite(5, 17) {
            assert!(r.passed(SUITE_TOLERANCE), "{}: {}", r.name, r.max_error);
        }
    }

    #[test]
    fn end_to_end_default_model() {
        let c = ModelConfig::default();
        let p = crate::model::build_model(&c, 2).unwrap();
        let e = end_to_end_check(&c, &p, 8, 5).unwrap();
        assert!(e <= END_TO_END_TOLERANCE, "{e}");
    }
}
