//! Training objectives: binary cross-entropy for localization, the
//! localization-aware loss (BCE everywhere plus categorical cross-entropy on
//! building pixels only), Dice, flat 5-way cross-entropy, the change-head
//! loss, and their combination per [`LossMode`].
//!
//! Every term is a mean over the pixels that contribute to it. Sums add
//! elements in sorted order, so shuffling pixels of predictions and targets
//! together leaves each loss bit-for-bit unchanged.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{Mask, IGNORE, NUM_CLASSES};
use crate::model::{ForwardOutputs, LossMode, ModelConfig};
use crate::tensor::{Real, Tensor};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Default Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-pixel supervision for an `N x H x W` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Building footprint.
    pub loc: Vec<bool>,
    /// Zero-based damage class, present exactly on footprint pixels.
    pub damage: Vec<Option<u8>>,
    pub ignore: Vec<bool>,
}

impl LossTargets {
    pub fn new(
        (n, h, w): (usize, usize, usize),
        loc: Vec<bool>,
        damage: Vec<Option<u8>>,
        ignore: Vec<bool>,
    ) -> Result<Self> {
        let len = n * h * w;
        if loc.len() != len || damage.len() != len || ignore.len() != len {
            return Err(Error::InvalidShape {
                shape: vec![n, h, w],
                reason: "target maps have inconsistent lengths".into(),
            });
        }
        for (i, (&l, d)) in loc.iter().zip(&damage).enumerate() {
            match (l, d) {
                (false, Some(_)) => {
                    return Err(Error::InvalidInput(format!(
                        "damage target on background pixel {i}"
                    )))
                }
                (true, None) => {
                    return Err(Error::InvalidInput(format!(
                        "building pixel {i} has no damage target"
                    )))
                }
                (true, Some(c)) if *c as usize >= NUM_CLASSES - 1 => {
                    return Err(Error::InvalidInput(format!(
                        "damage class {c} out of range at pixel {i}"
                    )))
                }
                _ => {}
            }
        }
        Ok(LossTargets {
            n,
            h,
            w,
            loc,
            damage,
            ignore,
        })
    }

    /// From combined labels: 0 background, 1..=4 damage class, 255 ignored.
    pub fn from_labels(labels: &[u8], n: usize, h: usize, w: usize) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::InvalidShape {
                shape: vec![n, h, w],
                reason: format!("{} labels given", labels.len()),
            });
        }
        let mut loc = Vec::with_capacity(labels.len());
        let mut damage = Vec::with_capacity(labels.len());
        let mut ignore = Vec::with_capacity(labels.len());
        for &v in labels {
            match v {
                IGNORE => {
                    loc.push(false);
                    damage.push(None);
                    ignore.push(true);
                }
                0 => {
                    loc.push(false);
                    damage.push(None);
                    ignore.push(false);
                }
                1..=4 => {
                    loc.push(true);
                    damage.push(Some(v - 1));
                    ignore.push(false);
                }
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "label {v} is not in {{0..4, 255}}"
                    )))
                }
            }
        }
        Self::new((n, h, w), loc, damage, ignore)
    }

    pub fn from_masks(masks: &[Mask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidInput("no masks given".into()))?;
        let (h, w) = first.dims();
        let mut labels = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dims() != (h, w) {
                return Err(Error::ShapeMismatch {
                    lhs: vec![h, w],
                    rhs: vec![m.height(), m.width()],
                });
            }
            labels.extend_from_slice(m.data());
        }
        Self::from_labels(&labels, masks.len(), h, w)
    }

    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    /// Non-ignored pixels.
    pub fn valid_count(&self) -> usize {
        self.ignore.iter().filter(|&&i| !i).count()
    }

    /// Non-ignored building pixels.
    pub fn foreground_count(&self) -> usize {
        self.loc
            .iter()
            .zip(&self.ignore)
            .filter(|(&l, &i)| l && !i)
            .count()
    }

    /// `N x 1 x H x W` indicator of `pred(loc, ignore)`.
    fn indicator<T: Real>(&self, pred: impl Fn(bool, bool) -> bool) -> Tensor<T> {
        let data = self
            .loc
            .iter()
            .zip(&self.ignore)
            .map(|(&l, &i)| if pred(l, i) { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.n, 1, self.h, self.w], data).expect("consistent dims")
    }

    /// `N x C x H x W` one-hot over `C` channels; `class(p)` picks the hot
    /// channel of pixel `p`, `None` leaves the pixel all zero.
    fn one_hot<T: Real>(&self, c: usize, class: impl Fn(usize) -> Option<usize>) -> Tensor<T> {
        let hw = self.h * self.w;
        let mut data = vec![T::zero(); self.n * c * hw];
        for p in 0..self.len() {
            if let Some(k) = class(p) {
                let (img, pix) = (p / hw, p % hw);
                data[(img * c + k) * hw + pix] = T::one();
            }
        }
        Tensor::new(vec![self.n, c, self.h, self.w], data).expect("consistent dims")
    }

    fn check_shape<T: Real>(&self, tape: &Tape<T>, v: Var, channels: usize) -> Result<()> {
        let want = [self.n, channels, self.h, self.w];
        if tape.shape(v) != want {
            return Err(Error::ShapeMismatch {
                lhs: tape.shape(v).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }
}

fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count fits")
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// `-sum(weights * log(clamp(p))) / denom`
fn weighted_nll<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    weights: Tensor<T>,
    denom: usize,
) -> Result<Var> {
    let eps = T::from_f64_lossy(PROB_EPS);
    let pc = tape.clamp(p, eps, T::one() - eps);
    let lp = tape.log(pc);
    let wv = tape.constant(weights);
    let prod = tape.mul(lp, wv)?;
    let s = tape.sum(prod);
    Ok(tape.mul_scalar(s, -T::one() / count::<T>(denom)))
}

/// Binary cross-entropy of building probabilities `p: N x 1 x H x W`, mean
/// over non-ignored pixels.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, p: Var, targets: &LossTargets) -> Result<Var> {
    targets.check_shape(tape, p, 1)?;
    let valid = targets.valid_count();
    if valid == 0 {
        return Err(Error::EmptyLoss("every pixel is ignored".into()));
    }
    let eps = T::from_f64_lossy(PROB_EPS);
    let pc = tape.clamp(p, eps, T::one() - eps);
    let one_minus = {
        let neg = tape.neg(pc);
        tape.add_scalar(neg, T::one())
    };
    let pos = tape.log(pc);
    let neg = tape.log(one_minus);
    let y = tape.constant(targets.indicator(|l, i| l && !i));
    let b = tape.constant(targets.indicator(|l, i| !l && !i));
    let a = tape.mul(pos, y)?;
    let c = tape.mul(neg, b)?;
    let both = tape.add(a, c)?;
    let s = tape.sum(both);
    Ok(tape.mul_scalar(s, -T::one() / count::<T>(valid)))
}

/// Terms of [`locaware_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LocawareTerms {
    pub total: Var,
    /// BCE over non-ignored pixels.
    pub loc: Var,
    /// Categorical cross-entropy over non-ignored building pixels; exactly 0
    /// when there are none.
    pub damage: Var,
    pub loc_pixels: usize,
    pub damage_pixels: usize,
}

/// Localization-aware loss on building probabilities `p: N x 1 x H x W` and
/// damage probabilities `q: N x C x H x W`.
pub fn locaware_loss<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    q: Var,
    targets: &LossTargets,
) -> Result<LocawareTerms> {
    let c = tape.shape(q).get(1).copied().unwrap_or(0);
    targets.check_shape(tape, q, c)?;
    let loc = bce_loss(tape, p, targets)?;
    let fg = targets.foreground_count();
    let damage = if fg == 0 {
        zero(tape)
    } else {
        let onehot = targets.one_hot(c, |i| {
            (!targets.ignore[i])
                .then_some(targets.damage[i])
                .flatten()
                .map(usize::from)
        });
        weighted_nll(tape, q, onehot, fg)?
    };
    let total = tape.add(loc, damage)?;
    Ok(LocawareTerms {
        total,
        loc,
        damage,
        loc_pixels: targets.valid_count(),
        damage_pixels: fg,
    })
}

/// `1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s)` over non-ignored pixels.
pub fn dice_loss<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    targets: &LossTargets,
    smooth: f64,
) -> Result<Var> {
    targets.check_shape(tape, p, 1)?;
    if smooth.is_nan() || smooth < 0.0 {
        return Err(Error::InvalidInput(format!(
            "dice smoothing {smooth} is negative"
        )));
    }
    let s = T::from_f64_lossy(smooth);
    let valid = tape.constant(targets.indicator(|_, i| !i));
    let y = targets.indicator::<T>(|l, i| l && !i);
    let sum_y = y.sum();
    let y = tape.constant(y);
    let pv = tape.mul(p, valid)?;
    let inter = {
        let py = tape.mul(pv, y)?;
        tape.sum(py)
    };
    let sum_p = tape.sum(pv);
    let den = tape.add_scalar(sum_p, sum_y + s);
    if tape.value(den).item() == T::zero() {
        return Err(Error::EmptyLoss(
            "Dice of two empty masks without smoothing is undefined".into(),
        ));
    }
    let num = {
        let twice = tape.mul_scalar(inter, T::from_f64_lossy(2.0));
        tape.add_scalar(twice, s)
    };
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean softmax cross-entropy of 5-way logits `N x 5 x H x W` (background
/// plus four damage classes) over non-ignored pixels.
pub fn plain_ce_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &LossTargets,
) -> Result<Var> {
    targets.check_shape(tape, logits, NUM_CLASSES)?;
    let valid = targets.valid_count();
    if valid == 0 {
        return Err(Error::EmptyLoss("every pixel is ignored".into()));
    }
    let onehot = targets.one_hot(NUM_CLASSES, |i| {
        if targets.ignore[i] {
            None
        } else {
            Some(targets.damage[i].map_or(0, |d| d as usize + 1))
        }
    });
    nll_from_logits(tape, logits, onehot, valid)
}

fn nll_from_logits<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    onehot: Tensor<T>,
    denom: usize,
) -> Result<Var> {
    let ls = tape.log_softmax(logits, 1)?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum(picked);
    Ok(tape.mul_scalar(s, -T::one() / count::<T>(denom)))
}

/// Cross-entropy of change-head logits `N x C x H x W` over non-ignored
/// building pixels. Returns the loss and the number of contributing pixels;
/// with none, the loss is exactly 0.
pub fn change_head_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &LossTargets,
) -> Result<(Var, usize)> {
    let c = tape.shape(logits).get(1).copied().unwrap_or(0);
    targets.check_shape(tape, logits, c)?;
    let fg = targets.foreground_count();
    if fg == 0 {
        return Ok((zero(tape), 0));
    }
    let onehot = targets.one_hot(c, |i| {
        (!targets.ignore[i])
            .then_some(targets.damage[i])
            .flatten()
            .map(usize::from)
    });
    Ok((nll_from_logits(tape, logits, onehot, fg)?, fg))
}

/// Relative weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub change: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 1.0,
            change: 1.0,
            dice_smooth: DICE_SMOOTH,
        }
    }
}

/// Pixels contributing to each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub valid: usize,
    pub foreground: usize,
    pub change: usize,
}

/// Terms of the combined objective. `total = ce + loc + damage +
/// w_dice * dice + w_change * change`; terms unused by the loss mode are 0.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub ce_term: Var,
    pub loc_term: Var,
    pub damage_term: Var,
    pub dice_term: Var,
    pub change_term: Var,
    pub counts: PixelCounts,
}

/// Scalar values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub loc: f64,
    pub damage: f64,
    pub dice: f64,
    pub change: f64,
}

impl LossBreakdown {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossValues {
            total: v(self.total),
            ce: v(self.ce_term),
            loc: v(self.loc_term),
            damage: v(self.damage_term),
            dice: v(self.dice_term),
            change: v(self.change_term),
        }
    }
}

/// Flat 5-way logits `[-loc, damage]`: the background logit is the negated
/// building logit.
pub fn flat_logits<T: Real>(tape: &mut Tape<T>, loc: Var, damage: Var) -> Result<Var> {
    let bg = tape.neg(loc);
    tape.concat(&[bg, damage], 1)
}

/// The objective selected by `config.loss_mode`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs<T>,
    targets: &LossTargets,
    config: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut counts = PixelCounts {
        valid: targets.valid_count(),
        foreground: targets.foreground_count(),
        change: 0,
    };
    let mut ce_term = zero(tape);
    let mut loc_term = zero(tape);
    let mut damage_term = zero(tape);
    let mut dice_term = zero(tape);
    let mut change_term = zero(tape);

    match config.loss_mode {
        LossMode::Ce => {
            let logits = flat_logits(tape, out.loc_logits_post, out.damage_logits_seg)?;
            ce_term = plain_ce_loss(tape, logits, targets)?;
        }
        LossMode::Locaware | LossMode::LocawareDice => {
            let p_post = tape.sigmoid(out.loc_logits_post);
            let p_pre = tape.sigmoid(out.loc_logits_pre);
            let q = tape.softmax(out.damage_logits_seg, 1)?;
            let post = locaware_loss(tape, p_post, q, targets)?;
            let pre = bce_loss(tape, p_pre, targets)?;
            loc_term = tape.add(post.loc, pre)?;
            damage_term = post.damage;
            if let Some(ch) = out.damage_logits_change {
                let (l, n) = change_head_loss(tape, ch, targets)?;
                change_term = l;
                counts.change = n;
            }
            if config.loss_mode == LossMode::LocawareDice {
                let a = dice_loss(tape, p_pre, targets, weights.dice_smooth)?;
                let b = dice_loss(tape, p_post, targets, weights.dice_smooth)?;
                dice_term = tape.add(a, b)?;
            }
        }
    }

    let mut total = tape.add(ce_term, loc_term)?;
    total = tape.add(total, damage_term)?;
    let d = tape.mul_scalar(dice_term, T::from_f64_lossy(weights.dice));
    total = tape.add(total, d)?;
    let c = tape.mul_scalar(change_term, T::from_f64_lossy(weights.change));
    total = tape.add(total, c)?;
    Ok(LossBreakdown {
        total,
        ce_term,
        loc_term,
        damage_term,
        dice_term,
        change_term,
        counts,
    })
}
