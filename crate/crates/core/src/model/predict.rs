use super::config::Fusion;
use crate::autodiff::ops::sigmoid;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mask::{Mask, BACKGROUND};
use crate::tensor::{Real, Tensor};

use super::forward::ForwardOutputs;

/// Head outputs detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T: Real = f32> {
    /// `N x 1 x H x W`
    pub loc_pre: Tensor<T>,
    pub loc_post: Tensor<T>,
    /// `N x C x H x W`
    pub damage_seg: Tensor<T>,
    pub damage_change: Option<Tensor<T>>,
}

impl<T: Real> Logits<T> {
    pub fn from_outputs(tape: &Tape<T>, out: &ForwardOutputs<T>) -> Self {
        Logits {
            loc_pre: tape.value(out.loc_logits_pre).clone(),
            loc_post: tape.value(out.loc_logits_post).clone(),
            damage_seg: tape.value(out.damage_logits_seg).clone(),
            damage_change: out.damage_logits_change.map(|v| tape.value(v).clone()),
        }
    }

    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (n, _, h, w) = self.loc_pre.dims4()?;
        let (dn, c, dh, dw) = self.damage_seg.dims4()?;
        if (dn, dh, dw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                lhs: self.loc_pre.shape().to_vec(),
                rhs: self.damage_seg.shape().to_vec(),
            });
        }
        if let Some(ch) = &self.damage_change {
            if ch.shape() != self.damage_seg.shape() {
                return Err(Error::ShapeMismatch {
                    lhs: self.damage_seg.shape().to_vec(),
                    rhs: ch.shape().to_vec(),
                });
            }
        }
        Ok((n, c, h, w))
    }
}

/// Log-softmax over `c` values spaced `stride` apart.
fn log_softmax_strided<T: Real>(src: &[T], base: usize, stride: usize, c: usize, out: &mut [T]) {
    let max = (0..c)
        .map(|k| src[base + k * stride])
        .fold(T::neg_infinity(), T::max);
    let lse = (0..c)
        .map(|k| (src[base + k * stride] - max).exp())
        .fold(T::zero(), |a, b| a + b)
        .ln()
        + max;
    for (k, o) in out.iter_mut().enumerate().take(c) {
        *o = src[base + k * stride] - lse;
    }
}

/// First index of the maximum.
fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One combined mask per batch item. Footprint is
/// `sigmoid(loc_pre) >= 0.5`; footprint pixels take `1 + argmax` of the fused
/// damage log-probabilities, all other pixels are background.
pub fn predict_masks<T: Real>(logits: &Logits<T>, fusion: Fusion) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims()?;
    let (seg, change) = match (fusion, &logits.damage_change) {
        (Fusion::ChangeOnly, None) => {
            return Err(Error::Config(
                "fusion change_only needs a model with the change head enabled".into(),
            ))
        }
        (Fusion::ChangeOnly, Some(ch)) => (None, Some(ch)),
        (Fusion::SegOnly, _) | (Fusion::MeanLogprob, None) => (Some(&logits.damage_seg), None),
        (Fusion::MeanLogprob, Some(ch)) => (Some(&logits.damage_seg), Some(ch)),
    };
    let hw = h * w;
    let half = T::from_f64_lossy(0.5);
    let mut fused = vec![T::zero(); c];
    let mut tmp = vec![T::zero(); c];
    let mut masks = Vec::with_capacity(n);
    for img in 0..n {
        let loc = &logits.loc_pre.data()[img * hw..(img + 1) * hw];
        let mut data = vec![BACKGROUND; hw];
        for (p, label) in data.iter_mut().enumerate() {
            if sigmoid(loc[p]) < half {
                continue;
            }
            fused.iter_mut().for_each(|v| *v = T::zero());
            let mut heads = 0;
            for t in [seg, change].into_iter().flatten() {
                log_softmax_strided(t.data(), img * c * hw + p, hw, c, &mut tmp);
                fused.iter_mut().zip(&tmp).for_each(|(f, &v)| *f = *f + v);
                heads += 1;
            }
            if heads == 2 {
                fused.iter_mut().for_each(|v| *v = *v * half);
            }
            *label = (1 + argmax(&fused)) as u8;
        }
        masks.push(Mask::new(h, w, data)?);
    }
    Ok(masks)
}

/// Prediction of a model trained with flat cross-entropy: argmax over the
/// 5-way logits `[-loc_post, damage_seg]` of the post image.
pub fn predict_flat<T: Real>(logits: &Logits<T>) -> Result<Vec<Mask>> {
    let (n, c, h, w) = logits.dims()?;
    let hw = h * w;
    let mut scores = vec![T::zero(); c + 1];
    let mut masks = Vec::with_capacity(n);
    for img in 0..n {
        let loc = &logits.loc_post.data()[img * hw..(img + 1) * hw];
        let dmg = &logits.damage_seg.data()[img * c * hw..(img + 1) * c * hw];
        let data = (0..hw)
            .map(|p| {
                scores[0] = -loc[p];
                for k in 0..c {
                    scores[k + 1] = dmg[k * hw + p];
                }
                argmax(&scores) as u8
            })
            .collect();
        masks.push(Mask::new(h, w, data)?);
    }
    Ok(masks)
}
