//! XView2 challenge metric: a pixel confusion matrix over {background, four
//! damage classes}, per-class and localization F1, their harmonic mean and
//! the weighted score `0.3 * F1_loc + 0.7 * HM`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, IGNORE, NUM_CLASSES};

pub const LOC_WEIGHT: f64 = 0.3;
pub const DAMAGE_WEIGHT: f64 = 0.7;
pub const NUM_DAMAGE_CLASSES: usize = NUM_CLASSES - 1;

/// Counts indexed `[ground truth][prediction]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one count per pixel whose ground truth is not 255 and whose
    /// `ignore` entry (if given) is false.
    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8], ignore: Option<&[bool]>) -> Result<()> {
        if gt.len() != pred.len() || ignore.is_some_and(|i| i.len() != gt.len()) {
            return Err(Error::ShapeMismatch {
                lhs: vec![gt.len()],
                rhs: vec![pred.len()],
            });
        }
        for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
            if g == IGNORE || ignore.is_some_and(|m| m[i]) {
                continue;
            }
            if g as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
                return Err(Error::InvalidInput(format!(
                    "class value out of range at pixel {i}: gt={g}, pred={p}"
                )));
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate_masks(&mut self, gt: &Mask, pred: &Mask) -> Result<()> {
        if gt.dims() != pred.dims() {
            return Err(Error::ShapeMismatch {
                lhs: vec![gt.height(), gt.width()],
                rhs: vec![pred.height(), pred.width()],
            });
        }
        self.accumulate(gt.data(), pred.data(), None)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// F1 of damage class `k` in 1..=4; 1.0 when the class is neither
    /// present nor predicted.
    pub fn class_f1(&self, k: usize) -> f64 {
        assert!(
            (1..NUM_CLASSES).contains(&k),
            "class {k} is not a damage class"
        );
        let tp = self.counts[k][k];
        let fp: u64 = (0..NUM_CLASSES)
            .filter(|&g| g != k)
            .map(|g| self.counts[g][k])
            .sum();
        let fn_: u64 = (0..NUM_CLASSES)
            .filter(|&p| p != k)
            .map(|p| self.counts[k][p])
            .sum();
        f1(tp, fp, fn_)
    }

    /// Binary F1 of building (classes 1..=4) vs background.
    pub fn loc_f1(&self) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                match (g > 0, p > 0) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fn_ += c,
                    (false, false) => {}
                }
            }
        }
        f1(tp, fp, fn_)
    }

    pub fn report(&self) -> EvalReport {
        let per_class = [1, 2, 3, 4].map(|k| self.class_f1(k));
        xview2_score(self.loc_f1(), per_class, self.total())
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// `n / sum(1 / f_k)`, or 0 when any `f_k` is 0.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Summary scores of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_loc: f64,
    pub f1_per_class: [f64; NUM_DAMAGE_CLASSES],
    pub harmonic_mean: f64,
    pub overall: f64,
    pub n_pixels: u64,
}

pub fn xview2_score(
    f1_loc: f64,
    f1_per_class: [f64; NUM_DAMAGE_CLASSES],
    n_pixels: u64,
) -> EvalReport {
    let hm = harmonic_mean(&f1_per_class);
    EvalReport {
        f1_loc,
        f1_per_class,
        harmonic_mean: hm,
        overall: overall_score(f1_loc, hm),
        n_pixels,
    }
}

pub fn overall_score(f1_loc: f64, harmonic_mean: f64) -> f64 {
    LOC_WEIGHT * f1_loc + DAMAGE_WEIGHT * harmonic_mean
}

#[derive(Serialize)]
struct FlatReport {
    f1_loc: f64,
    f1_damage_1: f64,
    f1_damage_2: f64,
    f1_damage_3: f64,
    f1_damage_4: f64,
    f1_harmonic: f64,
    score: f64,
    n_pixels: u64,
}

impl EvalReport {
    fn flat(&self) -> FlatReport {
        let [a, b, c, d] = self.f1_per_class;
        FlatReport {
            f1_loc: self.f1_loc,
            f1_damage_1: a,
            f1_damage_2: b,
            f1_damage_3: c,
            f1_damage_4: d,
            f1_harmonic: self.harmonic_mean,
            score: self.overall,
            n_pixels: self.n_pixels,
        }
    }

    /// Flat JSON object with keys `f1_loc`, `f1_damage_1..4`,
    /// `f1_harmonic`, `score`, `n_pixels`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.flat()).expect("report serializes") + "\n"
    }
}

/// One `key=value` pair per line, same keys as the JSON form.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "f1_loc={:.6}", self.f1_loc)?;
        for (k, v) in self.f1_per_class.iter().enumerate() {
            writeln!(f, "f1_damage_{}={v:.6}", k + 1)?;
        }
        writeln!(f, "f1_harmonic={:.6}", self.harmonic_mean)?;
        writeln!(f, "score={:.6}", self.overall)?;
        write!(f, "n_pixels={}", self.n_pixels)
    }
}

/// Micro-averaged report over aligned ground-truth and prediction masks.
pub fn evaluate_dataset<'a, G, P>(gt: G, pred: P) -> Result<EvalReport>
where
    G: IntoIterator<Item = &'a Mask>,
    P: IntoIterator<Item = &'a Mask>,
{
    let mut cm = ConfusionMatrix::new();
    let mut pred = pred.into_iter();
    let mut n = 0usize;
    for g in gt {
        let p = pred.next().ok_or_else(|| {
            Error::InvalidInput(format!("prediction stream ended after {n} masks"))
        })?;
        cm.accumulate_masks(g, p)?;
        n += 1;
    }
    if pred.next().is_some() {
        return Err(Error::InvalidInput(format!(
            "prediction stream is longer than the {n} ground-truth masks"
        )));
    }
    Ok(cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hand_example() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[0, 1, 1, 2], &[0, 1, 2, 2], None).unwrap();
        cm
    }

    #[test]
    fn hand_counts() {
        let cm = hand_example();
        let mut want = [[0u64; 5]; 5];
        want[0][0] = 1;
        want[1][1] = 1;
        want[1][2] = 1;
        want[2][2] = 1;
        assert_eq!(cm.counts, want);
        assert_eq!(cm.loc_f1(), 1.0);
    }

    #[test]
    fn hand_report() {
        let r = hand_example().report();
        assert_eq!(r.f1_per_class, [2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]);
        assert_abs_diff_eq!(r.harmonic_mean, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(r.overall, 0.86, epsilon = 1e-15);
        assert_eq!(r.n_pixels, 4);
    }

    #[test]
    fn f1_conventions() {
        let mut cm = ConfusionMatrix::new();
        // class 3: TP 2, FP 1, FN 1
        cm.accumulate(&[3, 3, 3, 1], &[3, 3, 1, 3], None).unwrap();
        assert_abs_diff_eq!(cm.class_f1(3), 4.0 / 6.0, epsilon = 1e-15);
        assert_eq!(cm.class_f1(2), 1.0);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[4, 4], &[0, 0], None).unwrap();
        assert_eq!(cm.class_f1(4), 0.0);
        assert_eq!(cm.loc_f1(), 0.0);
        assert_eq!(cm.report().harmonic_mean, 0.0);
    }

    #[test]
    fn ignored_pixels_skipped() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[255, 255], &[1, 2], None).unwrap();
        cm.accumulate(&[1, 2], &[1, 2], Some(&[true, true]))
            .unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.accumulate(&[5], &[0], None).is_err());
        assert!(cm.accumulate(&[0], &[7], None).is_err());
    }

    #[test]
    fn misaligned_streams() {
        let m = Mask::background(2, 2);
        assert!(evaluate_dataset([&m, &m], [&m]).is_err());
        assert!(evaluate_dataset([&m], [&m, &m]).is_err());
        assert_eq!(evaluate_dataset([&m], [&m]).unwrap().overall, 1.0);
    }

    #[test]
    fn report_formats() {
        let r = hand_example().report();
        let text = r.to_string();
        assert!(text.starts_with("f1_loc=1.000000\n"));
        assert!(text.contains("score=0.860000"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in [
            "f1_loc",
            "f1_damage_1",
            "f1_damage_2",
            "f1_damage_3",
            "f1_damage_4",
            "f1_harmonic",
            "score",
            "n_pixels",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["n_pixels"], 4);
    }
}
