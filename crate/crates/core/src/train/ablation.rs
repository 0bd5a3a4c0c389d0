use std::fmt;

use serde::Serialize;

use super::{evaluate, TrainConfig, Trainer};
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::model::{LossMode, ModelConfig, SegHead};

/// Group of rows varying one design axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSection {
    LossFunction,
    SegmentationHead,
    ChangeHead,
}

impl AblationSection {
    pub fn title(self) -> &'static str {
        match self {
            AblationSection::LossFunction => "Loss Function",
            AblationSection::SegmentationHead => "Segmentation Head Architecture",
            AblationSection::ChangeHead => "Change Detection Head",
        }
    }
}

/// Row label, section and the deviation from the full model
/// (locaware-dice, encoder-decoder, change head on).
pub const ABLATION_ROWS: [(AblationSection, &str, LossMode, SegHead, bool); 7] = [
    (
        AblationSection::LossFunction,
        "Cross-Entropy Loss",
        LossMode::Ce,
        SegHead::EncoderDecoder,
        true,
    ),
    (
        AblationSection::LossFunction,
        "Localization Aware Loss",
        LossMode::Locaware,
        SegHead::EncoderDecoder,
        true,
    ),
    (
        AblationSection::LossFunction,
        "Localization Aware Loss + Dice Loss",
        LossMode::LocawareDice,
        SegHead::EncoderDecoder,
        true,
    ),
    (
        AblationSection::SegmentationHead,
        "Simple (Convolution+Upscaling)",
        LossMode::LocawareDice,
        SegHead::Simple,
        true,
    ),
    (
        AblationSection::SegmentationHead,
        "Encoder-Decoder",
        LossMode::LocawareDice,
        SegHead::EncoderDecoder,
        true,
    ),
    (
        AblationSection::ChangeHead,
        "Without change detection head",
        LossMode::LocawareDice,
        SegHead::EncoderDecoder,
        false,
    ),
    (
        AblationSection::ChangeHead,
        "With change detection head",
        LossMode::LocawareDice,
        SegHead::EncoderDecoder,
        true,
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub section: AblationSection,
    pub label: String,
    pub loss_mode: LossMode,
    pub seg_head: SegHead,
    pub change_head: bool,
    /// Held-out score for each seed, in seed order.
    pub scores: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(30);
        let mut section = None;
        writeln!(f, "{:<width$}  Score", "Configuration")?;
        for r in &self.rows {
            if section != Some(r.section) {
                writeln!(f, "-- {} --", r.section.title())?;
                section = Some(r.section);
            }
            writeln!(f, "{:<width$}  {:.4}", r.label, r.median)?;
        }
        Ok(())
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains every row of the ablation table once per seed on `train` and
/// scores it on `held_out`. Rows describing the same configuration share
/// their runs.
pub fn run_ablations(
    train: &[ScenePair],
    held_out: &[ScenePair],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
    threads: usize,
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut done: Vec<(ModelConfig, Vec<f64>)> = Vec::new();
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (section, label, loss_mode, seg_head, change_head) in ABLATION_ROWS {
        let model = ModelConfig {
            loss_mode,
            seg_head,
            change_head_enabled: change_head,
            ..base_model.clone()
        };
        let scores = match done.iter().find(|(m, _)| *m == model) {
            Some((_, s)) => s.clone(),
            None => {
                let mut scores = Vec::with_capacity(seeds.len());
                for &seed in seeds {
                    let config = TrainConfig {
                        seed,
                        ..base_train.clone()
                    };
                    let mut trainer = Trainer::new(model.clone(), config.clone())?;
                    trainer.run(train, None, threads, |_| {})?;
                    let report = evaluate(&trainer.net, held_out, config.fusion, threads)?;
                    progress(label, seed, report.overall);
                    scores.push(report.overall);
                }
                done.push((model, scores.clone()));
                scores
            }
        };
        rows.push(AblationRow {
            section,
            label: label.to_string(),
            loss_mode,
            seg_head,
            change_head,
            median: median(&scores),
            scores,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn seven_rows_in_table_order() {
        let g = GeneratorConfig {
            image_size: 16,
            buildings_per_scene: (1, 2),
            building_size: (4, 6),
            ..GeneratorConfig::default()
        };
        let pairs = generate_dataset(&g, 2, 1).unwrap();
        let t = TrainConfig {
            steps: 1,
            batch: 2,
            crop: 16,
            ..TrainConfig::default()
        };
        let mut runs = 0;
        let report = run_ablations(
            &pairs,
            &pairs,
            &ModelConfig::default(),
            &t,
            &[5],
            1,
            |_, _, _| runs += 1,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 7);
        assert_eq!(runs, 5);
        assert_eq!(report.rows[2].label, "Localization Aware Loss + Dice Loss");
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.median));
        }
        assert_eq!(report.rows[2].scores, report.rows[6].scores);
        let text = report.to_string();
        assert!(text.contains("-- Change Detection Head --"));
    }
}
