//! The two-image damage assessment network: a dilated residual backbone at
//! output stride 8 shared between the pre- and post-disaster images, ASPP,
//! a segmentation head (simple or encoder-decoder) and a change head on the
//! ASPP feature difference.

pub mod config;
mod forward;
mod params;
mod predict;

pub use config::{Fusion, LossMode, ModelConfig, SegHead, OUTPUT_STRIDE};
pub use forward::{check_pair_shape, forward_pair, ForwardOutputs, Graph};
pub use params::{build_model, is_buffer, Architecture, Binding, LayerSpec, ModelParams};
pub use predict::{predict_flat, predict_masks, Logits};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::{update_running, BatchStats, Mode, BN_MOMENTUM};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

/// Folds train-mode batch statistics into the running estimates.
pub fn apply_bn_stats<T: Real>(
    params: &mut ModelParams,
    stats: &[(String, BatchStats<T>)],
) -> Result<()> {
    let momentum = BN_MOMENTUM as f32;
    for (name, s) in stats {
        let cast = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        let s32 = BatchStats {
            mean: cast(&s.mean),
            var: cast(&s.var),
        };
        let mean_path = format!("{name}.running_mean");
        let var_path = format!("{name}.running_var");
        let mut mean = params
            .get(&mean_path)
            .ok_or_else(|| Error::Internal(format!("missing `{mean_path}`")))?
            .clone();
        let var = params
            .get_mut(&var_path)
            .ok_or_else(|| Error::Internal(format!("missing `{var_path}`")))?;
        update_running(mean.data_mut(), var.data_mut(), &s32, momentum);
        *params.get_mut(&mean_path).expect("checked above") = mean;
    }
    Ok(())
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct RescueNet {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ModelParams,
}

impl RescueNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_model(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Checks that `params` hold exactly the tensors `config` requires.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let reference = build_model(&config, 0)?;
        let missing: Vec<String> = reference
            .paths()
            .filter(|p| params.get(p).is_none())
            .cloned()
            .collect();
        let unexpected: Vec<String> = params
            .paths()
            .filter(|p| reference.get(p).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::IncompatibleCheckpoint {
                missing,
                unexpected,
            });
        }
        for (path, t) in reference.iter() {
            let got = params.get(path).expect("checked above");
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{path}` has shape {:?}, the configuration needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(RescueNet {
            config,
            arch,
            params,
        })
    }

    /// Eval-mode forward pass without gradient tracking.
    pub fn infer(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Logits<f32>> {
        let mut tape = Tape::new();
        let binding = Binding::new(&mut tape, &self.params, false);
        let pre = tape.constant(pre.clone());
        let post = tape.constant(post.clone());
        let out = forward_pair(
            &mut tape,
            &binding,
            &self.arch,
            &self.config,
            pre,
            post,
            Mode::Eval,
        )?;
        Ok(Logits::from_outputs(&tape, &out))
    }

    /// Combined masks for a batch of pairs, using the decision rule that
    /// matches the training objective.
    pub fn predict(
        &self,
        pre: &Tensor<f32>,
        post: &Tensor<f32>,
        fusion: Fusion,
    ) -> Result<Vec<Mask>> {
        let logits = self.infer(pre, post)?;
        self.decide(&logits, fusion)
    }

    pub fn decide(&self, logits: &Logits<f32>, fusion: Fusion) -> Result<Vec<Mask>> {
        if fusion == Fusion::ChangeOnly && !self.config.change_head_enabled {
            return Err(Error::Config(
                "fusion change_only needs a model with the change head enabled".into(),
            ));
        }
        match self.config.loss_mode {
            LossMode::Ce => predict_flat(logits),
            _ => predict_masks(logits, fusion),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn([n, 3, h, w], |_| r.next_f64() as f32)
    }

    fn train_forward(
        config: &ModelConfig,
        pre: &Tensor,
        post: &Tensor,
    ) -> (Tape, ForwardOutputs<f32>) {
        let params = build_model(config, 3).unwrap();
        let arch = Architecture::new(config).unwrap();
        let mut tape = Tape::new();
        let binding = Binding::new(&mut tape, &params, true);
        let a = tape.constant(pre.clone());
        let b = tape.constant(post.clone());
        let out = forward_pair(&mut tape, &binding, &arch, config, a, b, Mode::Train).unwrap();
        (tape, out)
    }

    #[test]
    fn output_shapes_both_heads() {
        for head in [SegHead::Simple, SegHead::EncoderDecoder] {
            let c = ModelConfig {
                seg_head: head,
                ..ModelConfig::default()
            };
            let x = image(2, 16, 24, 1);
            let (tape, out) = train_forward(&c, &x, &image(2, 16, 24, 2));
            assert_eq!(tape.shape(out.loc_logits_pre), &[2, 1, 16, 24]);
            assert_eq!(tape.shape(out.damage_logits_seg), &[2, 4, 16, 24]);
            assert_eq!(
                tape.shape(out.damage_logits_change.unwrap()),
                &[2, 4, 16, 24]
            );
            assert_eq!(tape.shape(out.backbone_out), &[4, 32, 2, 3]);
        }
    }

    #[test]
    fn identical_images_zero_difference() {
        let c = ModelConfig::default();
        let x = image(2, 16, 16, 5);
        let (tape, out) = train_forward(&c, &x, &x);
        assert!(tape
            .value(out.change_input)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let ch = tape.value(out.damage_logits_change.unwrap());
        let hw = 16 * 16;
        for plane in ch.data().chunks(hw) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let net = RescueNet::new(ModelConfig::default(), 0).unwrap();
        let x = image(1, 12, 16, 0);
        assert!(net.infer(&x, &x).is_err());
        assert!(net
            .infer(&image(1, 16, 16, 0), &image(1, 8, 16, 0))
            .is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = RescueNet::new(ModelConfig::default(), 11).unwrap();
        let (a, b) = (image(1, 16, 16, 1), image(1, 16, 16, 2));
        assert_eq!(net.infer(&a, &b).unwrap(), net.infer(&a, &b).unwrap());
    }

    #[test]
    fn incompatible_params_listed() {
        let full = build_model(&ModelConfig::default(), 0).unwrap();
        let c = ModelConfig {
            change_head_enabled: false,
            ..ModelConfig::default()
        };
        match RescueNet::from_params(c, full) {
            Err(Error::IncompatibleCheckpoint {
                unexpected,
                missing,
            }) => {
                assert!(missing.is_empty());
                assert!(unexpected.iter().all(|p| p.starts_with("change_head.")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn running_stats_move() {
        let c = ModelConfig::default();
        let x = image(2, 16, 16, 9);
        let (_, out) = train_forward(&c, &x, &image(2, 16, 16, 10));
        let mut p = build_model(&c, 3).unwrap();
        apply_bn_stats(&mut p, &out.bn_stats).unwrap();
        let rm = p.get("backbone.stem.0.bn.running_mean").unwrap();
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }
}
