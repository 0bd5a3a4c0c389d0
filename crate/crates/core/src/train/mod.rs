//! SGD with momentum, the deterministic training loop, sharded evaluation,
//! checkpoint IO and the ablation runner.

mod ablation;
mod checkpoint;

pub use ablation::{run_ablations, AblationReport, AblationRow, AblationSection, ABLATION_ROWS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{crop_batch, ScenePair};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{total_loss, LossTargets, LossValues, LossWeights};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::{
    apply_bn_stats, forward_pair, Binding, Fusion, ModelConfig, ModelParams, RescueNet,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Environment variable overriding the evaluation thread count.
pub const THREADS_ENV: &str = "RESCUENET_THREADS";

/// Learning-rate schedule over the configured number of steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - step / steps)^power`
    Poly { power: f64 },
}

/// Optimizer, batching and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Evaluate every `eval_every` steps (0 disables periodic evaluation).
    pub eval_every: u64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub fusion: Fusion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 4,
            crop: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            eval_every: 0,
            augment: true,
            fusion: Fusion::MeanLogprob,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of 8",
                self.crop
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power.is_finite() && power >= 0.0) {
                return Err(Error::Config(format!(
                    "poly power {power} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate used for the update of step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Poly { power } => {
                let frac = 1.0 - step as f64 / self.steps.max(1) as f64;
                self.learning_rate * frac.max(0.0).powf(power)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Per-path tensors such as gradients or momentum buffers.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

/// Zero momentum buffer for every trainable parameter.
pub fn zero_momentum(params: &ModelParams) -> TensorMap {
    params
        .trainable_paths()
        .map(|p| {
            (
                p.clone(),
                Tensor::zeros(params.get(p).expect("listed path").shape()),
            )
        })
        .collect()
}

/// `v <- momentum * v + g; p <- p - lr * v` for every trainable path
/// accepted by `trained`, in path order.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &TensorMap,
    momentum_buffers: &mut TensorMap,
    lr: f32,
    momentum: f32,
    trained: impl Fn(&str) -> bool,
) -> Result<()> {
    let paths: Vec<String> = params
        .trainable_paths()
        .filter(|p| trained(p))
        .cloned()
        .collect();
    for path in paths {
        let g = grads
            .get(&path)
            .ok_or_else(|| Error::MissingGradient(path.clone()))?;
        let p = params.get_mut(&path).expect("listed path");
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let v = momentum_buffers
            .entry(path)
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Loss terms of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub loss: LossValues,
}

impl StepLog {
    /// Stable single-line form `step=<n> loss=<f> ...`.
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} loss={:.6} ce={:.6} loc={:.6} damage={:.6} dice={:.6} change={:.6} lr={:.6}",
            self.step, l.total, l.ce, l.loc, l.damage, l.dice, l.change, self.lr
        )
    }
}

/// Progress notifications of [`Trainer::run`].
#[derive(Clone, Debug)]
pub enum TrainEvent {
    Step(StepLog),
    Eval { step: u64, report: EvalReport },
}

/// Optimizer state around a model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: RescueNet,
    pub config: TrainConfig,
    pub momentum: TensorMap,
    pub rng: SplitMix64,
    pub step: u64,
    pub weights: LossWeights,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = RescueNet::new(model, config.seed)?;
        let momentum = zero_momentum(&net.params);
        let rng = SplitMix64::new(config.seed).derive(BATCH_STREAM);
        Ok(Trainer {
            net,
            config,
            momentum,
            rng,
            step: 0,
            weights: LossWeights::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let net = RescueNet::from_params(ckpt.model_config, ckpt.params)?;
        let expected = zero_momentum(&net.params);
        if ckpt.momentum.keys().ne(expected.keys()) {
            return Err(Error::Checkpoint(
                "momentum buffers do not match the trainable parameters".into(),
            ));
        }
        Ok(Trainer {
            net,
            config: ckpt.train_config,
            momentum: ckpt.momentum,
            rng: SplitMix64::new(ckpt.rng_state),
            step: ckpt.step,
            weights: LossWeights::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.net.config.clone(),
            train_config: self.config.clone(),
            step: self.step,
            params: self.net.params.clone(),
            momentum: self.momentum.clone(),
            rng_state: self.rng.state(),
        }
    }

    /// One forward/backward/update on a freshly drawn batch.
    pub fn step(&mut self, pairs: &[ScenePair]) -> Result<StepLog> {
        let batch_seed = self.rng.next_u64();
        let batch = crop_batch(
            pairs,
            self.config.crop,
            self.config.batch,
            batch_seed,
            self.config.augment,
        )?;
        let targets = LossTargets::from_masks(&batch.masks)?;

        let mut tape = Tape::new();
        let binding = Binding::new(&mut tape, &self.net.params, true);
        let pre = tape.constant(batch.pre);
        let post = tape.constant(batch.post);
        let out = forward_pair(
            &mut tape,
            &binding,
            &self.net.arch,
            &self.net.config,
            pre,
            post,
            Mode::Train,
        )?;
        let loss = total_loss(&mut tape, &out, &targets, &self.net.config, &self.weights)?;
        let values = loss.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                batch_id: batch.scene_ids.join(","),
            });
        }

        let mut grads = tape.backward(loss.total)?;
        let grads: TensorMap = binding
            .vars()
            .filter_map(|(path, &v)| grads.take(v).map(|g| (path.clone(), g)))
            .collect();
        let lr = self.config.lr_at(self.step);
        let config = &self.net.config;
        sgd_step(
            &mut self.net.params,
            &grads,
            &mut self.momentum,
            lr as f32,
            self.config.momentum as f32,
            |p| config.is_trained(p),
        )?;
        apply_bn_stats(&mut self.net.params, &out.bn_stats)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: values,
        })
    }

    /// Trains until `config.steps` steps are done, evaluating on `held_out`
    /// every `eval_every` steps and after the last one.
    pub fn run(
        &mut self,
        pairs: &[ScenePair],
        held_out: Option<&[ScenePair]>,
        threads: usize,
        mut observer: impl FnMut(&TrainEvent),
    ) -> Result<()> {
        self.run_until(self.config.steps, pairs, held_out, threads, &mut observer)
    }

    /// Like [`Trainer::run`] but stops after step `until`.
    pub fn run_until(
        &mut self,
        until: u64,
        pairs: &[ScenePair],
        held_out: Option<&[ScenePair]>,
        threads: usize,
        mut observer: impl FnMut(&TrainEvent),
    ) -> Result<()> {
        let until = until.min(self.config.steps);
        while self.step < until {
            let log = self.step(pairs)?;
            observer(&TrainEvent::Step(log));
            let last = self.step == self.config.steps;
            let periodic = self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every);
            if let Some(eval) = held_out {
                if periodic || last {
                    let report = evaluate(&self.net, eval, self.config.fusion, threads)?;
                    observer(&TrainEvent::Eval {
                        step: self.step,
                        report,
                    });
                }
            }
        }
        Ok(())
    }
}

const BATCH_STREAM: u64 = 0xba7c;

/// Thread count from [`THREADS_ENV`], else `jobs`, else 1.
pub fn resolve_threads(jobs: Option<usize>) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .or(jobs)
        .unwrap_or(1)
        .max(1)
}

/// Confusion matrix of `net` over whole scenes, one scene per forward pass.
pub fn confusion(net: &RescueNet, pairs: &[ScenePair], fusion: Fusion) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for p in pairs {
        let (h, w) = p.pre.dims();
        let pre = p.pre.to_tensor().reshape([1, 3, h, w])?;
        let post = p.post.to_tensor().reshape([1, 3, h, w])?;
        let pred = net.predict(&pre, &post, fusion)?;
        cm.accumulate_masks(&p.mask, &pred[0])?;
    }
    Ok(cm)
}

/// Micro-averaged report over `pairs`, sharded across `threads` workers.
/// The result does not depend on the thread count.
pub fn evaluate(
    net: &RescueNet,
    pairs: &[ScenePair],
    fusion: Fusion,
    threads: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no scenes to evaluate".into()));
    }
    let threads = threads.clamp(1, pairs.len());
    if threads == 1 {
        return Ok(confusion(net, pairs, fusion)?.report());
    }
    let chunk = pairs.len().div_ceil(threads);
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|shard| s.spawn(move || confusion(net, shard, fusion)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Internal("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut cm = ConfusionMatrix::new();
    for part in parts {
        cm.merge(&part?);
    }
    Ok(cm.report())
}
