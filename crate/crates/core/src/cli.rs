//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage, validation or I/O errors, 2 when an
//! internal invariant is violated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::io::{encode_ppm, load_masks, read_pgm, write_atomic};
use crate::data::{
    generate_dataset, load_dataset, save_dataset, validate_distribution, DomainShift,
    GeneratorConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SUITE_TOLERANCE};
use crate::metrics::ConfusionMatrix;
use crate::model::{Fusion, LossMode, ModelConfig, RescueNet, SegHead};
use crate::render::render_mask;
use crate::train::{
    evaluate, load_checkpoint, resolve_threads, run_ablations, save_checkpoint, LrSchedule,
    TrainConfig, TrainEvent, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rescuenet",
    version,
    about = "Building damage assessment from pre/post disaster image pairs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of scene pairs.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint on a dataset and score it.
    Eval(EvalArgs),
    /// Score externally produced masks against ground truth.
    Score(ScoreArgs),
    /// Render a mask as a color image.
    Render(RenderArgs),
    /// Finite-difference check of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Train and score every configuration of the ablation table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Probabilities of damage classes 1-4.
    #[arg(long, value_delimiter = ',')]
    pub class_dist: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub domain_shift: Option<DomainShift>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Model and optimizer flags shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Use a polynomial decay schedule with this power.
    #[arg(long)]
    pub poly_power: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[arg(long, value_enum, default_value_t = Fusion::MeanLogprob)]
    pub fusion: Fusion,
    /// Evaluation threads (overridden by RESCUENET_THREADS).
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl HyperArgs {
    fn train_config(&self, seed: u64, eval_every: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            crop: self.crop,
            learning_rate: self.lr,
            momentum: self.momentum,
            lr_schedule: match self.poly_power {
                Some(power) => LrSchedule::Poly { power },
                None => LrSchedule::Constant,
            },
            seed,
            eval_every,
            augment: !self.no_augment,
            fusion: self.fusion,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for periodic evaluation.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossMode::LocawareDice)]
    pub loss: LossMode,
    #[arg(long, value_enum, default_value_t = SegHead::EncoderDecoder)]
    pub seg_head: SegHead,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub change_head: Toggle,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint up to `--steps` total steps; its model and
    /// optimizer settings take precedence over the flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the fusion rule stored in the checkpoint.
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// JSON report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                EXIT_FAILURE
            } else {
                let _ = write!(out, "{}", e.render());
                EXIT_OK
            };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_internal() {
                EXIT_INTERNAL
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Score(a) => score(a, out),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Ablate(a) => ablate(a, out),
    }
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut config = GeneratorConfig {
        image_size: a.image_size,
        domain_shift: a.domain_shift,
        ..GeneratorConfig::default()
    };
    if let Some(p) = a.class_dist {
        validate_distribution(&p)?;
        config.class_distribution = p.try_into().expect("validated length");
    }
    config.validate()?;
    let pairs = generate_dataset(&config, a.count, a.seed)?;
    save_dataset(&pairs, &a.out)?;
    for p in &pairs {
        emit(
            out,
            format_args!(
                "scene={} seed={} buildings={}",
                p.scene_id,
                p.seed,
                p.labels.len()
            ),
        )?;
    }
    Ok(EXIT_OK)
}

fn load_nonempty(dir: &Path) -> Result<Vec<crate::data::ScenePair>> {
    let pairs = load_dataset(dir)?;
    if pairs.is_empty() {
        return Err(Error::file(dir, "dataset contains no scenes"));
    }
    Ok(pairs)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let pairs = load_nonempty(&a.data)?;
    let held_out = a.eval_data.as_deref().map(load_nonempty).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?)?;
            t.config.steps = a.hyper.steps;
            t
        }
        None => {
            let model = ModelConfig {
                base_channels: a.hyper.base_channels,
                seg_head: a.seg_head,
                change_head_enabled: a.change_head == Toggle::On,
                loss_mode: a.loss,
                ..ModelConfig::default()
            };
            model.validate()?;
            Trainer::new(model, a.hyper.train_config(a.seed, a.eval_every))?
        }
    };
    let threads = resolve_threads(a.hyper.jobs);
    let mut write_err = None;
    trainer.run(&pairs, held_out.as_deref(), threads, |event| {
        let line = match event {
            TrainEvent::Step(log) => log.line(),
            TrainEvent::Eval { step, report } => format!(
                "eval step={step} score={:.6} f1_loc={:.6} f1_harmonic={:.6}",
                report.overall, report.f1_loc, report.harmonic_mean
            ),
        };
        if let Err(e) = emit(out, line) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    emit(out, format_args!("checkpoint={}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let fusion = a.fusion.unwrap_or(ckpt.train_config.fusion);
    let net = RescueNet::from_params(ckpt.model_config, ckpt.params)?;
    if fusion == Fusion::ChangeOnly && !net.config.change_head_enabled {
        return Err(Error::Config(
            "fusion change_only needs a checkpoint with the change head enabled".into(),
        ));
    }
    let pairs = load_nonempty(&a.data)?;
    let report = evaluate(&net, &pairs, fusion, resolve_threads(a.jobs))?;
    write_atomic(&a.report, report.to_json().as_bytes())?;
    emit(out, report)?;
    Ok(EXIT_OK)
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let gt: BTreeMap<String, _> = load_masks(&a.gt)?.into_iter().collect();
    let pred: BTreeMap<String, _> = load_masks(&a.pred)?.into_iter().collect();
    if gt.is_empty() {
        return Err(Error::file(&a.gt, "no ground-truth masks found"));
    }
    let missing: Vec<&String> = gt.keys().filter(|k| !pred.contains_key(*k)).collect();
    let extra: Vec<&String> = pred.keys().filter(|k| !gt.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::InvalidInput(format!(
            "prediction and ground-truth scenes differ; missing predictions: {missing:?}, unmatched predictions: {extra:?}"
        )));
    }
    let mut cm = ConfusionMatrix::new();
    for (id, g) in &gt {
        let p = &pred[id];
        if p.dims() != g.dims() {
            return Err(Error::InvalidInput(format!(
                "scene `{id}`: prediction is {:?}, ground truth is {:?}",
                p.dims(),
                g.dims()
            )));
        }
        cm.accumulate_masks(g, p)?;
    }
    let report = cm.report();
    write_atomic(&a.report, report.to_json().as_bytes())?;
    emit(out, report)?;
    Ok(EXIT_OK)
}

fn render(a: RenderArgs) -> Result<i32> {
    let mask = read_pgm(&a.mask)?;
    write_atomic(&a.out, &encode_ppm(&render_mask(&mask)))?;
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let results = run_suite(a.trials, a.seed);
    let mut ok = true;
    for r in &results {
        let pass = r.passed(SUITE_TOLERANCE);
        ok &= pass;
        emit(
            out,
            format_args!(
                "op={} trials={} max_error={:.3e} {}",
                r.name,
                r.trials,
                r.max_error,
                if pass { "ok" } else { "FAIL" }
            ),
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let train = load_nonempty(&a.data)?;
    let held_out = load_nonempty(&a.eval_data)?;
    let base = ModelConfig {
        base_channels: a.hyper.base_channels,
        ..ModelConfig::default()
    };
    base.validate()?;
    let config = a.hyper.train_config(0, 0);
    config.validate()?;
    let mut write_err = None;
    let report = run_ablations(
        &train,
        &held_out,
        &base,
        &config,
        &a.seeds,
        resolve_threads(a.hyper.jobs),
        |label, seed, score| {
            if let Err(e) = emit(
                out,
                format_args!("run config=\"{label}\" seed={seed} score={score:.6}"),
            ) {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if let Some(path) = &a.report {
        write_atomic(path, report.to_json().as_bytes())?;
    }
    write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(EXIT_OK)
}
