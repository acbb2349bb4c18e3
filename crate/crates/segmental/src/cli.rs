//! Command-line surface.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use segmental_core::encoder::{EncoderConfig, Subsample};
use segmental_core::gradcheck::{self, Component};
use segmental_core::lattice::RepeatPolicy;
use segmental_core::losses::edit_distance;
use segmental_core::model::{DecodeKind, EncoderLoss, Model, ModelConfig, Objective, SegmentalLoss};
use segmental_core::params::rng_from_seed;
use segmental_core::training::{
    require_upstream, run_stage, EpochRecord, Hooks, OptimizerConfig, Schedule, Stage, TrainConfig,
};
use segmental_core::weights::{DecoderConfig, DecoderParams, WeightFnKind};

use crate::bench::{self, BenchConfig};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::dataset::{self, resolve_data_path};
use crate::exec::Threaded;
use crate::formats::{write_transcripts, Alphabet};
use crate::metrics::MetricsLog;
use crate::synth::{synth_dataset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "segmental", version, about = "Segmental and CTC sequence models: training, decoding and checks")]
pub struct Cli {
    /// Worker threads for utterance-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Decode a data split with a trained model.
    Decode(DecodeArgs),
    /// Score hypotheses against references (PER).
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Gradient wall-time table.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub dev: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 5)]
    pub labels: usize,
    #[arg(long, default_value_t = 3)]
    pub noise_dims: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub min_duration: usize,
    #[arg(long, default_value_t = 6)]
    pub max_duration: usize,
    #[arg(long, default_value_t = 3)]
    pub min_segments: usize,
    #[arg(long, default_value_t = 6)]
    pub max_segments: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Enc,
    Dec,
    Finetune,
    E2e,
    Multitask,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Enc => Stage::EncoderPretrain,
            StageArg::Dec => Stage::DecoderFrozen,
            StageArg::Finetune => Stage::Finetune,
            StageArg::E2e => Stage::EndToEnd,
            StageArg::Multitask => Stage::Multitask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Hinge,
    Log,
    Mll,
    Ce,
    Ctc,
}

impl LossArg {
    fn segmental(self) -> Option<SegmentalLoss> {
        match self {
            LossArg::Hinge => Some(SegmentalLoss::Hinge),
            LossArg::Log => Some(SegmentalLoss::Log),
            LossArg::Mll => Some(SegmentalLoss::MarginalLog),
            _ => None,
        }
    }

    fn encoder(self) -> Option<EncoderLoss> {
        match self {
            LossArg::Ce => Some(EncoderLoss::FrameCrossEntropy),
            LossArg::Ctc => Some(EncoderLoss::Ctc),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightFnArg {
    Fc,
    Srnn,
}

impl From<WeightFnArg> for WeightFnKind {
    fn from(w: WeightFnArg) -> Self {
        match w {
            WeightFnArg::Fc => WeightFnKind::Fc,
            WeightFnArg::Srnn => WeightFnKind::Srnn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Rmsprop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    /// 5 fixed-step epochs, then 5 decayed.
    Desk,
    /// 20 fixed-step epochs, then 20 decayed.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeArg {
    Segmental,
    Ctc,
    Frame,
}

impl From<DecodeArg> for DecodeKind {
    fn from(d: DecodeArg) -> Self {
        match d {
            DecodeArg::Segmental => DecodeKind::Segmental,
            DecodeArg::Ctc => DecodeKind::Ctc,
            DecodeArg::Frame => DecodeKind::Frame,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (relative paths resolve against $SEGMENTAL_DATA).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Segmental loss, or the encoder loss for `--stage enc`.
    #[arg(long, value_enum)]
    pub loss: LossArg,
    /// Encoder loss mixed in by `--stage multitask`.
    #[arg(long, value_enum, default_value = "ctc")]
    pub enc_loss: LossArg,
    #[arg(long, value_enum, default_value = "srnn")]
    pub weightfn: WeightFnArg,
    #[arg(long)]
    pub pyramid: bool,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Checkpoint from the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: ProfileArg,
    /// Overrides the profile's fixed-step epochs.
    #[arg(long)]
    pub const_epochs: Option<usize>,
    /// Overrides the profile's decayed epochs.
    #[arg(long)]
    pub decay_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Defaults to 30 without the pyramid and 8 with it.
    #[arg(long)]
    pub max_duration: Option<usize>,
    /// Require a blank between equal adjacent CTC labels.
    #[arg(long)]
    pub ctc_strict_repeats: bool,
    #[arg(long)]
    pub no_normalize: bool,
    /// Append one JSON line per epoch here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the decoder matching the checkpoint's training objective.
    #[arg(long, value_enum)]
    pub mode: Option<DecodeArg>,
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub r#ref: PathBuf,
    /// `token target` lines applied to both sides before scoring.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ComponentArg {
    Dp,
    Losses,
    Weights,
    Encoder,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub component: ComponentArg,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    pub utterances: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 10)]
    pub labels: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Print rows as JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, cli.threads),
        Command::Decode(a) => decode(a, cli.threads),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Bench(a) => run_bench(a),
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        train: a.train,
        dev: a.dev,
        test: a.test,
        labels: a.labels,
        noise_dims: a.noise_dims,
        separation: a.separation,
        sigma: a.sigma,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        min_segments: a.min_segments,
        max_segments: a.max_segments,
        seed: a.seed,
    };
    let out = resolve_data_path(&a.out);
    synth_dataset(&cfg, &out)?;
    println!("wrote {} (Bayes frame error {:.6})", out.display(), cfg.bayes_frame_error());
    Ok(ExitCode::SUCCESS)
}

/// Builds the objective for a stage from the command-line losses.
pub fn objective_for(stage: Stage, loss: LossArg, enc_loss: LossArg, lambda: f64) -> Result<Objective> {
    let objective = match stage {
        Stage::EncoderPretrain => Objective::Encoder(loss.encoder().context("--stage enc needs --loss ce or ctc")?),
        Stage::Multitask => Objective::Multitask {
            segmental: loss.segmental().context("--stage multitask needs a segmental --loss")?,
            encoder: enc_loss.encoder().context("--enc-loss must be ce or ctc")?,
            lambda,
        },
        _ => Objective::Segmental(loss.segmental().context("this stage needs --loss hinge, log or mll")?),
    };
    objective.validate()?;
    Ok(objective)
}

fn model_config(a: &TrainArgs, input_dim: usize, labels: usize) -> ModelConfig {
    let max_duration = a.max_duration.unwrap_or(if a.pyramid { 8 } else { 30 });
    ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            hidden: a.hidden,
            layers: a.layers,
            pyramid: a.pyramid,
            subsample: Subsample::Select,
            dropout: a.dropout,
            num_labels: labels,
        },
        decoder: DecoderConfig::new(a.weightfn.into(), max_duration),
        repeats: if a.ctc_strict_repeats { RepeatPolicy::Strict } else { RepeatPolicy::Verbatim },
        cost_scale: 1.0,
    }
}

fn train(a: TrainArgs, threads: usize) -> Result<ExitCode> {
    let root = resolve_data_path(&a.data);
    let data = dataset::load(&root, &["train", "dev"], !a.no_normalize)?;
    let (train_set, dev_set) = (data.split("train")?, data.split("dev")?);
    if train_set.is_empty() {
        bail!("training set is empty");
    }
    let stage: Stage = a.stage.into();
    require_upstream(stage, a.init.is_some())?;
    let objective = objective_for(stage, a.loss, a.enc_loss, a.lambda)?;
    let input_dim = train_set[0].features.cols();
    let labels = data.alphabet.len();

    let mut model = match &a.init {
        Some(path) => Checkpoint::load(path)?.model,
        None => Model::init(model_config(&a, input_dim, labels), a.seed)?,
    };
    if model.config.encoder.input_dim != input_dim || model.config.num_labels() != labels {
        bail!("checkpoint does not match the dataset's feature dimension or alphabet");
    }
    let wanted: WeightFnKind = a.weightfn.into();
    if stage == Stage::DecoderFrozen {
        // A fresh decoder of the requested kind on top of the frozen encoder.
        model.config.decoder = DecoderConfig::new(wanted, model.config.decoder.max_duration);
        let mut rng = rng_from_seed(a.seed ^ 0xDEC0);
        model.params.decoder =
            DecoderParams::init(&model.config.decoder, labels, model.config.encoder.output_dim(), &mut rng);
        model.seed_fc_classifier();
    } else if a.init.is_some() && model.params.decoder.kind() != wanted {
        warn!("checkpoint uses the {:?} weight function; --weightfn ignored", model.params.decoder.kind());
    }

    let schedule = match a.profile {
        ProfileArg::Desk => Schedule::desk(),
        ProfileArg::Paper => Schedule::paper(),
    };
    let schedule = Schedule {
        constant_epochs: a.const_epochs.unwrap_or(schedule.constant_epochs),
        decay_epochs: a.decay_epochs.unwrap_or(schedule.decay_epochs),
        ..schedule
    };
    let uses_ctc = matches!(
        objective,
        Objective::Encoder(EncoderLoss::Ctc) | Objective::Multitask { .. }
    );
    let mut optimizer = match a.optimizer {
        Some(OptimizerArg::Sgd) => OptimizerConfig::sgd(),
        Some(OptimizerArg::Rmsprop) => OptimizerConfig::rmsprop(),
        None if uses_ctc => OptimizerConfig::rmsprop(),
        None => OptimizerConfig::sgd(),
    };
    if let Some(step) = a.step {
        optimizer.step_size = step;
    }
    optimizer.clip = a.clip;
    let mut cfg = TrainConfig::new(stage, objective, optimizer, schedule, a.seed);
    cfg.batch_size = a.batch;
    cfg.eval_map = data.collapse.clone();

    let mut log = a.metrics.as_deref().map(MetricsLog::open).transpose()?;
    let mut log_err = None;
    let origin = Instant::now();
    let clock = move || origin.elapsed().as_secs_f64();
    let mut on_epoch = |r: &EpochRecord, _: &Model| {
        info!(
            "{} epoch {:>3}  step {:.3e}  train {:.4}  dev {:.4}  PER {:.2}%  skipped {}  {:.1}s",
            r.stage.name(),
            r.epoch,
            r.step_size,
            r.train_loss,
            r.dev_loss,
            100.0 * r.dev_per,
            r.skipped,
            r.wall_time
        );
        if let Some(l) = log.as_mut() {
            if let Err(e) = l.record(r) {
                log_err.get_or_insert(e);
            }
        }
    };
    let exec = Threaded::new(threads);
    let report = run_stage(
        &mut model,
        train_set,
        dev_set,
        &cfg,
        &exec,
        &mut Hooks {
            clock: Some(&clock),
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = log_err {
        return Err(e.context("writing metrics"));
    }
    let ck = Checkpoint {
        model,
        train: Some(TrainState {
            stage,
            objective,
            decode: cfg.decode_kind(),
            seed: a.seed,
            epochs_completed: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_dev_per: report.best_dev_per.is_finite().then_some(report.best_dev_per),
        }),
        optimizer: None,
    };
    ck.save(&a.out)?;
    println!(
        "best epoch {} dev PER {:.2}% -> {}",
        report.best_epoch,
        100.0 * report.best_dev_per,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn decode(a: DecodeArgs, threads: usize) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.model)?;
    let root = resolve_data_path(&a.data);
    let alphabet = dataset::read_alphabet(&root)?;
    let utts = dataset::load_split(&root, &a.split, &alphabet, !a.no_normalize)?;
    let kind = a
        .mode
        .map(DecodeKind::from)
        .or(ck.train.as_ref().map(|t| t.decode))
        .unwrap_or(DecodeKind::Segmental);
    let hyps = write_decodes(&ck.model, &utts, kind, threads, &alphabet, &a.out)?;
    println!("decoded {} utterances -> {}", hyps, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_decodes(
    model: &Model,
    utts: &[segmental_core::model::Utterance],
    kind: DecodeKind,
    threads: usize,
    alphabet: &Alphabet,
    out: &Path,
) -> Result<usize> {
    use segmental_core::training::Executor;
    let results = Threaded::new(threads).decode_batch(model, utts, kind);
    let mut entries = Vec::with_capacity(utts.len());
    for (u, r) in utts.iter().zip(results) {
        entries.push((u.id.clone(), r.with_context(|| format!("decoding {}", u.id))?));
    }
    write_transcripts(out, &entries, alphabet)?;
    Ok(entries.len())
}

/// Reads `id<TAB>tokens` lines without an alphabet.
fn read_token_lines(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, rest) = l.split_once('\t').unwrap_or((l, ""));
            (id.to_string(), rest.split_whitespace().map(String::from).collect())
        })
        .collect())
}

fn read_token_map(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            [] => {}
            [from, to] => {
                map.insert(from.to_string(), to.to_string());
            }
            _ => bail!("{}:{}: expected `token target`", path.display(), n + 1),
        }
    }
    Ok(map)
}

/// PER over token files, after applying the optional map to both sides.
/// References without a hypothesis count as all deletions.
pub fn score_files(hyp: &Path, reference: &Path, map: Option<&Path>) -> Result<(f64, usize, usize)> {
    let map = map.map(read_token_map).transpose()?.unwrap_or_default();
    let apply = |toks: &[String]| -> Vec<String> { toks.iter().map(|t| map.get(t).unwrap_or(t).clone()).collect() };
    let hyps: HashMap<String, Vec<String>> = read_token_lines(hyp)?.into_iter().collect();
    let mut errors = 0;
    let mut total = 0;
    for (id, r) in read_token_lines(reference)? {
        let h = match hyps.get(&id) {
            Some(h) => apply(h),
            None => {
                warn!("no hypothesis for {id}");
                Vec::new()
            }
        };
        let r = apply(&r);
        errors += edit_distance(&h, &r);
        total += r.len();
    }
    let per = if total == 0 { 0.0 } else { errors as f64 / total as f64 };
    Ok((per, errors, total))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (per, errors, total) = score_files(&a.hyp, &a.r#ref, a.map.as_deref())?;
    println!("PER {:.2}% ({errors} errors / {total} reference tokens)", 100.0 * per);
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let components: Vec<Component> = match a.component {
        ComponentArg::Dp => vec![Component::Dp],
        ComponentArg::Losses => vec![Component::Losses],
        ComponentArg::Weights => vec![Component::Weights],
        ComponentArg::Encoder => vec![Component::Encoder],
        ComponentArg::All => Component::ALL.to_vec(),
    };
    let mut ok = true;
    for c in components {
        let report = gradcheck::run(c, a.trials, a.seed)?;
        for check in &report.checks {
            let pass = check.max_rel_err <= a.tolerance && check.coordinates > 0;
            ok &= pass;
            println!(
                "{:<8} {:<22} trials {:>4}  coords {:>6}  kinks {:>3}  max rel err {:.3e}  {}",
                c.name(),
                check.name,
                check.trials,
                check.coordinates,
                check.kinks,
                check.max_rel_err,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        utterances: a.utterances,
        repeats: a.repeats,
        labels: a.labels,
        hidden: a.hidden,
        ..BenchConfig::default()
    };
    let rows = bench::run(&cfg)?;
    if a.json {
        for r in &rows {
            println!("{}", serde_json::to_string(r)?);
        }
    } else {
        print!("{}", bench::format_table(&rows));
    }
    for v in bench::ordering_violations(&rows).iter().chain(&bench::srnn_not_slower(&rows)) {
        println!("unexpected ordering: {v}");
    }
    Ok(ExitCode::SUCCESS)
}
