//! `adarank` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a plan fails validation or training
//! diverges, 2 on usage and input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adarank::allocation::{allocate, random_score_vector, validate_plan, AllocationMode, AllocationRequest};
use adarank::data::{generic_corpus, load_csv, synthetic_dataset, write_csv, Corpus, Split, SyntheticConfig};
use adarank::harness::{compare, corpus_batch, finetune, CompareConfig, CompareMode, Settings, TrainConfig};
use adarank::lora::{trainable_param_count, trainable_params_by_kind, EncoderDims, Provenance, RankPlan};
use adarank::model::{is_checkpoint, load_checkpoint, save_checkpoint, ModelConfig, ModuleKind, TransformerModel};
use adarank::numerics::RngStream;
use adarank::scoring::{score_modules, PerturbationConfig, ScoreVector};
use adarank::{fileio, Error, TOOL_VERSION};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "adarank", version, about = "Predict per-module LoRA ranks from perturbation disagreement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score module importance by perturbation disagreement.
    Score(ScoreArgs),
    /// Turn scores (or random scores) into a rank plan.
    Plan(PlanArgs),
    /// Check a plan's budget and, given scores, its derivation.
    ValidatePlan(ValidateArgs),
    /// Finetune one plan and report metrics.
    Train(TrainArgs),
    /// Finetune uniform, AdaRank and random plans side by side.
    Compare(CompareArgs),
    /// Adapter parameter count at BERT-style dimensions.
    Paramcount(ParamcountArgs),
    /// Write a freshly initialized model checkpoint.
    Init(InitArgs),
    /// Write a synthetic keyword-classification dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint file, or key=value config (model and training keys, plus `init_seed`).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Module kinds to score, e.g. q,k,v,d.
    #[arg(long, default_value = "q,k,v,d")]
    kinds: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    noise_multiplier: f64,
    /// Divide each disagreement by the number of sentences.
    #[arg(long)]
    per_sample: bool,
    /// Score modules on all available threads.
    #[arg(long)]
    parallel: bool,
    /// Plain-text scoring sentences, one per line.
    #[arg(long, conflicts_with = "in_domain")]
    scoring_text: Option<PathBuf>,
    /// Use ten shuffled training records (seeded by --seed) as scoring text.
    #[arg(long)]
    in_domain: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, required_unless_present = "random")]
    scores: Option<PathBuf>,
    #[arg(long)]
    avg_rank: f64,
    /// joint or separate; joint by default when all four kinds are scored.
    #[arg(long)]
    mode: Option<AllocationMode>,
    #[arg(long, default_value_t = 0)]
    min_rank: usize,
    /// Draw Uniform[0,1) scores for N layers of each --kinds kind instead of reading scores.
    #[arg(long, value_name = "N", conflicts_with = "scores")]
    random: Option<usize>,
    #[arg(long, default_value = "q")]
    kinds: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Defaults to the plan's own target.
    #[arg(long)]
    avg_rank: Option<f64>,
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, required_unless_present = "uniform_rank")]
    plan: Option<PathBuf>,
    #[arg(long, conflicts_with = "plan")]
    uniform_rank: Option<usize>,
    /// Kinds adapted by --uniform-rank.
    #[arg(long, default_value = "q,k,v,d")]
    kinds: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    training: TrainingFlags,
    /// Also write the merged model checkpoint.
    #[arg(long)]
    save_merged: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    avg_rank: f64,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long, default_value = "uniform,adarank-separate,adarank-joint,random")]
    modes: String,
    #[arg(long, default_value = "q,k,v,d")]
    kinds: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Seed of the perturbation scoring and of the random-score ablation.
    #[arg(long, default_value_t = 0)]
    scoring_seed: u64,
    #[arg(long, default_value_t = 0)]
    min_rank: usize,
    #[arg(long, conflicts_with = "in_domain")]
    scoring_text: Option<PathBuf>,
    #[arg(long)]
    in_domain: bool,
    #[command(flatten)]
    training: TrainingFlags,
    /// Aligned text table (also printed to stdout).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamcountArgs {
    /// LAYERSxD_MODELxD_FF, e.g. 12x768x3072.
    #[arg(long, default_value = "12x768x3072")]
    dims: String,
    #[arg(long, default_value_t = EncoderDims::BERT_BASE_CASED.vocab_size)]
    vocab: usize,
    #[arg(long, default_value_t = EncoderDims::BERT_BASE_CASED.max_positions)]
    max_positions: usize,
    #[arg(long, default_value_t = EncoderDims::BERT_BASE_CASED.type_vocab_size)]
    type_vocab: usize,
    #[arg(long, required_unless_present = "uniform_rank")]
    plan: Option<PathBuf>,
    #[arg(long, conflicts_with = "plan")]
    uniform_rank: Option<usize>,
    #[arg(long, default_value = "q")]
    kinds: String,
}

#[derive(Args)]
struct InitArgs {
    /// key=value model config; defaults to the desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Validation(String),
    Input(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::PlanViolation(_) | Error::Diverged { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Score(a) => score(a),
        Command::Plan(a) => plan(a),
        Command::ValidatePlan(a) => validate(a),
        Command::Train(a) => train(a),
        Command::Compare(a) => run_compare(a),
        Command::Paramcount(a) => paramcount(a),
        Command::Init(a) => init(a),
        Command::Synth(a) => synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Model plus the settings left over after the model keys were consumed.
/// The init seed is `None` for checkpoints, which do not record one.
fn load_model(arg: &ModelArg) -> Result<(TransformerModel, Settings, Option<u64>), Error> {
    let Some(path) = &arg.model else {
        return Ok((TransformerModel::init(&ModelConfig::default(), 0)?, Settings::default(), Some(0)));
    };
    if is_checkpoint(path) {
        return Ok((load_checkpoint(path)?, Settings::default(), None));
    }
    let mut settings = Settings::load(path)?;
    let mut config = ModelConfig::default();
    settings.apply_model(&mut config)?;
    let init_seed = settings.take("init_seed")?.unwrap_or(0);
    Ok((TransformerModel::init(&config, init_seed)?, settings, Some(init_seed)))
}

fn train_config(mut settings: Settings, flags: &TrainingFlags, seed: u64) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    settings.apply_train(&mut cfg)?;
    settings.finish()?;
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    fileio::write_text(path, &fileio::to_json(value)?)
}

fn score(a: ScoreArgs) -> CmdResult {
    let (model, mut settings, init_seed) = load_model(&a.model)?;
    settings.apply_train(&mut TrainConfig::default())?;
    settings.finish()?;
    let kinds = ModuleKind::parse_list(&a.kinds)?;
    let corpus = match (&a.scoring_text, &a.in_domain) {
        (Some(p), _) => Corpus::from_file(p)?,
        (None, Some(p)) => Corpus::in_domain(&load_csv(p, model.config().num_classes, Split::Train)?, a.seed)?,
        (None, None) => generic_corpus(),
    };
    let cfg = PerturbationConfig {
        trials: a.trials,
        master_seed: a.seed,
        noise_multiplier: a.noise_multiplier,
        per_sample: a.per_sample,
        parallel: a.parallel,
    };
    let paths = model.list_modules(&kinds)?;
    let mut sv = score_modules(&model, &paths, &corpus_batch(&model, &corpus)?, &cfg)?;
    sv.corpus_source = Some(corpus.source.clone());
    sv.corpus_size = Some(corpus.len());
    sv.model_seed = init_seed;
    sv.save(&a.out)?;
    println!(
        "scored {} modules x {} trials on {} sentences ({}); model init seed {}, scoring seed {}",
        paths.len(),
        a.trials,
        corpus.len(),
        corpus.source,
        init_seed.map_or("n/a (checkpoint)".to_string(), |s| s.to_string()),
        a.seed
    );
    for kind in sv.kinds() {
        let vals: Vec<String> = sv.restrict(kind)?.values().iter().map(|v| format!("{v:.4}")).collect();
        println!("  {kind}: {}", vals.join(", "));
    }
    Ok(())
}

fn plan(a: PlanArgs) -> CmdResult {
    let (scores, random) = match a.random {
        Some(n) => {
            let paths = adarank::model::list_modules(n, &ModuleKind::parse_list(&a.kinds)?)?;
            (random_score_vector(&paths, &mut RngStream::new(a.seed, 0))?, true)
        }
        None => (ScoreVector::load(a.scores.as_deref().expect("required by clap"))?, false),
    };
    let mode = a.mode.unwrap_or_else(|| if random { AllocationMode::Separate } else { AllocationMode::default_for(&scores) });
    let mut plan = allocate(&AllocationRequest {
        scores,
        target_avg_rank: a.avg_rank,
        mode,
        min_rank: a.min_rank,
    })?;
    if random {
        plan.provenance = Provenance::Random;
        plan.seeds = [("random".to_string(), a.seed)].into();
    }
    plan.save(&a.out)?;
    println!("{} plan, mean rank {:.4} (target {})", plan.provenance, plan.mean_rank(), a.avg_rank);
    for kind in plan.kinds() {
        let ranks: Vec<String> = plan.ranks_for(kind).iter().map(|r| r.to_string()).collect();
        println!("  {kind}: {}", ranks.join(","));
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> CmdResult {
    let plan = RankPlan::load(&a.plan)?;
    let scores = a.scores.as_deref().map(ScoreVector::load).transpose()?;
    let r = a.avg_rank.unwrap_or(plan.target_avg_rank);
    let report = validate_plan(&plan, scores.as_ref(), r)?;
    print!("{report}");
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Validation(format!("plan {} violates its checks", a.plan.display())))
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let (model, settings, init_seed) = load_model(&a.model)?;
    let cfg = train_config(settings, &a.training, a.seed)?;
    let plan = match (&a.plan, a.uniform_rank) {
        (Some(p), _) => RankPlan::load(p)?,
        (None, Some(r)) => RankPlan::uniform(&model.list_modules(&ModuleKind::parse_list(&a.kinds)?)?, r)?,
        (None, None) => unreachable!("required by clap"),
    };
    let classes = model.config().num_classes;
    let train = load_csv(&a.data, classes, Split::Train)?;
    let test = load_csv(&a.test, classes, Split::Test)?;
    let (mut adapted, result) = finetune(&model, &plan, &train, &test, &cfg)?;
    if let Some(path) = &a.save_merged {
        save_checkpoint(&adapted.merge()?, path)?;
    }
    write_json(
        &a.out,
        &json!({
            "tool_version": TOOL_VERSION,
            "seeds": { "model_init": init_seed, "train": cfg.seed },
            "model": model.config(),
            "train": cfg,
            "plan": { "provenance": plan.provenance, "mean_rank": plan.mean_rank(), "target_avg_rank": plan.target_avg_rank },
            "result": result,
        }),
    )?;
    println!(
        "test accuracy {:.2}%, train accuracy {:.2}%, {} adapter + {} head params, {:.1}s",
        100.0 * result.test_accuracy,
        100.0 * result.train_accuracy,
        result.adapter_params,
        result.head_params,
        result.wall_clock_secs
    );
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::InvalidArgument(format!("bad seed '{p}'"))))
        .collect()
}

fn run_compare(a: CompareArgs) -> CmdResult {
    let start = Instant::now();
    let (model, settings, _) = load_model(&a.model)?;
    let train_cfg = train_config(settings, &a.training, 0)?;
    let classes = model.config().num_classes;
    let train = load_csv(&a.data, classes, Split::Train)?;
    let test = load_csv(&a.test, classes, Split::Test)?;
    let corpus = match (&a.scoring_text, a.in_domain) {
        (Some(p), _) => Corpus::from_file(p)?,
        (None, true) => Corpus::in_domain(&train, a.scoring_seed)?,
        (None, false) => generic_corpus(),
    };
    let cfg = CompareConfig {
        avg_rank: a.avg_rank,
        kinds: ModuleKind::parse_list(&a.kinds)?,
        modes: CompareMode::parse_list(&a.modes)?,
        seeds: parse_seeds(&a.seeds)?,
        train: train_cfg,
        scoring: PerturbationConfig {
            trials: a.trials,
            master_seed: a.scoring_seed,
            ..PerturbationConfig::default()
        },
        min_rank: a.min_rank,
        random_seed: a.scoring_seed,
    };
    let report = compare(&cfg, &model, &train, &test, &corpus)?;
    fileio::write_text(&a.out, &report.to_csv())?;
    let table = report.to_table();
    if let Some(p) = &a.table {
        fileio::write_text(p, &table)?;
    }
    print!("{table}");
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("--dims expects LxDxFF, got '{s}'")))?;
    match parts[..] {
        [l, d, ff] if l > 0 && d > 0 && ff > 0 => Ok((l, d, ff)),
        _ => Err(Error::InvalidArgument(format!("--dims expects LxDxFF, got '{s}'"))),
    }
}

fn paramcount(a: ParamcountArgs) -> CmdResult {
    let (num_layers, d_model, d_ff) = parse_dims(&a.dims)?;
    let dims = EncoderDims {
        num_layers,
        d_model,
        d_ff,
        vocab_size: a.vocab,
        max_positions: a.max_positions,
        type_vocab_size: a.type_vocab,
    };
    let config = dims.as_model_config();
    let plan = match (&a.plan, a.uniform_rank) {
        (Some(p), _) => RankPlan::load(p)?,
        (None, Some(r)) => RankPlan::uniform(&adarank::model::list_modules(num_layers, &ModuleKind::parse_list(&a.kinds)?)?, r)?,
        (None, None) => unreachable!("required by clap"),
    };
    plan.check_against(&config)?;
    let total = trainable_param_count(&plan, &config);
    let base = dims.non_head_params();
    for (kind, n) in trainable_params_by_kind(&plan, &config) {
        println!("{kind:<6} {n:>12}");
    }
    println!("adapter params {total}");
    println!("non-head params {base}");
    println!("fraction {:.4}%", 100.0 * total as f64 / base as f64);
    Ok(())
}

fn init(a: InitArgs) -> CmdResult {
    let mut config = ModelConfig::default();
    if let Some(p) = &a.config {
        let mut s = Settings::load(p)?;
        s.apply_model(&mut config)?;
        s.finish()?;
    }
    let model = TransformerModel::init(&config, a.seed)?;
    save_checkpoint(&model, &a.out)?;
    println!("wrote {} ({} non-head params, seed {})", a.out.display(), model.non_head_param_count(), a.seed);
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let split = Split::Train;
    let ds = synthetic_dataset(&SyntheticConfig::new(a.classes, a.n, a.noise), split, &mut RngStream::new(a.seed, 0))?;
    write_csv(&ds, &a.out)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}
