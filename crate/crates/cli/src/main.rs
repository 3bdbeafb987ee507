//! `dissolve-sim`: generate firm data, split it by consent, train and score
//! the successor regimes, or run a whole configured experiment.
//!
//! Exit status: 0 on success, 1 on configuration or usage errors, 2 on
//! runtime failures and divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dissolve_core::experiment::ExperimentConfig;
use dissolve_core::format;
use dissolve_core::nn::TrainingSource;
use dissolve_core::regimes::{
    run_fine_tune, run_gradient_ascent_unlearn, run_original, run_retrain_pretrained, run_retrain_scratch,
    Evaluator, RegimeKind, RegimeRun, RunSettings,
};
use dissolve_core::{
    build_cdc_dataset, complement_dataset, consent_from_rule, forget_rate, generate, retain_rate, run_experiment,
    Activation, AdamConfig, ConsentRule, Error, EvalScope, FirmDataset, GeneratorConfig, Head, LabelSet,
    ModelArchitecture, ModelCheckpoint, Result,
};

#[derive(Debug, Parser)]
#[command(name = "dissolve-sim", version, about = "Consent-driven data dissolution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train.json and test.json from a generator or experiment config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into the successor's consented data and its complement.
    Dissolve {
        #[arg(long)]
        data: PathBuf,
        /// `classes:0,1,2`, `group:NAME`, `random:P:SEED`, `all`, `none` or `file:PATH`.
        #[arg(long)]
        consent_rule: String,
        /// 1-based successor index.
        #[arg(long, default_value_t = 1)]
        successor: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Keep users who gave nothing, as all-zero rows.
        #[arg(long)]
        keep_all_zero: bool,
    },
    /// Train one regime.
    Train(TrainArgs),
    /// Score a checkpoint on consented and forgotten held-out data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        retain_data: PathBuf,
        #[arg(long)]
        forget_data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Consented label group (multi-label data only).
        #[arg(long)]
        retain_group: Option<String>,
    },
    /// Run every regime of an experiment config.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config and the DISSOLVE_SIM_OUT variable.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// original, retrain_scratch, retrain_pretrained, fine_tune or gradient_ascent_unlearn.
    #[arg(long)]
    regime: String,
    /// Training data; the consented data for every regime except `original`.
    #[arg(long)]
    data: PathBuf,
    /// Original checkpoint for fine_tune and gradient_ascent_unlearn.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path, or the divergence report if the run diverges.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Forgotten training data for gradient_ascent_unlearn.
    #[arg(long)]
    forget_data: Option<PathBuf>,
    /// Auxiliary data for retrain_pretrained.
    #[arg(long)]
    pretrain_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pretrain_epochs: usize,
    /// Held-out consented data for the trace's retain rate.
    #[arg(long)]
    retain_eval: Option<PathBuf>,
    /// Held-out forgotten data for the trace's forget rate.
    #[arg(long)]
    forget_eval: Option<PathBuf>,
    #[arg(long)]
    retain_group: Option<String>,
    /// Hidden layer widths when no init checkpoint is given.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e6)]
    divergence_loss_ceiling: f64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Diverged(msg)) => {
            eprintln!("dissolve-sim: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("dissolve-sim: {e}");
            ExitCode::from(if e.is_configuration() { 1 } else { 2 })
        }
    }
}

enum Failure {
    Core(Error),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out)?,
        Command::Dissolve {
            data,
            consent_rule,
            successor,
            out_dir,
            keep_all_zero,
        } => dissolve(&data, &consent_rule, successor, &out_dir, !keep_all_zero)?,
        Command::Train(args) => return train(&args),
        Command::Evaluate {
            model,
            retain_data,
            forget_data,
            report,
            retain_group,
        } => evaluate(&model, &retain_data, &forget_data, &report, retain_group.as_deref())?,
        Command::RunExperiment { config, out_dir } => {
            let config = ExperimentConfig::load(&config)?;
            let out = config.resolve_output_dir(out_dir.as_deref())?;
            let summary = run_experiment(&config, &out)?;
            print!("{}", summary.to_csv());
            if !summary.diverged.is_empty() {
                return Err(Failure::Diverged(format!(
                    "diverged: {} (reports in {})",
                    summary.diverged.join(", "),
                    out.display()
                )));
            }
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(format::read_file(path)?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Accepts a bare generator config or a full experiment config (whose master seed is used).
fn load_generator(path: &Path) -> Result<GeneratorConfig> {
    let text = read_text(path)?;
    match toml::from_str::<GeneratorConfig>(&text) {
        Ok(g) => Ok(g),
        Err(direct) => match ExperimentConfig::from_toml_str(&text) {
            Ok(exp) => Ok(GeneratorConfig {
                seed: exp.master_seed,
                ..exp.generator
            }),
            Err(_) => Err(direct.into()),
        },
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let (train, test) = generate(&load_generator(config)?)?;
    train.save(&out.join("train.json"))?;
    test.save(&out.join("test.json"))?;
    eprintln!("wrote {} train and {} test records to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn parse_rule(text: &str, successor: usize) -> Result<ConsentRule> {
    let bad = || Error::Config(format!("cannot parse consent rule `{text}`"));
    let (head, rest) = text.split_once(':').unwrap_or((text, ""));
    match head {
        "all" => Ok(ConsentRule::PerUserRandom { probability: 1.0, seed: 0 }),
        "none" => Ok(ConsentRule::PerUserRandom { probability: 0.0, seed: 0 }),
        "classes" => {
            let classes = rest
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            Ok(ConsentRule::AllowClasses { classes, successor })
        }
        "group" if !rest.is_empty() => Ok(ConsentRule::AllowLabelGroup {
            group: rest.to_string(),
            successor,
        }),
        "random" => {
            let (p, seed) = rest.split_once(':').ok_or_else(bad)?;
            Ok(ConsentRule::PerUserRandom {
                probability: p.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            })
        }
        "file" => {
            let text = read_text(Path::new(rest))?;
            if let Ok(rule) = serde_json::from_str::<ConsentRule>(&text) {
                return Ok(rule);
            }
            let map: BTreeMap<String, Vec<u8>> = serde_json::from_str(&text)?;
            Ok(ConsentRule::Explicit { map })
        }
        _ => Err(bad()),
    }
}

fn dissolve(data: &Path, rule: &str, successor: usize, out_dir: &Path, drop_all_zero: bool) -> Result<()> {
    if successor == 0 {
        return Err(Error::Config("successors are numbered from 1".into()));
    }
    let mut firm = FirmDataset::load(data)?;
    let rule = parse_rule(rule, successor)?;
    firm.num_successors = firm.num_successors.max(successor);
    let consent = consent_from_rule(&firm, &rule)?;
    let firm = firm.with_consent(consent)?;
    let cdc = build_cdc_dataset(&firm, successor, drop_all_zero)?;
    let complement = complement_dataset(&firm, &cdc)?;
    cdc.to_firm_dataset()?.save(&out_dir.join("cdc.json"))?;
    complement.save(&out_dir.join("complement.json"))?;
    eprintln!(
        "successor {successor}: {} consented, {} forgotten users",
        cdc.len(),
        complement.len()
    );
    Ok(())
}

fn scope_for(sample: &LabelSet, group: Option<&str>) -> Result<EvalScope> {
    match group {
        Some(g) if !sample.is_multi_class() => EvalScope::for_group(sample, g),
        Some(_) => Err(Error::Config("--retain-group only applies to multi-label data".into())),
        None => Ok(EvalScope::all_labels(sample.output_dim())),
    }
}

fn default_architecture(data: &FirmDataset, args: &TrainArgs) -> Result<ModelArchitecture> {
    let first = data
        .records
        .first()
        .ok_or_else(|| Error::Config(format!("{} holds no records", args.data.display())))?;
    let head = match &first.labels {
        LabelSet::MultiClass { num_classes, .. } => Head::SoftmaxCrossEntropy { num_classes: *num_classes },
        LabelSet::MultiLabel { active, .. } => Head::SigmoidBinaryCrossEntropy { num_labels: active.len() },
    };
    let activation = match args.activation.as_str() {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => return Err(Error::Config(format!("unknown activation `{other}`"))),
    };
    let arch = ModelArchitecture {
        input_dim: data.spec.total_dim(),
        hidden_dims: args.hidden.clone(),
        activation,
        head,
    };
    arch.validate()?;
    Ok(arch)
}

fn train(args: &TrainArgs) -> std::result::Result<(), Failure> {
    let kind = RegimeKind::from_tag(&args.regime)
        .ok_or_else(|| Error::Config(format!("unknown regime `{}`", args.regime)))?;
    let data = FirmDataset::load(&args.data)?;
    let init = args.init.as_deref().map(ModelCheckpoint::load).transpose()?;
    if kind.needs_init() && init.is_none() {
        return Err(Error::Config(format!("regime `{kind}` needs --init")).into());
    }
    let retain_eval = args.retain_eval.as_deref().map(FirmDataset::load).transpose()?;
    let forget_eval = args.forget_eval.as_deref().map(FirmDataset::load).transpose()?;
    let sample = &data
        .records
        .first()
        .ok_or_else(|| Error::Config(format!("{} holds no records", args.data.display())))?
        .labels;
    let scope = scope_for(sample, args.retain_group.as_deref())?;
    let eval = Evaluator {
        retain_test: retain_eval.as_ref().map(|d| d.records.as_slice()),
        forget_test: forget_eval.as_ref().map(|d| d.records.as_slice()),
        scope: &scope,
        eval_every: args.eval_every.max(1),
    };
    if !(args.learning_rate > 0.0) || args.batch_size == 0 {
        return Err(Error::Config("--learning-rate and --batch-size must be positive".into()).into());
    }
    let settings = RunSettings {
        adam: AdamConfig::with_learning_rate(args.learning_rate),
        batch_size: args.batch_size,
        seed: args.seed,
        divergence_loss_ceiling: args.divergence_loss_ceiling,
    };
    let arch = match &init {
        Some(c) => c.architecture().clone(),
        None => default_architecture(&data, args)?,
    };
    let run: RegimeRun = match kind {
        RegimeKind::Original => run_original(&data, &arch, args.epochs, &settings, &eval)?,
        RegimeKind::RetrainScratch => run_retrain_scratch(&data, &arch, args.epochs, &settings, &eval)?,
        RegimeKind::RetrainPretrained => {
            let path = args
                .pretrain_data
                .as_deref()
                .ok_or_else(|| Error::Config("retrain_pretrained needs --pretrain-data".into()))?;
            let aux = FirmDataset::load(path)?;
            run_retrain_pretrained(&data, &arch, &aux, args.pretrain_epochs, args.epochs, &settings, &eval)?
        }
        RegimeKind::FineTune => {
            run_fine_tune(init.as_ref().expect("checked above"), &data, args.epochs, &settings, &eval)?
        }
        RegimeKind::GradientAscentUnlearn => {
            let path = args
                .forget_data
                .as_deref()
                .ok_or_else(|| Error::Config("gradient_ascent_unlearn needs --forget-data".into()))?;
            let forget = FirmDataset::load(path)?;
            run_gradient_ascent_unlearn(
                init.as_ref().expect("checked above"),
                &forget,
                &data,
                args.epochs,
                &settings,
                &eval,
            )?
        }
    };
    format::atomic_write(&args.trace, run.trace.to_csv().as_bytes())?;
    if let Some(report) = run.divergence_json(kind.tag())? {
        format::atomic_write(&args.out, &report)?;
        let d = run.divergence.as_ref().expect("report implies divergence");
        return Err(Failure::Diverged(format!(
            "{kind} diverged at epoch {} batch {}: {}; report written to {}",
            d.epoch,
            d.batch,
            d.reason,
            args.out.display()
        )));
    }
    run.checkpoint.save(&args.out)?;
    eprintln!(
        "{kind}: {} epochs on {} records, checkpoint {}",
        run.checkpoint.provenance.epochs,
        TrainingSource::len(&data),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    format_version: u32,
    model_regime: String,
    model_dataset_id: String,
    config_hash: Option<String>,
    forget_rate: f64,
    retain_rate: f64,
    n_forget_eval: usize,
    n_retain_eval: usize,
}

fn evaluate(model: &Path, retain: &Path, forget: &Path, report: &Path, group: Option<&str>) -> Result<()> {
    let ckpt = ModelCheckpoint::load(model)?;
    let retain = FirmDataset::load(retain)?;
    let forget = FirmDataset::load(forget)?;
    let sample = retain
        .records
        .first()
        .or(forget.records.first())
        .ok_or_else(|| Error::Config("both evaluation sets are empty".into()))?;
    let scope = scope_for(&sample.labels, group)?;
    let doc = EvalReport {
        format_version: format::FORMAT_VERSION,
        model_regime: ckpt.provenance.regime.clone(),
        model_dataset_id: ckpt.provenance.dataset_id.clone(),
        config_hash: ckpt.provenance.config_hash.clone(),
        forget_rate: forget_rate(&ckpt.network, &forget.records, &scope)?,
        retain_rate: retain_rate(&ckpt.network, &retain.records, &scope)?,
        n_forget_eval: forget.len(),
        n_retain_eval: retain.len(),
    };
    format::atomic_write(report, &format::to_json_bytes(&doc)?)?;
    println!("forget_rate={} retain_rate={}", doc.forget_rate, doc.retain_rate);
    Ok(())
}
