//! Config-driven experiment: generate data, split it by consent, run every
//! configured regime and write the summary, traces and checkpoints.
//!
//! Outputs land in a `.partial` directory first. On success each file is moved
//! into the output directory; on failure the whole directory becomes `failed/`
//! together with an `error.txt` naming the failed stage.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consent::{build_cdc_dataset, complement_dataset, consent_from_rule, ConsentRule, FirmDataset, SuccessorDataset};
use crate::error::{Error, Result};
use crate::format;
use crate::metrics::{forget_rate, retain_rate, EvalScope, MetricRow};
use crate::nn::{AdamConfig, ModelArchitecture, ModelCheckpoint};
use crate::regimes::{
    run_fine_tune, run_gradient_ascent_unlearn, run_original, run_retrain_pretrained, run_retrain_scratch,
    Evaluator, RegimeKind, RegimeRun, RegimeSpec, RunSettings,
};
use crate::rng::{derive_seed, Stage};
use crate::synth::{generate, GeneratorConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DISSOLVE_SIM_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Training loss above which a run counts as diverged.
    #[serde(default = "default_ceiling")]
    pub divergence_loss_ceiling: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_ceiling() -> f64 {
    1e6
}
fn default_eval_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            divergence_loss_ceiling: default_ceiling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_name: String,
    pub master_seed: u64,
    /// Its `seed` is ignored: the data seed comes from `master_seed`.
    pub generator: GeneratorConfig,
    pub consent_rule: ConsentRule,
    pub architecture: ModelArchitecture,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub regimes: Vec<RegimeSpec>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Drop users whose whole consent column is zero instead of keeping all-zero rows.
    #[serde(default = "default_true")]
    pub drop_all_zero: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML config. Relative `init_checkpoint` paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = format::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut config.regimes {
            if let Some(p) = &r.init_checkpoint {
                if p.is_relative() {
                    r.init_checkpoint = Some(base.join(p));
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.regimes.is_empty() {
            return cfg("at least one regime is required".into());
        }
        if self.eval_every == 0 {
            return cfg("eval_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || o.batch_size == 0 {
            return cfg("optimizer needs a positive learning_rate and batch_size".into());
        }
        if !(o.divergence_loss_ceiling > 0.0) {
            return cfg("divergence_loss_ceiling must be positive".into());
        }
        self.generator.validate()?;
        self.architecture.validate()?;
        let original_available = self.regimes.iter().any(|r| r.kind == RegimeKind::Original);
        let mut names = BTreeSet::new();
        for r in &self.regimes {
            let name = r.name();
            let safe = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return cfg(format!("regime name `{name}` must use only letters, digits, `_` and `-`"));
            }
            if !names.insert(name.clone()) {
                return cfg(format!("regime name `{name}` is used twice"));
            }
            r.validate(original_available)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config, output location excluded.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = Self {
            output_dir: None,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }

    /// CLI flag, then environment variable, then the config's own `output_dir`.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(p));
        }
        self.output_dir
            .clone()
            .ok_or_else(|| Error::Config(format!("no output_dir in config, --out-dir or {OUTPUT_DIR_ENV}")))
    }

    fn settings(&self, spec: &RegimeSpec) -> RunSettings {
        RunSettings {
            adam: AdamConfig::with_learning_rate(self.optimizer.learning_rate * spec.learning_rate_scale),
            batch_size: self.optimizer.batch_size,
            seed: self.master_seed,
            divergence_loss_ceiling: self.optimizer.divergence_loss_ceiling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryProvenance {
    pub config_hash: String,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

/// One metric row per configured regime, in config order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment_name: String,
    pub rows: Vec<MetricRow>,
    /// Regimes that stopped on the divergence guard.
    pub diverged: Vec<String>,
    pub provenance: SummaryProvenance,
}

impl ExperimentSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MetricRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

/// The firm's data split by the consent rule.
pub struct Splits {
    pub train: FirmDataset,
    pub cdc_train: SuccessorDataset,
    pub complement_train: FirmDataset,
    pub cdc_test: SuccessorDataset,
    pub complement_test: FirmDataset,
    pub scope: EvalScope,
}

/// Generates the data of `config` and applies its consent rule.
pub fn prepare_splits(config: &ExperimentConfig) -> Result<Splits> {
    let generator = GeneratorConfig {
        seed: config.master_seed,
        ..config.generator.clone()
    };
    let (train, test) = generate(&generator).map_err(|e| e.in_stage("generate"))?;
    split(config, train, test).map_err(|e| e.in_stage("consent"))
}

fn split(config: &ExperimentConfig, train: FirmDataset, test: FirmDataset) -> Result<Splits> {
    let rule = &config.consent_rule;
    let successor = rule.successor().unwrap_or(1);
    let consent = consent_from_rule(&train, rule)?;
    let train = train.with_consent(consent)?;
    let consent = consent_from_rule(&test, rule)?;
    let test = test.with_consent(consent)?;
    let cdc_train = build_cdc_dataset(&train, successor, config.drop_all_zero)?;
    let complement_train = complement_dataset(&train, &cdc_train)?;
    let cdc_test = build_cdc_dataset(&test, successor, config.drop_all_zero)?;
    let complement_test = complement_dataset(&test, &cdc_test)?;
    if cdc_test.records.is_empty() || complement_test.records.is_empty() {
        return Err(Error::Config(format!(
            "consent rule leaves {} consented and {} forgotten test records; both rates need data",
            cdc_test.records.len(),
            complement_test.records.len()
        )));
    }
    let scope = EvalScope::from_rule(rule, &train.records[0].labels)?;
    Ok(Splits {
        train,
        cdc_train,
        complement_train,
        cdc_test,
        complement_test,
        scope,
    })
}

struct Log {
    start: Instant,
    text: String,
}

impl Log {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            text: String::new(),
        }
    }

    fn stage(&mut self, stage: &str, began: Instant, detail: &str) {
        let _ = write!(
            self.text,
            "[{:>9.3}s] {stage}: {:.3}s",
            self.start.elapsed().as_secs_f64(),
            began.elapsed().as_secs_f64()
        );
        if !detail.is_empty() {
            let _ = write!(self.text, " {detail}");
        }
        self.text.push('\n');
    }
}

/// Runs the whole pipeline, writing into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    let config_hash = config.config_hash()?;
    let staging = out_dir.join(".partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut log = Log::new();
    let started_at = chrono::Utc::now().to_rfc3339();
    let _ = writeln!(log.text, "experiment {} config_hash {config_hash}", config.experiment_name);
    match execute(config, &config_hash, &staging, &mut log) {
        Ok((rows, diverged)) => {
            let summary = ExperimentSummary {
                experiment_name: config.experiment_name.clone(),
                rows,
                diverged,
                provenance: SummaryProvenance {
                    config_hash,
                    tool_version: env!("CARGO_PKG_VERSION").to_string(),
                    started_at,
                    finished_at: chrono::Utc::now().to_rfc3339(),
                },
            };
            format::atomic_write(&staging.join("summary.csv"), summary.to_csv().as_bytes())?;
            format::atomic_write(&staging.join("summary.json"), &format::to_json_bytes(&summary)?)?;
            let _ = writeln!(log.text, "done in {:.3}s", log.start.elapsed().as_secs_f64());
            format::atomic_write(&staging.join("run.log"), log.text.as_bytes())?;
            publish(&staging, out_dir)?;
            Ok(summary)
        }
        Err(err) => {
            let _ = writeln!(log.text, "FAILED: {err}");
            let _ = format::atomic_write(&staging.join("run.log"), log.text.as_bytes());
            let _ = format::atomic_write(&staging.join("error.txt"), format!("{err}\n").as_bytes());
            let failed = out_dir.join("failed");
            if failed.exists() {
                let _ = fs::remove_dir_all(&failed);
            }
            fs::rename(&staging, &failed).map_err(|e| Error::io(&failed, e))?;
            Err(err)
        }
    }
}

/// Moves every staged file into `out_dir` and clears any stale `failed/`.
fn publish(staging: &Path, out_dir: &Path) -> Result<()> {
    let entries = fs::read_dir(staging).map_err(|e| Error::io(staging, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(staging, e))?;
        let target = out_dir.join(entry.file_name());
        fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    fs::remove_dir(staging).map_err(|e| Error::io(staging, e))?;
    let failed = out_dir.join("failed");
    if failed.exists() {
        fs::remove_dir_all(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    Ok(())
}

fn execute(
    config: &ExperimentConfig,
    config_hash: &str,
    staging: &Path,
    log: &mut Log,
) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let t = Instant::now();
    let splits = prepare_splits(config)?;
    log.stage(
        "data",
        t,
        &format!(
            "train {} (consented {}, forgotten {}), test consented {} forgotten {}",
            splits.train.len(),
            splits.cdc_train.len(),
            splits.complement_train.len(),
            splits.cdc_test.len(),
            splits.complement_test.len()
        ),
    );
    let mut eval = Evaluator::new(&splits.cdc_test.records, &splits.complement_test.records, &splits.scope);
    eval.eval_every = config.eval_every;

    let mut results: Vec<Option<RegimeRun>> = vec![None; config.regimes.len()];
    let mut original: Option<ModelCheckpoint> = None;
    for (i, spec) in config.regimes.iter().enumerate() {
        if spec.kind != RegimeKind::Original {
            continue;
        }
        let t = Instant::now();
        let stage = format!("regime `{}`", spec.name());
        let run = run_original(&splits.train, &config.architecture, spec.epochs, &config.settings(spec), &eval)
            .map_err(|e| e.in_stage(&stage))?;
        if original.is_none() {
            if run.divergence.is_some() {
                return Err(Error::Divergence(format!("{} diverged; its dependents cannot run", spec.name()))
                    .in_stage(&stage));
            }
            original = Some(run.checkpoint.clone());
        }
        log.stage(&stage, t, "");
        results[i] = Some(run);
    }

    let pending: Vec<usize> = (0..config.regimes.len()).filter(|&i| results[i].is_none()).collect();
    let outcomes: Vec<(usize, Result<RegimeRun>, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = pending
            .iter()
            .map(|&i| {
                let spec = &config.regimes[i];
                let (splits, eval, original) = (&splits, &eval, original.as_ref());
                scope.spawn(move || {
                    let t = Instant::now();
                    let run = run_dependent(config, spec, splits, eval, original)
                        .map_err(|e| e.in_stage(&format!("regime `{}`", spec.name())));
                    (i, run, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("regime thread panicked"))
            .collect()
    });
    for (i, run, secs) in outcomes {
        let _ = writeln!(
            log.text,
            "[{:>9.3}s] regime `{}`: {secs:.3}s",
            log.start.elapsed().as_secs_f64(),
            config.regimes[i].name()
        );
        results[i] = Some(run?);
    }

    let t = Instant::now();
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for (spec, run) in config.regimes.iter().zip(results) {
        let mut run = run.expect("every regime ran");
        let name = spec.name();
        run.checkpoint.provenance.config_hash = Some(config_hash.to_string());
        let write = |file: String, bytes: &[u8]| format::atomic_write(&staging.join(file), bytes);
        write(format!("curve_{name}.csv"), run.trace.to_csv().as_bytes())?;
        match run.divergence_json(&name)? {
            Some(report) => {
                write(format!("divergence_{name}.json"), &report)?;
                diverged.push(name.clone());
            }
            None => write(format!("ckpt_{name}.json"), &run.checkpoint.to_json_bytes()?)?,
        }
        let net = &run.checkpoint.network;
        rows.push(MetricRow {
            regime: name,
            forget_rate: forget_rate(net, &splits.complement_test.records, &splits.scope)?,
            retain_rate: retain_rate(net, &splits.cdc_test.records, &splits.scope)?,
            epochs: run.checkpoint.provenance.epochs,
            n_forget_eval: splits.complement_test.len(),
            n_retain_eval: splits.cdc_test.len(),
        });
    }
    log.stage("write", t, "");
    Ok((rows, diverged))
}

fn run_dependent(
    config: &ExperimentConfig,
    spec: &RegimeSpec,
    splits: &Splits,
    eval: &Evaluator<'_>,
    original: Option<&ModelCheckpoint>,
) -> Result<RegimeRun> {
    let settings = config.settings(spec);
    let arch = &config.architecture;
    let init = || -> Result<ModelCheckpoint> {
        match &spec.init_checkpoint {
            Some(path) => ModelCheckpoint::load(path),
            None => original
                .cloned()
                .ok_or_else(|| Error::Config(format!("regime `{}` has no original model to start from", spec.name()))),
        }
    };
    match spec.kind {
        RegimeKind::Original => unreachable!("original runs are handled first"),
        RegimeKind::RetrainScratch => run_retrain_scratch(&splits.cdc_train, arch, spec.epochs, &settings, eval),
        RegimeKind::RetrainPretrained => {
            let pretrain = spec
                .pretrain
                .as_ref()
                .ok_or_else(|| Error::Config(format!("regime `{}` needs a pretrain section", spec.name())))?;
            let generator = match &pretrain.generator {
                Some(g) => g.clone(),
                None => GeneratorConfig {
                    seed: derive_seed(config.master_seed, Stage::Pretrain),
                    ..config.generator.clone()
                },
            };
            let (aux, _) = generate(&generator)?;
            run_retrain_pretrained(&splits.cdc_train, arch, &aux, pretrain.epochs, spec.epochs, &settings, eval)
        }
        RegimeKind::FineTune => run_fine_tune(&init()?, &splits.cdc_train, spec.epochs, &settings, eval),
        RegimeKind::GradientAscentUnlearn => run_gradient_ascent_unlearn(
            &init()?,
            &splits.complement_train,
            &splits.cdc_train,
            spec.epochs,
            &settings,
            eval,
        ),
    }
}
