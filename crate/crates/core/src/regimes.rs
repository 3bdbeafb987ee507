//! The training regimes a successor can use once it only holds consented data.
//!
//! * `Original`: the monopolist's model, trained on everything.
//! * `RetrainScratch`: fresh initialization, consented data only.
//! * `RetrainPretrained`: pre-train on an auxiliary synthetic distribution, then consented data.
//! * `FineTune`: continue from the original model on consented data only.
//! * `GradientAscentUnlearn`: alternate loss ascent on the forgotten data with
//!   descent on consented data. Known to be unstable, so it always runs
//!   behind the divergence guard.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consent::{fingerprint, UserRecord};
use crate::error::{Error, Result};
use crate::format;
use crate::metrics::{forget_rate, retain_rate, EvalScope};
use crate::nn::train::{check_source, guarded_step, StepFailure};
use crate::nn::{
    batch_matrix, loss_and_gradients, target_matrix, train_epochs, AdamConfig, AdamState, Direction,
    DivergenceReport, ModelArchitecture, ModelCheckpoint, Network, Provenance, TrainOptions,
    TrainingSource,
};
use crate::rng::{derive_seed, stage_rng, Stage};
use crate::synth::GeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Original,
    RetrainScratch,
    RetrainPretrained,
    FineTune,
    GradientAscentUnlearn,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::Original,
        RegimeKind::RetrainScratch,
        RegimeKind::RetrainPretrained,
        RegimeKind::FineTune,
        RegimeKind::GradientAscentUnlearn,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RegimeKind::Original => "original",
            RegimeKind::RetrainScratch => "retrain_scratch",
            RegimeKind::RetrainPretrained => "retrain_pretrained",
            RegimeKind::FineTune => "fine_tune",
            RegimeKind::GradientAscentUnlearn => "gradient_ascent_unlearn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        let normalized = tag.replace('-', "_");
        Self::ALL.into_iter().find(|k| k.tag() == normalized)
    }

    /// Regimes that start from the original model.
    pub fn needs_init(self) -> bool {
        matches!(self, RegimeKind::FineTune | RegimeKind::GradientAscentUnlearn)
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Pre-training phase of `RetrainPretrained`. Without an explicit generator the
/// experiment's own generator is reused under a disjoint seed, i.e. the same
/// kind of data but different class means / label prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub epochs: usize,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Multiplies the experiment's learning rate for this regime only.
    #[serde(default = "unit")]
    pub learning_rate_scale: f64,
    /// Output name; defaults to the regime tag.
    #[serde(default)]
    pub name: Option<String>,
}

fn unit() -> f64 {
    1.0
}

impl RegimeSpec {
    pub fn new(kind: RegimeKind, epochs: usize) -> Self {
        Self {
            kind,
            epochs,
            init_checkpoint: None,
            pretrain: None,
            learning_rate_scale: 1.0,
            name: None,
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.tag().to_string())
    }

    /// Checks the kind-specific fields. `original_available` says whether an
    /// original model will exist in the same run.
    pub fn validate(&self, original_available: bool) -> Result<()> {
        if !(self.learning_rate_scale > 0.0 && self.learning_rate_scale.is_finite()) {
            return Err(Error::Config(format!(
                "regime `{}`: learning_rate_scale must be positive",
                self.name()
            )));
        }
        if self.kind.needs_init() && self.init_checkpoint.is_none() && !original_available {
            return Err(Error::Config(format!(
                "regime `{}` needs an init checkpoint or an original regime in the same run",
                self.name()
            )));
        }
        if self.kind == RegimeKind::RetrainPretrained && self.pretrain.is_none() {
            return Err(Error::Config(format!(
                "regime `{}` needs a pretrain section",
                self.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub forget_rate: Option<f64>,
    pub retain_rate: Option<f64>,
}

/// Per-epoch loss and rates of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,forget_rate,retain_rate";

    /// Comma-separated table; a rate that was not measured is an empty cell.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                cell(r.forget_rate),
                cell(r.retain_rate)
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn max_forget_rate(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.forget_rate).reduce(f64::max)
    }
}

/// Held-out sets used to fill the trace.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub retain_test: Option<&'a [UserRecord]>,
    pub forget_test: Option<&'a [UserRecord]>,
    pub scope: &'a EvalScope,
    pub eval_every: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(retain_test: &'a [UserRecord], forget_test: &'a [UserRecord], scope: &'a EvalScope) -> Self {
        Self {
            retain_test: Some(retain_test),
            forget_test: Some(forget_test),
            scope,
            eval_every: 1,
        }
    }

    /// `(forget_rate, retain_rate)`, each `None` when its set is absent.
    pub fn rates(&self, net: &Network) -> Result<(Option<f64>, Option<f64>)> {
        let forget = self
            .forget_test
            .map(|d| forget_rate(net, d, self.scope))
            .transpose()?;
        let retain = self
            .retain_test
            .map(|d| retain_rate(net, d, self.scope))
            .transpose()?;
        Ok((forget, retain))
    }

    fn row(&self, net: &Network, epoch: usize, train_loss: f64) -> Result<TraceRow> {
        let (forget_rate, retain_rate) = self.rates(net)?;
        Ok(TraceRow {
            epoch,
            train_loss,
            forget_rate,
            retain_rate,
        })
    }

    fn due(&self, epoch: usize, last: usize) -> bool {
        epoch == last || epoch % self.eval_every.max(1) == 0
    }
}

/// Optimizer and seeding shared by every regime of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Drives the init stream and the batching stream.
    pub seed: u64,
    pub divergence_loss_ceiling: f64,
}

impl RunSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 128,
            seed,
            divergence_loss_ceiling: 1e6,
        }
    }

    fn train_options(&self, epochs: usize, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: self.batch_size,
            seed,
            divergence_loss_ceiling: self.divergence_loss_ceiling,
        }
    }
}

/// Result of one regime. On divergence the checkpoint is the last finite model.
#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub checkpoint: ModelCheckpoint,
    pub trace: TrainingTrace,
    pub divergence: Option<DivergenceReport>,
}

impl RegimeRun {
    /// Serialized divergence report with the last finite model embedded, if
    /// the run diverged. Contains finite numbers only.
    pub fn divergence_json(&self, regime: &str) -> Result<Option<Vec<u8>>> {
        let Some(d) = &self.divergence else {
            return Ok(None);
        };
        #[derive(Serialize)]
        struct Doc<'a> {
            format_version: u32,
            regime: &'a str,
            config_hash: Option<&'a str>,
            epoch: usize,
            batch: usize,
            reason: &'a str,
            loss: Option<f64>,
            completed_epochs: usize,
            last_finite_checkpoint: Box<serde_json::value::RawValue>,
        }
        let ckpt = String::from_utf8(self.checkpoint.to_json_bytes()?)
            .map_err(|e| Error::Invariant(e.to_string()))?;
        format::to_json_bytes(&Doc {
            format_version: format::FORMAT_VERSION,
            regime,
            config_hash: self.checkpoint.provenance.config_hash.as_deref(),
            epoch: d.epoch,
            batch: d.batch,
            reason: &d.reason,
            loss: d.loss.filter(|l| l.is_finite()),
            completed_epochs: self.checkpoint.provenance.epochs,
            last_finite_checkpoint: serde_json::value::RawValue::from_string(ckpt.trim_end().to_string())?,
        })
        .map(Some)
    }
}

fn source_id(source: &(impl TrainingSource + ?Sized)) -> String {
    fingerprint((0..source.len()).map(|i| source.record(i)))
}

fn train_phase(
    mut net: Network,
    source: &(impl TrainingSource + ?Sized),
    epochs: usize,
    batch_seed: u64,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
    mut trace: TrainingTrace,
) -> Result<(Network, TrainingTrace, usize, Option<DivergenceReport>)> {
    let mut adam = AdamState::new(settings.adam, &net);
    let opts = settings.train_options(epochs, batch_seed);
    let outcome = train_epochs(&mut net, &mut adam, source, &opts, |end| {
        if eval.due(end.epoch, epochs) {
            trace.rows.push(eval.row(end.network, end.epoch, end.train_loss)?);
        }
        Ok(())
    })?;
    let completed = outcome.epoch_losses.len();
    Ok((net, trace, completed, outcome.divergence))
}

fn require_data(source: &(impl TrainingSource + ?Sized), what: &str) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Config(format!("{what} is empty")));
    }
    Ok(())
}

/// The monopolist's model: fresh initialization, trained on all of the firm's data.
pub fn run_original(
    firm_data: &(impl TrainingSource + ?Sized),
    arch: &ModelArchitecture,
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    require_data(firm_data, "firm dataset")?;
    from_scratch(RegimeKind::Original, firm_data, arch, epochs, settings, eval)
}

/// Fresh initialization, trained on the consented data only.
pub fn run_retrain_scratch(
    cdc_data: &(impl TrainingSource + ?Sized),
    arch: &ModelArchitecture,
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    require_data(cdc_data, "consented dataset")?;
    from_scratch(RegimeKind::RetrainScratch, cdc_data, arch, epochs, settings, eval)
}

fn from_scratch(
    kind: RegimeKind,
    data: &(impl TrainingSource + ?Sized),
    arch: &ModelArchitecture,
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    let net = Network::init(arch.clone(), &mut stage_rng(settings.seed, Stage::Init))?;
    check_source(&net, data)?;
    let dataset_id = source_id(data);
    let (net, trace, completed, divergence) =
        train_phase(net, data, epochs, settings.seed, settings, eval, TrainingTrace::default())?;
    Ok(RegimeRun {
        checkpoint: ModelCheckpoint {
            network: net,
            provenance: Provenance::new(kind.tag(), &dataset_id, completed, settings.seed),
        },
        trace,
        divergence,
    })
}

/// Pre-trains on `pretrain_data` (a stand-in for generic pre-trained weights),
/// then trains on the consented data with a fresh optimizer.
pub fn run_retrain_pretrained(
    cdc_data: &(impl TrainingSource + ?Sized),
    arch: &ModelArchitecture,
    pretrain_data: &(impl TrainingSource + ?Sized),
    pretrain_epochs: usize,
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    require_data(cdc_data, "consented dataset")?;
    let net = Network::init(arch.clone(), &mut stage_rng(settings.seed, Stage::Init))?;
    check_source(&net, cdc_data)?;
    let pretrain_seed = derive_seed(settings.seed, Stage::Pretrain);
    let quiet = Evaluator {
        retain_test: None,
        forget_test: None,
        eval_every: usize::MAX,
        ..*eval
    };
    let mut phases = Vec::new();
    let mut net = net;
    if pretrain_epochs > 0 {
        require_data(pretrain_data, "pre-training dataset")?;
        let (pre, _, completed, divergence) = train_phase(
            net,
            pretrain_data,
            pretrain_epochs,
            pretrain_seed,
            settings,
            &quiet,
            TrainingTrace::default(),
        )?;
        let provenance = Provenance::new("pretrain", &source_id(pretrain_data), completed, pretrain_seed);
        if divergence.is_some() {
            return Ok(RegimeRun {
                checkpoint: ModelCheckpoint {
                    network: pre,
                    provenance: Provenance {
                        epochs: 0,
                        phases: vec![provenance.as_phase()],
                        ..Provenance::new(RegimeKind::RetrainPretrained.tag(), &source_id(cdc_data), 0, settings.seed)
                    },
                },
                trace: TrainingTrace::default(),
                divergence,
            });
        }
        phases.push(provenance.as_phase());
        net = pre;
    }
    let dataset_id = source_id(cdc_data);
    let (net, trace, completed, divergence) =
        train_phase(net, cdc_data, epochs, settings.seed, settings, eval, TrainingTrace::default())?;
    let mut provenance = Provenance::new(RegimeKind::RetrainPretrained.tag(), &dataset_id, completed, settings.seed);
    provenance.phases = phases;
    Ok(RegimeRun {
        checkpoint: ModelCheckpoint {
            network: net,
            provenance,
        },
        trace,
        divergence,
    })
}

fn check_init(init: &ModelCheckpoint, kind: RegimeKind) -> Result<()> {
    if init.provenance.regime != RegimeKind::Original.tag() {
        return Err(Error::Config(format!(
            "{kind} must start from an original checkpoint, got `{}`",
            init.provenance.regime
        )));
    }
    Ok(())
}

fn inherited_phases(init: &ModelCheckpoint) -> Vec<crate::nn::PhaseRecord> {
    let mut phases = init.provenance.phases.clone();
    phases.push(init.provenance.as_phase());
    phases
}

/// Mean loss over `source` without updating anything.
fn dataset_loss(net: &Network, source: &(impl TrainingSource + ?Sized)) -> Result<f64> {
    let records: Vec<&UserRecord> = (0..source.len()).map(|i| source.record(i)).collect();
    let x = batch_matrix(records.iter().copied(), net.architecture.input_dim);
    let y = target_matrix(records.iter().copied(), net.architecture.head.output_dim());
    Ok(loss_and_gradients(net, &x, &y, Direction::Descent)?.0)
}

/// Continues training the original model on consented data only. The trace
/// starts with an epoch-0 row describing the model before fine-tuning.
pub fn run_fine_tune(
    init: &ModelCheckpoint,
    cdc_data: &(impl TrainingSource + ?Sized),
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    check_init(init, RegimeKind::FineTune)?;
    require_data(cdc_data, "consented dataset")?;
    check_source(&init.network, cdc_data)?;
    let start = eval.row(&init.network, 0, dataset_loss(&init.network, cdc_data)?)?;
    let trace = TrainingTrace { rows: vec![start] };
    let dataset_id = source_id(cdc_data);
    let (net, trace, completed, divergence) =
        train_phase(init.network.clone(), cdc_data, epochs, settings.seed, settings, eval, trace)?;
    let mut provenance = Provenance::new(RegimeKind::FineTune.tag(), &dataset_id, completed, settings.seed);
    provenance.phases = inherited_phases(init);
    Ok(RegimeRun {
        checkpoint: ModelCheckpoint {
            network: net,
            provenance,
        },
        trace,
        divergence,
    })
}

/// Alternates one ascent step on a batch of forgotten data with one descent
/// step on a batch of consented data; an epoch is one pass over the forgotten
/// data. `train_loss` in the trace is the mean consented (descent) loss.
/// Any non-finite value, or a loss above the ceiling, stops the run with a
/// divergence report and the last finite model.
pub fn run_gradient_ascent_unlearn(
    init: &ModelCheckpoint,
    forget_data: &(impl TrainingSource + ?Sized),
    retain_data: &(impl TrainingSource + ?Sized),
    epochs: usize,
    settings: &RunSettings,
    eval: &Evaluator<'_>,
) -> Result<RegimeRun> {
    check_init(init, RegimeKind::GradientAscentUnlearn)?;
    require_data(forget_data, "forget dataset")?;
    require_data(retain_data, "consented dataset")?;
    check_source(&init.network, forget_data)?;
    check_source(&init.network, retain_data)?;
    let mut net = init.network.clone();
    let mut trace = TrainingTrace {
        rows: vec![eval.row(&net, 0, dataset_loss(&net, retain_data)?)?],
    };
    let mut adam = AdamState::new(settings.adam, &net);
    let mut rng = stage_rng(settings.seed, Stage::Batching);
    let mut forget_order: Vec<usize> = (0..forget_data.len()).collect();
    let mut retain_order: Vec<usize> = (0..retain_data.len()).collect();
    retain_order.shuffle(&mut rng);
    let mut retain_chunks = 0usize;
    let bs = settings.batch_size.max(1);
    let retain_batches = retain_order.len().div_ceil(bs);
    let mut divergence = None;
    let mut completed = 0;
    'epochs: for epoch in 1..=epochs {
        forget_order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in forget_order.chunks(bs).enumerate() {
            let ri = retain_chunks % retain_batches;
            if ri == 0 && retain_chunks > 0 {
                retain_order.shuffle(&mut rng);
            }
            retain_chunks += 1;
            let retain_chunk = &retain_order[ri * bs..((ri + 1) * bs).min(retain_order.len())];
            let ceiling = settings.divergence_loss_ceiling;
            let step = guarded_step(&mut net, &mut adam, forget_data, chunk, Direction::Ascent, ceiling)
                .and_then(|_| {
                    guarded_step(&mut net, &mut adam, retain_data, retain_chunk, Direction::Descent, ceiling)
                });
            match step {
                Ok(loss) => {
                    weighted += loss * retain_chunk.len() as f64;
                    seen += retain_chunk.len();
                }
                Err(StepFailure::Diverged { reason, loss }) => {
                    divergence = Some(DivergenceReport {
                        epoch,
                        batch: b,
                        reason,
                        loss: loss.filter(|l| l.is_finite()),
                    });
                    break 'epochs;
                }
                Err(StepFailure::Fatal(e)) => return Err(e),
            }
        }
        completed = epoch;
        if eval.due(epoch, epochs) {
            trace.rows.push(eval.row(&net, epoch, weighted / seen.max(1) as f64)?);
        }
    }
    let mut provenance = Provenance::new(
        RegimeKind::GradientAscentUnlearn.tag(),
        &source_id(retain_data),
        completed,
        settings.seed,
    );
    provenance.phases = inherited_phases(init);
    Ok(RegimeRun {
        checkpoint: ModelCheckpoint {
            network: net,
            provenance,
        },
        trace,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for k in RegimeKind::ALL {
            assert_eq!(RegimeKind::from_tag(k.tag()), Some(k));
        }
        assert_eq!(RegimeKind::from_tag("fine-tune"), Some(RegimeKind::FineTune));
        assert_eq!(RegimeKind::from_tag("nope"), None);
    }

    #[test]
    fn spec_validation() {
        let ft = RegimeSpec::new(RegimeKind::FineTune, 3);
        assert!(ft.validate(true).is_ok());
        let err = ft.validate(false).unwrap_err().to_string();
        assert!(err.contains("fine_tune"), "{err}");
        let rp = RegimeSpec::new(RegimeKind::RetrainPretrained, 3);
        assert!(rp.validate(true).is_err());
    }

    #[test]
    fn trace_csv_shape() {
        let t = TrainingTrace {
            rows: vec![
                TraceRow {
                    epoch: 0,
                    train_loss: 0.5,
                    forget_rate: Some(0.25),
                    retain_rate: None,
                },
                TraceRow {
                    epoch: 1,
                    train_loss: 0.25,
                    forget_rate: Some(1.0),
                    retain_rate: Some(0.75),
                },
            ],
        };
        assert_eq!(
            t.to_csv(),
            "epoch,train_loss,forget_rate,retain_rate\n0,0.5,0.25,\n1,0.25,1,0.75\n"
        );
        assert_eq!(t.max_forget_rate(), Some(1.0));
    }
}
