use rand::seq::SliceRandom;

use super::adam::{adam_step, AdamState};
use super::network::{batch_matrix, loss_and_gradients, target_matrix, Direction, Network};
use crate::consent::{FirmDataset, SuccessorDataset, UserRecord};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, Stage};

/// Read access to training records. Training reads records only through this
/// trait, so wrappers can audit exactly which users a run touched.
pub trait TrainingSource {
    fn len(&self) -> usize;
    fn record(&self, index: usize) -> &UserRecord;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSource for [UserRecord] {
    fn len(&self) -> usize {
        <[UserRecord]>::len(self)
    }

    fn record(&self, index: usize) -> &UserRecord {
        &self[index]
    }
}

impl TrainingSource for FirmDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn record(&self, index: usize) -> &UserRecord {
        &self.records[index]
    }
}

impl TrainingSource for SuccessorDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn record(&self, index: usize) -> &UserRecord {
        &self.records[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the batching stream that shuffles every epoch.
    pub seed: u64,
    /// A finite loss above this also counts as divergence.
    pub divergence_loss_ceiling: f64,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            divergence_loss_ceiling: 1e6,
        }
    }
}

/// Where and why a run stopped. The network handed back alongside it is the
/// last one whose loss and gradients were finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
    /// Loss of the offending batch, when it was still a finite number.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub divergence: Option<DivergenceReport>,
}

/// Passed to the per-epoch observer.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub train_loss: f64,
    pub network: &'a Network,
}

pub(crate) enum StepFailure {
    Diverged { reason: String, loss: Option<f64> },
    Fatal(Error),
}

/// Computes the batch loss, checks it against the divergence guard and, if
/// sound, applies one Adam update.
pub(crate) fn guarded_step(
    net: &mut Network,
    adam: &mut AdamState,
    source: &(impl TrainingSource + ?Sized),
    indices: &[usize],
    direction: Direction,
    ceiling: f64,
) -> std::result::Result<f64, StepFailure> {
    let records: Vec<&UserRecord> = indices.iter().map(|&i| source.record(i)).collect();
    let arch = &net.architecture;
    let x = batch_matrix(records.iter().copied(), arch.input_dim);
    let y = target_matrix(records.iter().copied(), arch.head.output_dim());
    let (loss, grads) = match loss_and_gradients(net, &x, &y, direction) {
        Ok(v) => v,
        Err(Error::Divergence(reason)) => return Err(StepFailure::Diverged { reason, loss: None }),
        Err(e) => return Err(StepFailure::Fatal(e)),
    };
    if loss > ceiling {
        return Err(StepFailure::Diverged {
            reason: format!("loss {loss:.6e} exceeded the divergence ceiling {ceiling:.1e}"),
            loss: Some(loss),
        });
    }
    match adam_step(adam, net, &grads) {
        Ok(()) => Ok(loss),
        Err(Error::Divergence(reason)) => Err(StepFailure::Diverged {
            reason,
            loss: Some(loss),
        }),
        Err(e) => Err(StepFailure::Fatal(e)),
    }
}

/// Checks every record's width and label space against the model.
pub(crate) fn check_source(net: &Network, source: &(impl TrainingSource + ?Sized)) -> Result<()> {
    for i in 0..source.len() {
        let r = source.record(i);
        net.architecture.check_data(r.features.len(), &r.labels)?;
    }
    Ok(())
}

/// Mini-batch Adam over `source` for `opts.epochs` epochs. Each epoch
/// reshuffles with the batching stream and keeps the final partial batch.
/// On divergence the run stops and `net` holds the last finite parameters.
pub fn train_epochs(
    net: &mut Network,
    adam: &mut AdamState,
    source: &(impl TrainingSource + ?Sized),
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut outcome = TrainOutcome {
        epoch_losses: Vec::with_capacity(opts.epochs),
        divergence: None,
    };
    if opts.epochs == 0 {
        return Ok(outcome);
    }
    if source.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    check_source(net, source)?;
    let mut rng = stage_rng(opts.seed, Stage::Batching);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            match guarded_step(
                net,
                adam,
                source,
                chunk,
                Direction::Descent,
                opts.divergence_loss_ceiling,
            ) {
                Ok(loss) => weighted += loss * chunk.len() as f64,
                Err(StepFailure::Diverged { reason, loss }) => {
                    outcome.divergence = Some(DivergenceReport {
                        epoch,
                        batch: b,
                        reason,
                        loss: loss.filter(|l| l.is_finite()),
                    });
                    return Ok(outcome);
                }
                Err(StepFailure::Fatal(e)) => return Err(e),
            }
        }
        let train_loss = weighted / source.len() as f64;
        outcome.epoch_losses.push(train_loss);
        on_epoch(EpochEnd {
            epoch,
            train_loss,
            network: net,
        })?;
    }
    Ok(outcome)
}
