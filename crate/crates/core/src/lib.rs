//! Simulation of consent-driven data contribution when a monopolist firm is
//! broken up into successor firms.
//!
//! The crate covers the whole pipeline: per-user consent masks over task
//! blocks, seeded synthetic datasets, a small deterministic MLP engine with
//! Adam, the training regimes compared when a successor must stop using data
//! it was not given, and the forget/retain metrics used to score them.

pub mod consent;
pub mod error;
pub mod experiment;
pub mod format;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod regimes;
pub mod rng;
pub mod synth;

pub use consent::{
    build_cdc_dataset, build_cdc_vector, complement_dataset, consent_from_rule, ConsentMatrix,
    ConsentRule, FirmDataset, SuccessorDataset, TaskBlockSpec, UserRecord,
};
pub use error::{Error, Result};
pub use labels::LabelSet;
pub use metrics::{accuracy, forget_rate, micro_f1, retain_rate, EvalScope, MetricRow};
pub use nn::{Activation, AdamConfig, AdamState, Head, ModelArchitecture, ModelCheckpoint};
pub use synth::{generate, GeneratorConfig, GeneratorVariant};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentSummary};
