//! Per-user consent over task blocks and the successor datasets built from it.
//!
//! A user's feature vector is the concatenation of `J` task blocks. Each user
//! carries a binary `J x K` consent grid whose entry `(j, k)` says whether the
//! task-`j` block may be handed to successor `k`. Successors are numbered from
//! 1, tasks from 0.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{self, FORMAT_VERSION};
use crate::labels::LabelSet;
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBlockSpec {
    pub task_names: Vec<String>,
    pub block_dims: Vec<usize>,
}

impl TaskBlockSpec {
    pub fn new(task_names: Vec<String>, block_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            task_names,
            block_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single task block of width `dim`.
    pub fn single(name: &str, dim: usize) -> Result<Self> {
        Self::new(vec![name.to_string()], vec![dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_names.is_empty() {
            return Err(Error::Invariant("at least one task block is required".into()));
        }
        if self.task_names.len() != self.block_dims.len() {
            return Err(Error::Invariant(format!(
                "{} task names but {} block widths",
                self.task_names.len(),
                self.block_dims.len()
            )));
        }
        if let Some(j) = self.block_dims.iter().position(|&d| d == 0) {
            return Err(Error::Invariant(format!("task block {j} has zero width")));
        }
        let unique: BTreeSet<&String> = self.task_names.iter().collect();
        if unique.len() != self.task_names.len() {
            return Err(Error::Invariant("task names must be unique".into()));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    /// Index range of task `j` inside the concatenated vector.
    pub fn block_range(&self, j: usize) -> Range<usize> {
        let start: usize = self.block_dims[..j].iter().sum();
        start..start + self.block_dims[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    #[serde(serialize_with = "format::serialize_reals")]
    pub features: Vec<f64>,
    pub labels: LabelSet,
    #[serde(default)]
    pub origin_class: Option<usize>,
}

impl UserRecord {
    pub fn validate(&self, spec: &TaskBlockSpec) -> Result<()> {
        if self.features.len() != spec.total_dim() {
            return Err(Error::Invariant(format!(
                "user {}: {} features, expected {}",
                self.user_id,
                self.features.len(),
                spec.total_dim()
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "user {}: feature {i} is not finite",
                self.user_id
            )));
        }
        self.labels.validate()
    }
}

/// Binary consent grid, tasks as rows and successors as columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConsentMatrix {
    tasks: usize,
    successors: usize,
    entries: Vec<u8>,
}

impl ConsentMatrix {
    pub fn zeros(tasks: usize, successors: usize) -> Self {
        Self {
            tasks,
            successors,
            entries: vec![0; tasks * successors],
        }
    }

    pub fn ones(tasks: usize, successors: usize) -> Self {
        Self {
            tasks,
            successors,
            entries: vec![1; tasks * successors],
        }
    }

    /// Builds a grid from its row-major entries.
    pub fn from_row_major(tasks: usize, successors: usize, entries: Vec<u8>) -> Result<Self> {
        if tasks == 0 || successors == 0 {
            return Err(Error::Invariant("consent grid needs J >= 1 and K >= 1".into()));
        }
        if entries.len() != tasks * successors {
            return Err(Error::Invariant(format!(
                "consent grid has {} entries, expected {tasks}x{successors}",
                entries.len()
            )));
        }
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::Invariant("consent entries must be 0 or 1".into()));
        }
        Ok(Self {
            tasks,
            successors,
            entries,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.tasks, self.successors)
    }

    pub fn row_major(&self) -> &[u8] {
        &self.entries
    }

    /// Entry for task `task` (0-based) and successor `successor` (1-based).
    pub fn get(&self, task: usize, successor: usize) -> bool {
        self.entries[task * self.successors + successor - 1] == 1
    }

    pub fn set(&mut self, task: usize, successor: usize, value: bool) {
        self.entries[task * self.successors + successor - 1] = u8::from(value);
    }

    /// Sets every task entry in the successor's column.
    pub fn set_column(&mut self, successor: usize, value: bool) {
        for task in 0..self.tasks {
            self.set(task, successor, value);
        }
    }

    pub fn column_is_zero(&self, successor: usize) -> bool {
        (0..self.tasks).all(|task| !self.get(task, successor))
    }
}

/// How consent grids are derived for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsentRule {
    /// Users whose origin class is listed contribute every task block to `successor`.
    AllowClasses {
        classes: BTreeSet<usize>,
        successor: usize,
    },
    /// Users carrying any label of `group` contribute every task block to `successor`.
    AllowLabelGroup { group: String, successor: usize },
    /// Every entry of every grid is an independent Bernoulli draw.
    PerUserRandom { probability: f64, seed: u64 },
    /// Row-major grids given per user.
    Explicit { map: BTreeMap<String, Vec<u8>> },
}

impl ConsentRule {
    /// Successor column the rule is about, if it names one.
    pub fn successor(&self) -> Option<usize> {
        match self {
            ConsentRule::AllowClasses { successor, .. }
            | ConsentRule::AllowLabelGroup { successor, .. } => Some(*successor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirmDataset {
    pub spec: TaskBlockSpec,
    pub records: Vec<UserRecord>,
    pub consent: BTreeMap<String, ConsentMatrix>,
    pub num_successors: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    format_version: u32,
    spec: TaskBlockSpec,
    num_successors: usize,
    records: Vec<UserRecord>,
    consent: BTreeMap<String, Vec<u8>>,
}

impl FirmDataset {
    pub fn new(
        spec: TaskBlockSpec,
        records: Vec<UserRecord>,
        consent: BTreeMap<String, ConsentMatrix>,
        num_successors: usize,
    ) -> Result<Self> {
        let ds = Self {
            spec,
            records,
            consent,
            num_successors,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// A dataset where every user consents everything to every successor.
    pub fn with_full_consent(
        spec: TaskBlockSpec,
        records: Vec<UserRecord>,
        num_successors: usize,
    ) -> Result<Self> {
        let grid = ConsentMatrix::ones(spec.num_tasks(), num_successors.max(1));
        let consent = records
            .iter()
            .map(|r| (r.user_id.clone(), grid.clone()))
            .collect();
        Self::new(spec, records, consent, num_successors)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.num_successors == 0 {
            return Err(Error::Invariant("at least one successor is required".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate(&self.spec)?;
            if !seen.insert(r.user_id.as_str()) {
                return Err(Error::Invariant(format!("duplicate user id {}", r.user_id)));
            }
            let grid = self.consent.get(&r.user_id).ok_or_else(|| {
                Error::Invariant(format!("user {} has no consent grid", r.user_id))
            })?;
            if grid.dims() != (self.spec.num_tasks(), self.num_successors) {
                return Err(Error::Invariant(format!(
                    "user {}: consent grid is {:?}, expected ({}, {})",
                    r.user_id,
                    grid.dims(),
                    self.spec.num_tasks(),
                    self.num_successors
                )));
            }
        }
        if self.consent.len() != self.records.len() {
            let extra = self
                .consent
                .keys()
                .find(|id| !seen.contains(id.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Invariant(format!(
                "consent grid for unknown user {extra}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user_id.as_str()).collect()
    }

    /// Replaces every user's consent grid.
    pub fn with_consent(mut self, consent: BTreeMap<String, ConsentMatrix>) -> Result<Self> {
        self.consent = consent;
        self.validate()?;
        Ok(self)
    }

    /// Short content hash over ids, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.records.iter())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let doc = DatasetDoc {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            num_successors: self.num_successors,
            records: self.records.clone(),
            consent: self
                .consent
                .iter()
                .map(|(id, c)| (id.clone(), c.row_major().to_vec()))
                .collect(),
        };
        format::to_json_bytes(&doc)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: DatasetDoc = serde_json::from_slice(bytes)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::load(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        let tasks = doc.spec.num_tasks();
        let consent = doc
            .consent
            .into_iter()
            .map(|(id, entries)| {
                let grid = ConsentMatrix::from_row_major(tasks, doc.num_successors, entries)
                    .map_err(|e| Error::load(format!("consent.{id}"), e.to_string()))?;
                Ok((id, grid))
            })
            .collect::<Result<_>>()?;
        Self::new(doc.spec, doc.records, consent, doc.num_successors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::atomic_write(path, &self.to_json_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_bytes(&format::read_file(path)?)
    }

    fn check_successor(&self, successor: usize) -> Result<()> {
        if successor == 0 || successor > self.num_successors {
            return Err(Error::Config(format!(
                "successor {successor} outside 1..={}",
                self.num_successors
            )));
        }
        Ok(())
    }
}

/// Masked data handed to one successor.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorDataset {
    pub successor_index: usize,
    pub spec: TaskBlockSpec,
    pub records: Vec<UserRecord>,
    pub dropped_user_ids: Vec<String>,
    /// Consent grids of the retained users, kept so the dataset can be re-masked or saved.
    pub consent: BTreeMap<String, ConsentMatrix>,
    pub num_successors: usize,
}

impl SuccessorDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Retained records as a dataset of their own (same file format as the firm's).
    pub fn to_firm_dataset(&self) -> Result<FirmDataset> {
        FirmDataset::new(
            self.spec.clone(),
            self.records.clone(),
            self.consent.clone(),
            self.num_successors,
        )
    }
}

/// Short content hash over user ids, feature bits and label targets.
pub fn fingerprint<'a>(records: impl Iterator<Item = &'a UserRecord>) -> String {
    let mut h = Sha256::new();
    let mut target = Vec::new();
    for r in records {
        h.update(r.user_id.as_bytes());
        h.update([0]);
        for v in &r.features {
            h.update(v.to_bits().to_le_bytes());
        }
        target.resize(r.labels.output_dim(), 0.0);
        r.labels.write_target(&mut target);
        h.update(target.iter().map(|&v| v as u8).collect::<Vec<u8>>());
    }
    hex::encode(&h.finalize()[..8])
}

/// Materializes a consent grid for every user of `dataset`.
pub fn consent_from_rule(
    dataset: &FirmDataset,
    rule: &ConsentRule,
) -> Result<BTreeMap<String, ConsentMatrix>> {
    let tasks = dataset.spec.num_tasks();
    let k = dataset.num_successors;
    let mut out = BTreeMap::new();
    match rule {
        ConsentRule::AllowClasses { classes, successor } => {
            dataset.check_successor(*successor)?;
            let known = known_classes(dataset);
            if let Some(c) = classes.iter().find(|c| !known.contains(c)) {
                return Err(Error::Config(format!("consent rule names unknown class {c}")));
            }
            for r in &dataset.records {
                let mut grid = ConsentMatrix::zeros(tasks, k);
                if r.origin_class.is_some_and(|c| classes.contains(&c)) {
                    grid.set_column(*successor, true);
                }
                out.insert(r.user_id.clone(), grid);
            }
        }
        ConsentRule::AllowLabelGroup { group, successor } => {
            dataset.check_successor(*successor)?;
            let known = dataset
                .records
                .iter()
                .any(|r| !r.labels.labels_in_group(group).is_empty());
            if !known {
                return Err(Error::Config(format!(
                    "consent rule names unknown label group `{group}`"
                )));
            }
            for r in &dataset.records {
                let mut grid = ConsentMatrix::zeros(tasks, k);
                if r.labels.carries_group(group) {
                    grid.set_column(*successor, true);
                }
                out.insert(r.user_id.clone(), grid);
            }
        }
        ConsentRule::PerUserRandom { probability, seed } => {
            if !(0.0..=1.0).contains(probability) {
                return Err(Error::Config(format!(
                    "consent probability {probability} outside [0, 1]"
                )));
            }
            let mut rng = stage_rng(*seed, Stage::Consent);
            for r in &dataset.records {
                let entries = (0..tasks * k)
                    .map(|_| u8::from(rng.random_bool(*probability)))
                    .collect();
                out.insert(
                    r.user_id.clone(),
                    ConsentMatrix::from_row_major(tasks, k, entries)?,
                );
            }
        }
        ConsentRule::Explicit { map } => {
            for r in &dataset.records {
                let entries = map.get(&r.user_id).ok_or_else(|| {
                    Error::Config(format!("explicit consent missing user {}", r.user_id))
                })?;
                let grid = ConsentMatrix::from_row_major(tasks, k, entries.clone())
                    .map_err(|e| Error::Config(format!("user {}: {e}", r.user_id)))?;
                out.insert(r.user_id.clone(), grid);
            }
            if let Some(id) = map.keys().find(|id| !out.contains_key(*id)) {
                return Err(Error::Config(format!(
                    "explicit consent names unknown user {id}"
                )));
            }
        }
    }
    Ok(out)
}

fn known_classes(dataset: &FirmDataset) -> BTreeSet<usize> {
    let mut known: BTreeSet<usize> = dataset.records.iter().filter_map(|r| r.origin_class).collect();
    if let Some(LabelSet::MultiClass { num_classes, .. }) = dataset.records.first().map(|r| &r.labels)
    {
        known.extend(0..*num_classes);
    }
    known
}

/// The vector user `record` contributes to `successor`: every task block whose
/// consent entry is 0 is replaced by exact (positive) zeros.
pub fn build_cdc_vector(
    spec: &TaskBlockSpec,
    record: &UserRecord,
    consent: &ConsentMatrix,
    successor: usize,
) -> Result<Vec<f64>> {
    if record.features.len() != spec.total_dim() {
        return Err(Error::Invariant(format!(
            "user {}: {} features, spec expects {}",
            record.user_id,
            record.features.len(),
            spec.total_dim()
        )));
    }
    let (tasks, successors) = consent.dims();
    if tasks != spec.num_tasks() {
        return Err(Error::Invariant(format!(
            "consent grid has {tasks} task rows, spec has {}",
            spec.num_tasks()
        )));
    }
    if successor == 0 || successor > successors {
        return Err(Error::Invariant(format!(
            "successor {successor} outside 1..={successors}"
        )));
    }
    let mut out = record.features.clone();
    for task in 0..tasks {
        if !consent.get(task, successor) {
            out[spec.block_range(task)].fill(0.0);
        }
    }
    Ok(out)
}

/// Masks every record for `successor`. With `drop_all_zero`, users whose whole
/// consent column is zero are listed in `dropped_user_ids` instead of kept as
/// all-zero rows.
pub fn build_cdc_dataset(
    dataset: &FirmDataset,
    successor: usize,
    drop_all_zero: bool,
) -> Result<SuccessorDataset> {
    dataset.check_successor(successor)?;
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut consent = BTreeMap::new();
    for r in &dataset.records {
        let grid = dataset
            .consent
            .get(&r.user_id)
            .ok_or_else(|| Error::Invariant(format!("user {} has no consent grid", r.user_id)))?;
        if drop_all_zero && grid.column_is_zero(successor) {
            dropped.push(r.user_id.clone());
            continue;
        }
        let features = build_cdc_vector(&dataset.spec, r, grid, successor)?;
        records.push(UserRecord {
            features,
            ..r.clone()
        });
        consent.insert(r.user_id.clone(), grid.clone());
    }
    Ok(SuccessorDataset {
        successor_index: successor,
        spec: dataset.spec.clone(),
        records,
        dropped_user_ids: dropped,
        consent,
        num_successors: dataset.num_successors,
    })
}

/// The records the successor did not receive, unmasked.
pub fn complement_dataset(
    dataset: &FirmDataset,
    successor_ds: &SuccessorDataset,
) -> Result<FirmDataset> {
    let ids = dataset.user_ids();
    let referenced = successor_ds
        .records
        .iter()
        .map(|r| r.user_id.as_str())
        .chain(successor_ds.dropped_user_ids.iter().map(String::as_str));
    for id in referenced {
        if !ids.contains(id) {
            return Err(Error::Provenance(format!(
                "successor dataset references user {id} absent from the firm dataset"
            )));
        }
    }
    let dropped: BTreeSet<&str> = successor_ds.dropped_user_ids.iter().map(String::as_str).collect();
    let records: Vec<UserRecord> = dataset
        .records
        .iter()
        .filter(|r| dropped.contains(r.user_id.as_str()))
        .cloned()
        .collect();
    let consent = records
        .iter()
        .map(|r| (r.user_id.clone(), dataset.consent[&r.user_id].clone()))
        .collect();
    FirmDataset::new(
        dataset.spec.clone(),
        records,
        consent,
        dataset.num_successors,
    )
}
