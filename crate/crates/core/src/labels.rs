use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supervision attached to a user record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSet {
    MultiClass {
        class_index: usize,
        num_classes: usize,
    },
    /// `active[l]` is 0 or 1; `group_of_label[l]` names the group label `l` belongs to.
    MultiLabel {
        active: Vec<u8>,
        group_of_label: Arc<Vec<String>>,
    },
}

impl LabelSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            LabelSet::MultiClass {
                class_index,
                num_classes,
            } => {
                if *num_classes == 0 || class_index >= num_classes {
                    return Err(Error::Invariant(format!(
                        "class index {class_index} outside 0..{num_classes}"
                    )));
                }
            }
            LabelSet::MultiLabel {
                active,
                group_of_label,
            } => {
                if active.len() < 2 {
                    return Err(Error::Invariant(
                        "multi-label sets need at least two labels".into(),
                    ));
                }
                if active.len() != group_of_label.len() {
                    return Err(Error::Invariant(format!(
                        "{} labels but {} group assignments",
                        active.len(),
                        group_of_label.len()
                    )));
                }
                if active.iter().any(|&a| a > 1) {
                    return Err(Error::Invariant("label activations must be 0 or 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Width of the output layer needed to predict this label space.
    pub fn output_dim(&self) -> usize {
        match self {
            LabelSet::MultiClass { num_classes, .. } => *num_classes,
            LabelSet::MultiLabel { active, .. } => active.len(),
        }
    }

    pub fn is_multi_class(&self) -> bool {
        matches!(self, LabelSet::MultiClass { .. })
    }

    /// Whether two label sets describe the same label space.
    pub fn same_space(&self, other: &LabelSet) -> bool {
        match (self, other) {
            (
                LabelSet::MultiClass { num_classes: a, .. },
                LabelSet::MultiClass { num_classes: b, .. },
            ) => a == b,
            (
                LabelSet::MultiLabel {
                    group_of_label: a, ..
                },
                LabelSet::MultiLabel {
                    group_of_label: b, ..
                },
            ) => a == b,
            _ => false,
        }
    }

    /// Writes the training target (one-hot or multi-hot) into `out`.
    pub fn write_target(&self, out: &mut [f64]) {
        out.fill(0.0);
        match self {
            LabelSet::MultiClass { class_index, .. } => out[*class_index] = 1.0,
            LabelSet::MultiLabel { active, .. } => {
                for (o, &a) in out.iter_mut().zip(active) {
                    *o = f64::from(a);
                }
            }
        }
    }

    /// Indices of labels in `group`, in ascending order. Empty for multi-class sets.
    pub fn labels_in_group(&self, group: &str) -> Vec<usize> {
        match self {
            LabelSet::MultiClass { .. } => Vec::new(),
            LabelSet::MultiLabel { group_of_label, .. } => group_of_label
                .iter()
                .enumerate()
                .filter(|(_, g)| g.as_str() == group)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// True when the record carries at least one active label of `group`.
    pub fn carries_group(&self, group: &str) -> bool {
        match self {
            LabelSet::MultiClass { .. } => false,
            LabelSet::MultiLabel {
                active,
                group_of_label,
            } => active
                .iter()
                .zip(group_of_label.iter())
                .any(|(&a, g)| a == 1 && g == group),
        }
    }

    /// Distinct group names in first-appearance order.
    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        if let LabelSet::MultiLabel { group_of_label, .. } = self {
            for g in group_of_label.iter() {
                if !names.contains(g) {
                    names.push(g.clone());
                }
            }
        }
        names
    }
}
