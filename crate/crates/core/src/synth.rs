//! Seeded synthetic stand-ins for the firm's data.
//!
//! * `GaussianClasses`: one task block, isotropic Gaussian clusters, one class per record.
//! * `MultiLabelSkills`: one task block, labels split into named groups; each
//!   record has a primary group and its features are the sum of the
//!   prototypes of its active labels plus noise.
//! * `MultiTask`: several task blocks, each with its own class-conditional
//!   Gaussian clusters, all driven by the record's single class.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::consent::{FirmDataset, TaskBlockSpec, UserRecord};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::rng::{stage_rng, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub seed: u64,
    pub test_fraction: f64,
    pub variant: GeneratorVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorVariant {
    GaussianClasses {
        num_classes: usize,
        per_class_count: usize,
        dim: usize,
        /// Expected distance between two class means, in units of `noise_sigma`.
        class_separation: f64,
        noise_sigma: f64,
        /// Added to every coordinate of every class mean.
        #[serde(default)]
        mean_offset: f64,
    },
    MultiLabelSkills {
        num_records: usize,
        dim: usize,
        groups: Vec<SkillGroup>,
        label_density: f64,
        cross_group_overlap_rate: f64,
        /// Norm of each label prototype, in units of `noise_sigma`.
        label_separation: f64,
        noise_sigma: f64,
        /// Added to every feature coordinate of every record.
        #[serde(default)]
        mean_offset: f64,
    },
    MultiTask {
        num_classes: usize,
        per_class_count: usize,
        tasks: Vec<TaskBlockConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillGroup {
    pub group_name: String,
    pub num_labels: usize,
    /// Relative share of records whose primary group this is.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBlockConfig {
    pub name: String,
    pub dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return cfg(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        match &self.variant {
            GeneratorVariant::GaussianClasses {
                num_classes,
                per_class_count,
                dim,
                class_separation,
                noise_sigma,
                mean_offset,
            } => {
                if *num_classes < 2 || *dim == 0 {
                    return cfg("need at least two classes and a positive dimension".into());
                }
                check_stratum(*per_class_count)?;
                if !(*noise_sigma > 0.0) || !(*class_separation >= 0.0) {
                    return cfg("noise_sigma must be > 0 and class_separation >= 0".into());
                }
                if !mean_offset.is_finite() {
                    return cfg("mean_offset must be finite".into());
                }
            }
            GeneratorVariant::MultiLabelSkills {
                num_records,
                dim,
                groups,
                label_density,
                cross_group_overlap_rate,
                label_separation,
                noise_sigma,
                mean_offset,
            } => {
                if groups.len() < 2 {
                    return cfg("skills data needs at least two label groups".into());
                }
                if *dim == 0 || *num_records == 0 {
                    return cfg("num_records and dim must be positive".into());
                }
                if groups.iter().any(|g| g.num_labels == 0 || !(g.weight > 0.0)) {
                    return cfg("every group needs labels and a positive weight".into());
                }
                let mut names: Vec<&str> = groups.iter().map(|g| g.group_name.as_str()).collect();
                names.sort_unstable();
                names.dedup();
                if names.len() != groups.len() {
                    return cfg("group names must be unique".into());
                }
                if !(0.0..=1.0).contains(label_density)
                    || !(0.0..=1.0).contains(cross_group_overlap_rate)
                {
                    return cfg("label_density and cross_group_overlap_rate must lie in [0, 1]".into());
                }
                if !(*noise_sigma > 0.0) || !(*label_separation >= 0.0) {
                    return cfg("noise_sigma must be > 0 and label_separation >= 0".into());
                }
                if !mean_offset.is_finite() {
                    return cfg("mean_offset must be finite".into());
                }
                for n in group_counts(*num_records, groups) {
                    check_stratum(n)?;
                }
            }
            GeneratorVariant::MultiTask {
                num_classes,
                per_class_count,
                tasks,
            } => {
                if *num_classes < 2 || tasks.is_empty() {
                    return cfg("need at least two classes and one task block".into());
                }
                check_stratum(*per_class_count)?;
                for t in tasks {
                    if t.dim == 0 || !(t.noise_sigma > 0.0) || !(t.class_separation >= 0.0) {
                        return cfg(format!("task block `{}` is degenerate", t.name));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_stratum(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!(
            "a stratum of {n} record(s) cannot be split into train and test"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn group_counts(num_records: usize, groups: &[SkillGroup]) -> Vec<usize> {
    let weights: Vec<f64> = groups.iter().map(|g| g.weight).collect();
    apportion(num_records, &weights)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class means with expected pairwise distance `separation * sigma`.
fn draw_means(rng: &mut ChaCha8Rng, k: usize, dim: usize, separation: f64, sigma: f64) -> Vec<Vec<f64>> {
    let scale = separation * sigma / (2.0 * dim as f64).sqrt();
    (0..k).map(|_| gaussian_vec(rng, dim, scale)).collect()
}

fn offset_means(rng: &mut ChaCha8Rng, k: usize, dim: usize, separation: f64, sigma: f64, offset: f64) -> Vec<Vec<f64>> {
    let mut means = draw_means(rng, k, dim, separation, sigma);
    for v in means.iter_mut().flatten() {
        *v += offset;
    }
    means
}

/// The true class means of a `GaussianClasses` configuration.
pub fn class_means(config: &GeneratorConfig) -> Result<Vec<Vec<f64>>> {
    match &config.variant {
        GeneratorVariant::GaussianClasses {
            num_classes,
            dim,
            class_separation,
            noise_sigma,
            mean_offset,
            ..
        } => {
            let mut rng = stage_rng(config.seed, Stage::Data);
            Ok(offset_means(&mut rng, *num_classes, *dim, *class_separation, *noise_sigma, *mean_offset))
        }
        other => Err(Error::UnsupportedVariant(variant_name(other).into())),
    }
}

fn variant_name(v: &GeneratorVariant) -> &'static str {
    match v {
        GeneratorVariant::GaussianClasses { .. } => "gaussian_classes",
        GeneratorVariant::MultiLabelSkills { .. } => "multi_label_skills",
        GeneratorVariant::MultiTask { .. } => "multi_task",
    }
}

struct Draft {
    features: Vec<f64>,
    labels: LabelSet,
    stratum: usize,
}

/// Generates the firm's train and test splits. Every user consents fully to a
/// single successor; consent rules are applied afterwards.
pub fn generate(config: &GeneratorConfig) -> Result<(FirmDataset, FirmDataset)> {
    config.validate()?;
    let mut rng = stage_rng(config.seed, Stage::Data);
    let (spec, drafts, strata) = match &config.variant {
        GeneratorVariant::GaussianClasses {
            num_classes,
            per_class_count,
            dim,
            class_separation,
            noise_sigma,
            mean_offset,
        } => {
            let means = offset_means(&mut rng, *num_classes, *dim, *class_separation, *noise_sigma, *mean_offset);
            let mut drafts = Vec::with_capacity(num_classes * per_class_count);
            for (class, mean) in means.iter().enumerate() {
                for _ in 0..*per_class_count {
                    let noise = gaussian_vec(&mut rng, *dim, *noise_sigma);
                    drafts.push(Draft {
                        features: mean.iter().zip(noise).map(|(m, n)| m + n).collect(),
                        labels: LabelSet::MultiClass {
                            class_index: class,
                            num_classes: *num_classes,
                        },
                        stratum: class,
                    });
                }
            }
            (TaskBlockSpec::single("features", *dim)?, drafts, *num_classes)
        }
        GeneratorVariant::MultiLabelSkills {
            num_records,
            dim,
            groups,
            label_density,
            cross_group_overlap_rate,
            label_separation,
            noise_sigma,
            mean_offset,
        } => {
            let group_of_label: Arc<Vec<String>> = Arc::new(
                groups
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g.group_name.clone(), g.num_labels))
                    .collect(),
            );
            let num_labels = group_of_label.len();
            let proto_scale = label_separation * noise_sigma / (*dim as f64).sqrt();
            let prototypes: Vec<Vec<f64>> = (0..num_labels)
                .map(|_| gaussian_vec(&mut rng, *dim, proto_scale))
                .collect();
            let mut offsets = Vec::with_capacity(groups.len());
            let mut start = 0;
            for g in groups {
                offsets.push(start..start + g.num_labels);
                start += g.num_labels;
            }
            let mut drafts = Vec::with_capacity(*num_records);
            for (gi, count) in group_counts(*num_records, groups).into_iter().enumerate() {
                for _ in 0..count {
                    let mut active = vec![0u8; num_labels];
                    for (gj, range) in offsets.iter().enumerate() {
                        let p = if gi == gj {
                            *label_density
                        } else {
                            *cross_group_overlap_rate
                        };
                        for l in range.clone() {
                            active[l] = u8::from(rng.random_bool(p));
                        }
                    }
                    let own = offsets[gi].clone();
                    if active[own.clone()].iter().all(|&a| a == 0) {
                        active[rng.random_range(own)] = 1;
                    }
                    let mut features: Vec<f64> = gaussian_vec(&mut rng, *dim, *noise_sigma)
                        .into_iter()
                        .map(|v| v + mean_offset)
                        .collect();
                    for (l, _) in active.iter().enumerate().filter(|(_, &a)| a == 1) {
                        for (f, p) in features.iter_mut().zip(&prototypes[l]) {
                            *f += p;
                        }
                    }
                    drafts.push(Draft {
                        features,
                        labels: LabelSet::MultiLabel {
                            active,
                            group_of_label: group_of_label.clone(),
                        },
                        stratum: gi,
                    });
                }
            }
            (TaskBlockSpec::single("skills", *dim)?, drafts, groups.len())
        }
        GeneratorVariant::MultiTask {
            num_classes,
            per_class_count,
            tasks,
        } => {
            let means: Vec<Vec<Vec<f64>>> = tasks
                .iter()
                .map(|t| draw_means(&mut rng, *num_classes, t.dim, t.class_separation, t.noise_sigma))
                .collect();
            let mut drafts = Vec::with_capacity(num_classes * per_class_count);
            for class in 0..*num_classes {
                for _ in 0..*per_class_count {
                    let mut features = Vec::new();
                    for (t, task_means) in tasks.iter().zip(&means) {
                        let noise = gaussian_vec(&mut rng, t.dim, t.noise_sigma);
                        features.extend(task_means[class].iter().zip(noise).map(|(m, n)| m + n));
                    }
                    drafts.push(Draft {
                        features,
                        labels: LabelSet::MultiClass {
                            class_index: class,
                            num_classes: *num_classes,
                        },
                        stratum: class,
                    });
                }
            }
            let spec = TaskBlockSpec::new(
                tasks.iter().map(|t| t.name.clone()).collect(),
                tasks.iter().map(|t| t.dim).collect(),
            )?;
            (spec, drafts, *num_classes)
        }
    };
    split(config, spec, drafts, strata, &mut rng)
}

fn split(
    config: &GeneratorConfig,
    spec: TaskBlockSpec,
    drafts: Vec<Draft>,
    strata: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FirmDataset, FirmDataset)> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); strata];
    for (i, d) in drafts.iter().enumerate() {
        members[d.stratum].push(i);
    }
    let sizes: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();
    let total_test = (drafts.len() as f64 * config.test_fraction).round() as usize;
    let test_counts = apportion(total_test, &sizes);
    let mut is_test = vec![false; drafts.len()];
    for (m, &n_test) in members.iter_mut().zip(&test_counts) {
        if n_test == 0 || n_test >= m.len() {
            return Err(Error::Config(format!(
                "test_fraction {} leaves a stratum of {} without a train or test record",
                config.test_fraction,
                m.len()
            )));
        }
        m.shuffle(rng);
        for &i in &m[..n_test] {
            is_test[i] = true;
        }
    }
    let width = drafts.len().to_string().len().max(5);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, d) in drafts.into_iter().enumerate() {
        let record = UserRecord {
            user_id: format!("u{i:0width$}"),
            features: d.features,
            labels: d.labels,
            origin_class: Some(d.stratum),
        };
        if is_test[i] {
            test.push(record);
        } else {
            train.push(record);
        }
    }
    Ok((
        FirmDataset::with_full_consent(spec.clone(), train, 1)?,
        FirmDataset::with_full_consent(spec, test, 1)?,
    ))
}

/// Monte-Carlo estimate of the Bayes-optimal accuracy of a `GaussianClasses`
/// configuration (equal priors, shared isotropic covariance: nearest true mean).
pub fn bayes_accuracy_estimate(config: &GeneratorConfig, num_mc_samples: usize) -> Result<f64> {
    let sigma = match &config.variant {
        GeneratorVariant::GaussianClasses { noise_sigma, .. } => *noise_sigma,
        other => return Err(Error::UnsupportedVariant(variant_name(other).into())),
    };
    let means = class_means(config)?;
    let mut rng = stage_rng(config.seed, Stage::Evaluation);
    Ok(nearest_mean_accuracy(&means, sigma, num_mc_samples, &mut rng))
}

/// Accuracy of the nearest-mean rule on samples drawn from the mixture itself.
pub fn nearest_mean_accuracy(
    means: &[Vec<f64>],
    sigma: f64,
    num_samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    if num_samples == 0 || means.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for s in 0..num_samples {
        let class = s % means.len();
        let x: Vec<f64> = means[class]
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, mean) in means.iter().enumerate() {
            let d: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        correct += usize::from(best == class);
    }
    correct as f64 / num_samples as f64
}
