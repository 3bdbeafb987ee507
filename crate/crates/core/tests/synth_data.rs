use std::collections::BTreeSet;

use dissolve_core::synth::{bayes_accuracy_estimate, class_means, SkillGroup};
use dissolve_core::{generate, GeneratorConfig, GeneratorVariant, LabelSet};
use statrs::distribution::{ContinuousCDF, Normal};

fn gaussian(seed: u64, classes: usize, separation: f64, offset: f64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        test_fraction: 0.1,
        variant: GeneratorVariant::GaussianClasses {
            num_classes: classes,
            per_class_count: 1000,
            dim: 16,
            class_separation: separation,
            noise_sigma: 1.0,
            mean_offset: offset,
        },
    }
}

fn skills(num_records: usize, test_fraction: f64, weights: (f64, f64), overlap: f64) -> GeneratorConfig {
    GeneratorConfig {
        seed: 11,
        test_fraction,
        variant: GeneratorVariant::MultiLabelSkills {
            num_records,
            dim: 32,
            groups: vec![
                SkillGroup {
                    group_name: "administrative".into(),
                    num_labels: 8,
                    weight: weights.0,
                },
                SkillGroup {
                    group_name: "developer".into(),
                    num_labels: 8,
                    weight: weights.1,
                },
            ],
            label_density: 0.25,
            cross_group_overlap_rate: overlap,
            label_separation: 5.5,
            noise_sigma: 1.0,
            mean_offset: 10.0,
        },
    }
}

#[test]
fn two_class_bayes_estimate_matches_normal_cdf() {
    let cfg = gaussian(5, 2, 3.0, 0.0);
    let means = class_means(&cfg).unwrap();
    let distance: f64 = means[0]
        .iter()
        .zip(&means[1])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let exact = Normal::new(0.0, 1.0).unwrap().cdf(distance / 2.0);
    let estimate = bayes_accuracy_estimate(&cfg, 200_000).unwrap();
    // Five standard errors of a 200k-sample proportion.
    assert!((estimate - exact).abs() < 0.006, "estimate {estimate} vs exact {exact}");
}

#[test]
fn zero_separation_is_chance_level() {
    let estimate = bayes_accuracy_estimate(&gaussian(3, 10, 0.0, 0.0), 200_000).unwrap();
    assert!((estimate - 0.1).abs() < 0.005, "{estimate}");
}

#[test]
fn offset_shifts_means_without_changing_bayes_accuracy() {
    let plain = gaussian(9, 10, 8.0, 0.0);
    let shifted = gaussian(9, 10, 8.0, 60.0);
    let a = class_means(&plain).unwrap();
    let b = class_means(&shifted).unwrap();
    for (ma, mb) in a.iter().zip(&b) {
        for (x, y) in ma.iter().zip(mb) {
            assert!((y - x - 60.0).abs() < 1e-12);
        }
    }
    let pa = bayes_accuracy_estimate(&plain, 20_000).unwrap();
    let pb = bayes_accuracy_estimate(&shifted, 20_000).unwrap();
    assert!((pa - pb).abs() < 1e-3, "{pa} vs {pb}");
}

#[test]
fn corpus_scale_skills_counts() {
    let (train, test) = generate(&skills(29_020, 4020.0 / 29_020.0, (14_009.0, 15_011.0), 0.0)).unwrap();
    assert_eq!(train.len(), 25_000);
    assert_eq!(test.len(), 4_020);
    let admin = train
        .records
        .iter()
        .chain(&test.records)
        .filter(|r| r.labels.carries_group("administrative"))
        .count();
    assert_eq!(admin, 14_009);
    assert_eq!(29_020 - admin, 15_011);
}

#[test]
fn no_overlap_means_disjoint_groups() {
    let (train, _) = generate(&skills(2_000, 0.1, (1.0, 1.0), 0.0)).unwrap();
    for r in &train.records {
        let both = r.labels.carries_group("administrative") && r.labels.carries_group("developer");
        assert!(!both, "{} carries both groups", r.user_id);
        assert!(r.labels.carries_group("administrative") || r.labels.carries_group("developer"));
    }
}

#[test]
fn overlap_rate_produces_mixed_records() {
    let (train, _) = generate(&skills(2_000, 0.1, (1.0, 1.0), 0.2)).unwrap();
    let mixed = train
        .records
        .iter()
        .filter(|r| r.labels.carries_group("administrative") && r.labels.carries_group("developer"))
        .count();
    assert!(mixed > 0);
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let cfg = gaussian(21, 10, 8.0, 0.0);
    let (train, test) = generate(&cfg).unwrap();
    assert_eq!(test.len(), 1_000);
    let train_ids: BTreeSet<_> = train.user_ids();
    assert!(test.records.iter().all(|r| !train_ids.contains(r.user_id.as_str())));
    for class in 0..10 {
        let n = test.records.iter().filter(|r| r.origin_class == Some(class)).count();
        assert_eq!(n, 100);
    }
    for r in &train.records {
        let LabelSet::MultiClass { class_index, .. } = r.labels else {
            panic!("multi-class data expected");
        };
        assert_eq!(Some(class_index), r.origin_class);
    }
    let (again, _) = generate(&cfg).unwrap();
    assert_eq!(again, train);
    let (other, _) = generate(&gaussian(22, 10, 8.0, 0.0)).unwrap();
    assert_ne!(other.records[0].features, train.records[0].features);
}

#[test]
fn degenerate_configs_are_rejected() {
    let mut cfg = gaussian(1, 10, 8.0, 0.0);
    cfg.test_fraction = 1.0;
    assert!(generate(&cfg).unwrap_err().is_configuration());
    let mut cfg = gaussian(1, 10, 8.0, 0.0);
    if let GeneratorVariant::GaussianClasses { mean_offset, .. } = &mut cfg.variant {
        *mean_offset = f64::NAN;
    }
    assert!(generate(&cfg).unwrap_err().is_configuration());
}
