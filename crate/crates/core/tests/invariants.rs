//! Cross-module property tests: partitions, damage accounting, geometry, and
//! end-to-end determinism on small synthetic instances.

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

use subpop_core::attacks::{label_flip, AttackConfig};
use subpop_core::data::{split_dataset, synth_gaussian_subpops, BlobSpec, Dataset};
use subpop_core::metrics::damage_report;
use subpop_core::models::{self, Architecture, ModelParams, TrainConfig};
use subpop_core::select::{self, cluster_match, feature_match, kmeans, pca_fit, PickStrategy};
use subpop_core::theory::{impossibility_attack, pigeonhole_bound, sample_mixture, MixtureSpec};
use subpop_core::{attacks, metrics, seed};

fn two_blob_data(n_per: usize, seed_value: u64) -> Dataset {
    let blobs = vec![
        BlobSpec {
            center: vec![-2.0, 0.0],
            sigma: 0.6,
            count: n_per,
            label: 0,
        },
        BlobSpec {
            center: vec![2.0, 0.0],
            sigma: 0.6,
            count: n_per,
            label: 1,
        },
    ];
    synth_gaussian_subpops(&blobs, 2, seed_value).expect("blob sampling")
}

fn random_matrix(rows: usize, cols: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-3.0..3.0))
}

fn point_key(p: &subpop_core::data::LabeledPoint) -> String {
    let feats: Vec<String> = p.features.iter().map(|v| format!("{v:.17e}")).collect();
    format!("{}|{}", feats.join(","), p.label)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_partitions_the_dataset(
        wt in 1u32..=5,
        wa in 1u32..=5,
        we in 1u32..=5,
        n_per in 20usize..=60,
        seed_value in any::<u64>(),
    ) {
        let data = two_blob_data(n_per, seed_value);
        let total = (wt + wa + we) as f64;
        let fractions = (wt as f64 / total, wa as f64 / total, we as f64 / total);
        let split = split_dataset(&data, fractions, seed_value).unwrap();

        prop_assert_eq!(
            split.train.len() + split.aux.len() + split.test.len(),
            data.len()
        );
        prop_assert!(split.aux.len() >= (fractions.1 * data.len() as f64).floor() as usize);

        let mut original: Vec<String> = data.points.iter().map(point_key).collect();
        let mut parts: Vec<String> = split
            .train
            .points
            .iter()
            .chain(&split.aux.points)
            .chain(&split.test.points)
            .map(point_key)
            .collect();
        original.sort();
        parts.sort();
        prop_assert_eq!(original, parts);
    }

    #[test]
    fn split_is_seed_deterministic(n_per in 20usize..=40, seed_value in any::<u64>()) {
        let data = two_blob_data(n_per, 7);
        let a = split_dataset(&data, (0.5, 0.25, 0.25), seed_value).unwrap();
        let b = split_dataset(&data, (0.5, 0.25, 0.25), seed_value).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn damage_is_bounded_and_decomposes(
        model_seed_a in any::<u64>(),
        model_seed_b in any::<u64>(),
        data_seed in any::<u64>(),
    ) {
        let test = two_blob_data(25, data_seed);
        let arch = Architecture::linear(2, 2);
        let clean = ModelParams::seeded_uniform(arch.clone(), model_seed_a).unwrap();
        let poisoned = ModelParams::seeded_uniform(arch, model_seed_b).unwrap();
        let filter = feature_match(&test, "0").unwrap();

        let report = damage_report(&clean, &poisoned, &test, &filter, 1.0, 0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&report.target_damage));
        prop_assert!((-1.0..=1.0).contains(&report.collateral_damage));

        let n = (report.subpop_test_count + report.other_test_count) as f64;
        let weighted = (report.subpop_test_count as f64 * report.target_damage
            + report.other_test_count as f64 * report.collateral_damage)
            / n;
        prop_assert!(((report.clean_acc - report.poisoned_acc) - weighted).abs() <= 1e-12);
    }

    #[test]
    fn swapping_models_negates_damage(
        model_seed_a in any::<u64>(),
        model_seed_b in any::<u64>(),
        data_seed in any::<u64>(),
    ) {
        let test = two_blob_data(20, data_seed);
        let arch = Architecture::linear(2, 2);
        let a = ModelParams::seeded_uniform(arch.clone(), model_seed_a).unwrap();
        let b = ModelParams::seeded_uniform(arch, model_seed_b).unwrap();
        let filter = feature_match(&test, "1").unwrap();

        let fwd = metrics::target_damage(&a, &b, &test, &filter).unwrap();
        let rev = metrics::target_damage(&b, &a, &test, &filter).unwrap();
        prop_assert!((fwd + rev).abs() <= 1e-15);
    }

    #[test]
    fn pca_basis_is_orthonormal(
        rows in 4usize..=30,
        cols in 2usize..=8,
        seed_value in any::<u64>(),
    ) {
        let r = 1 + (seed_value as usize) % cols.min(rows);
        let x = random_matrix(rows, cols, seed_value);
        let model = pca_fit(&x.view(), r).unwrap();

        prop_assert_eq!(model.basis.len(), r);
        for (i, bi) in model.basis.iter().enumerate() {
            if model.explained_variance[i] == 0.0 {
                prop_assert!(bi.iter().all(|v| *v == 0.0));
                continue;
            }
            for (j, bj) in model.basis.iter().enumerate() {
                if model.explained_variance[j] == 0.0 {
                    continue;
                }
                let dot: f64 = bi.iter().zip(bj).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expected).abs() <= 1e-9,
                    "gram[{}][{}] = {}", i, j, dot);
            }
        }
        for (a, b) in model.explained_variance.iter().zip(model.explained_variance.iter().skip(1)) {
            prop_assert!(a + 1e-12 >= *b);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(
        rows in 6usize..=40,
        cols in 2usize..=4,
        k in 2usize..=4,
        seed_value in any::<u64>(),
    ) {
        let x = random_matrix(rows, cols, seed_value);
        let fit = kmeans(&x.view(), k.min(rows), seed_value).unwrap();

        for (a, b) in fit.inertia_trace.iter().zip(fit.inertia_trace.iter().skip(1)) {
            prop_assert!(*b <= a + 1e-9, "inertia rose from {} to {}", a, b);
        }
        prop_assert_eq!(fit.inertia, *fit.inertia_trace.last().unwrap());
        prop_assert_eq!(fit.assignments.len(), rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cluster_filters_partition_the_data(
        k in 2usize..=4,
        r in 1usize..=2,
        seed_value in any::<u64>(),
    ) {
        let aux = two_blob_data(20, seed_value);
        let surrogate =
            ModelParams::seeded_uniform(Architecture::linear(2, 2), seed_value).unwrap();
        let (filters, _) = cluster_match(&aux, &surrogate, 0, r, k, seed_value).unwrap();

        prop_assert_eq!(filters.len(), k);
        for p in &aux.points {
            let hits = filters
                .iter()
                .map(|f| f.matches(p).unwrap() as usize)
                .sum::<usize>();
            prop_assert_eq!(hits, 1);
        }
        let total: usize = filters
            .iter()
            .map(|f| f.member_indices(&aux).unwrap().len())
            .sum();
        prop_assert_eq!(total, aux.len());
    }

    #[test]
    fn label_flip_poison_count_is_exact(
        alpha_pct in 10u32..=300,
        n_per in 10usize..=40,
        seed_value in any::<u64>(),
    ) {
        let aux = two_blob_data(n_per, seed_value);
        let filter = feature_match(&aux, "0").unwrap();
        let surrogate =
            ModelParams::seeded_uniform(Architecture::linear(2, 2), seed_value).unwrap();
        let alpha = alpha_pct as f64 / 100.0;
        let cfg = AttackConfig {
            poison_rate: alpha,
            ..AttackConfig::default()
        };

        let poison = label_flip(&aux, &filter, &cfg, &surrogate, seed_value).unwrap();
        prop_assert_eq!(poison.len(), (alpha * n_per as f64).round() as usize);
        for p in &poison.points {
            prop_assert_eq!(p.label, 1, "flip from an all-0 subpopulation must be 1");
        }
    }

    #[test]
    fn impossibility_attack_respects_pigeonhole_size(
        k in 2usize..=6,
        n in 40usize..=200,
        seed_value in any::<u64>(),
    ) {
        let spec = MixtureSpec {
            weights: vec![1.0 / k as f64; k],
            label_probs: vec![0.5; k],
        };
        let data = sample_mixture(&spec, n, seed_value).unwrap();
        let attack = impossibility_attack(&data).unwrap();

        prop_assert!(!attack.points.is_empty());
        prop_assert!(attack.len() <= pigeonhole_bound(n, k).unwrap() + 1);
        let first = attack.points[0].subpop_id;
        prop_assert!(attack.points.iter().all(|p| p.subpop_id == first));
    }
}

#[test]
fn pipeline_is_byte_deterministic_end_to_end() {
    let run = |seed_value: u64| -> String {
        let blobs = vec![
            BlobSpec {
                center: vec![-3.0, 0.0],
                sigma: 0.4,
                count: 60,
                label: 0,
            },
            BlobSpec {
                center: vec![3.0, 0.0],
                sigma: 0.4,
                count: 60,
                label: 1,
            },
            BlobSpec {
                center: vec![0.0, 3.0],
                sigma: 0.4,
                count: 60,
                label: 0,
            },
        ];
        let data = synth_gaussian_subpops(&blobs, 2, seed_value).unwrap();
        let split = split_dataset(&data, (0.5, 0.25, 0.25), seed::derive(seed_value, 1)).unwrap();

        let arch = Architecture::linear(2, 2);
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        let clean = models::train(&split.train, &arch, &cfg).unwrap();
        let surrogate = models::train(&split.aux, &arch, &cfg).unwrap();

        let (filters, _) =
            cluster_match(&split.aux, &surrogate, 0, 2, 3, seed::derive(seed_value, 2)).unwrap();
        let target = select::pick_cluster(
            &filters,
            &split.aux,
            &surrogate,
            &arch,
            &cfg,
            PickStrategy::HighestSurrogateDamage,
            seed::derive(seed_value, 3),
        )
        .unwrap();
        let filter = &filters[target];

        let attack_cfg = AttackConfig {
            poison_rate: 1.0,
            ..AttackConfig::default()
        };
        let poison =
            label_flip(&split.aux, filter, &attack_cfg, &surrogate, seed::derive(seed_value, 4))
                .unwrap();

        let mut poisoned_train = split.train.clone();
        poisoned_train.extend(poison.points.clone()).unwrap();
        let poisoned = models::train(&poisoned_train, &arch, &cfg).unwrap();

        let report =
            damage_report(&clean, &poisoned, &split.test, filter, 1.0, poison.len()).unwrap();
        serde_json::to_string(&report).unwrap()
    };

    let a = run(41);
    let b = run(41);
    assert_eq!(a, b, "same seed must reproduce the report byte for byte");

    let c = run(42);
    assert!(!c.is_empty());
}

#[test]
fn attack_generators_only_touch_auxiliary_data() {
    let data = two_blob_data(40, 5);
    let split = split_dataset(&data, (0.5, 0.3, 0.2), 6).unwrap();
    let arch = Architecture::linear(2, 2);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let surrogate = models::train(&split.aux, &arch, &cfg).unwrap();
    let filter = feature_match(&split.aux, "0").unwrap();

    let poison = label_flip(
        &split.aux,
        &filter,
        &AttackConfig::default(),
        &surrogate,
        9,
    )
    .unwrap();

    let aux_keys: std::collections::BTreeSet<String> =
        split.aux.points.iter().map(point_key).collect();
    for p in &poison.points {
        let mut original = p.clone();
        original.label = 0;
        assert!(
            aux_keys.contains(&point_key(&original)),
            "poison features must come from the auxiliary split"
        );
        assert_eq!(p.provenance, subpop_core::data::Provenance::Poison);
    }
}

#[test]
fn poison_set_round_trips_through_json() {
    let aux = two_blob_data(15, 3);
    let filter = feature_match(&aux, "1").unwrap();
    let surrogate = ModelParams::seeded_uniform(Architecture::linear(2, 2), 4).unwrap();
    let poison = label_flip(&aux, &filter, &AttackConfig::default(), &surrogate, 5).unwrap();

    let json = serde_json::to_string(&poison).unwrap();
    let back: attacks::PoisonSet = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}
