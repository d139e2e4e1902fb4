use fednorm::data::{
    generate_gaussian_mixture, partition, partition_dirichlet, partition_n_class, partition_test_like_train,
    ClientShard, Dataset, PartitionPlan, PartitionScheme,
};
use proptest::prelude::*;

fn data(classes: usize, per_class: usize) -> Dataset {
    generate_gaussian_mixture(classes, per_class, 4, 3.0, 1).unwrap()
}

/// Shards are disjoint, cover the dataset and carry correct histograms.
fn assert_exact_cover(d: &Dataset, shards: &[ClientShard]) {
    let mut seen = vec![false; d.len()];
    for s in shards {
        let mut h = vec![0; d.num_classes()];
        for &i in &s.indices {
            assert!(!seen[i], "sample {i} assigned twice");
            seen[i] = true;
            h[d.labels()[i]] += 1;
        }
        assert_eq!(h, s.label_histogram);
        assert_eq!(s.m(), s.label_histogram.iter().sum::<usize>());
    }
    assert!(seen.iter().all(|&b| b), "some sample unassigned");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn n_class_plans_cover_exactly(classes in 2usize..12, clients in 1usize..12, n in 1usize..6, per in 1usize..15, seed in any::<u64>()) {
        let d = data(classes, per);
        let n = n.min(classes);
        prop_assume!(n * clients >= classes);
        let shards = partition_n_class(&d, clients, n, seed).unwrap();
        assert_exact_cover(&d, &shards);
        let mut holders = vec![0; classes];
        for s in &shards {
            let support = s.present_classes();
            prop_assert!(support.len() <= n);
            for c in support {
                holders[c] += 1;
            }
        }
        prop_assert!(holders.iter().all(|&h| h >= 1));
    }

    #[test]
    fn n_class_support_is_exact_when_classes_are_plentiful(classes in 2usize..10, clients in 1usize..10, n in 1usize..5, seed in any::<u64>()) {
        let n = n.min(classes);
        prop_assume!(n * clients >= classes);
        // Enough samples per class that every holder gets at least one.
        let d = data(classes, clients * n);
        for s in partition_n_class(&d, clients, n, seed).unwrap() {
            prop_assert_eq!(s.present_classes().len(), n);
        }
    }

    #[test]
    fn dirichlet_plans_cover_exactly(classes in 2usize..8, clients in 1usize..12, beta in 0.01f64..100.0, per in 0usize..30, seed in any::<u64>()) {
        let d = data(classes, per.max(1));
        let shards = partition_dirichlet(&d, clients, beta, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        assert_exact_cover(&d, &shards);
    }

    #[test]
    fn partitions_are_deterministic(seed in any::<u64>(), beta in 0.05f64..10.0) {
        let d = data(5, 20);
        let plan = PartitionPlan { scheme: PartitionScheme::Dirichlet { beta }, clients: 6, seed };
        prop_assert_eq!(partition(&d, &plan).unwrap(), partition(&d, &plan).unwrap());
    }
}

#[test]
fn shared_classes_split_equally_with_remainder_to_lowest_ids() {
    // 3 classes, 6 clients with one class each: every class has two holders.
    let d = data(3, 7);
    let shards = partition_n_class(&d, 6, 1, 4).unwrap();
    for class in 0..3 {
        let mut sizes: Vec<(usize, usize)> = shards
            .iter()
            .filter(|s| s.label_histogram[class] > 0)
            .map(|s| (s.client_id, s.label_histogram[class]))
            .collect();
        sizes.sort_unstable();
        assert_eq!(sizes.len(), 2);
        assert_eq!((sizes[0].1, sizes[1].1), (4, 3));
    }
}

#[test]
fn five_clients_two_classes_each_hold_disjoint_classes() {
    let d = data(10, 5);
    let shards = partition_n_class(&d, 5, 2, 8).unwrap();
    let mut owner = [None; 10];
    for s in &shards {
        assert_eq!(s.present_classes().len(), 2);
        for c in s.present_classes() {
            assert!(owner[c].replace(s.client_id).is_none(), "class {c} held twice");
        }
    }
}

#[test]
fn huge_concentration_is_nearly_uniform() {
    let d = data(10, 1000);
    for seed in 0..5 {
        let shards = partition_dirichlet(&d, 10, 1e6, seed).unwrap();
        for s in &shards {
            for &h in &s.label_histogram {
                assert!((h as f64 - 100.0).abs() / 100.0 < 0.05, "count {h}");
            }
        }
    }
}

#[test]
fn small_concentration_is_skewed() {
    let d = data(10, 200);
    let mut support = 0.0;
    for seed in 0..5 {
        let shards = partition_dirichlet(&d, 10, 0.1, seed).unwrap();
        support += shards.iter().map(|s| s.present_classes().len()).sum::<usize>() as f64 / 10.0;
    }
    support /= 5.0;
    println!("mean classes per client at β = 0.1: {support:.2}");
    assert!(support < 10.0);
}

#[test]
fn test_shards_follow_the_training_plan() {
    let train = data(10, 30);
    let test = generate_gaussian_mixture(10, 8, 4, 3.0, 2).unwrap();
    let plan = PartitionPlan {
        scheme: PartitionScheme::NClass { n: 1 },
        clients: 10,
        seed: 11,
    };
    let tr = partition(&train, &plan).unwrap();
    let (te, warnings) = partition_test_like_train(&test, &plan).unwrap();
    assert!(warnings.is_empty());
    for (a, b) in tr.iter().zip(&te) {
        assert_eq!(a.present_classes(), b.present_classes());
        assert_eq!(b.m(), 8);
    }

    let plan = PartitionPlan {
        scheme: PartitionScheme::NClass { n: 10 },
        clients: 1,
        seed: 11,
    };
    let (te, _) = partition_test_like_train(&test, &plan).unwrap();
    assert_eq!(te[0].m(), test.len());
}

#[test]
fn missing_test_class_gives_an_empty_shard_and_a_warning() {
    let full = data(3, 4);
    let keep: Vec<usize> = (0..full.len()).filter(|&i| full.labels()[i] != 2).collect();
    let test = full.subset(&keep).unwrap();
    let plan = PartitionPlan {
        scheme: PartitionScheme::NClass { n: 1 },
        clients: 3,
        seed: 0,
    };
    let (shards, warnings) = partition_test_like_train(&test, &plan).unwrap();
    assert_eq!(shards.iter().filter(|s| s.is_empty()).count(), 1);
    assert_eq!(warnings.len(), 2, "{warnings:?}");
}

#[test]
fn dirichlet_skew_carries_over_to_the_test_set() {
    let train = data(4, 400);
    let test = data(4, 400);
    let plan = PartitionPlan {
        scheme: PartitionScheme::Dirichlet { beta: 0.3 },
        clients: 5,
        seed: 9,
    };
    let tr = partition(&train, &plan).unwrap();
    let (te, _) = partition_test_like_train(&test, &plan).unwrap();
    assert_eq!(
        tr.iter().map(|s| &s.label_histogram).collect::<Vec<_>>(),
        te.iter().map(|s| &s.label_histogram).collect::<Vec<_>>()
    );
}
