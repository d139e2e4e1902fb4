//! Label-shift partitioners.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PartitionScheme {
    /// Every client holds exactly `n` classes.
    NClass { n: usize },
    /// Per-class client proportions drawn from `Dir(β·𝟙_K)`.
    Dirichlet { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub seed: u64,
}

// Stream offsets under the plan seed.
const CLASS_MAP_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 20;
const PROPORTION_STREAM: u64 = 2 << 20;

pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<ClientShard>> {
    match plan.scheme {
        PartitionScheme::NClass { n } => partition_n_class(dataset, plan.clients, n, plan.seed),
        PartitionScheme::Dirichlet { beta } => partition_dirichlet(dataset, plan.clients, beta, plan.seed),
    }
}

/// Seeded permutation of the classes, dealt round-robin: client `k` holds
/// `perm[(k·n + j) mod C]` for `j < n`. A class held by several clients is
/// split equally among them, the remainder going to the lowest client ids.
pub fn partition_n_class(dataset: &Dataset, clients: usize, n: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let c = dataset.num_classes();
    if clients == 0 || n == 0 {
        return Err(Error::invalid("need at least one client and one class per client"));
    }
    if n * clients < c {
        return Err(Error::invalid(format!(
            "{clients} clients with {n} classes each cannot cover {c} classes"
        )));
    }
    if n > c {
        return Err(Error::invalid(format!("{n} classes per client but only {c} exist")));
    }
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, CLASS_MAP_STREAM)));
    let mut holders = vec![Vec::new(); c];
    for k in 0..clients {
        for j in 0..n {
            holders[perm[(k * n + j) % c]].push(k);
        }
    }
    let mut assigned = vec![Vec::new(); clients];
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        shuffle_class(&mut idx, seed, class);
        let h = &holders[class];
        let (base, extra) = (idx.len() / h.len(), idx.len() % h.len());
        let mut start = 0;
        for (rank, &k) in h.iter().enumerate() {
            let take = base + usize::from(rank < extra);
            assigned[k].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }
    Ok(finish(assigned, dataset))
}

/// Per class, proportions `p ~ Dir(β·𝟙_K)` rounded to counts by largest
/// remainder. The proportions depend only on `(seed, class)`, so a test set
/// partitioned with the same seed follows the same skew.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, beta: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut assigned = vec![Vec::new(); clients];
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PROPORTION_STREAM + class as u64));
        let mut p: Vec<f64> = (0..clients).map(|_| rng.sample(gamma)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            // Every draw underflowed: all mass on one client.
            let k = rng.random_range(0..clients);
            p.iter_mut().enumerate().for_each(|(i, v)| *v = f64::from(u8::from(i == k)));
        }
        shuffle_class(&mut idx, seed, class);
        let counts = largest_remainder(&p, idx.len());
        let mut start = 0;
        for (k, take) in counts.into_iter().enumerate() {
            assigned[k].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }
    Ok(finish(assigned, dataset))
}

/// Partitions a test set with the plan used for training. Returns the
/// shards and one warning per (client, class) the plan assigns but the test
/// set cannot supply.
pub fn partition_test_like_train(test: &Dataset, plan: &PartitionPlan) -> Result<(Vec<ClientShard>, Vec<String>)> {
    let shards = partition(test, plan)?;
    let mut warnings = Vec::new();
    let hist = test.histogram();
    if let PartitionScheme::NClass { n } = plan.scheme {
        // Recover the planned classes from the class map rather than from the
        // (possibly empty) allocation.
        let c = test.num_classes();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, CLASS_MAP_STREAM)));
        for k in 0..plan.clients {
            for j in 0..n {
                let class = perm[(k * n + j) % c];
                if hist[class] == 0 {
                    warnings.push(format!("client {k}: class {class} has no test samples"));
                }
            }
        }
    }
    for s in &shards {
        if s.is_empty() {
            warnings.push(format!("client {}: empty test shard", s.client_id));
        }
    }
    Ok((shards, warnings))
}

fn shuffle_class(idx: &mut [usize], seed: u64, class: usize) {
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM + class as u64)));
}

fn finish(assigned: Vec<Vec<usize>>, dataset: &Dataset) -> Vec<ClientShard> {
    assigned
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            ClientShard::new(k, idx, dataset)
        })
        .collect()
}

/// Integer counts summing to `total`, proportional to `p`; leftover units go
/// to the largest fractional parts, ties to the lower index.
fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gaussian_mixture;

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 7), vec![3, 2, 2]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    }

    #[test]
    fn one_class_per_client() {
        let d = generate_gaussian_mixture(10, 20, 4, 3.0, 0).unwrap();
        let shards = partition_n_class(&d, 10, 1, 5).unwrap();
        let mut seen: Vec<usize> = shards
            .iter()
            .map(|s| {
                assert_eq!(s.present_classes().len(), 1);
                assert_eq!(s.m(), 20);
                s.present_classes()[0]
            })
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_clients_is_an_error() {
        let d = generate_gaussian_mixture(10, 2, 4, 3.0, 0).unwrap();
        assert!(partition_n_class(&d, 4, 2, 0).is_err());
    }

    #[test]
    fn single_dirichlet_client_gets_everything() {
        let d = generate_gaussian_mixture(4, 5, 3, 3.0, 0).unwrap();
        let s = partition_dirichlet(&d, 1, 0.1, 3).unwrap();
        assert_eq!(s[0].indices, (0..20).collect::<Vec<_>>());
    }
}
