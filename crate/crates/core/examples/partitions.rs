//! Label histograms of the n-class and Dirichlet partitioners.

use fednorm::data::{partition, GaussianMixture, PartitionPlan, PartitionScheme};

fn main() -> fednorm::Result<()> {
    let data = GaussianMixture::new(10, 16, 6.0, 0)?.sample(100, 1)?;
    let schemes = [
        PartitionScheme::NClass { n: 1 },
        PartitionScheme::NClass { n: 3 },
        PartitionScheme::Dirichlet { beta: 0.1 },
        PartitionScheme::Dirichlet { beta: 10.0 },
    ];
    for scheme in schemes {
        println!("{scheme:?}");
        let plan = PartitionPlan { scheme, clients: 10, seed: 7 };
        for shard in partition(&data, &plan)? {
            let hist: Vec<String> = shard.label_histogram.iter().map(|h| format!("{h:>4}")).collect();
            println!("  client {}  m={:>4} |{}", shard.client_id, shard.m(), hist.join(""));
        }
    }
    Ok(())
}
