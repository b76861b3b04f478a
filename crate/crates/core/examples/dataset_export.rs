//! Generate a synthetic dataset, split it one label per device, and write the
//! training table as CSV (features..., label).
//!
//! cargo run --example dataset_export -- /tmp/train.csv

use std::fs::File;

use streamsgd::datagen::{generate_dataset, label_set, partition, read_table, write_table, DatasetSpec, PartitionPlan};

fn main() -> streamsgd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "train.csv".into());
    let spec =
        DatasetSpec { n_classes: 10, feature_dim: 4, samples_per_class: 50, cluster_spread: 0.5, mean_scale: 1.0 };
    let data = generate_dataset(&spec, 11)?;

    let pools = partition(&data.train.labels, spec.n_classes, 10, &PartitionPlan::noniid(1), 11)?;
    for (d, pool) in pools.iter().enumerate() {
        println!("device {d}: {} samples, labels {:?}", pool.len(), label_set(pool, &data.train.labels));
    }

    write_table(&data.train, File::create(&out)?)?;
    let back = read_table(File::open(&out)?)?;
    println!("wrote {} rows to {out}, read back identical: {}", back.len(), back == data.train);
    Ok(())
}
