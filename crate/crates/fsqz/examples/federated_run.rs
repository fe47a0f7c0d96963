//! A complete federated run in one process: ten clients on a Dirichlet
//! split, 40% sampled per round, every exchanged model pruned to 50%
//! before transmission. Prints the per-round trace and traffic totals.

use fsqz::fl::{run_experiment, DatasetConfig, ExperimentConfig, TransportKind};

fn main() -> fsqz::Result<()> {
    let cfg = ExperimentConfig {
        layer_sizes: vec![32, 64, 10],
        dataset: DatasetConfig::Blobs {
            num_classes: 10,
            dim: 32,
            train_per_class: 500,
            test_per_class: 100,
            spread: 0.8,
        },
        num_clients: 10,
        participation: 0.4,
        rounds: 15,
        local_epochs: 1,
        batch_size: 32,
        alpha: 1.0,
        prune_rate: 0.5,
        server_prune_rate: None,
        client_prune_rate: None,
        prune_biases: true,
        quant_bits: None,
        combined: false,
        deflate: true,
        learning_rate: 0.05,
        momentum: 0.9,
        transport: TransportKind::InProc,
        seed: 42,
    };

    let out = run_experiment(&cfg)?;
    println!("round  accuracy  train_loss  up_B     down_B   sparsity  clients");
    for m in &out.metrics {
        let ids: Vec<String> = m.participants.iter().map(|id| id.to_string()).collect();
        println!(
            "{:>5}  {:>8.4}  {:>10.4}  {:>7}  {:>7}  {:>8.4}  {}",
            m.round,
            m.accuracy,
            m.train_loss,
            m.uplink_deflated,
            m.downlink_deflated,
            m.sparsity,
            ids.join(",")
        );
    }

    let raw: u64 = out.metrics.iter().map(|m| m.uplink_raw + m.downlink_raw).sum();
    let deflated: u64 = out
        .metrics
        .iter()
        .map(|m| m.uplink_deflated + m.downlink_deflated)
        .sum();
    println!("\nfinal accuracy: {:.4}", out.final_accuracy);
    println!(
        "traffic: {raw} B raw, {deflated} B deflated ({:.1}% of raw)",
        100.0 * deflated as f64 / raw as f64
    );
    println!(
        "server endpoints counted {} B sent, {} B received (length prefixes included)",
        out.server_counters.bytes_sent, out.server_counters.bytes_received
    );
    Ok(())
}
