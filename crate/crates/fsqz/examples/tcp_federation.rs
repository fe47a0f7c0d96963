//! Runs the same federation twice, once over in-process channels and once
//! over loopback TCP, and checks the results match bit for bit: same final
//! parameters, same accuracy, same byte counters.

use fsqz::fl::{run_experiment, DatasetConfig, ExperimentConfig, TransportKind};
use fsqz::nn::flatten;

fn main() -> fsqz::Result<()> {
    let cfg = ExperimentConfig {
        layer_sizes: vec![16, 32, 5],
        dataset: DatasetConfig::Blobs {
            num_classes: 5,
            dim: 16,
            train_per_class: 200,
            test_per_class: 40,
            spread: 0.8,
        },
        num_clients: 6,
        participation: 0.5,
        rounds: 8,
        local_epochs: 2,
        batch_size: 32,
        alpha: 10.0,
        prune_rate: 0.8,
        server_prune_rate: None,
        client_prune_rate: None,
        prune_biases: true,
        quant_bits: None,
        combined: false,
        deflate: true,
        learning_rate: 0.05,
        momentum: 0.9,
        transport: TransportKind::InProc,
        seed: 3,
    };

    let in_proc = run_experiment(&cfg)?;
    let mut tcp_cfg = cfg.clone();
    tcp_cfg.transport = TransportKind::Tcp;
    let tcp = run_experiment(&tcp_cfg)?;

    println!("transport  accuracy  bytes_sent  bytes_received");
    for (name, out) in [("in-proc", &in_proc), ("tcp", &tcp)] {
        println!(
            "{name:<9}  {:>8.4}  {:>10}  {:>14}",
            out.final_accuracy, out.server_counters.bytes_sent, out.server_counters.bytes_received
        );
    }

    let a = flatten(&in_proc.final_model);
    let b = flatten(&tcp.final_model);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        "final models must be bit-identical across transports"
    );
    assert_eq!(in_proc.server_counters, tcp.server_counters);
    assert_eq!(in_proc.client_counters, tcp.client_counters);
    println!("\nbit-identical final models and counters on both transports");
    Ok(())
}
