//! Reproduces the wire-size table for a 780,000-parameter model: the
//! analytic cost of each representation, then real encoded-and-deflated
//! bytes for a pruned Gaussian vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fsqz::codec::{estimate_size, measure_payload, Payload, SizeKind};
use fsqz::compress::global_magnitude_prune;

const N: u64 = 780_000;
const MIB: f64 = (1u64 << 20) as f64;

fn main() -> fsqz::Result<()> {
    println!("representation  bytes     MiB");
    for kind in [
        SizeKind::Dense,
        SizeKind::Quant(8),
        SizeKind::Quant(4),
        SizeKind::Binary,
    ] {
        let bytes = estimate_size(kind, N, 0);
        println!("{:<14}  {bytes:<8}  {:.2}", kind.to_string(), bytes as f64 / MIB);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dense: Vec<f32> = (0..N as usize)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    let baseline = measure_payload(SizeKind::Dense, &Payload::Dense(dense.clone()))?;

    println!("\npruned dense messages, DEFLATE envelope:");
    println!("rate  raw_B    deflated_B  vs_unpruned");
    for rate in [0.0, 0.5, 0.9] {
        let (pruned, _) = global_magnitude_prune(&dense, rate, None)?;
        let report = measure_payload(SizeKind::Dense, &Payload::Dense(pruned))?;
        println!(
            "{rate:<4}  {:<7}  {:<10}  {:.4}",
            report.raw_bytes,
            report.deflated_bytes,
            report.deflated_bytes as f64 / baseline.deflated_bytes as f64
        );
    }
    Ok(())
}
