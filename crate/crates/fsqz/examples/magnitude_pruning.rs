//! Global magnitude pruning on a Gaussian vector: how the threshold and
//! zero count move with the rate, that higher rates nest inside lower
//! ones, and that pruning twice changes nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fsqz::compress::global_magnitude_prune;

fn main() -> fsqz::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values: Vec<f32> = (0..100_000)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();

    println!("rate   threshold  zeros   zero_fraction");
    let mut previous_zero_set: Option<Vec<bool>> = None;
    for rate in [0.0, 0.3, 0.5, 0.8, 0.9, 0.99] {
        let (pruned, report) = global_magnitude_prune(&values, rate, None)?;
        println!(
            "{rate:<5}  {:<9.5}  {:<6}  {:.5}",
            report.threshold,
            report.zeros_after,
            report.zeros_after as f64 / report.n as f64
        );

        // Every weight a lower rate removed stays removed at higher rates.
        let zero_set: Vec<bool> = pruned.iter().map(|&v| v == 0.0).collect();
        if let Some(prev) = &previous_zero_set {
            let nested = prev
                .iter()
                .zip(&zero_set)
                .all(|(&was_zero, &is_zero)| !was_zero || is_zero);
            assert!(nested, "zero sets must nest as the rate grows");
        }
        previous_zero_set = Some(zero_set);

        let (again, _) = global_magnitude_prune(&pruned, rate, None)?;
        assert_eq!(pruned, again, "pruning is idempotent");
    }
    println!("zero-set nesting and idempotence verified");
    Ok(())
}
