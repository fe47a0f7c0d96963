//! Trains the MLP centrally on synthetic blobs: plain minibatch SGD with
//! momentum, printing loss and test accuracy per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fsqz::data::{gen_blobs, split_per_class};
use fsqz::fl::evaluate;
use fsqz::nn::{init_model, loss_and_grad, sgd_step, ModelSpec, OptimizerState};

fn main() -> fsqz::Result<()> {
    let full = gen_blobs(10, 32, 600, 0.8, 42)?;
    let (train, test) = split_per_class(&full, 500)?;

    let spec = ModelSpec::new(vec![32, 64, 10], 1)?;
    let mut model = init_model(&spec)?;
    let mut opt = OptimizerState::new(0.05, 0.9, model.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    println!("epoch  mean_loss  test_accuracy");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..10 {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0u32;
        for chunk in order.chunks(32) {
            let batch = train.features.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = loss_and_grad(&model, &batch, &labels)?;
            sgd_step(&mut model, &mut opt, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let accuracy = evaluate(&model, &test)?;
        println!(
            "{epoch:>5}  {:>9.4}  {accuracy:>13.4}",
            loss_sum / batches as f64
        );
    }
    Ok(())
}
