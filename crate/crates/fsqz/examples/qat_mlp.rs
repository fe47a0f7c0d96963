//! Quantization-aware training at 8, 4, and 1 bits next to the fp32
//! baseline. The forward pass sees quantized weights while updates flow to
//! the latent full-precision ones; at 1 bit the latents stay clipped to
//! [-1, 1] and gradients vanish outside it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fsqz::compress::{clip_to_unit_interval, qat_forward_state, qat_mask_gradients};
use fsqz::data::{gen_blobs, split_per_class};
use fsqz::fl::evaluate;
use fsqz::nn::{init_model, loss_and_grad, sgd_step, ModelSpec, OptimizerState};

fn train(bits: Option<u8>) -> fsqz::Result<f64> {
    let full = gen_blobs(10, 32, 600, 0.8, 42)?;
    let (train, test) = split_per_class(&full, 500)?;
    let spec = ModelSpec::new(vec![32, 64, 10], 1)?;
    let mut model = init_model(&spec)?;
    let mut opt = OptimizerState::new(0.05, 0.9, model.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..8 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(32) {
            let batch = train.features.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (_, mut grads) = match bits {
                Some(b) => {
                    let quantized = qat_forward_state(&model, b)?;
                    loss_and_grad(&quantized, &batch, &labels)?
                }
                None => loss_and_grad(&model, &batch, &labels)?,
            };
            if let Some(b) = bits {
                qat_mask_gradients(&mut grads, &model, b);
            }
            sgd_step(&mut model, &mut opt, &grads)?;
            if bits == Some(1) {
                clip_to_unit_interval(&mut model);
            }
        }
    }

    // Deployment accuracy uses the weights a receiver would decode.
    let deployed = match bits {
        Some(b) => qat_forward_state(&model, b)?,
        None => model,
    };
    evaluate(&deployed, &test)
}

fn main() -> fsqz::Result<()> {
    println!("weights      test_accuracy");
    for (label, bits) in [
        ("fp32", None),
        ("8-bit", Some(8)),
        ("4-bit", Some(4)),
        ("1-bit", Some(1)),
    ] {
        println!("{label:<11}  {:.4}", train(bits)?);
    }
    Ok(())
}
