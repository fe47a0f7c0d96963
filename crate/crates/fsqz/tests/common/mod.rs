//! Oracles shared by the integration test targets. Each is an independent
//! re-derivation of a quantity the library computes, written as plainly as
//! possible so a disagreement points at the library, not the test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsqz::nn::{self, Gradients, ModelSpec};
use fsqz::tensor::Matrix;

/// Straight-line f64 evaluation of the MLP loss: ReLU hidden layers, linear
/// output, mean softmax cross-entropy. Parameters arrive flat in the same
/// order `nn::flatten` uses.
pub fn reference_loss(
    sizes: &[usize],
    params: &[f64],
    x: &[f64],
    rows: usize,
    labels: &[usize],
) -> f64 {
    let n_layers = sizes.len() - 1;
    let mut cur = x.to_vec();
    let mut off = 0;
    for l in 0..n_layers {
        let (in_d, out_d) = (sizes[l], sizes[l + 1]);
        let w = &params[off..off + in_d * out_d];
        off += in_d * out_d;
        let b = &params[off..off + out_d];
        off += out_d;
        let mut z = vec![0.0f64; rows * out_d];
        for r in 0..rows {
            for o in 0..out_d {
                let mut acc = b[o];
                for i in 0..in_d {
                    acc += w[o * in_d + i] * cur[r * in_d + i];
                }
                z[r * out_d + o] = acc;
            }
        }
        if l < n_layers - 1 {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = z;
    }
    let classes = sizes[n_layers];
    let mut loss = 0.0;
    for r in 0..rows {
        let zr = &cur[r * classes..(r + 1) * classes];
        let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - zr[labels[r]];
    }
    loss / rows as f64
}

fn flatten_grads(grads: &Gradients) -> Vec<f32> {
    let mut out = Vec::new();
    for l in &grads.layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

/// Full-sort pruning reference: sorts prunable indices by (|value|, index),
/// zeroes the first `floor(rate * n_prunable)` of them, and reports
/// (output, total zeros, largest pruned magnitude).
pub fn prune_oracle(
    values: &[f32],
    rate: f64,
    exclude: Option<&[bool]>,
) -> (Vec<f32>, usize, f32) {
    let excluded = |i: usize| exclude.is_some_and(|m| m[i]);
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| !excluded(i)).collect();
    let m = (rate * idx.len() as f64).floor() as usize;
    idx.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut out = values.to_vec();
    let mut threshold = 0.0f32;
    for &i in &idx[..m] {
        threshold = threshold.max(values[i].abs());
        out[i] = 0.0;
    }
    let zeros = out.iter().filter(|&&v| v == 0.0).count();
    (out, zeros, threshold)
}

/// Builds a seeded random case (5-8-4 net, batch of 6), compares analytic
/// gradients against central finite differences of [`reference_loss`], and
/// returns the worst relative error over all parameters.
pub fn fd_worst_relative_error(seed: u64) -> f64 {
    let sizes = vec![5usize, 8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let spec = ModelSpec::new(sizes.clone(), seed).unwrap();
    let state = nn::init_model(&spec).unwrap();
    let rows = 6;
    let x: Vec<f32> = (0..rows * sizes[0])
        .map(|_| rng.random_range(-1.5f32..1.5))
        .collect();
    let labels: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(0..sizes[sizes.len() - 1]))
        .collect();
    let batch = Matrix::from_vec(rows, sizes[0], x.clone()).unwrap();

    let (_, grads) = nn::loss_and_grad(&state, &batch, &labels).unwrap();
    let analytic = flatten_grads(&grads);

    let mut params: Vec<f64> = nn::flatten(&state).iter().map(|&v| v as f64).collect();
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let eps = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let lp = reference_loss(&sizes, &params, &xf, rows, &labels);
        params[i] = orig - eps;
        let lm = reference_loss(&sizes, &params, &xf, rows, &labels);
        params[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Example-weighted mean of parameter vectors computed with Kahan
/// compensated summation in f64, one running compensation per coordinate.
pub fn fedavg_oracle(updates: &[(u64, Vec<f32>)]) -> Vec<f32> {
    let n = updates[0].1.len();
    let total: u64 = updates.iter().map(|(k, _)| *k).sum();
    let mut sum = vec![0.0f64; n];
    let mut comp = vec![0.0f64; n];
    for (count, params) in updates {
        let weight = *count as f64 / total as f64;
        for i in 0..n {
            let term = weight * params[i] as f64;
            let y = term - comp[i];
            let t = sum[i] + y;
            comp[i] = (t - sum[i]) - y;
            sum[i] = t;
        }
    }
    sum.iter().map(|&v| v as f32).collect()
}

/// Distance in representable steps between two floats, crossing zero
/// correctly. Equal values (including +0 and -0) are zero steps apart.
pub fn ulp_distance(a: f32, b: f32) -> u64 {
    fn monotonic(v: f32) -> i64 {
        let bits = v.to_bits() as i32 as i64;
        if bits < 0 {
            i32::MIN as i64 - bits
        } else {
            bits
        }
    }
    if a == b {
        return 0;
    }
    monotonic(a).abs_diff(monotonic(b))
}
