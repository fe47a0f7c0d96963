//! Multilayer perceptron with manual backprop.
//!
//! Architecture is fixed on purpose: fully connected layers, ReLU on every
//! hidden layer, linear output trained with softmax cross-entropy. Parameters
//! are stored as `f32` (that is what goes over the wire); every forward,
//! loss, and gradient accumulation runs in `f64` so results are stable and
//! reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Flat parameter vector in [`flatten`] order.
pub type ParamVector = Vec<f32>;

/// Network shape plus the seed used for weight initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Sizes from input to output, e.g. `[32, 64, 10]`. At least two entries,
    /// all nonzero.
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<ModelSpec> {
        let spec = ModelSpec { layer_sizes, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(
                "layer_sizes needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be nonzero".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One fully connected layer. `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Layer {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

/// All layer parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<Layer>,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// The spec this state conforms to (shape only; seed is not recoverable).
    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.layers.len() + 1 == spec.layer_sizes.len()
            && self.layers.iter().enumerate().all(|(i, l)| {
                l.in_dim == spec.layer_sizes[i]
                    && l.out_dim == spec.layer_sizes[i + 1]
                    && l.weights.len() == l.in_dim * l.out_dim
                    && l.bias.len() == l.out_dim
            })
    }

    /// Applies `f` to every parameter value in flatten order.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut f32)) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }
}

/// Per-parameter gradients, same shapes as the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(state: &ModelState) -> Gradients {
        Gradients {
            layers: state
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Classical momentum SGD: `v <- momentum * v + g`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<f32>,
}

impl OptimizerState {
    /// `learning_rate` must be finite and nonnegative, `momentum` in `[0, 1)`.
    pub fn new(learning_rate: f32, momentum: f32, param_count: usize) -> Result<OptimizerState> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: vec![0.0; param_count],
        })
    }

    pub fn velocity(&self) -> &[f32] {
        &self.velocity
    }
}

/// He-initialized model: weights `N(0, sqrt(2 / in_dim))`, biases zero.
/// Deterministic in `spec.seed`; draws happen layer by layer in row-major
/// weight order.
pub fn init_model(spec: &ModelSpec) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let sigma = (2.0 / in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * sigma) as f32
                })
                .collect();
            Layer {
                in_dim,
                out_dim,
                weights,
                bias: vec![0.0; out_dim],
            }
        })
        .collect();
    Ok(ModelState { layers })
}

/// Forward pass state kept for backprop: inputs to each layer and each
/// layer's pre-activation, all in f64.
struct ForwardTrace {
    /// `inputs[l]` is the batch fed into layer `l` (rows x in_dim).
    inputs: Vec<Vec<f64>>,
    /// `pre_acts[l]` is `W x + b` for layer `l` (rows x out_dim).
    pre_acts: Vec<Vec<f64>>,
    rows: usize,
}

fn forward_trace(state: &ModelState, batch: &Matrix) -> Result<ForwardTrace> {
    let first = state
        .layers
        .first()
        .ok_or_else(|| Error::Shape("model has no layers".into()))?;
    if batch.cols() != first.in_dim {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            first.in_dim
        )));
    }
    let rows = batch.rows();
    let mut inputs = Vec::with_capacity(state.layers.len());
    let mut pre_acts = Vec::with_capacity(state.layers.len());
    let mut current: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();

    let last = state.layers.len() - 1;
    for (l, layer) in state.layers.iter().enumerate() {
        let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
        let mut z = vec![0.0f64; rows * out_dim];
        for r in 0..rows {
            let x = &current[r * in_dim..(r + 1) * in_dim];
            let zr = &mut z[r * out_dim..(r + 1) * out_dim];
            for o in 0..out_dim {
                let wrow = &layer.weights[o * in_dim..(o + 1) * in_dim];
                let mut acc = layer.bias[o] as f64;
                for i in 0..in_dim {
                    acc += wrow[i] as f64 * x[i];
                }
                zr[o] = acc;
            }
        }
        inputs.push(std::mem::take(&mut current));
        if l < last {
            current = z.iter().map(|&v| v.max(0.0)).collect();
        }
        pre_acts.push(z);
    }
    Ok(ForwardTrace {
        inputs,
        pre_acts,
        rows,
    })
}

/// Logits for a batch (rows x output_dim).
pub fn forward(state: &ModelState, batch: &Matrix) -> Result<Matrix> {
    let trace = forward_trace(state, batch)?;
    let out_dim = state.layers.last().unwrap().out_dim;
    let logits = trace.pre_acts.last().unwrap();
    Matrix::from_vec(trace.rows, out_dim, logits.iter().map(|&v| v as f32).collect())
}

/// Mean softmax cross-entropy over the batch, plus gradients for every
/// parameter. The batch must be nonempty and every label must be a valid
/// class index.
pub fn loss_and_grad(
    state: &ModelState,
    batch: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    if batch.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if labels.len() != batch.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} examples",
            labels.len(),
            batch.rows()
        )));
    }
    let classes = state
        .layers
        .last()
        .ok_or_else(|| Error::Shape("model has no layers".into()))?
        .out_dim;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let trace = forward_trace(state, batch)?;
    let rows = trace.rows;
    let logits = trace.pre_acts.last().unwrap();

    // Softmax cross-entropy with the log-sum-exp trick; delta is the
    // gradient w.r.t. logits, already divided by the batch size.
    let mut loss = 0.0f64;
    let mut delta = vec![0.0f64; rows * classes];
    let inv_b = 1.0 / rows as f64;
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
        let lse = zmax + sum_exp.ln();
        loss += lse - z[labels[r]];
        let d = &mut delta[r * classes..(r + 1) * classes];
        for c in 0..classes {
            d[c] = (z[c] - lse).exp() * inv_b;
        }
        d[labels[r]] -= inv_b;
    }
    loss *= inv_b;

    // Backprop through the layers; all accumulation in f64.
    let mut grads = Gradients::zeros_like(state);
    for l in (0..state.layers.len()).rev() {
        let layer = &state.layers[l];
        let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
        let input = &trace.inputs[l];
        {
            let g = &mut grads.layers[l];
            let mut dw = vec![0.0f64; in_dim * out_dim];
            let mut db = vec![0.0f64; out_dim];
            for r in 0..rows {
                let d = &delta[r * out_dim..(r + 1) * out_dim];
                let x = &input[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let dro = d[o];
                    db[o] += dro;
                    let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        row[i] += dro * x[i];
                    }
                }
            }
            g.weights = dw.iter().map(|&v| v as f32).collect();
            g.bias = db.iter().map(|&v| v as f32).collect();
        }
        if l > 0 {
            // delta_prev = (delta . W) masked by ReLU'(z_{l-1}).
            let z_prev = &trace.pre_acts[l - 1];
            let mut prev = vec![0.0f64; rows * in_dim];
            for r in 0..rows {
                let d = &delta[r * out_dim..(r + 1) * out_dim];
                let p = &mut prev[r * in_dim..(r + 1) * in_dim];
                for o in 0..out_dim {
                    let dro = d[o];
                    let wrow = &layer.weights[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        p[i] += dro * wrow[i] as f64;
                    }
                }
                let zp = &z_prev[r * in_dim..(r + 1) * in_dim];
                for i in 0..in_dim {
                    if zp[i] <= 0.0 {
                        p[i] = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grads))
}

/// One classical-momentum step. Refuses to touch the model or velocity if any
/// gradient value is NaN or infinite.
pub fn sgd_step(state: &mut ModelState, opt: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != state.layers.len()
        || grads
            .layers
            .iter()
            .zip(&state.layers)
            .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
    {
        return Err(Error::Shape("gradient shapes do not match model".into()));
    }
    let n: usize = state.param_count();
    if opt.velocity.len() != n {
        return Err(Error::Shape(format!(
            "velocity has {} entries, model has {n} parameters",
            opt.velocity.len()
        )));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric(
            "non-finite gradient; step refused".into(),
        ));
    }

    let mut k = 0;
    for (layer, g) in state.layers.iter_mut().zip(&grads.layers) {
        for (w, &gw) in layer.weights.iter_mut().zip(&g.weights) {
            let v = opt.momentum * opt.velocity[k] + gw;
            opt.velocity[k] = v;
            *w -= opt.learning_rate * v;
            k += 1;
        }
        for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
            let v = opt.momentum * opt.velocity[k] + gb;
            opt.velocity[k] = v;
            *b -= opt.learning_rate * v;
            k += 1;
        }
    }
    Ok(())
}

/// Flat view of all parameters: layer 0 weights (row-major), layer 0 bias,
/// layer 1 weights, layer 1 bias, and so on.
pub fn flatten(state: &ModelState) -> ParamVector {
    let mut out = Vec::with_capacity(state.param_count());
    for layer in &state.layers {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.bias);
    }
    out
}

/// Inverse of [`flatten`] for a given shape. The vector length must equal
/// `spec.param_count()`.
pub fn unflatten(spec: &ModelSpec, params: &[f32]) -> Result<ModelState> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "expected {} parameters for this spec, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let nw = in_dim * out_dim;
        let weights = params[off..off + nw].to_vec();
        off += nw;
        let bias = params[off..off + out_dim].to_vec();
        off += out_dim;
        layers.push(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    Ok(ModelState { layers })
}
