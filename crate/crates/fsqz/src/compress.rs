//! Lossy model compression applied just before a message is sent: global
//! unstructured magnitude pruning, symmetric integer quantization with
//! power-of-two per-layer scales, and 1-bit sign quantization.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Layer, ModelSpec, ModelState, ParamVector};

/// What a pruning pass did.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// The rate that was asked for.
    pub rate_requested: f64,
    /// Magnitude of the largest value that was zeroed (0 if nothing was).
    pub threshold: f32,
    /// Total zeros in the output vector, pre-existing ones included.
    pub zeros_after: usize,
    /// Length of the vector.
    pub n: usize,
}

/// The `m`-th smallest absolute value of `values` (1-indexed), found by
/// selection rather than a full sort. `m = 0` returns 0.
pub fn select_threshold(values: &[f32], m: usize) -> Result<f32> {
    if m == 0 {
        return Ok(0.0);
    }
    if m > values.len() {
        return Err(Error::Config(format!(
            "rank {m} out of range for {} values",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {bad}")));
    }
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, nth, _) = abs.select_nth_unstable_by(m - 1, f32::total_cmp);
    Ok(*nth)
}

/// Zeroes the `floor(rate * n_prunable)` smallest-magnitude entries of
/// `values`, ties broken toward the lower index. Positions where
/// `exclude[i]` is true are never pruned and pass through bit-identical,
/// as do all surviving values.
pub fn global_magnitude_prune(
    values: &[f32],
    rate: f64,
    exclude: Option<&[bool]>,
) -> Result<(ParamVector, PruneReport)> {
    if !rate.is_finite() || !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "prune rate must be in [0, 1], got {rate}"
        )));
    }
    if let Some(mask) = exclude {
        if mask.len() != values.len() {
            return Err(Error::Shape(format!(
                "exclude mask has {} entries for {} values",
                mask.len(),
                values.len()
            )));
        }
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {bad}")));
    }

    let excluded = |i: usize| exclude.is_some_and(|m| m[i]);
    let mut prunable: Vec<usize> = (0..values.len()).filter(|&i| !excluded(i)).collect();
    let m = (rate * prunable.len() as f64).floor() as usize;

    let mut out = values.to_vec();
    let mut threshold = 0.0f32;
    if m > 0 {
        // Rank by (|value|, index): a total order, so the first m slots of
        // the partitioned array are exactly the set to prune, with magnitude
        // ties resolved toward the lower index.
        let key = |&i: &usize| (values[i].abs(), i);
        prunable.select_nth_unstable_by(m - 1, |a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        for &i in &prunable[..m] {
            let a = values[i].abs();
            if a > threshold {
                threshold = a;
            }
            out[i] = 0.0;
        }
    }
    let zeros_after = out.iter().filter(|&&v| v == 0.0).count();
    Ok((
        out,
        PruneReport {
            rate_requested: rate,
            threshold,
            zeros_after,
            n: values.len(),
        },
    ))
}

/// Exclusion mask matching `nn::flatten` order with every bias position set,
/// for configurations that prune weights only.
pub fn bias_exclusion_mask(spec: &ModelSpec) -> Vec<bool> {
    let mut mask = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        mask.extend(std::iter::repeat(false).take(w[0] * w[1]));
        mask.extend(std::iter::repeat(true).take(w[1]));
    }
    mask
}

/// One quantized layer: signed codes for its weights-then-bias values and the
/// base-two exponent of the shared scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantLayer {
    pub scale_exp: i8,
    pub codes: Vec<i8>,
}

impl QuantLayer {
    pub fn scale(&self) -> f32 {
        (self.scale_exp as f64).exp2() as f32
    }
}

/// A whole model quantized at 8, 4, or 1 bits per value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedModel {
    pub bits: u8,
    pub layers: Vec<QuantLayer>,
}

impl QuantizedModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.codes.len()).sum()
    }
}

/// Largest representable code magnitude at a bit width.
pub fn qmax(bits: u8) -> Result<i32> {
    match bits {
        4 | 8 => Ok((1i32 << (bits - 1)) - 1),
        _ => Err(Error::Config(format!(
            "integer quantization supports 4 or 8 bits, got {bits}"
        ))),
    }
}

/// Exponent `e` with `2^e <= x < 2^(e+1)` for finite positive `x`.
fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x > 0.0);
    let field = ((x.to_bits() >> 52) & 0x7ff) as i32;
    if field == 0 {
        // Subnormal f64; cannot happen for f32-derived magnitudes but kept
        // for completeness.
        x.log2().floor() as i32
    } else {
        field - 1023
    }
}

/// Symmetric quantization of one value group sharing a scale. The scale is
/// the largest power of two not above `max|v| / qmax`, so codes use the full
/// integer range; rounding is half away from zero, and codes clamp to
/// `[-qmax, qmax]`.
pub fn quantize_slice(values: &[f32], bits: u8) -> Result<(Vec<i8>, i8)> {
    let qmax = qmax(bits)?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {bad}")));
    }
    let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok((vec![0i8; values.len()], 0));
    }
    let e = floor_log2(max_abs as f64 / qmax as f64).clamp(-126, 127);
    let scale = (e as f64).exp2();
    let codes = values
        .iter()
        .map(|&v| (v as f64 / scale).round().clamp(-qmax as f64, qmax as f64) as i8)
        .collect();
    Ok((codes, e as i8))
}

/// Quantizes every layer of a model at 4 or 8 bits, one scale per layer
/// covering its weights and bias together.
pub fn quantize_model(state: &ModelState, bits: u8) -> Result<QuantizedModel> {
    qmax(bits)?;
    let layers = state
        .layers
        .iter()
        .map(|l| {
            let mut vals = Vec::with_capacity(l.weights.len() + l.bias.len());
            vals.extend_from_slice(&l.weights);
            vals.extend_from_slice(&l.bias);
            let (codes, scale_exp) = quantize_slice(&vals, bits)?;
            Ok(QuantLayer { scale_exp, codes })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedModel { bits, layers })
}

/// 1-bit quantization: every value becomes its sign with `sign(0) = +1` and
/// unit scale.
pub fn binarize_model(state: &ModelState) -> QuantizedModel {
    let layers = state
        .layers
        .iter()
        .map(|l| {
            let codes = l
                .weights
                .iter()
                .chain(&l.bias)
                .map(|&v| if v < 0.0 { -1i8 } else { 1 })
                .collect();
            QuantLayer {
                scale_exp: 0,
                codes,
            }
        })
        .collect();
    QuantizedModel { bits: 1, layers }
}

/// Rebuilds flat signs (one per parameter, `±1`) into a 1-bit quantized
/// model shaped like `spec`.
pub fn binary_from_signs(spec: &ModelSpec, signs: &[i8]) -> Result<QuantizedModel> {
    if signs.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "{} signs for a {}-parameter model",
            signs.len(),
            spec.param_count()
        )));
    }
    if let Some(&bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
        return Err(Error::Corrupt(format!("sign code {bad} is not +1 or -1")));
    }
    let mut layers = Vec::new();
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        let n = w[0] * w[1] + w[1];
        layers.push(QuantLayer {
            scale_exp: 0,
            codes: signs[off..off + n].to_vec(),
        });
        off += n;
    }
    Ok(QuantizedModel { bits: 1, layers })
}

/// Reconstructs `code * scale` values into a model shaped like `spec`.
pub fn dequantize_model(q: &QuantizedModel, spec: &ModelSpec) -> Result<ModelState> {
    spec.validate()?;
    if q.layers.len() + 1 != spec.layer_sizes.len() {
        return Err(Error::Shape(format!(
            "{} quantized layers for a {}-layer spec",
            q.layers.len(),
            spec.layer_sizes.len() - 1
        )));
    }
    let layers = q
        .layers
        .iter()
        .zip(spec.layer_sizes.windows(2))
        .map(|(ql, w)| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let n = in_dim * out_dim + out_dim;
            if ql.codes.len() != n {
                return Err(Error::Shape(format!(
                    "layer has {} codes, spec wants {n}",
                    ql.codes.len()
                )));
            }
            let scale = ql.scale();
            let vals: Vec<f32> = ql.codes.iter().map(|&c| c as f32 * scale).collect();
            Ok(Layer {
                in_dim,
                out_dim,
                weights: vals[..in_dim * out_dim].to_vec(),
                bias: vals[in_dim * out_dim..].to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelState { layers })
}

/// Quantize-aware forward weights: the latent model passed through
/// quantize-then-dequantize at the given width (1, 4, or 8 bits). Training on
/// these while updating the latent f32 weights is the straight-through
/// estimator.
pub fn qat_forward_state(latent: &ModelState, bits: u8) -> Result<ModelState> {
    let q = match bits {
        1 => binarize_model(latent),
        _ => quantize_model(latent, bits)?,
    };
    let layers = q
        .layers
        .iter()
        .zip(&latent.layers)
        .map(|(ql, l)| {
            let scale = ql.scale();
            let vals: Vec<f32> = ql.codes.iter().map(|&c| c as f32 * scale).collect();
            Layer {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weights: vals[..l.weights.len()].to_vec(),
                bias: vals[l.weights.len()..].to_vec(),
            }
        })
        .collect();
    Ok(ModelState { layers })
}

/// Straight-through gradient rule. At 4 and 8 bits gradients pass unchanged;
/// at 1 bit the gradient is zeroed wherever the latent value has left
/// `[-1, 1]`, which keeps saturated signs from drifting further out.
pub fn qat_mask_gradients(grads: &mut Gradients, latent: &ModelState, bits: u8) {
    if bits != 1 {
        return;
    }
    for (g, l) in grads.layers.iter_mut().zip(&latent.layers) {
        for (gv, &lv) in g
            .weights
            .iter_mut()
            .chain(g.bias.iter_mut())
            .zip(l.weights.iter().chain(&l.bias))
        {
            if lv.abs() > 1.0 {
                *gv = 0.0;
            }
        }
    }
}

/// Clamps every latent parameter to `[-1, 1]`; applied after each optimizer
/// step during 1-bit training.
pub fn clip_to_unit_interval(state: &mut ModelState) {
    state.for_each_param(|v| *v = v.clamp(-1.0, 1.0));
}
