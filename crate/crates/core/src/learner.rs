//! Dense feed-forward classifier with exact multiply-add accounting.
//!
//! Parameters live in one flat `f32` vector. For each layer `l` (in order) the
//! block is the row-major weight matrix of shape `(out, in)` followed by the
//! `out` biases. Hidden layers use `tanh`, the output layer `softmax` over the
//! global class space.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, LabeledExample};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("network needs at least 2 layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer size at position {0} must be >= 1")]
    EmptyLayer(usize),
    #[error("input has {got} features, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, layout requires {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f32),
    #[error("empty test set")]
    EmptyTestSet,
}

pub type Result<T> = std::result::Result<T, LearnerError>;

/// Multiply-add tally. Only dense-layer products are counted; activations and
/// softmax are free.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpsCounter {
    pub forward_madds: u64,
    pub backward_madds: u64,
}

impl OpsCounter {
    pub fn total(&self) -> u64 {
        self.forward_madds + self.backward_madds
    }
}

/// Gradient with the same flat layout as [`Hypothesis::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f32>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerView {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// The classifier `h`: an architecture plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    layer_sizes: Vec<usize>,
    params: Vec<f32>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(LearnerError::TooFewLayers(layer_sizes.len()));
    }
    if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(LearnerError::EmptyLayer(pos));
    }
    Ok(())
}

/// `Σ (in·out + out)` over layers.
pub fn param_count_for(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `Σ in·out` over layers: forward multiply-adds for one sample.
pub fn forward_madds_per_sample(layer_sizes: &[usize]) -> u64 {
    layer_sizes.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

impl Hypothesis {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut h = Self::zeros(layer_sizes)?;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        for layer in h.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f32).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in &mut h.params[layer.w..layer.w + layer.fan_in * layer.fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(h)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; param_count_for(layer_sizes)],
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f32>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = param_count_for(layer_sizes);
        if params.len() != expected {
            return Err(LearnerError::ParamLength {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Storage of the parameters in bits, 32 per parameter.
    pub fn mem_bits(&self) -> u64 {
        32 * self.params.len() as u64
    }

    fn layers(&self) -> Vec<LayerView> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let view = LayerView {
                    fan_in: w[0],
                    fan_out: w[1],
                    w: off,
                    b: off + w[0] * w[1],
                };
                off += w[0] * w[1] + w[1];
                view
            })
            .collect()
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(LearnerError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds raw output logits.
    fn activations(&self, layers: &[LayerView], x: &[f32], ops: &mut OpsCounter) -> Vec<Vec<f32>> {
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let mut z = self.params[layer.b..layer.b + layer.fan_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                *zo += row.iter().zip(input).map(|(w, a)| w * a).sum::<f32>();
            }
            if l + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            ops.forward_madds += (layer.fan_in * layer.fan_out) as u64;
            acts.push(z);
        }
        acts
    }

    /// Output logits (pre-softmax).
    pub fn logits(&self, x: &[f32], ops: &mut OpsCounter) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let layers = self.layers();
        Ok(self.activations(&layers, x, ops).pop().expect("at least one layer"))
    }

    /// Class-probability vector `h(x)`.
    pub fn forward(&self, x: &[f32], ops: &mut OpsCounter) -> Result<Vec<f32>> {
        let mut z = self.logits(x, ops)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Argmax class, optionally restricted to `allowed` classes. Ties go to
    /// the lowest class index.
    pub fn predict(&self, x: &[f32], allowed: Option<&[usize]>, ops: &mut OpsCounter) -> Result<usize> {
        let z = self.logits(x, ops)?;
        let best = match allowed {
            Some(classes) => argmax_over(&z, classes.iter().copied()),
            None => argmax_over(&z, 0..z.len()),
        };
        Ok(best)
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[&LabeledExample],
        ops: &mut OpsCounter,
    ) -> Result<(f32, GradientVector)> {
        if batch.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        let classes = self.class_count();
        for ex in batch {
            self.check_input(&ex.features)?;
            if ex.label >= classes {
                return Err(LearnerError::LabelOutOfRange {
                    label: ex.label,
                    classes,
                });
            }
        }
        let layers = self.layers();
        let mut grad = vec![0.0f32; self.params.len()];
        let mut loss = 0.0f32;
        for ex in batch {
            loss += self.accumulate_sample(&layers, ex, &mut grad, ops);
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, GradientVector(grad)))
    }

    /// Forward + backward for one sample; adds its (unscaled) gradient into
    /// `grad` and returns its loss.
    fn accumulate_sample(
        &self,
        layers: &[LayerView],
        ex: &LabeledExample,
        grad: &mut [f32],
        ops: &mut OpsCounter,
    ) -> f32 {
        let acts = self.activations(layers, &ex.features, ops);
        let logits = acts.last().expect("output layer");
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum_exp: f32 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let loss = lse - logits[ex.label];

        // dL/dz at the output: softmax minus one-hot.
        let mut delta: Vec<f32> = logits.iter().map(|z| (z - lse).exp()).collect();
        delta[ex.label] -= 1.0;

        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                grad[layer.b + o] += d;
                let row = &mut grad[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
            }
            let mut upstream = vec![0.0f32; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &self.params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                upstream.iter_mut().zip(row).for_each(|(u, w)| *u += w * d);
            }
            ops.backward_madds += 2 * (layer.fan_in * layer.fan_out) as u64;
            if l > 0 {
                upstream
                    .iter_mut()
                    .zip(input)
                    .for_each(|(u, a)| *u *= 1.0 - a * a);
            }
            delta = upstream;
        }
        loss
    }

    /// `params ← params − lr·g`.
    pub fn sgd_step(&mut self, g: &GradientVector, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(LearnerError::InvalidLearningRate(lr));
        }
        if g.len() != self.params.len() {
            return Err(LearnerError::ParamLength {
                expected: self.params.len(),
                got: g.len(),
            });
        }
        self.params
            .iter_mut()
            .zip(&g.0)
            .for_each(|(p, gi)| *p -= lr * gi);
        Ok(())
    }
}

pub(crate) fn softmax_in_place(z: &mut [f32]) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn argmax_over(z: &[f32], candidates: impl Iterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for c in candidates {
        let better = match best {
            None => true,
            Some(b) => z[c] > z[b] || (z[c] == z[b] && c < b),
        };
        if better {
            best = Some(c);
        }
    }
    best.unwrap_or(0)
}

/// Fraction of `test` whose argmax prediction equals the label. `allowed`
/// restricts the argmax to a class subset (task-conditioned evaluation).
pub fn evaluate_accuracy(
    h: &Hypothesis,
    test: &Dataset,
    allowed: Option<&[usize]>,
    ops: &mut OpsCounter,
) -> Result<f64> {
    if test.examples.is_empty() {
        return Err(LearnerError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for ex in &test.examples {
        if h.predict(&ex.features, allowed, ops)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(features: Vec<f32>, label: usize) -> LabeledExample {
        LabeledExample { features, label }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Hypothesis::init(&[4, 3], 7).unwrap();
        let b = Hypothesis::init(&[4, 3], 7).unwrap();
        let bits = |h: &Hypothesis| h.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, Hypothesis::init(&[4, 3], 8).unwrap());
    }

    #[test]
    fn init_respects_glorot_bounds_and_zero_biases() {
        let h = Hypothesis::init(&[4, 8, 3], 1).unwrap();
        assert_eq!(h.param_count(), 67);
        let l1 = (6.0f32 / 12.0).sqrt();
        assert!(h.params()[..32].iter().all(|w| w.abs() <= l1));
        assert!(h.params()[32..40].iter().all(|&b| b == 0.0));
        let l2 = (6.0f32 / 11.0).sqrt();
        assert!(h.params()[40..64].iter().all(|w| w.abs() <= l2));
        assert!(h.params()[64..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_layer_sizes() {
        assert_eq!(Hypothesis::init(&[4], 0), Err(LearnerError::TooFewLayers(1)));
        assert_eq!(Hypothesis::init(&[4, 0, 3], 0), Err(LearnerError::EmptyLayer(1)));
    }

    #[test]
    fn zero_net_is_uniform() {
        let h = Hypothesis::zeros(&[5, 4]).unwrap();
        let p = h.forward(&[1.0, -2.0, 0.5, 3.0, 0.0], &mut OpsCounter::default()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let h = Hypothesis::zeros(&[3, 2]).unwrap();
        assert_eq!(
            h.forward(&[1.0], &mut OpsCounter::default()),
            Err(LearnerError::DimensionMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn forward_counts_madds_exactly() {
        let h = Hypothesis::init(&[4, 8, 3], 2).unwrap();
        let mut ops = OpsCounter::default();
        for _ in 0..5 {
            h.forward(&[0.1, 0.2, 0.3, 0.4], &mut ops).unwrap();
        }
        assert_eq!(ops.forward_madds, 5 * (32 + 24));
        assert_eq!(ops.backward_madds, 0);
    }

    #[test]
    fn backward_counts_twice_forward() {
        let h = Hypothesis::init(&[4, 8, 3], 2).unwrap();
        let batch = [ex(vec![0.1; 4], 0), ex(vec![0.2; 4], 2)];
        let refs: Vec<&LabeledExample> = batch.iter().collect();
        let mut ops = OpsCounter::default();
        h.loss_and_grad(&refs, &mut ops).unwrap();
        assert_eq!(ops.forward_madds, 2 * 56);
        assert_eq!(ops.backward_madds, 2 * 2 * 56);
    }

    #[test]
    fn zero_net_loss_is_ln_c() {
        let h = Hypothesis::zeros(&[2, 4]).unwrap();
        let batch = [ex(vec![1.0, 2.0], 3), ex(vec![-1.0, 0.0], 0)];
        let refs: Vec<&LabeledExample> = batch.iter().collect();
        let (loss, _) = h.loss_and_grad(&refs, &mut OpsCounter::default()).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn loss_errors() {
        let h = Hypothesis::zeros(&[2, 3]).unwrap();
        let mut ops = OpsCounter::default();
        assert_eq!(h.loss_and_grad(&[], &mut ops).unwrap_err(), LearnerError::EmptyBatch);
        let bad = ex(vec![0.0, 0.0], 3);
        assert_eq!(
            h.loss_and_grad(&[&bad], &mut ops).unwrap_err(),
            LearnerError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut h = Hypothesis::from_params(&[1, 1], vec![1.0, 0.0]).unwrap();
        h.sgd_step(&GradientVector(vec![0.5, 0.0]), 0.1).unwrap();
        assert_eq!(h.params()[0], 0.95);
        assert_eq!(h.params()[1], 0.0);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let h0 = Hypothesis::init(&[3, 4, 2], 3).unwrap();
        let mut h = h0.clone();
        h.sgd_step(&GradientVector::zeros(h.param_count()), 0.5).unwrap();
        assert_eq!(h, h0);
    }

    #[test]
    fn sgd_two_steps_equal_one_double_step() {
        // Dyadic values keep both paths exact in f32.
        let g = GradientVector(vec![0.5, -0.25, 1.0, 0.125]);
        let mut a = Hypothesis::from_params(&[1, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let mut b = a.clone();
        a.sgd_step(&g, 0.25).unwrap();
        a.sgd_step(&g, 0.25).unwrap();
        b.sgd_step(&g, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_errors() {
        let mut h = Hypothesis::zeros(&[1, 1]).unwrap();
        let g = GradientVector::zeros(2);
        assert_eq!(h.sgd_step(&g, 0.0), Err(LearnerError::InvalidLearningRate(0.0)));
        assert_eq!(h.sgd_step(&g, -1.0), Err(LearnerError::InvalidLearningRate(-1.0)));
        assert_eq!(
            h.sgd_step(&GradientVector::zeros(3), 0.1),
            Err(LearnerError::ParamLength { expected: 2, got: 3 })
        );
    }

    #[test]
    fn zero_net_accuracy_on_balanced_set_is_quarter() {
        let h = Hypothesis::zeros(&[2, 4]).unwrap();
        let ds = Dataset::new(
            (0..8).map(|i| ex(vec![i as f32, 1.0], i % 4)).collect(),
            4,
            2,
            None,
        )
        .unwrap();
        let acc = evaluate_accuracy(&h, &ds, None, &mut OpsCounter::default()).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn masked_prediction_restricts_argmax() {
        // Bias favors class 0, mask removes it.
        let h = Hypothesis::from_params(&[1, 3], vec![0.0, 0.0, 0.0, 5.0, 1.0, 2.0]).unwrap();
        let mut ops = OpsCounter::default();
        assert_eq!(h.predict(&[0.0], None, &mut ops).unwrap(), 0);
        assert_eq!(h.predict(&[0.0], Some(&[1, 2]), &mut ops).unwrap(), 2);
    }

    #[test]
    fn empty_test_set_errors() {
        let h = Hypothesis::zeros(&[2, 2]).unwrap();
        let ds = Dataset {
            examples: vec![],
            class_count: 2,
            feature_dim: 2,
            image_side: None,
        };
        assert_eq!(
            evaluate_accuracy(&h, &ds, None, &mut OpsCounter::default()),
            Err(LearnerError::EmptyTestSet)
        );
    }

    #[test]
    fn mem_bits_is_32_per_param() {
        let small = Hypothesis::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(small.mem_bits(), 2144);
        assert!(Hypothesis::zeros(&[4, 16, 3]).unwrap().mem_bits() > small.mem_bits());
    }
}
