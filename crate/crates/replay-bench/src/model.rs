//! From-scratch MLP classifier with cross-entropy loss, Adam, and the
//! training-with-replay loop.
//!
//! Everything is generic over the float type so the reference runs use
//! `f32` while gradient checks run at `f64`. Reference architecture:
//! input -> 250 -> 250 -> class_count with ReLU on the hidden layers and
//! no activation on the output.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Batch, Instance};
use crate::rng::{rng_from, substream};
use crate::samplers::PolicyState;
use crate::streams::{Dataset, StreamPlan};

pub const HIDDEN_WIDTH: usize = 250;

fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("finite literal converts")
}

/// One dense layer; `weight` is (fan_in, fan_out) so activations multiply
/// on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Layer<F> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Multi-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: NdFloat> Mlp<F> {
    /// Fan-in-scaled uniform init: weights in [-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)], biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[0], w[1]), |_| {
                    cast(rng.random_range(-bound..bound))
                });
                Layer {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// The reference architecture: input -> 250 -> 250 -> class_count.
    pub fn standard(input_dim: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::init(&[input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, class_count], rng)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers })
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "bad layer sizes {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Per-layer activations captured during the forward pass, as needed by
/// backpropagation.
pub struct ForwardCache<F> {
    /// `activations[l]` is the input to layer `l` (so `activations[0]` is
    /// the batch itself).
    pub activations: Vec<Array2<F>>,
    /// `pre_activations[l]` is layer `l`'s affine output before ReLU.
    pub pre_activations: Vec<Array2<F>>,
}

/// Runs the network: ReLU after every hidden layer, raw logits out.
pub fn forward<F: NdFloat>(mlp: &Mlp<F>, x: &Array2<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
    if x.ncols() != mlp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: mlp.input_dim(),
            got: x.ncols(),
        });
    }
    let last = mlp.layers.len() - 1;
    let mut activations = vec![x.clone()];
    let mut pre_activations = Vec::with_capacity(mlp.layers.len());
    for (l, layer) in mlp.layers.iter().enumerate() {
        let z = activations[l].dot(&layer.weight) + &layer.bias;
        pre_activations.push(z.clone());
        if l < last {
            activations.push(z.mapv(|v| v.max(F::zero())));
        }
    }
    let logits = pre_activations[last].clone();
    Ok((
        logits,
        ForwardCache {
            activations,
            pre_activations,
        },
    ))
}

/// Row-wise softmax via the log-sum-exp shift.
pub fn softmax<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mu = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mu).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy and its gradients by backpropagation.
pub fn loss_and_grads<F: NdFloat>(
    mlp: &Mlp<F>,
    x: &Array2<F>,
    labels: &[usize],
) -> Result<(F, Vec<Layer<F>>)> {
    let n = x.nrows();
    if labels.len() != n || n == 0 {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let classes = mlp.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let (logits, cache) = forward(mlp, x)?;
    let n_f = cast::<F>(n as f64);
    let mut loss = F::zero();
    let mut delta = Array2::<F>::zeros((n, classes));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mu = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for &v in row {
            sum += (v - mu).exp();
        }
        let lse = mu + sum.ln();
        loss += lse - row[labels[i]];
        for j in 0..classes {
            delta[[i, j]] = (row[j] - lse).exp() / n_f;
        }
        delta[[i, labels[i]]] -= F::one() / n_f;
    }
    loss /= n_f;

    let mut grads: Vec<Layer<F>> = mlp
        .layers
        .iter()
        .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
        .collect();
    for l in (0..mlp.layers.len()).rev() {
        grads[l].weight = cache.activations[l].t().dot(&delta);
        grads[l].bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let da = delta.dot(&mlp.layers[l].weight.t());
            let mask = cache.pre_activations[l - 1]
                .mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
            delta = da * mask;
        }
    }
    Ok((loss, grads))
}

/// Adam accumulators plus hyperparameters; moments start at zero.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Layer<F>>,
    pub v: Vec<Layer<F>>,
    pub t: u64,
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: NdFloat> AdamState<F> {
    pub fn new(mlp: &Mlp<F>) -> Self {
        let zeros = || -> Vec<Layer<F>> {
            mlp.layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr: cast(0.001),
            beta1: cast(0.9),
            beta2: cast(0.999),
            epsilon: cast(1e-8),
        }
    }
}

/// One bias-corrected Adam update; rejects non-finite gradients.
pub fn adam_step<F: NdFloat>(
    mlp: &mut Mlp<F>,
    grads: &[Layer<F>],
    state: &mut AdamState<F>,
) -> Result<()> {
    if grads.len() != mlp.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: mlp.layers.len(),
            got: grads.len(),
        });
    }
    for (g, l) in grads.iter().zip(&mlp.layers) {
        if g.weight.dim() != l.weight.dim() || g.bias.dim() != l.bias.dim() {
            return Err(Error::DimensionMismatch {
                expected: l.weight.len(),
                got: g.weight.len(),
            });
        }
        let finite =
            g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "gradient".into(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let one = F::one();
    let c1 = one / (one - state.beta1.powi(t));
    let c2 = one / (one - state.beta2.powi(t));
    for (l, g) in grads.iter().enumerate() {
        let m = &mut state.m[l];
        let v = &mut state.v[l];
        m.weight = &m.weight * state.beta1 + &g.weight * (one - state.beta1);
        m.bias = &m.bias * state.beta1 + &g.bias * (one - state.beta1);
        v.weight = &v.weight * state.beta2 + &g.weight.mapv(|x| x * x) * (one - state.beta2);
        v.bias = &v.bias * state.beta2 + &g.bias.mapv(|x| x * x) * (one - state.beta2);
        let step_w = (&m.weight * c1) / (v.weight.mapv(|x| (x * c2).sqrt()) + state.epsilon);
        let step_b = (&m.bias * c1) / (v.bias.mapv(|x| (x * c2).sqrt()) + state.epsilon);
        let layer = &mut mlp.layers[l];
        layer.weight = &layer.weight - &(step_w * state.lr);
        layer.bias = &layer.bias - &(step_b * state.lr);
    }
    Ok(())
}

/// Which float width a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn label(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stream batch size; the replay sample is the same size.
    pub batch_size: usize,
    /// Optimizer steps per stream batch (n_b).
    pub replay_steps: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            replay_steps: 5,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.replay_steps == 0 {
            return Err(Error::Config(
                "batch_size and replay_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stacks a batch into a feature matrix and label vector.
pub fn batch_to_arrays<F: NdFloat>(batch: &Batch) -> Result<(Array2<F>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = batch.instances[0].dim();
    if let Some(bad) = batch.instances.iter().find(|i| i.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }
    let mut x = Array2::zeros((batch.len(), dim));
    let mut labels = Vec::with_capacity(batch.len());
    for (i, inst) in batch.instances.iter().enumerate() {
        for (j, &f) in inst.features.iter().enumerate() {
            x[[i, j]] = cast(f64::from(f));
        }
        labels.push(inst.label);
    }
    Ok((x, labels))
}

/// Trains over the stream: each incoming batch is used for `replay_steps`
/// optimizer updates, each time concatenated with a fresh replay sample
/// from memory, and only afterwards do the batch's instances pass through
/// the memory policy. With an empty memory the update uses the stream
/// batch alone.
pub fn train_with_replay<F: NdFloat>(
    mlp: &mut Mlp<F>,
    opt: &mut AdamState<F>,
    stream: &StreamPlan,
    policy: &mut PolicyState,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if stream.batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut replay_rng = rng_from(substream(cfg.seed, "replay"));
    for batch in &stream.batches {
        for _ in 0..cfg.replay_steps {
            let replay = policy
                .buffer()
                .sample_replay_batch(cfg.batch_size, &mut replay_rng);
            let combined = if replay.is_empty() {
                batch.clone()
            } else {
                Batch::concat(batch.clone(), replay)
            };
            let (x, labels) = batch_to_arrays::<F>(&combined)?;
            let (_, grads) = loss_and_grads(mlp, &x, &labels)?;
            adam_step(mlp, &grads, opt)?;
        }
        for inst in &batch.instances {
            policy.observe(inst)?;
        }
    }
    Ok(())
}

fn argmax_row<F: NdFloat>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Accuracy on a test set; ties go to the lowest class id. The test set's
/// merge map must equal the training set's.
pub fn evaluate<F: NdFloat>(
    mlp: &Mlp<F>,
    test: &Dataset,
    train_merge: Option<&[usize]>,
) -> Result<f64> {
    if test.merge_map.as_deref() != train_merge {
        return Err(Error::MergeMapMismatch);
    }
    if test.instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = mlp.class_count();
    if let Some(bad) = test.instances.iter().find(|i| i.label >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad.label,
            classes,
        });
    }
    let mut correct = 0usize;
    for chunk in test.instances.chunks(512) {
        let batch = Batch::new(chunk.to_vec(), crate::memory::BatchOrigin::Stream);
        let (x, labels) = batch_to_arrays::<F>(&batch)?;
        let (logits, _) = forward(mlp, &x)?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let row: Vec<F> = row.to_vec();
            if argmax_row(&row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.instances.len() as f64)
}

/// Forward-only helper used by tests and the untrained-baseline check.
pub fn instance_prediction<F: NdFloat>(mlp: &Mlp<F>, inst: &Instance) -> Result<usize> {
    let batch = Batch::new(vec![inst.clone()], crate::memory::BatchOrigin::Stream);
    let (x, _) = batch_to_arrays::<F>(&batch)?;
    let (logits, _) = forward(mlp, &x)?;
    let row: Vec<F> = logits.row(0).to_vec();
    Ok(argmax_row(&row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::samplers::{PolicyKind, PolicyState};
    use crate::streams::build_stream;
    use std::path::Path;

    fn toy_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let mlp = Mlp::<f32>::standard(784, 5, &mut rng_from(1)).unwrap();
        let dims: Vec<(usize, usize)> =
            mlp.layers.iter().map(|l| l.weight.dim()).collect();
        assert_eq!(dims, vec![(784, 250), (250, 250), (250, 5)]);
        for layer in &mlp.layers {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let bound = 1.0 / (layer.weight.nrows() as f32).sqrt();
            assert!(layer.weight.iter().all(|&w| w.abs() <= bound));
        }
        let again = Mlp::<f32>::standard(784, 5, &mut rng_from(1)).unwrap();
        assert_eq!(mlp, again);
        let other = Mlp::<f32>::standard(784, 5, &mut rng_from(2)).unwrap();
        assert_ne!(mlp, other);
    }

    #[test]
    fn zero_network_gives_uniform_softmax_and_ln_c_loss() {
        let mlp = Mlp::<f64>::zeros(&[4, 3, 5]).unwrap();
        let x = toy_input(&mut rng_from(3), 6, 4);
        let (logits, _) = forward(&mlp, &x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let p = softmax(&logits);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let labels = vec![0, 1, 2, 3, 4, 0];
        let (loss, _) = loss_and_grads(&mlp, &x, &labels).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mlp = Mlp::<f32>::init(&[7, 6, 4], &mut rng_from(4)).unwrap();
        let x = Array2::from_shape_fn((9, 7), |_| rng_from(5).random_range(-2.0f32..2.0));
        let (logits, _) = forward(&mlp, &x).unwrap();
        let p = softmax(&logits);
        for row in p.rows() {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::<f64>::zeros(&[4, 3, 2]).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(
            forward(&mlp, &x),
            Err(Error::DimensionMismatch { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn loss_rejects_out_of_range_label() {
        let mlp = Mlp::<f64>::zeros(&[4, 3, 2]).unwrap();
        let x = Array2::<f64>::zeros((1, 4));
        assert!(matches!(
            loss_and_grads(&mlp, &x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn duplicated_rows_keep_the_mean_loss() {
        let mlp = Mlp::<f64>::init(&[4, 3, 3], &mut rng_from(6)).unwrap();
        let mut rng = rng_from(7);
        let x1 = toy_input(&mut rng, 1, 4);
        let (l1, _) = loss_and_grads(&mlp, &x1, &[1]).unwrap();
        let x3 = ndarray::concatenate(
            Axis(0),
            &[x1.view(), x1.view(), x1.view()],
        )
        .unwrap();
        let (l3, _) = loss_and_grads(&mlp, &x3, &[1, 1, 1]).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Small nets, double precision, relative error < 1e-4. Zero-init
        // biases put dead rows exactly on the ReLU kink where central
        // differences stop being an oracle, so the fixture randomizes
        // biases and asserts a margin between every pre-activation and 0.
        for seed in 0..5 {
            let mut mlp = Mlp::<f64>::init(&[4, 3, 3, 3], &mut rng_from(100 + seed)).unwrap();
            let mut rng = rng_from(200 + seed);
            for layer in &mut mlp.layers {
                layer.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
            let x = toy_input(&mut rng, 3, 4);
            let labels = vec![0, 1, 2];
            let (_, cache) = forward(&mlp, &x).unwrap();
            let margin = cache.pre_activations[..mlp.layers.len() - 1]
                .iter()
                .flat_map(|z| z.iter().map(|v| v.abs()))
                .fold(f64::INFINITY, f64::min);
            assert!(margin > 1e-3, "seed {seed}: fixture too close to a kink");
            let (_, grads) = loss_and_grads(&mlp, &x, &labels).unwrap();
            let h = 1e-5;
            for (l, gl) in grads.iter().enumerate() {
                let (rows, cols) = mlp.layers[l].weight.dim();
                for r in 0..rows {
                    for c in 0..cols {
                        let orig = mlp.layers[l].weight[[r, c]];
                        mlp.layers[l].weight[[r, c]] = orig + h;
                        let (lp, _) = loss_and_grads(&mlp, &x, &labels).unwrap();
                        mlp.layers[l].weight[[r, c]] = orig - h;
                        let (lm, _) = loss_and_grads(&mlp, &x, &labels).unwrap();
                        mlp.layers[l].weight[[r, c]] = orig;
                        let fd = (lp - lm) / (2.0 * h);
                        let an = gl.weight[[r, c]];
                        let denom = an.abs().max(fd.abs()).max(1e-6);
                        assert!(
                            (fd - an).abs() / denom < 1e-4,
                            "seed {seed} layer {l} w[{r},{c}]: fd {fd} vs {an}"
                        );
                    }
                }
                for b in 0..mlp.layers[l].bias.len() {
                    let orig = mlp.layers[l].bias[b];
                    mlp.layers[l].bias[b] = orig + h;
                    let (lp, _) = loss_and_grads(&mlp, &x, &labels).unwrap();
                    mlp.layers[l].bias[b] = orig - h;
                    let (lm, _) = loss_and_grads(&mlp, &x, &labels).unwrap();
                    mlp.layers[l].bias[b] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = gl.bias[b];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "seed {seed} layer {l} b[{b}]: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut mlp = Mlp::<f64>::init(&[3, 2, 2], &mut rng_from(8)).unwrap();
        let before = mlp.clone();
        let mut state = AdamState::new(&mlp);
        let grads: Vec<Layer<f64>> = mlp
            .layers
            .iter()
            .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect();
        adam_step(&mut mlp, &grads, &mut state).unwrap();
        assert_eq!(mlp, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut mlp = Mlp::<f64>::zeros(&[2, 2]).unwrap();
        let mut state = AdamState::new(&mlp);
        let mut grads = vec![Layer::<f64>::zeros(2, 2)];
        grads[0].weight.fill(0.37);
        grads[0].bias.fill(-0.09);
        adam_step(&mut mlp, &grads, &mut state).unwrap();
        for &w in &mlp.layers[0].weight {
            assert!((w - (-0.001)).abs() < 1e-9, "{w}");
        }
        for &b in &mlp.layers[0].bias {
            assert!((b - 0.001).abs() < 1e-9, "{b}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut mlp = Mlp::<f64>::zeros(&[2, 2]).unwrap();
        let mut state = AdamState::new(&mlp);
        let mut grads = vec![Layer::<f64>::zeros(2, 2)];
        grads[0].weight[[0, 0]] = f64::NAN;
        assert!(matches!(
            adam_step(&mut mlp, &grads, &mut state),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize 0.5 * sum c_i (w_i - a_i)^2 from w = 0.
        let a = [0.1, -0.15, 0.2, 0.05];
        let c = [1.0, 2.0, 0.5, 1.5];
        let mut mlp = Mlp::<f64>::zeros(&[1, 4]).unwrap();
        let mut state = AdamState::new(&mlp);
        for _ in 0..1000 {
            let mut grads = vec![Layer::<f64>::zeros(1, 4)];
            for i in 0..4 {
                grads[0].weight[[0, i]] = c[i] * (mlp.layers[0].weight[[0, i]] - a[i]);
            }
            adam_step(&mut mlp, &grads, &mut state).unwrap();
        }
        let norm: f64 = (0..4)
            .map(|i| (c[i] * (mlp.layers[0].weight[[0, i]] - a[i])).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
        assert_eq!(state.t, 1000);
    }

    fn tiny_dataset(per_class: usize, classes: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = rng_from(seed);
        let mut instances = Vec::new();
        let mut id = 0u64;
        for label in 0..classes {
            for _ in 0..per_class {
                let features: Vec<f32> =
                    (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
                instances.push(Instance::new(id, features, label, None));
                id += 1;
            }
        }
        Dataset {
            instances,
            class_count: classes,
            merge_map: None,
        }
    }

    #[test]
    fn training_takes_exactly_nb_times_batches_steps() {
        let ds = tiny_dataset(13, 3, 6, 9);
        let stream = build_stream(&ds, 5, &mut rng_from(10)).unwrap();
        let expected_batches = stream.batches.len();
        let mut mlp = Mlp::<f32>::init(&[6, 8, 3], &mut rng_from(11)).unwrap();
        let mut opt = AdamState::new(&mlp);
        let mut policy = PolicyState::new(PolicyKind::Reservoir, 10, 12);
        let cfg = TrainConfig {
            batch_size: 5,
            replay_steps: 5,
            seed: 13,
            precision: Precision::F32,
        };
        train_with_replay(&mut mlp, &mut opt, &stream, &mut policy, &cfg).unwrap();
        assert_eq!(opt.t, 5 * expected_batches as u64);
        assert_eq!(policy.total_observed(), 39);
        assert!(mlp.is_finite());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset(11, 2, 4, 14);
        let run = || {
            let stream = build_stream(&ds, 4, &mut rng_from(15)).unwrap();
            let mut mlp = Mlp::<f32>::init(&[4, 6, 2], &mut rng_from(16)).unwrap();
            let mut opt = AdamState::new(&mlp);
            let mut policy = PolicyState::new(PolicyKind::Cbrs, 8, 17);
            let cfg = TrainConfig {
                batch_size: 4,
                replay_steps: 3,
                seed: 18,
                precision: Precision::F32,
            };
            train_with_replay(&mut mlp, &mut opt, &stream, &mut policy, &cfg).unwrap();
            mlp
        };
        let a = run();
        let b = run();
        let bits = |m: &Mlp<f32>| -> Vec<u32> {
            m.layers
                .iter()
                .flat_map(|l| {
                    l.weight
                        .iter()
                        .chain(l.bias.iter())
                        .map(|v| v.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn one_hot_classifier_scores_perfectly_and_zero_net_picks_class_zero() {
        let mut mlp = Mlp::<f64>::zeros(&[3, 3]).unwrap();
        let mut test = Dataset {
            instances: Vec::new(),
            class_count: 3,
            merge_map: None,
        };
        let mut id = 0;
        for label in 0..3 {
            for _ in 0..2 {
                let mut f = vec![0.0f32; 3];
                f[label] = 1.0;
                test.instances.push(Instance::new(id, f, label, None));
                id += 1;
            }
        }
        // Zero network: all logits equal, tie rule picks class 0.
        let acc = evaluate(&mlp, &test, None).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        // Identity weights: one-hot of the true label.
        for i in 0..3 {
            mlp.layers[0].weight[[i, i]] = 10.0;
        }
        let acc = evaluate(&mlp, &test, None).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn evaluate_rejects_merge_map_mismatch() {
        let mlp = Mlp::<f64>::zeros(&[2, 2]).unwrap();
        let test = Dataset {
            instances: vec![Instance::new(0, vec![0.0, 0.0], 0, Some(3))],
            class_count: 2,
            merge_map: Some(vec![0, 0, 1, 1]),
        };
        assert!(matches!(
            evaluate(&mlp, &test, None),
            Err(Error::MergeMapMismatch)
        ));
        assert!(evaluate(&mlp, &test, Some(&[0, 0, 1, 1])).is_ok());
    }

    #[test]
    fn untrained_network_scores_near_chance_on_mnist() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        let test = crate::streams::load_idx(
            &root.join("t10k-images-idx3-ubyte"),
            &root.join("t10k-labels-idx1-ubyte"),
        )
        .unwrap();
        let mut total = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let mlp = Mlp::<f32>::standard(784, 10, &mut rng_from(1000 + seed)).unwrap();
            total += evaluate(&mlp, &test, None).unwrap();
        }
        let mean = total / f64::from(seeds as u32);
        assert!((mean - 0.10).abs() < 0.05, "mean accuracy {mean}");
    }
}
