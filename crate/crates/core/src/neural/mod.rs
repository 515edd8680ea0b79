//! Small dense-network numerics: MLPs with hand-wired backward passes, Adam,
//! masked softmax and the losses used by the learning agents.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, relative_error, GradCheck};

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64`. Batches are rows.
pub type Tensor2 = Array2<f64>;

/// Gradients (or parameters) in declaration order.
pub type Grads = Vec<Tensor2>;

/// Build a tensor, checking length and finiteness.
pub fn tensor(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor2> {
    if values.len() != rows * cols {
        return Err(Error::shape(format!("{} values for a {rows}x{cols} tensor", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult(format!("tensor value {v}")));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn all_finite<'a>(tensors: impl IntoIterator<Item = &'a Tensor2>) -> bool {
    tensors.into_iter().all(|t| t.iter().all(|v| v.is_finite()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - y * y,
            Self::Identity => 1.0,
        }
    }
}

/// Anything exposing its trainable tensors in a fixed declaration order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor2>;
    fn params_mut(&mut self) -> Vec<&mut Tensor2>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn to_params(&self) -> Vec<Tensor2> {
        self.params().into_iter().cloned().collect()
    }

    fn load_params(&mut self, values: &[Tensor2]) -> Result<()> {
        let mut dst = self.params_mut();
        if dst.len() != values.len() {
            return Err(Error::shape(format!("expected {} tensors, got {}", dst.len(), values.len())));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            if d.dim() != v.dim() {
                return Err(Error::shape(format!("parameter {:?} vs {:?}", d.dim(), v.dim())));
            }
            d.assign(v);
        }
        Ok(())
    }

    /// FNV-1a over the exact bit patterns of every parameter.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p.iter() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| Array2::zeros(p.dim())).collect()
    }
}

/// `y = act(x W + b)` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Dense {
    /// Kaiming-uniform for ReLU, Xavier-uniform otherwise; zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weight = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: Array2::zeros((1, outputs)),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: &Tensor2) -> Tensor2 {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        let act = self.activation;
        if act != Activation::Identity {
            y.mapv_inplace(|v| act.apply(v));
        }
        y
    }
}

/// Stored layer outputs from a forward pass; `values[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    values: Vec<Tensor2>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor2 {
        self.values.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Dense::init(w[0], w[1], if k == last { output } else { hidden }, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer output {} feeds input {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        for l in &layers {
            if l.bias.dim() != (1, l.outputs()) {
                return Err(Error::shape("bias must be 1 x outputs"));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Dense::outputs)).collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("input has {} columns, network expects {}", x.ncols(), self.input_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let y = layer.forward(values.last().expect("non-empty"));
            values.push(y);
        }
        let out = values.last().expect("non-empty").clone();
        Ok((out, MlpCache { values }))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Parameter gradients (declaration order) and the input gradient.
    pub fn backward(&self, cache: &MlpCache, upstream: &Tensor2) -> Result<(Grads, Tensor2)> {
        if cache.values.len() != self.layers.len() + 1 {
            return Err(Error::shape("cache does not match this network"));
        }
        if upstream.dim() != cache.output().dim() {
            return Err(Error::shape(format!(
                "upstream {:?} vs output {:?}",
                upstream.dim(),
                cache.output().dim()
            )));
        }
        let mut grads = vec![Array2::zeros((0, 0)); 2 * self.layers.len()];
        let mut delta = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.values[k + 1];
            let act = layer.activation;
            if act != Activation::Identity {
                Zip::from(&mut delta).and(out).for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            let input = &cache.values[k];
            grads[2 * k] = input.t().dot(&delta);
            grads[2 * k + 1] = delta.sum_axis(Axis(0)).insert_axis(Axis(0));
            delta = delta.dot(&layer.weight.t());
        }
        Ok((grads, delta))
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new<P: Parameterized + ?Sized>(config: AdamConfig, model: &P) -> Self {
        let zeros = model.zero_grads();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &[Tensor2]) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.dim() != g.dim() {
                return Err(Error::shape(format!("parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor2]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor2], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// `acc += g` elementwise.
pub fn accumulate(acc: &mut [Tensor2], g: &[Tensor2]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Softmax over the unmasked entries; masked entries get probability 0.
pub fn softmax_masked(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::shape(format!("{} logits, {} mask entries", logits.len(), mask.len())));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient w.r.t. logits given softmax output `p` and upstream `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// Mean Huber loss (threshold 1) and its gradient w.r.t. `pred`.
pub fn huber(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = p - t;
            if e.abs() <= 1.0 {
                loss += 0.5 * e * e;
                e / n
            } else {
                loss += e.abs() - 0.5;
                e.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = p - t;
            loss += e * e;
            2.0 * e / n
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense {
            weight: Array2::eye(3),
            bias: Array2::zeros((1, 3)),
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let layer = Dense {
            weight: Array2::eye(2),
            bias: array![[-10.0, -10.0]],
            activation: Activation::Relu,
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.predict(&array![[1.0, 2.0]]).unwrap(), array![[0.0, 0.0]]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut r = rng();
        let net = Mlp::new(&[4, 16, 16, 3], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = random_input(2, 4, &mut r);
        let both = net.predict(&x).unwrap();
        for i in 0..2 {
            let single = net.predict(&x.slice(ndarray::s![i..i + 1, ..]).to_owned()).unwrap();
            for j in 0..3 {
                assert!((both[[i, j]] - single[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Mlp::new(&[4, 3], Activation::Relu, Activation::Identity, &mut rng()).unwrap();
        assert!(matches!(net.predict(&Array2::zeros((1, 5))), Err(Error::ShapeMismatch(_))));
        let (_, cache) = net.forward(&Array2::zeros((2, 4))).unwrap();
        assert!(net.backward(&cache, &Array2::zeros((1, 3))).is_err());
        assert!(Mlp::from_layers(vec![
            Dense::init(3, 4, Activation::Relu, &mut rng()),
            Dense::init(5, 2, Activation::Relu, &mut rng()),
        ])
        .is_err());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let net = Mlp::new(&[3, 2], Activation::Identity, Activation::Identity, &mut rng()).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &Array2::ones((1, 2))).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(g[0][[i, j]], x[[0, i]]);
            }
        }
        assert_eq!(g[1], array![[1.0, 1.0]]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let net = Mlp::new(&[5, 8, 2], Activation::Tanh, Activation::Identity, &mut r).unwrap();
        let (_, cache) = net.forward(&random_input(3, 5, &mut r)).unwrap();
        let (g, dx) = net.backward(&cache, &Array2::zeros((3, 2))).unwrap();
        assert!(g.iter().all(|t| t.iter().all(|v| *v == 0.0)));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng();
        for (hidden, out) in [(Activation::Relu, Activation::Identity), (Activation::Tanh, Activation::Tanh)] {
            let net = Mlp::new(&[6, 12, 10, 3], hidden, out, &mut r).unwrap();
            let x = random_input(4, 6, &mut r);
            let w = random_input(4, 3, &mut r);
            let loss = |m: &Mlp| (m.predict(&x).unwrap() * &w).sum();
            let (_, cache) = net.forward(&x).unwrap();
            let (g, dx) = net.backward(&cache, &w).unwrap();
            let check = check_gradients(&net, &g, loss, 100, 1e-5, &mut r);
            assert!(check.max_rel_error < 1e-4, "{check:?}");

            // Input gradient.
            for _ in 0..20 {
                let (i, j) = (r.random_range(0..4), r.random_range(0..6));
                let mut xp = x.clone();
                xp[[i, j]] += 1e-5;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-5;
                let fd = ((net.predict(&xp).unwrap() * &w).sum() - (net.predict(&xm).unwrap() * &w).sum()) / 2e-5;
                assert!(relative_error(dx[[i, j]], fd) < 1e-4);
            }
        }
    }

    #[test]
    fn init_bounds() {
        let mut r = rng();
        let relu = Dense::init(100, 50, Activation::Relu, &mut r);
        let b = (6.0f64 / 100.0).sqrt();
        assert!(relu.weight.iter().all(|w| w.abs() <= b));
        let tanh = Dense::init(100, 50, Activation::Tanh, &mut r);
        let b = (6.0f64 / 150.0).sqrt();
        assert!(tanh.weight.iter().all(|w| w.abs() <= b));
        assert!(relu.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng()).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(AdamConfig::default(), &net);
        let g = net.zero_grads();
        opt.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // f(x) = x², x0 = 1: the bias-corrected first step is lr·g/(|g| + ε) ≈ lr.
        let layer = Dense {
            weight: array![[1.0]],
            bias: array![[0.0]],
            activation: Activation::Identity,
        };
        let mut net = Mlp::from_layers(vec![layer]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.001), &net);
        let x = net.layers[0].weight[[0, 0]];
        let grads = vec![array![[2.0 * x]], array![[0.0]]];
        opt.step(&mut net, &grads).unwrap();
        let moved = 1.0 - net.layers[0].weight[[0, 0]];
        let expected = 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((moved - expected).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let mut r = rng();
            let mut net = Mlp::new(&[3, 8, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
            let mut opt = Adam::new(AdamConfig::default(), &net);
            for _ in 0..50 {
                let x = random_input(8, 3, &mut r);
                let (y, cache) = net.forward(&x).unwrap();
                let (g, _) = net.backward(&cache, &y).unwrap();
                opt.step(&mut net, &g).unwrap();
            }
            net.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut net = Mlp::new(&[3, 2], Activation::Relu, Activation::Identity, &mut rng()).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &net);
        assert!(opt.step(&mut net, &[Array2::zeros((3, 2))]).is_err());
        assert!(opt.step(&mut net, &[Array2::zeros((2, 2)), Array2::zeros((1, 2))]).is_err());
    }

    #[test]
    fn softmax_masked_cases() {
        assert_eq!(softmax_masked(&[3.0, 1.0, 2.0], &[false, true, false]).unwrap(), vec![0.0, 1.0, 0.0]);
        let p = softmax_masked(&[0.7; 5], &[true, false, true, true, false]).unwrap();
        for (v, m) in p.iter().zip([true, false, true, true, false]) {
            assert!((v - if m { 1.0 / 3.0 } else { 0.0 }).abs() < 1e-15);
        }
        assert!(matches!(softmax_masked(&[1.0, 2.0], &[false, false]), Err(Error::AllMasked)));
        assert!(softmax_masked(&[1.0], &[true, true]).is_err());
        // Large logits stay finite.
        let p = softmax_masked(&[1000.0, 999.0], &[true, true]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_masked_sums_to_one() {
        let mut r = rng();
        for _ in 0..1000 {
            let n = r.random_range(1..12);
            let logits: Vec<f64> = (0..n).map(|_| r.random_range(-30.0..30.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
            mask[r.random_range(0..n)] = true;
            let p = softmax_masked(&logits, &mask).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let mask = [true, true, false, true, true];
            let f = |l: &[f64]| -> f64 {
                softmax_masked(l, &mask).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let p = softmax_masked(&logits, &mask).unwrap();
            let g = softmax_backward(&p, &w);
            for j in 0..5 {
                let mut lp = logits.clone();
                lp[j] += 1e-5;
                let mut lm = logits.clone();
                lm[j] -= 1e-5;
                let fd = (f(&lp) - f(&lm)) / 2e-5;
                assert!((g[j] - fd).abs() < 1e-8, "{} vs {}", g[j], fd);
            }
        }
    }

    #[test]
    fn loss_gradients() {
        let pred = [0.2, 3.0, -4.0];
        let target = [0.0, 0.0, 0.0];
        let (l, g) = huber(&pred, &target);
        assert!((l - (0.02 + 2.5 + 3.5) / 3.0).abs() < 1e-12);
        assert_eq!(g, vec![0.2 / 3.0, 1.0 / 3.0, -1.0 / 3.0]);
        let (l, g) = mse(&pred, &target);
        assert!((l - (0.04 + 9.0 + 16.0) / 3.0).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = vec![array![[3.0, 4.0]]];
        let before = clip_global_norm(&mut g, 0.5);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 0.5).abs() < 1e-12);
        let mut small = vec![array![[0.1, 0.1]]];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0], array![[0.1, 0.1]]);
    }

    #[test]
    fn tensor_constructor_checks() {
        assert!(tensor(2, 2, vec![1.0; 3]).is_err());
        assert!(tensor(1, 2, vec![1.0, f64::NAN]).is_err());
        assert_eq!(tensor(1, 2, vec![1.0, 2.0]).unwrap(), array![[1.0, 2.0]]);
    }
}
