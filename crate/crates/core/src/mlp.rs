//! Small fully connected network with a scalar output, hand-written
//! backpropagation, and first-order optimizers.
//!
//! Parameters live in one flat vector so optimizers and checkpoints do not
//! need to know about layers. Layer `l` stores its weight matrix row-major
//! (`out x in`) followed by its bias vector.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT: &str = "cltr-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Zero-initialized network. `layer_sizes` runs from input to output and
    /// must end in 1.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return domain("an MLP needs at least an input and an output layer of positive size");
        }
        if *layer_sizes.last().unwrap() != 1 {
            return domain("the output layer must have size 1");
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params: vec![0.0; param_count(layer_sizes)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Self::zeros(layer_sizes, activation)?;
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    /// The `input -> 32 -> 32 -> 1` scorer used throughout the experiments.
    pub fn scorer(input_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(&[input_dim, 32, 32, 1], Activation::Tanh, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Multiplies the output layer, and so every score, by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let n_in = self.layer_sizes[self.layer_sizes.len() - 2];
        let n = self.params.len();
        self.params[n - n_in - 1..].iter_mut().for_each(|p| *p *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output (input included).
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut outs = Vec::with_capacity(n_layers + 1);
        outs.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &outs[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if hidden {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            outs.push(out);
            offset += n_in * n_out + n_out;
        }
        outs
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.forward_trace(x).last().unwrap()[0])
    }

    pub fn forward_many<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        xs.into_iter().map(|x| self.forward(x)).collect()
    }

    /// Adds `d_out * d(output)/d(params)` into `grad` and returns the output.
    pub fn accumulate_gradient(&self, x: &[f64], d_out: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_dim(x)?;
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let outs = self.forward_trace(x);
        let output = outs.last().unwrap()[0];
        if d_out == 0.0 {
            return Ok(output);
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        // delta holds dLoss/dz for the current layer's pre-activations
        let mut delta = vec![d_out];
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let offset = offsets[l];
            let input = &outs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[offset + o * n_in..offset + (o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[offset + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[offset..offset + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *p += d * w;
                }
            }
            for (p, &y) in prev.iter_mut().zip(input) {
                *p *= self.activation.derivative_from_output(y);
            }
            delta = prev;
        }
        Ok(output)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return domain(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            ));
        }
        let mut mlp = Self::zeros(&ckpt.layer_sizes, ckpt.activation)?;
        if ckpt.params.len() != mlp.params.len() {
            return Err(Error::DimensionMismatch {
                expected: mlp.params.len(),
                got: ckpt.params.len(),
            });
        }
        mlp.params = ckpt.params;
        Ok(mlp)
    }
}

/// On-disk model layout: shapes plus row-major weights behind a versioned
/// header.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Running optimizer state for one parameter vector. Steps minimize.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    opt: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(opt: Optimizer, n_params: usize) -> Self {
        Self {
            opt,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.opt {
            Optimizer::Sgd { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_weights_score_zero() {
        let mlp = Mlp::zeros(&[4, 32, 32, 1], Activation::Tanh).unwrap();
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn duplicate_inputs_equal_scores() {
        let mlp = Mlp::scorer(3, &mut seeded(1)).unwrap();
        let x = [0.3, -0.1, 2.0];
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mlp = Mlp::scorer(3, &mut seeded(1)).unwrap();
        assert!(matches!(
            mlp.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for act in [Activation::Tanh, Activation::Sigmoid] {
            let mlp = Mlp::new(&[3, 32, 32, 1], act, &mut seeded(5)).unwrap();
            let x = [0.4, -1.2, 0.9];
            let mut grad = vec![0.0; mlp.num_params()];
            mlp.accumulate_gradient(&x, 1.0, &mut grad).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for i in (0..mlp.num_params()).step_by(7) {
                let mut plus = mlp.clone();
                plus.params_mut()[i] += h;
                let mut minus = mlp.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                worst = worst.max((fd - grad[i]).abs() / denom);
            }
            assert!(worst <= 1e-4, "{act:?} rel err {worst}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = Mlp::scorer(5, &mut seeded(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        mlp.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), mlp);
    }

    #[test]
    fn sgd_and_adam_minimize_quadratic() {
        for opt in [Optimizer::sgd(0.1), Optimizer::adam(0.05)] {
            let mut x = vec![3.0, -2.0];
            let mut state = OptimizerState::new(opt, 2);
            for _ in 0..500 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                state.step(&mut x, &g);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{opt:?} {x:?}");
        }
    }
}
