//! Small dense networks with hand-written backpropagation and an SGD
//! optimizer with momentum.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GifError, Result};
use crate::sphere::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
        let weight = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self { inputs, outputs, weight, bias: vec![0.0; outputs] }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output. An
/// empty layer list is the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dim: usize,
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input of each layer, post-activation.
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `sizes` lists the layer widths from input to output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(GifError::config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Ok(Self { dim: sizes[0], layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(GifError::config("use Mlp::identity for an empty network"));
        };
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(GifError::DimensionMismatch { expected: w[0].outputs, got: w[1].inputs });
            }
        }
        for l in &layers {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(GifError::format("dense layer buffer has the wrong length"));
            }
        }
        Ok(Self { dim: first.inputs, layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.dim, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            let out = layer.apply(&h);
            inputs.push(h);
            h = out;
            if k < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        MlpTrace { inputs, output: h }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.inputs[k];
            let acc = &mut grads.layers[k];
            let mut g_in = vec![0.0; layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                acc.bias[o] += go;
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                let acc_row = &mut acc.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    acc_row[i] += go * input[i];
                    g_in[i] += go * row[i];
                }
            }
            if k > 0 {
                // input[k] = relu(pre[k-1]); the ReLU passes gradient where it fired.
                for (gi, &x) in g_in.iter_mut().zip(input) {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = g_in;
        }
        g
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Backpropagates through `y = x / |x|` given the unit output `y` and `|x|`.
pub fn normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let along = dot(grad_y, y);
    grad_y.iter().zip(y).map(|(g, yi)| (g - along * yi) / norm).collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(logits)))`, stable for large logits.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Stochastic gradient descent with classical momentum and optional L2 decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, weight_decay: 0.0, velocity: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Applies one update; `params` and `grads` must list the same buffers in
    /// the same order on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), vel) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for ((x, &gx), vx) in p.iter_mut().zip(g).zip(vel.iter_mut()) {
                let grad = gx + self.weight_decay * *x;
                *vx = self.momentum * *vx + grad;
                *x -= self.lr * *vx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_mlp_passes_through() {
        let id = Mlp::identity(3);
        assert_eq!(id.forward(&[1.0, -2.0, 3.0]), vec![1.0, -2.0, 3.0]);
        assert_eq!(id.output_dim(), 3);
        let mut g = id.zeros_like();
        let t = id.forward_trace(&[1.0, 2.0, 3.0]);
        assert_eq!(id.backward(&t, &[0.5, 0.5, 0.5], &mut g), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let x = [0.3, -0.7, 0.2, 0.9];
        let probe = [0.5, -1.0, 2.0];
        let f = |n: &Mlp, x: &[f64]| dot(&n.forward(x), &probe);
        let mut grads = net.zeros_like();
        let gx = net.backward(&net.forward_trace(&x), &probe, &mut grads);
        let eps = 1e-6;
        for i in 0..4 {
            let mut a = x;
            let mut b = x;
            a[i] += eps;
            b[i] -= eps;
            let fd = (f(&net, &a) - f(&net, &b)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gx[i]);
        }
        let analytic: Vec<f64> = grads.params().iter().flat_map(|p| p.to_vec()).collect();
        let mut idx = 0;
        for slot in 0..net.params().len() {
            for j in 0..net.params()[slot].len() {
                let mut up = net.clone();
                let mut dn = net.clone();
                up.params_mut()[slot][j] += eps;
                dn.params_mut()[slot][j] -= eps;
                let fd = (f(&up, &x) - f(&dn, &x)) / (2.0 * eps);
                assert!((fd - analytic[idx]).abs() < 1e-7);
                idx += 1;
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![1.0];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(vec![p.as_mut_slice()], vec![&[1.0]]);
        assert!((p[0] - 0.9).abs() < 1e-12);
        opt.step(vec![p.as_mut_slice()], vec![&[1.0]]);
        assert!((p[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-12);
    }
}
