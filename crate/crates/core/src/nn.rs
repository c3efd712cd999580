//! Small dense multilayer perceptrons with reverse-mode input gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pulls `grad` on softmax outputs `a` back to the logits.
pub fn softmax_backward(a: &[f64], grad: &[f64]) -> Vec<f64> {
    let dot: f64 = a.iter().zip(grad).map(|(x, g)| x * g).sum();
    a.iter().zip(grad).map(|(x, g)| x * (g - dot)).collect()
}

/// Fully connected layer `y = W x + b`, `W` stored row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights and biases uniform in `±1/√in_dim`.
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::config(format!(
                "linear {in_dim}->{out_dim}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }
    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `Wᵀ g`.
    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, g) in self.weight.chunks_exact(self.in_dim.max(1)).zip(grad) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * g;
            }
        }
        out
    }
}

/// Linear layers with an activation between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

/// Pre-activations of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn random(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::random(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            h = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            };
            pre.push(z);
        }
        (h, MlpTrace { pre })
    }

    /// Vector–Jacobian product: gradient of `gradᵀ·mlp(x)` with respect to `x`.
    pub fn backward(&self, trace: &MlpTrace, grad: &[f64]) -> Vec<f64> {
        let mut g = grad.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i != last {
                for (gv, z) in g.iter_mut().zip(&trace.pre[i]) {
                    *gv *= self.activation.derivative(*z);
                }
            }
            g = layer.backward(&g);
        }
        g
    }

    pub fn export(&self, prefix: &str, store: &mut TensorStore) {
        for (i, l) in self.layers.iter().enumerate() {
            store.insert(
                format!("{prefix}.{i}.weight"),
                vec![l.out_dim, l.in_dim],
                l.weight.clone(),
            );
            store.insert(format!("{prefix}.{i}.bias"), vec![l.out_dim], l.bias.clone());
        }
    }

    pub fn import(prefix: &str, store: &TensorStore, activation: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(w) = store.get(&format!("{prefix}.{}.weight", layers.len())) {
            let b = store.require(&format!("{prefix}.{}.bias", layers.len()))?;
            let [out_dim, in_dim] = w.shape[..] else {
                return Err(Error::Format(format!("{} must be rank 2", w.name)));
            };
            layers.push(Linear::from_parts(in_dim, out_dim, w.data.clone(), b.data.clone())?);
        }
        if layers.is_empty() {
            return Err(Error::Format(format!("no layers stored under {prefix}")));
        }
        Self::from_layers(layers, activation)
    }
}
