//! Single-head deformable attention.
//!
//! A conditioning vector drives two small MLPs: one predicts `S` sampling
//! offsets around a reference point, the other `S` logits that are
//! softmax-normalized into sample weights. The output is the weighted sum of
//! the value field sampled at the offset points. Image cross-attention samples
//! 2D feature maps bilinearly; temporal self-attention samples unstructured
//! Gaussian features in 3D.

mod image;
mod temporal;

pub use image::{
    bilinear_sample, deformable_attn_2d, deformable_attn_2d_vjp, gen_reference_points, image_cross_attention,
    image_cross_attention_all, image_cross_attention_vjp, CameraRig, CameraView, Da2dGradient,
};
pub use temporal::{
    deformable_attn_3d, deformable_attn_3d_vjp, temporal_self_attention, Da3dGradient, ValueField, ValueSampling,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::nn::{softmax, softmax_backward, Activation, Mlp, MlpTrace};

pub use crate::tensor::{FeatureMap, QueryMatrix};

/// Learnable parts of one deformable attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    offset_net: Mlp,
    weight_net: Mlp,
    num_samples: usize,
    offset_dims: usize,
}

impl AttentionWeights {
    /// `hidden` lists the hidden layer widths shared by both networks.
    pub fn random(
        cond_dim: usize,
        offset_dims: usize,
        num_samples: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let offset_net = Mlp::random(&sizes(cond_dim, hidden, offset_dims * num_samples), activation, rng);
        let weight_net = Mlp::random(&sizes(cond_dim, hidden, num_samples), activation, rng);
        Self {
            offset_net,
            weight_net,
            num_samples,
            offset_dims,
        }
    }

    /// Zero offsets and uniform sample weights for every input.
    pub fn zeros(
        cond_dim: usize,
        offset_dims: usize,
        num_samples: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Self {
        Self {
            offset_net: Mlp::zeros(&sizes(cond_dim, hidden, offset_dims * num_samples), activation),
            weight_net: Mlp::zeros(&sizes(cond_dim, hidden, num_samples), activation),
            num_samples,
            offset_dims,
        }
    }

    pub fn from_nets(offset_net: Mlp, weight_net: Mlp, offset_dims: usize) -> Result<Self> {
        let num_samples = weight_net.out_dim();
        if offset_net.in_dim() != weight_net.in_dim() {
            return Err(Error::config("offset and weight networks take different inputs"));
        }
        if offset_net.out_dim() != offset_dims * num_samples {
            return Err(Error::config(format!(
                "offset network emits {} values, expected {offset_dims}x{num_samples}",
                offset_net.out_dim()
            )));
        }
        Ok(Self {
            offset_net,
            weight_net,
            num_samples,
            offset_dims,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.offset_net.in_dim()
    }
    pub fn num_samples(&self) -> usize {
        self.num_samples
    }
    pub fn offset_dims(&self) -> usize {
        self.offset_dims
    }
    pub fn offset_net(&self) -> &Mlp {
        &self.offset_net
    }
    pub fn offset_net_mut(&mut self) -> &mut Mlp {
        &mut self.offset_net
    }
    pub fn weight_net(&self) -> &Mlp {
        &self.weight_net
    }
    pub fn weight_net_mut(&mut self) -> &mut Mlp {
        &mut self.weight_net
    }

    /// Sampling offsets and normalized weights for one conditioning vector.
    pub fn plan(&self, cond: &[f64]) -> SamplingPlan {
        let (offsets, offset_trace) = self.offset_net.forward_trace(cond);
        let (logits, weight_trace) = self.weight_net.forward_trace(cond);
        SamplingPlan {
            weights: softmax(&logits),
            offsets,
            offset_dims: self.offset_dims,
            offset_trace,
            weight_trace,
        }
    }

    /// Pulls gradients on offsets and softmax weights back to the conditioning vector.
    pub fn backward(&self, plan: &SamplingPlan, d_offsets: &[f64], d_weights: &[f64]) -> Vec<f64> {
        let d_logits = softmax_backward(&plan.weights, d_weights);
        let mut d = self.offset_net.backward(&plan.offset_trace, d_offsets);
        for (a, b) in d
            .iter_mut()
            .zip(self.weight_net.backward(&plan.weight_trace, &d_logits))
        {
            *a += b;
        }
        d
    }

    pub fn export(&self, prefix: &str, store: &mut TensorStore) {
        self.offset_net.export(&format!("{prefix}.offset_net"), store);
        self.weight_net.export(&format!("{prefix}.weight_net"), store);
    }

    pub fn import(prefix: &str, store: &TensorStore, offset_dims: usize, activation: Activation) -> Result<Self> {
        Self::from_nets(
            Mlp::import(&format!("{prefix}.offset_net"), store, activation)?,
            Mlp::import(&format!("{prefix}.weight_net"), store, activation)?,
            offset_dims,
        )
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(input);
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

/// Offsets (`S × offset_dims`, sample-major) and softmax weights for one query.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
    offset_dims: usize,
    offset_trace: MlpTrace,
    weight_trace: MlpTrace,
}

impl SamplingPlan {
    pub fn num_samples(&self) -> usize {
        self.weights.len()
    }

    pub fn offset(&self, s: usize) -> &[f64] {
        &self.offsets[s * self.offset_dims..(s + 1) * self.offset_dims]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AttentionWeights::random(6, 2, 4, &[8], Activation::Silu, &mut rng);
        for _ in 0..100 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let plan = w.plan(&q);
            assert_eq!(plan.offsets.len(), 8);
            assert!((plan.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_plan_is_uniform_at_reference() {
        let w = AttentionWeights::zeros(5, 3, 4, &[6], Activation::Tanh);
        let plan = w.plan(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(plan.offsets, vec![0.0; 12]);
        assert_eq!(plan.weights, vec![0.25; 4]);
    }

    #[test]
    fn mismatched_nets_rejected() {
        let a = Mlp::zeros(&[4, 6], Activation::Silu);
        let b = Mlp::zeros(&[4, 3], Activation::Silu);
        assert!(AttentionWeights::from_nets(a, b, 2).is_ok());
        let a = Mlp::zeros(&[4, 5], Activation::Silu);
        let b = Mlp::zeros(&[4, 3], Activation::Silu);
        assert!(AttentionWeights::from_nets(a, b, 2).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = AttentionWeights::random(4, 3, 2, &[5], Activation::Tanh, &mut rng);
        let mut store = TensorStore::default();
        w.export("tsa", &mut store);
        assert_eq!(AttentionWeights::import("tsa", &store, 3, Activation::Tanh).unwrap(), w);
    }
}
