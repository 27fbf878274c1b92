//! Parameterized layers shared by the encoder and decoder.
//!
//! Layers own their parameters as immutable tensors; training replaces a
//! parameter wholesale through [`visit_params`](Linear::visit_params)-style
//! traversal, which also defines the canonical checkpoint ordering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Visitor over named parameters. Traversal order is the struct field
/// order and is the canonical serialization order.
pub type ParamFn<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic parameter initializer: truncated normal for projection
/// weights (sigma 0.02, resampled beyond two sigma), zeros for biases,
/// ones/zeros for norm affine parameters.
pub struct Init {
    rng: ChaCha8Rng,
    sigma: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma: 0.02,
        }
    }

    fn trunc_normal(&mut self) -> f64 {
        loop {
            // Box-Muller; rejection keeps draws within two sigma.
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return z * self.sigma;
            }
        }
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(self.trunc_normal())).collect();
        Tensor::param(data, shape).expect("shape/data agree by construction")
    }

    /// Temporarily overrides sigma, for classifier heads initialized
    /// near zero.
    pub fn scaled<R>(&mut self, sigma: f64, f: impl FnOnce(&mut Self) -> R) -> R {
        let old = self.sigma;
        self.sigma = sigma;
        let out = f(self);
        self.sigma = old;
        out
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::param(vec![T::zero(); shape.iter().product()], shape).unwrap()
    }

    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::param(vec![T::one(); shape.iter().product()], shape).unwrap()
    }
}

/// Affine map on the last axis: `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init, in_features: usize, out_features: usize, bias: bool) -> Self {
        Linear {
            weight: init.weight(&[in_features, out_features]),
            bias: bias.then(|| init.zeros(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => tape.add(&y, b),
            None => Ok(y),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }

    pub fn param_count(&self) -> u64 {
        self.weight.numel() as u64 + self.bias.as_ref().map_or(0, |b| b.numel() as u64)
    }
}

/// Layer normalization over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(init: &mut Init, dim: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&[dim]),
            beta: init.zeros(&[dim]),
            eps: T::from_f64(LAYER_NORM_EPS),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(&scoped(prefix, "gamma"), &mut self.gamma);
        f(&scoped(prefix, "beta"), &mut self.beta);
    }
}

/// Two-layer feed-forward block with GELU, expansion `dim -> ratio*dim -> dim`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(init: &mut Init, dim: usize, expansion: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, dim, dim * expansion, true),
            fc2: Linear::new(init, dim * expansion, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(&h)?;
        self.fc2.forward(tape, &h)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        self.fc1.visit_params(&scoped(prefix, "fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "fc2"), f);
    }
}

/// Position encoding generator: a per-channel 3x3 spatial aggregation
/// added residually. Provides implicit, resolution-agnostic position
/// information (translation-variant only near the zero-padded borders).
#[derive(Debug, Clone)]
pub struct Peg<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Peg<T> {
    pub fn new(init: &mut Init, dim: usize) -> Self {
        Peg {
            weight: init.weight(&[dim, 3, 3]),
            bias: init.zeros(&[dim]),
        }
    }

    /// The aggregation alone, without the residual.
    pub fn aggregate(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.dwconv3x3(x, &self.weight, Some(&self.bias))
    }

    /// `x + PEG(x)` on a `[B, H, W, C]` map.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.aggregate(tape, x)?;
        tape.add(x, &enc)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<T>) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_truncated() {
        let w1: Tensor<f32> = Init::new(42).weight(&[64, 64]);
        let w2: Tensor<f32> = Init::new(42).weight(&[64, 64]);
        assert_eq!(w1.data(), w2.data());
        assert!(w1.data().iter().all(|v| v.abs() <= 0.04 + 1e-6));
        assert!(w1.requires_grad());
    }

    #[test]
    fn linear_param_count_micro_example() {
        let mut init = Init::new(0);
        let layer: Linear<f32> = Linear::new(&mut init, 4, 8, true);
        assert_eq!(layer.param_count(), 40);
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut init = Init::new(0);
        let mut layer: Linear<f32> = Linear::new(&mut init, 2, 2, true);
        layer.weight = Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        layer.bias = Some(Tensor::param(vec![10.0, 20.0], &[2]).unwrap());
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = layer.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
    }

    #[test]
    fn peg_with_zero_parameters_is_identity() {
        let mut init = Init::new(1);
        let mut peg: Peg<f32> = Peg::new(&mut init, 3);
        peg.weight = Tensor::param(vec![0.0; 27], &[3, 3, 3]).unwrap();
        let x = Tensor::from_vec((0..48).map(|i| i as f32 * 0.1).collect(), &[1, 4, 4, 3]).unwrap();
        let y = peg.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn peg_delta_kernel_aggregation_reproduces_input() {
        // Center-only unit kernel: the aggregation is the identity map, so
        // the interior (and borders) of a constant plane pass through.
        let mut init = Init::new(1);
        let mut peg: Peg<f32> = Peg::new(&mut init, 2);
        let mut w = vec![0.0f32; 18];
        for c in 0..2 {
            w[(c * 3 + 1) * 3 + 1] = 1.0;
        }
        peg.weight = Tensor::param(w, &[2, 3, 3]).unwrap();
        let x = Tensor::full(&[1, 5, 5, 2], 0.25);
        let agg = peg.aggregate(&mut Tape::inference(), &x).unwrap();
        assert_eq!(agg.data(), x.data());
    }

    #[test]
    fn visit_params_order_is_stable() {
        let mut init = Init::new(7);
        let mut mlp: Mlp<f32> = Mlp::new(&mut init, 4, 2);
        let mut names = Vec::new();
        mlp.visit_params("mlp", &mut |name, _| names.push(name.to_string()));
        assert_eq!(
            names,
            ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"]
        );
    }
}
