//! Small hand-differentiated networks used by the embedding models.
//!
//! Every component owns its parameters as flat `f64` arrays and exposes a
//! forward pass that records a cache plus a backward pass that accumulates into
//! a zero-initialised copy of itself. The [`Params`] trait lets the optimizer and
//! the checkpoint writer walk the arrays of any component uniformly.

mod checkpoint;
mod decoder;
mod discriminator;
mod encoder;
mod gradcheck;
mod optim;
mod refine;

pub use checkpoint::{arrays_of, fill_from_arrays, ArrayRecord, NamedArrays};
pub use decoder::{Decoder, DecoderCache};
pub(crate) use discriminator::bce_with_logit;
pub use discriminator::{Discriminator, DiscriminatorCache};
pub use encoder::{Encoder, EncoderCache, EncoderKind};
pub use gradcheck::{finite_difference_error, gradient_check, Component, GradCheckDims, VecParams};
pub use optim::{OptimConfig, OptimMode, OptimState};
pub use refine::{Refiner, RefinerCache};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Default embedding size for phonetic, speaker and refined vectors.
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
/// Default discriminator hidden layers.
pub const DEFAULT_DISCRIMINATOR_HIDDEN: [usize; 2] = [128, 128];

/// Borrowed view of one named parameter array.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

/// Uniform access to the parameter arrays of a component.
///
/// `arrays` and `arrays_mut` must list the same arrays in the same order.
pub trait Params: Clone {
    fn arrays(&self) -> Vec<ParamRef<'_>>;
    fn arrays_mut(&mut self) -> Vec<&mut [f64]>;

    /// Same shapes, every value zero. Used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.values.len()).sum()
    }

    /// In-place `self += other`, array by array.
    fn add_assign(&mut self, other: &Self) {
        let src: Vec<Vec<f64>> = other.arrays().iter().map(|a| a.values.to_vec()).collect();
        for (dst, s) in self.arrays_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            for v in a.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Fully connected layer `y = W x + b` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    /// Uniform initialisation in `[-1/sqrt(n_in), 1/sqrt(n_in)]`.
    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = (0..n_in * n_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = (0..n_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weight[r * self.n_in..(r + 1) * self.n_in]
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        for (r, o) in out.iter_mut().enumerate().take(self.n_out) {
            *o = dot(self.row(r), x) + self.bias[r];
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out];
        self.forward_into(x, &mut out);
        out
    }

    /// `grad.W += dy x^T`, `grad.b += dy`.
    pub fn accumulate(&self, grad: &mut Dense, x: &[f64], dy: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, &mut grad.weight[r * self.n_in..(r + 1) * self.n_in]);
            grad.bias[r] += g;
        }
    }

    /// `dx += W^T dy`.
    pub fn backprop_input(&self, dy: &[f64], dx: &mut [f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, self.row(r), dx);
            }
        }
    }

    fn param_refs(&self, prefix: &str) -> [ParamRef<'_>; 2] {
        [
            ParamRef {
                name: format!("{prefix}.weight"),
                shape: vec![self.n_out, self.n_in],
                values: &self.weight,
            },
            ParamRef {
                name: format!("{prefix}.bias"),
                shape: vec![self.n_out],
                values: &self.bias,
            },
        ]
    }

    fn param_muts(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Dot product with four partial sums; fixed association order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape(format!(
            "{what}: got length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Network sizes shared by all components of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_kind: EncoderKind,
    pub decoder_hidden: usize,
    pub discriminator_hidden: Vec<usize>,
    pub refine_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: crate::corpus::DEFAULT_FEATURE_DIM,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            encoder_hidden: 128,
            encoder_kind: EncoderKind::MeanPool,
            decoder_hidden: 128,
            discriminator_hidden: DEFAULT_DISCRIMINATOR_HIDDEN.to_vec(),
            refine_hidden: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("feature_dim", self.feature_dim),
            ("embedding_dim", self.embedding_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("refine_hidden", self.refine_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.discriminator_hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "model.discriminator_hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn dense_init_is_bounded_and_seeded() {
        let a = Dense::init(16, 3, &mut rng_from(5));
        let b = Dense::init(16, 3, &mut rng_from(5));
        assert_eq!(a, b);
        assert!(a.weight.iter().chain(&a.bias).all(|w| w.abs() <= 0.25));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
