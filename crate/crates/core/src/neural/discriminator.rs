//! Same-speaker discriminator over a pair of phonetic vectors.

use super::{check_len, sigmoid, softplus, Dense, ParamRef, Params};
use crate::error::Result;
use crate::seed::Rng;

/// Feedforward classifier on `[v_i; v_j]` with tanh hidden layers and a single
/// logit output. Inputs are concatenated as given; no symmetrisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub hidden: Vec<Dense>,
    pub out: Dense,
    pub input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    input: Vec<f64>,
    /// Post-activation output of every hidden layer.
    activations: Vec<Vec<f64>>,
}

impl Discriminator {
    /// `input_dim` is the dimension of one phonetic vector.
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut n_in = 2 * input_dim;
        for &w in hidden {
            layers.push(Dense::init(n_in, w, rng));
            n_in = w;
        }
        Self {
            hidden: layers,
            out: Dense::init(n_in, 1, rng),
            input_dim,
        }
    }

    /// Zero the output layer so every pair scores exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.out.weight.fill(0.0);
        self.out.bias.fill(0.0);
    }

    pub fn logit(&self, vi: &[f64], vj: &[f64]) -> Result<f64> {
        Ok(self.logit_cached(vi, vj)?.0)
    }

    /// Probability that the two vectors come from the same speaker.
    pub fn discriminate(&self, vi: &[f64], vj: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(vi, vj)?))
    }

    pub fn logit_cached(&self, vi: &[f64], vj: &[f64]) -> Result<(f64, DiscriminatorCache)> {
        check_len("discriminator first input", vi.len(), self.input_dim)?;
        check_len("discriminator second input", vj.len(), self.input_dim)?;
        let mut input = Vec::with_capacity(2 * self.input_dim);
        input.extend_from_slice(vi);
        input.extend_from_slice(vj);
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let x = activations.last().unwrap_or(&input);
            let mut a = layer.forward(x);
            a.iter_mut().for_each(|v| *v = v.tanh());
            activations.push(a);
        }
        let last = activations.last().unwrap_or(&input);
        let z = self.out.forward(last)[0];
        Ok((z, DiscriminatorCache { input, activations }))
    }

    /// Backpropagate `dlogit`; accumulates parameter gradients into `grad` and,
    /// when given, input gradients into `dvi` / `dvj`.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache,
        dlogit: f64,
        grad: &mut Discriminator,
        inputs: Option<(&mut [f64], &mut [f64])>,
    ) {
        let last = cache.activations.last().unwrap_or(&cache.input);
        self.out.accumulate(&mut grad.out, last, &[dlogit]);
        let mut upstream = vec![0.0; self.out.n_in];
        self.out.backprop_input(&[dlogit], &mut upstream);
        for l in (0..self.hidden.len()).rev() {
            let a = &cache.activations[l];
            for (u, ai) in upstream.iter_mut().zip(a) {
                *u *= 1.0 - ai * ai;
            }
            let x = if l == 0 {
                &cache.input
            } else {
                &cache.activations[l - 1]
            };
            self.hidden[l].accumulate(&mut grad.hidden[l], x, &upstream);
            if l == 0 && inputs.is_none() {
                return;
            }
            let mut below = vec![0.0; self.hidden[l].n_in];
            self.hidden[l].backprop_input(&upstream, &mut below);
            upstream = below;
        }
        if let Some((dvi, dvj)) = inputs {
            let d = self.input_dim;
            for (g, u) in dvi.iter_mut().zip(&upstream[..d]) {
                *g += u;
            }
            for (g, u) in dvj.iter_mut().zip(&upstream[d..]) {
                *g += u;
            }
        }
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed in logit
/// space. Returns `(loss, dloss/dlogit)`.
pub(crate) fn bce_with_logit(logit: f64, target: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    if target {
        (softplus(-logit), p - 1.0)
    } else {
        (softplus(logit), p)
    }
}

impl Params for Discriminator {
    fn arrays(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(l.param_refs(&format!("hidden{i}")));
        }
        out.extend(self.out.param_refs("out"));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.hidden {
            out.extend(l.param_muts());
        }
        out.extend(self.out.param_muts());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn default_architecture_has_two_hidden_layers_of_128() {
        let d = Discriminator::init(
            256,
            &super::super::DEFAULT_DISCRIMINATOR_HIDDEN,
            &mut rng_from(0),
        );
        assert_eq!(d.hidden.len(), 2);
        assert_eq!(d.hidden[0].n_in, 512);
        assert!(d.hidden.iter().all(|l| l.n_out == 128));
        assert_eq!(d.out.n_out, 1);
    }

    #[test]
    fn output_is_strict_probability() {
        let d = Discriminator::init(8, &[128, 128], &mut rng_from(1));
        for s in 0..20 {
            let a: Vec<f64> = (0..8).map(|i| ((i + s) as f64).sin() * 3.0).collect();
            let b: Vec<f64> = (0..8).map(|i| ((i * s) as f64).cos()).collect();
            let p = d.discriminate(&a, &b).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut d = Discriminator::init(8, &[128, 128], &mut rng_from(2));
        d.zero_output_layer();
        assert_eq!(d.discriminate(&[1.0; 8], &[-3.0; 8]).unwrap(), 0.5);
    }

    #[test]
    fn bce_logit_matches_probability_form() {
        for &z in &[-3.0, -0.2, 0.0, 1.5, 4.0] {
            let p = sigmoid(z);
            assert!((bce_with_logit(z, true).0 + p.ln()).abs() < 1e-12);
            assert!((bce_with_logit(z, false).0 + (1.0 - p).ln()).abs() < 1e-12);
        }
    }
}
