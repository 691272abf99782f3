//! Post-hoc refinement transform `v_p -> z`.

use super::{check_len, Dense, ParamRef, Params};
use crate::error::Result;
use crate::seed::Rng;

/// `z = v + B tanh(A v + a) + b`.
///
/// `B` and `b` start at zero, so a freshly initialised refiner is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub inner: Dense,
    pub outer: Dense,
}

#[derive(Debug, Clone)]
pub struct RefinerCache {
    hidden: Vec<f64>,
}

impl Refiner {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Dense::init(dim, hidden, rng),
            outer: Dense::zeros(hidden, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.n_in
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(v)?.0)
    }

    pub fn forward_cached(&self, v: &[f64]) -> Result<(Vec<f64>, RefinerCache)> {
        check_len("refinement input", v.len(), self.dim())?;
        let mut hidden = self.inner.forward(v);
        hidden.iter_mut().for_each(|a| *a = a.tanh());
        let mut z = self.outer.forward(&hidden);
        for (zi, vi) in z.iter_mut().zip(v) {
            *zi += vi;
        }
        Ok((z, RefinerCache { hidden }))
    }

    /// Accumulate parameter gradients; adds the input gradient to `dv` if given.
    pub fn backward(
        &self,
        v: &[f64],
        cache: &RefinerCache,
        dz: &[f64],
        grad: &mut Refiner,
        dv: Option<&mut [f64]>,
    ) {
        self.outer.accumulate(&mut grad.outer, &cache.hidden, dz);
        let mut dh = vec![0.0; self.inner.n_out];
        self.outer.backprop_input(dz, &mut dh);
        for (d, a) in dh.iter_mut().zip(&cache.hidden) {
            *d *= 1.0 - a * a;
        }
        self.inner.accumulate(&mut grad.inner, v, &dh);
        if let Some(dv) = dv {
            for (g, d) in dv.iter_mut().zip(dz) {
                *g += d;
            }
            self.inner.backprop_input(&dh, dv);
        }
    }
}

impl Params for Refiner {
    fn arrays(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = self.inner.param_refs("inner").into();
        out.extend(self.outer.param_refs("outer"));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.inner.param_muts().into();
        out.extend(self.outer.param_muts());
        out
    }
}
