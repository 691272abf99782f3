//! Frame-wise decoder reconstructing features from `[v_p; v_s; t/T]`.

use super::{axpy, check_len, dot, Dense, ParamRef, Params};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// `x'_t = O tanh(W [v_p; v_s; t/T] + b) + o` for `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Dense,
    pub out: Dense,
    pub phonetic_dim: usize,
    pub speaker_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    /// `T x H` hidden activations.
    pub hidden: Vec<f64>,
}

impl Decoder {
    pub fn init(
        phonetic_dim: usize,
        speaker_dim: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            hidden: Dense::init(phonetic_dim + speaker_dim + 1, hidden, rng),
            out: Dense::init(hidden, feature_dim, rng),
            phonetic_dim,
            speaker_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.out.n_out
    }

    /// Reconstruct `frames` frames as a flat `T x F` buffer.
    pub fn forward(&self, vp: &[f64], vs: &[f64], frames: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(vp, vs, frames)?.0)
    }

    pub fn forward_cached(
        &self,
        vp: &[f64],
        vs: &[f64],
        frames: usize,
    ) -> Result<(Vec<f64>, DecoderCache)> {
        if frames < 1 {
            return Err(Error::Argument(
                "decoder needs at least one output frame".into(),
            ));
        }
        check_len("decoder phonetic input", vp.len(), self.phonetic_dim)?;
        check_len("decoder speaker input", vs.len(), self.speaker_dim)?;
        let h = self.hidden.n_out;
        let f = self.feature_dim();
        let n_in = self.hidden.n_in;
        let dp = self.phonetic_dim;
        // The code part of the pre-activation does not depend on t.
        let mut base = vec![0.0; h];
        for (r, b) in base.iter_mut().enumerate() {
            let row = self.hidden.row(r);
            *b = dot(&row[..dp], vp) + dot(&row[dp..n_in - 1], vs) + self.hidden.bias[r];
        }
        let mut hidden = vec![0.0; frames * h];
        let mut out = vec![0.0; frames * f];
        for t in 0..frames {
            let pos = t as f64 / frames as f64;
            let ht = &mut hidden[t * h..(t + 1) * h];
            for (r, a) in ht.iter_mut().enumerate() {
                *a = (base[r] + self.hidden.weight[r * n_in + n_in - 1] * pos).tanh();
            }
            self.out.forward_into(ht, &mut out[t * f..(t + 1) * f]);
        }
        Ok((out, DecoderCache { hidden }))
    }

    /// Accumulate parameter gradients into `grad` and input gradients into
    /// `dvp` / `dvs` for upstream gradient `dy` (flat `T x F`).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        vp: &[f64],
        vs: &[f64],
        frames: usize,
        cache: &DecoderCache,
        dy: &[f64],
        grad: &mut Decoder,
        dvp: &mut [f64],
        dvs: &mut [f64],
    ) {
        let h = self.hidden.n_out;
        let f = self.feature_dim();
        let n_in = self.hidden.n_in;
        let dp = self.phonetic_dim;
        let mut dbase = vec![0.0; h];
        let mut dh = vec![0.0; h];
        for t in 0..frames {
            let pos = t as f64 / frames as f64;
            let ht = &cache.hidden[t * h..(t + 1) * h];
            let dyt = &dy[t * f..(t + 1) * f];
            self.out.accumulate(&mut grad.out, ht, dyt);
            dh.fill(0.0);
            self.out.backprop_input(dyt, &mut dh);
            for r in 0..h {
                let dpre = dh[r] * (1.0 - ht[r] * ht[r]);
                dbase[r] += dpre;
                grad.hidden.weight[r * n_in + n_in - 1] += dpre * pos;
            }
        }
        for (r, &g) in dbase.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let grow = &mut grad.hidden.weight[r * n_in..(r + 1) * n_in];
            axpy(g, vp, &mut grow[..dp]);
            axpy(g, vs, &mut grow[dp..n_in - 1]);
            grad.hidden.bias[r] += g;
            let row = self.hidden.row(r);
            axpy(g, &row[..dp], dvp);
            axpy(g, &row[dp..n_in - 1], dvs);
        }
    }
}

impl Params for Decoder {
    fn arrays(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = self.hidden.param_refs("hidden").into();
        out.extend(self.out.param_refs("out"));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.hidden.param_muts().into();
        out.extend(self.out.param_muts());
        out
    }
}
