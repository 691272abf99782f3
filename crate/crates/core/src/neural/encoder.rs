//! Variable-length sequence encoder used for both the phonetic and the speaker
//! vectors.

use serde::{Deserialize, Serialize};

use super::{axpy, check_len, dot, Dense, ParamRef, Params};
use crate::corpus::FeatureSequence;
use crate::error::Result;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// `h_t = tanh(A x_t + a)`, mean over time, then `v = P h̄ + p`.
    #[default]
    MeanPool,
    /// `h_t = tanh(A x_t + a + U h_{t-1})`, then `v = P h_T + p`.
    Recurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub frame: Dense,
    /// Hidden-to-hidden weights (`[H, H]`), present only for the recurrent kind.
    pub recurrent: Option<Vec<f64>>,
    pub proj: Dense,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// `T x H` hidden activations.
    pub hidden: Vec<f64>,
    /// Input to the output projection.
    pub summary: Vec<f64>,
}

impl Encoder {
    pub fn init(
        kind: EncoderKind,
        feature_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let frame = Dense::init(feature_dim, hidden, rng);
        let recurrent = match kind {
            EncoderKind::MeanPool => None,
            EncoderKind::Recurrent => Some(Dense::init(hidden, hidden, rng).weight),
        };
        let proj = Dense::init(hidden, out_dim, rng);
        Self {
            kind,
            frame,
            recurrent,
            proj,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.frame.n_in
    }

    pub fn hidden_dim(&self) -> usize {
        self.frame.n_out
    }

    pub fn out_dim(&self) -> usize {
        self.proj.n_out
    }

    pub fn forward(&self, x: &FeatureSequence) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &FeatureSequence) -> Result<(Vec<f64>, EncoderCache)> {
        check_len(
            "encoder input feature dimension",
            x.dim(),
            self.feature_dim(),
        )?;
        let h = self.hidden_dim();
        let t_len = x.frames();
        let mut hidden = vec![0.0; t_len * h];
        for t in 0..t_len {
            let (prev, cur) = hidden.split_at_mut(t * h);
            let cur = &mut cur[..h];
            self.frame.forward_into(x.frame(t), cur);
            if let (Some(u), true) = (&self.recurrent, t > 0) {
                let prev = &prev[(t - 1) * h..];
                for (r, c) in cur.iter_mut().enumerate() {
                    *c += dot(&u[r * h..(r + 1) * h], prev);
                }
            }
            for c in cur.iter_mut() {
                *c = c.tanh();
            }
        }
        let summary = match self.kind {
            EncoderKind::MeanPool => {
                let mut s = vec![0.0; h];
                for t in 0..t_len {
                    axpy(1.0, &hidden[t * h..(t + 1) * h], &mut s);
                }
                let inv = 1.0 / t_len as f64;
                s.iter_mut().for_each(|v| *v *= inv);
                s
            }
            EncoderKind::Recurrent => hidden[(t_len - 1) * h..].to_vec(),
        };
        let out = self.proj.forward(&summary);
        Ok((out, EncoderCache { hidden, summary }))
    }

    /// Accumulate parameter gradients for upstream gradient `dv` into `grad`.
    pub fn backward(
        &self,
        x: &FeatureSequence,
        cache: &EncoderCache,
        dv: &[f64],
        grad: &mut Encoder,
    ) {
        let h = self.hidden_dim();
        let t_len = x.frames();
        self.proj.accumulate(&mut grad.proj, &cache.summary, dv);
        let mut dsummary = vec![0.0; h];
        self.proj.backprop_input(dv, &mut dsummary);
        match self.kind {
            EncoderKind::MeanPool => {
                let inv = 1.0 / t_len as f64;
                let mut dpre = vec![0.0; h];
                for t in 0..t_len {
                    let ht = &cache.hidden[t * h..(t + 1) * h];
                    for ((d, s), a) in dpre.iter_mut().zip(&dsummary).zip(ht) {
                        *d = s * inv * (1.0 - a * a);
                    }
                    self.frame.accumulate(&mut grad.frame, x.frame(t), &dpre);
                }
            }
            EncoderKind::Recurrent => {
                let u = self
                    .recurrent
                    .as_ref()
                    .expect("recurrent encoder has hidden weights");
                let gu = grad.recurrent.as_mut().expect("gradient mirrors encoder");
                let mut dh = dsummary;
                let mut dpre = vec![0.0; h];
                for t in (0..t_len).rev() {
                    let ht = &cache.hidden[t * h..(t + 1) * h];
                    for ((d, g), a) in dpre.iter_mut().zip(&dh).zip(ht) {
                        *d = g * (1.0 - a * a);
                    }
                    self.frame.accumulate(&mut grad.frame, x.frame(t), &dpre);
                    let mut dprev = vec![0.0; h];
                    if t > 0 {
                        let prev = &cache.hidden[(t - 1) * h..t * h];
                        for (r, &g) in dpre.iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, prev, &mut gu[r * h..(r + 1) * h]);
                                axpy(g, &u[r * h..(r + 1) * h], &mut dprev);
                            }
                        }
                    }
                    dh = dprev;
                }
            }
        }
    }
}

impl Params for Encoder {
    fn arrays(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<ParamRef<'_>> = self.frame.param_refs("frame").into();
        if let Some(u) = &self.recurrent {
            let h = self.hidden_dim();
            out.push(ParamRef {
                name: "recurrent.weight".into(),
                shape: vec![h, h],
                values: u,
            });
        }
        out.extend(self.proj.param_refs("proj"));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.frame.param_muts().into();
        if let Some(u) = &mut self.recurrent {
            out.push(u);
        }
        out.extend(self.proj.param_muts());
        out
    }
}
