//! Central finite-difference verification of the hand-written backward passes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::discriminator::bce_with_logit;
use super::{Decoder, Discriminator, Encoder, EncoderKind, ParamRef, Params, Refiner};
use crate::corpus::FeatureSequence;
use crate::seed::{derive_seed, rng_from, Rng};

/// Finite-difference step at double precision.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PhoneticEncoder,
    SpeakerEncoder,
    Decoder,
    Discriminator,
    Refine,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::PhoneticEncoder,
        Component::SpeakerEncoder,
        Component::Decoder,
        Component::Discriminator,
        Component::Refine,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckDims {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub frames: usize,
    pub encoder_kind: EncoderKind,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            feature_dim: 4,
            embedding_dim: 6,
            hidden: 5,
            frames: 3,
            encoder_kind: EncoderKind::MeanPool,
            discriminator_hidden: vec![5, 5],
        }
    }
}

/// Free-standing real vectors treated as parameters, so input gradients can be
/// checked with the same machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct VecParams(pub Vec<Vec<f64>>);

impl Params for VecParams {
    fn arrays(&self) -> Vec<ParamRef<'_>> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| ParamRef {
                name: format!("input{i}"),
                shape: vec![v.len()],
                values: v,
            })
            .collect()
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.iter_mut().map(|v| v.as_mut_slice()).collect()
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between `analytic` and central differences of `loss`
/// over every entry of `params`.
pub fn finite_difference_error<P: Params>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let grads: Vec<Vec<f64>> = analytic
        .arrays()
        .iter()
        .map(|a| a.values.to_vec())
        .collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (a, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.arrays()[a].values[j];
            probe.arrays_mut()[a][j] = orig + FD_STEP;
            let up = loss(&probe);
            probe.arrays_mut()[a][j] = orig - FD_STEP;
            let down = loss(&probe);
            probe.arrays_mut()[a][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(g[j], numeric));
        }
    }
    worst
}

fn uniform_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted_sum(c: &[f64], y: &[f64]) -> f64 {
    c.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Compare analytic gradients of a scalar probe loss against central finite
/// differences for one component. Checks all parameters and, for components
/// whose inputs receive gradients during training, the inputs as well.
pub fn gradient_check(component: Component, seed: u64, dims: &GradCheckDims) -> f64 {
    let mut rng = rng_from(derive_seed(seed, "gradcheck"));
    let (f, d, h, t) = (
        dims.feature_dim,
        dims.embedding_dim,
        dims.hidden,
        dims.frames,
    );
    match component {
        Component::PhoneticEncoder | Component::SpeakerEncoder => {
            let enc = Encoder::init(dims.encoder_kind, f, h, d, &mut rng);
            let x = FeatureSequence::new(uniform_vec(t * f, &mut rng), t, f)
                .expect("valid probe input");
            let c = uniform_vec(d, &mut rng);
            let (_, cache) = enc.forward_cached(&x).expect("probe dims match");
            let mut grad = enc.zeros_like();
            enc.backward(&x, &cache, &c, &mut grad);
            finite_difference_error(&enc, &grad, |p| weighted_sum(&c, &p.forward(&x).unwrap()))
        }
        Component::Decoder => {
            let dec = Decoder::init(d, d, h, f, &mut rng);
            let vp = uniform_vec(d, &mut rng);
            let vs = uniform_vec(d, &mut rng);
            let c = uniform_vec(t * f, &mut rng);
            let (_, cache) = dec.forward_cached(&vp, &vs, t).expect("probe dims match");
            let mut grad = dec.zeros_like();
            let mut inputs_grad = VecParams(vec![vec![0.0; d], vec![0.0; d]]);
            {
                let (a, b) = inputs_grad.0.split_at_mut(1);
                dec.backward(&vp, &vs, t, &cache, &c, &mut grad, &mut a[0], &mut b[0]);
            }
            let params_err = finite_difference_error(&dec, &grad, |p| {
                weighted_sum(&c, &p.forward(&vp, &vs, t).unwrap())
            });
            let inputs = VecParams(vec![vp.clone(), vs.clone()]);
            let input_err = finite_difference_error(&inputs, &inputs_grad, |i| {
                weighted_sum(&c, &dec.forward(&i.0[0], &i.0[1], t).unwrap())
            });
            params_err.max(input_err)
        }
        Component::Discriminator => {
            let disc = Discriminator::init(d, &dims.discriminator_hidden, &mut rng);
            let vi = uniform_vec(d, &mut rng);
            let vj = uniform_vec(d, &mut rng);
            let target = rng.random_bool(0.5);
            let (z, cache) = disc.logit_cached(&vi, &vj).expect("probe dims match");
            let (_, dz) = bce_with_logit(z, target);
            let mut grad = disc.zeros_like();
            let mut inputs_grad = VecParams(vec![vec![0.0; d], vec![0.0; d]]);
            {
                let (a, b) = inputs_grad.0.split_at_mut(1);
                disc.backward(&cache, dz, &mut grad, Some((&mut a[0], &mut b[0])));
            }
            let params_err = finite_difference_error(&disc, &grad, |p| {
                bce_with_logit(p.logit(&vi, &vj).unwrap(), target).0
            });
            let inputs = VecParams(vec![vi.clone(), vj.clone()]);
            let input_err = finite_difference_error(&inputs, &inputs_grad, |i| {
                bce_with_logit(disc.logit(&i.0[0], &i.0[1]).unwrap(), target).0
            });
            params_err.max(input_err)
        }
        Component::Refine => {
            let mut refiner = Refiner::init(d, h, &mut rng);
            // Leave the identity start so every array receives a gradient.
            refiner.outer = super::Dense::init(h, d, &mut rng);
            let v = uniform_vec(d, &mut rng);
            let c = uniform_vec(d, &mut rng);
            let (_, cache) = refiner.forward_cached(&v).expect("probe dims match");
            let mut grad = refiner.zeros_like();
            let mut dv = VecParams(vec![vec![0.0; d]]);
            refiner.backward(&v, &cache, &c, &mut grad, Some(&mut dv.0[0]));
            let params_err = finite_difference_error(&refiner, &grad, |p| {
                weighted_sum(&c, &p.forward(&v).unwrap())
            });
            let inputs = VecParams(vec![v.clone()]);
            let input_err = finite_difference_error(&inputs, &dv, |i| {
                weighted_sum(&c, &refiner.forward(&i.0[0]).unwrap())
            });
            params_err.max(input_err)
        }
    }
}
