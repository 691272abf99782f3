//! Contrastive training on mined pairs: the joint variant that adds a Siamese
//! term on `v_p` to the disentangling objective, and a refinement transform
//! trained on top of a frozen phonetic encoder.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Corpus};
use crate::disentangle::{train_core, DisentangleConfig, DisentangledModel, TrainOutcome};
use crate::error::{Error, Result};
use crate::neural::{
    arrays_of, axpy, fill_from_arrays, ModelDims, NamedArrays, OptimConfig, OptimState, Params,
    Refiner,
};
use crate::pairmine::{self, MiningConfig, Pair, PairDumpRecord, PairSets};
use crate::seed::{derive_indexed, derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseConfig {
    /// Negative-pair margin.
    pub margin: f64,
    pub mining: MiningConfig,
    /// Weight of the Siamese term in joint training.
    pub gamma: f64,
    /// Refinement epochs.
    pub epochs: usize,
    /// Refinement batch size.
    pub batch_size: usize,
    pub drop_last: bool,
    pub optim: OptimConfig,
    /// Derived from the master seed by the run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            mining: MiningConfig::default(),
            gamma: 1.0,
            epochs: 20,
            batch_size: 32,
            drop_last: true,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config("siamese.margin must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("siamese.gamma must be non-negative".into()));
        }
        if self.mining.k == 0 {
            return Err(Error::Config("siamese.mining.k must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("siamese.epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "siamese.batch_size must be at least 2".into(),
            ));
        }
        self.optim.validate()
    }
}

/// Contrastive loss and, if `with_grad`, its gradient with respect to every
/// vector. Positives contribute `d^2`, negatives `max(margin - d, 0)^2`; the
/// sum is divided by the number of pairs. A negative pair at distance zero
/// contributes `margin^2` and no gradient.
pub(crate) fn contrastive_with_grad<V: AsRef<[f64]>>(
    vectors: &[V],
    positives: &[Pair],
    negatives: &[Pair],
    margin: f64,
    with_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let count = positives.len() + negatives.len();
    if count == 0 {
        return Err(Error::Argument(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.as_ref().len());
    for &(i, j) in positives.iter().chain(negatives) {
        if i >= n || j >= n {
            return Err(Error::Argument(format!(
                "pair ({i}, {j}) out of range for {n} vectors"
            )));
        }
        if vectors[i].as_ref().len() != dim || vectors[j].as_ref().len() != dim {
            return Err(Error::Shape("contrastive vectors differ in length".into()));
        }
    }
    let inv = 1.0 / count as f64;
    let mut grad = if with_grad {
        vec![vec![0.0; dim]; n]
    } else {
        Vec::new()
    };
    let mut diff = vec![0.0; dim];
    let mut total = 0.0;
    for (pairs, positive) in [(positives, true), (negatives, false)] {
        for &(i, j) in pairs {
            let (a, b) = (vectors[i].as_ref(), vectors[j].as_ref());
            for k in 0..dim {
                diff[k] = a[k] - b[k];
            }
            let sq: f64 = diff.iter().map(|x| x * x).sum();
            let coeff = if positive {
                total += sq;
                2.0 * inv
            } else {
                let d = sq.sqrt();
                let gap = (margin - d).max(0.0);
                total += gap * gap;
                if gap > 0.0 && d > 0.0 {
                    -2.0 * gap / d * inv
                } else {
                    0.0
                }
            };
            if with_grad && coeff != 0.0 {
                axpy(coeff, &diff, &mut grad[i]);
                axpy(-coeff, &diff, &mut grad[j]);
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean contrastive loss over the mined pairs.
pub fn contrastive_loss<V: AsRef<[f64]>>(
    vectors: &[V],
    pairs: &PairSets,
    margin: f64,
) -> Result<f64> {
    Ok(contrastive_with_grad(vectors, &pairs.positives, &pairs.negatives, margin, false)?.0)
}

/// Disentangling objective plus `gamma` times the contrastive loss on `v_p`,
/// with pairs mined afresh in every batch. With `gamma = 0` the result is
/// bit-identical to [`crate::disentangle::train_disentangle`].
pub fn train_joint(
    corpus: &Corpus,
    dims: &ModelDims,
    cfg: &DisentangleConfig,
    siamese: &SiameseConfig,
) -> Result<TrainOutcome> {
    train_core(corpus, dims, cfg, Some(siamese))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
    pub distance_evaluations: u64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub refiner: Refiner,
    pub log: Vec<RefineEpoch>,
    /// Mined pairs of the first epoch, one record per batch.
    pub first_epoch_pairs: Vec<PairDumpRecord>,
}

pub fn refine_log_csv(log: &[RefineEpoch]) -> String {
    let mut out = String::from("epoch,loss,positives,negatives,distance_evaluations\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.loss, e.positives, e.negatives, e.distance_evaluations
        );
    }
    out
}

/// Train a refinement transform `z = v + f(v)` on top of the frozen phonetic
/// encoder. Pairs are mined on `v_p`; the loss is taken on `z`.
pub fn train_refine(
    base: &DisentangledModel,
    corpus: &Corpus,
    hidden: usize,
    cfg: &SiameseConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if hidden == 0 {
        return Err(Error::Config("model.refine_hidden must be positive".into()));
    }
    let vps: Vec<Vec<f64>> = corpus
        .segments()
        .iter()
        .map(|s| base.encode_phonetic(&s.features))
        .collect::<Result<_>>()?;
    let d = base.dims.embedding_dim;
    let mut refiner = Refiner::init(
        d,
        hidden,
        &mut rng_from(derive_seed(cfg.seed, "refine/init")),
    );
    let mut state = OptimState::new(cfg.optim, &refiner);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut first_epoch_pairs = Vec::new();
    let mut batch_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            corpus.len(),
            cfg.batch_size,
            derive_indexed(cfg.seed, "refine/batches", epoch as u64),
            cfg.drop_last,
        )?
        .into_iter()
        .filter(|b| b.len() >= 2)
        .collect::<Vec<_>>();
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "corpus of {} segments yields no batch of size {}",
                corpus.len(),
                cfg.batch_size
            )));
        }
        let mut rec = RefineEpoch {
            epoch: epoch + 1,
            loss: 0.0,
            positives: 0,
            negatives: 0,
            distance_evaluations: 0,
        };
        for batch in &batches {
            let v: Vec<&[f64]> = batch.indices.iter().map(|&i| vps[i].as_slice()).collect();
            let mined = pairmine::mine(
                &v,
                &cfg.mining,
                derive_indexed(cfg.seed, "refine/mine", batch_counter),
            )?;
            batch_counter += 1;
            rec.positives += mined.pairs.positives.len();
            rec.negatives += mined.pairs.negatives.len();
            rec.distance_evaluations += mined.distance_evaluations;
            if epoch == 0 {
                first_epoch_pairs.push(PairDumpRecord {
                    batch: batch.indices.clone(),
                    positives: mined.pairs.positives.clone(),
                    negatives: mined.pairs.negatives.clone(),
                });
            }
            let mut zs = Vec::with_capacity(v.len());
            let mut caches = Vec::with_capacity(v.len());
            for x in &v {
                let (z, c) = refiner.forward_cached(x)?;
                zs.push(z);
                caches.push(c);
            }
            let (loss, dz) = contrastive_with_grad(
                &zs,
                &mined.pairs.positives,
                &mined.pairs.negatives,
                cfg.margin,
                true,
            )?;
            rec.loss += loss;
            let mut grad = refiner.zeros_like();
            for i in 0..v.len() {
                refiner.backward(v[i], &caches[i], &dz[i], &mut grad, None);
            }
            state.apply(&mut refiner, &grad)?;
        }
        rec.loss /= batches.len() as f64;
        log::debug!("refine epoch {} loss {:.6}", rec.epoch, rec.loss);
        log.push(rec);
    }
    Ok(RefineOutcome {
        refiner,
        log,
        first_epoch_pairs,
    })
}

pub fn save_refiner(path: impl AsRef<Path>, refiner: &Refiner) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&arrays_of(refiner)).expect("refiner arrays always serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_refiner(path: impl AsRef<Path>) -> Result<Refiner> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let arrays: NamedArrays = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let shape_of = |name: &str| {
        arrays
            .get(name)
            .map(|a| a.shape.clone())
            .ok_or_else(|| Error::Shape(format!("refiner checkpoint lacks `{name}`")))
    };
    let inner = shape_of("inner.weight")?;
    if inner.len() != 2 {
        return Err(Error::Shape("refiner inner.weight must be 2-D".into()));
    }
    let mut refiner = Refiner::init(inner[1], inner[0], &mut rng_from(0));
    fill_from_arrays(&mut refiner, &arrays, "refine")?;
    Ok(refiner)
}

/// Which embedding to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain autoencoder `v_p`.
    A,
    /// Disentangled `v_p`.
    B,
    /// Jointly trained `v_p`.
    C,
    /// Refined `z` on top of a frozen model.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Embed every segment as `(segment_id, vector)`, ordered by segment id.
pub fn embed_corpus(
    model: &DisentangledModel,
    refiner: Option<&Refiner>,
    corpus: &Corpus,
    variant: Variant,
) -> Result<Vec<(String, Vec<f64>)>> {
    let refiner = match (variant, refiner) {
        (Variant::D, None) => return Err(Error::Config("variant d needs a refiner".into())),
        (Variant::D, Some(r)) => Some(r),
        _ => None,
    };
    corpus
        .segments()
        .iter()
        .map(|s| {
            let vp = model.encode_phonetic(&s.features)?;
            let v = match refiner {
                Some(r) => r.forward(&vp)?,
                None => vp,
            };
            Ok((s.segment_id.clone(), v))
        })
        .collect::<Result<Vec<_>>>()
        .map(|mut out| {
            out.sort_by(|a, b| a.0.cmp(&b.0));
            out
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::disentangle::train_disentangle;
    use crate::neural::finite_difference_error;
    use crate::neural::VecParams;

    #[test]
    fn loss_examples() {
        let v = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0]];
        let pos = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![],
            k: 1,
        };
        assert_eq!(contrastive_loss(&v, &pos, 1.0).unwrap(), 1.0);
        let neg = PairSets {
            positives: vec![],
            negatives: vec![(0, 2)],
            k: 1,
        };
        assert_eq!(contrastive_loss(&v, &neg, 1.0).unwrap(), 0.25);
        let both = PairSets {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2)],
            k: 1,
        };
        assert_eq!(contrastive_loss(&v, &both, 1.0).unwrap(), 0.625);
        let none = PairSets {
            positives: vec![],
            negatives: vec![],
            k: 1,
        };
        assert!(matches!(
            contrastive_loss(&v, &none, 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn coincident_negative_has_margin_loss_and_zero_gradient() {
        let v = [vec![0.3, 0.3], vec![0.3, 0.3]];
        let (l, g) = contrastive_with_grad(&v, &[], &[(0, 1)], 1.0, true).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = VecParams(vec![
            vec![0.1, -0.4, 0.2],
            vec![0.5, 0.1, -0.3],
            vec![-0.2, 0.3, 0.6],
            vec![0.9, 0.9, 0.1],
        ]);
        let pos = [(0, 1), (2, 3)];
        let neg = [(0, 2), (1, 3), (0, 3)];
        let (_, g) = contrastive_with_grad(&v.0, &pos, &neg, 1.5, true).unwrap();
        let err = finite_difference_error(&v, &VecParams(g), |p| {
            contrastive_with_grad(&p.0, &pos, &neg, 1.5, false)
                .unwrap()
                .0
        });
        assert!(err < 1e-6, "{err}");
    }

    fn tiny() -> (Corpus, ModelDims) {
        let cfg = SynthConfig {
            n_units: 3,
            n_speakers: 2,
            instances_per_unit_speaker: 3,
            length_range: (2, 4),
            feature_dim: 3,
            ..SynthConfig::default()
        };
        let dims = ModelDims {
            feature_dim: 3,
            embedding_dim: 5,
            encoder_hidden: 4,
            decoder_hidden: 4,
            discriminator_hidden: vec![4],
            refine_hidden: 4,
            ..ModelDims::default()
        };
        (synth_corpus(&cfg, 2).unwrap(), dims)
    }

    #[test]
    fn gamma_zero_is_bit_identical_to_disentangling() {
        let (corpus, dims) = tiny();
        let cfg = DisentangleConfig {
            epochs: 2,
            batch_size: 6,
            seed: 5,
            ..DisentangleConfig::default()
        };
        let siamese = SiameseConfig {
            gamma: 0.0,
            mining: MiningConfig {
                k: 3,
                ..MiningConfig::default()
            },
            ..SiameseConfig::default()
        };
        let b = train_disentangle(&corpus, &dims, &cfg).unwrap();
        let c = train_joint(&corpus, &dims, &cfg, &siamese).unwrap();
        assert_eq!(b.model.to_json(), c.model.to_json());
        let c1 = train_joint(
            &corpus,
            &dims,
            &cfg,
            &SiameseConfig {
                gamma: 1.0,
                ..siamese
            },
        )
        .unwrap();
        assert_ne!(b.model.to_json(), c1.model.to_json());
    }

    #[test]
    fn refinement_keeps_base_frozen_and_reduces_loss() {
        let (corpus, dims) = tiny();
        let cfg = DisentangleConfig {
            epochs: 1,
            batch_size: 6,
            ..DisentangleConfig::default()
        };
        let base = train_disentangle(&corpus, &dims, &cfg).unwrap().model;
        let before = base.clone();
        let rcfg = SiameseConfig {
            epochs: 15,
            batch_size: 6,
            mining: MiningConfig {
                k: 3,
                ..MiningConfig::default()
            },
            optim: OptimConfig {
                lr: 1e-2,
                ..OptimConfig::default()
            },
            ..SiameseConfig::default()
        };
        let out = train_refine(&base, &corpus, 4, &rcfg).unwrap();
        assert_eq!(base, before);
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        assert_eq!(out.first_epoch_pairs.len(), corpus.len() / 6);
        for rec in &out.log {
            let batches = (corpus.len() / 6) as u64;
            assert!(rec.distance_evaluations <= batches * 15);
        }
    }

    #[test]
    fn embed_corpus_order_and_variant_d() {
        let (corpus, dims) = tiny();
        let model = DisentangledModel::init(&dims, 0).unwrap();
        let out = embed_corpus(&model, None, &corpus, Variant::B).unwrap();
        assert_eq!(out.len(), corpus.len());
        assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(out.iter().all(|e| e.1.len() == 5));
        assert!(matches!(
            embed_corpus(&model, None, &corpus, Variant::D),
            Err(Error::Config(_))
        ));
        let r = Refiner::init(5, 4, &mut rng_from(0));
        let d = embed_corpus(&model, Some(&r), &corpus, Variant::D).unwrap();
        // Identity at initialisation.
        assert_eq!(d, out);
    }

    #[test]
    fn refiner_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Refiner::init(5, 4, &mut rng_from(3));
        r.outer = crate::neural::Dense::init(4, 5, &mut rng_from(4));
        let p = dir.path().join("refine.json");
        save_refiner(&p, &r).unwrap();
        assert_eq!(load_refiner(&p).unwrap(), r);
    }
}
