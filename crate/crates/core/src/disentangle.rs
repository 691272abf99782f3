//! Speaker-disentangled sequence autoencoder.
//!
//! Two encoders map a segment to a phonetic vector `v_p` and a speaker vector
//! `v_s`; a decoder reconstructs the frames from both. `v_s` is shaped by a
//! contrastive loss over speaker identity, and `v_p` is trained to fool a
//! discriminator that guesses whether two phonetic vectors share a speaker.
//!
//! Each mini-batch runs `disc_steps` discriminator updates on freshly sampled
//! same/different-speaker pairs, then one joint update of both encoders and the
//! decoder on
//!
//! ```text
//! L = recon + alpha_spk * spk + alpha_adv * adv   (+ gamma * siamese, joint variant)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Corpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::neural::{
    arrays_of, fill_from_arrays, Decoder, DecoderCache, Discriminator, Encoder, EncoderCache,
    ModelDims, NamedArrays, OptimConfig, OptimState, Params,
};
use crate::pairmine::{self, all_pairs, Pair};
use crate::seed::{derive_indexed, derive_seed, rng_from};
use crate::siamese::{contrastive_with_grad, SiameseConfig};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
const PROB_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisentangleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Margin of the speaker-contrastive loss on `v_s`.
    pub speaker_margin: f64,
    pub alpha_spk: f64,
    pub alpha_adv: f64,
    /// Discriminator updates per encoder update.
    pub disc_steps: usize,
    pub drop_last: bool,
    pub optim: OptimConfig,
    /// Optimizer of the speaker discriminator.
    pub disc_optim: OptimConfig,
    /// Derived from the master seed by the run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            speaker_margin: 1.0,
            alpha_spk: 1.0,
            alpha_adv: 1.0,
            disc_steps: 1,
            drop_last: true,
            optim: OptimConfig::default(),
            disc_optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl DisentangleConfig {
    /// Plain autoencoder: speaker and adversarial terms switched off.
    pub fn plain_autoencoder(mut self) -> Self {
        self.alpha_spk = 0.0;
        self.alpha_adv = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.disc_steps == 0 {
            return Err(Error::Config(
                "disentangle.epochs and disc_steps must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "disentangle.batch_size must be at least 2".into(),
            ));
        }
        if !(self.speaker_margin > 0.0) {
            return Err(Error::Config(
                "disentangle.speaker_margin must be positive".into(),
            ));
        }
        if !(self.alpha_spk >= 0.0 && self.alpha_adv >= 0.0) {
            return Err(Error::Config(
                "disentangle loss weights must be non-negative".into(),
            ));
        }
        self.optim.validate()?;
        self.disc_optim.validate()
    }
}

/// Phonetic encoder, speaker encoder, decoder and speaker discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledModel {
    pub dims: ModelDims,
    pub phonetic: Encoder,
    pub speaker: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    dims: ModelDims,
    components: BTreeMap<String, NamedArrays>,
}

impl DisentangledModel {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let d = dims.embedding_dim;
        let mut rng = rng_from(derive_seed(seed, "init/phonetic"));
        let phonetic = Encoder::init(
            dims.encoder_kind,
            dims.feature_dim,
            dims.encoder_hidden,
            d,
            &mut rng,
        );
        let mut rng = rng_from(derive_seed(seed, "init/speaker"));
        let speaker = Encoder::init(
            dims.encoder_kind,
            dims.feature_dim,
            dims.encoder_hidden,
            d,
            &mut rng,
        );
        let mut rng = rng_from(derive_seed(seed, "init/decoder"));
        let decoder = Decoder::init(d, d, dims.decoder_hidden, dims.feature_dim, &mut rng);
        let mut rng = rng_from(derive_seed(seed, "init/discriminator"));
        let discriminator = Discriminator::init(d, &dims.discriminator_hidden, &mut rng);
        Ok(Self {
            dims: dims.clone(),
            phonetic,
            speaker,
            decoder,
            discriminator,
        })
    }

    pub fn encode_phonetic(&self, x: &FeatureSequence) -> Result<Vec<f64>> {
        self.phonetic.forward(x)
    }

    pub fn encode_speaker(&self, x: &FeatureSequence) -> Result<Vec<f64>> {
        self.speaker.forward(x)
    }

    pub fn decode(&self, vp: &[f64], vs: &[f64], frames: usize) -> Result<FeatureSequence> {
        let data = self.decoder.forward(vp, vs, frames)?;
        FeatureSequence::new(data, frames, self.decoder.feature_dim())
    }

    pub fn discriminate(&self, vp_i: &[f64], vp_j: &[f64]) -> Result<f64> {
        self.discriminator.discriminate(vp_i, vp_j)
    }

    /// Checkpoint document: dims plus component name to named arrays.
    pub fn to_json(&self) -> String {
        let mut components = BTreeMap::new();
        components.insert("decoder".to_string(), arrays_of(&self.decoder));
        components.insert("discriminator".to_string(), arrays_of(&self.discriminator));
        components.insert("phonetic_encoder".to_string(), arrays_of(&self.phonetic));
        components.insert("speaker_encoder".to_string(), arrays_of(&self.speaker));
        serde_json::to_string(&ModelFile {
            dims: self.dims.clone(),
            components,
        })
        .expect("model checkpoints always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let mut model = Self::init(&file.dims, 0)?;
        let get = |name: &str| {
            file.components
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks component `{name}`")))
        };
        fill_from_arrays(
            &mut model.phonetic,
            get("phonetic_encoder")?,
            "phonetic_encoder",
        )?;
        fill_from_arrays(
            &mut model.speaker,
            get("speaker_encoder")?,
            "speaker_encoder",
        )?;
        fill_from_arrays(&mut model.decoder, get("decoder")?, "decoder")?;
        fill_from_arrays(
            &mut model.discriminator,
            get("discriminator")?,
            "discriminator",
        )?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Mean squared error over all `T x F` entries.
pub fn reconstruction_loss(x: &FeatureSequence, x_hat: &FeatureSequence) -> Result<f64> {
    if x.frames() != x_hat.frames() || x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "reconstruction {}x{} vs target {}x{}",
            x_hat.frames(),
            x_hat.dim(),
            x.frames(),
            x.dim()
        )));
    }
    Ok(mse(x.as_slice(), x_hat.as_slice()))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// All unordered pairs of a batch split by whether their speakers match.
pub(crate) fn speaker_pairs<S: AsRef<str>>(speakers: &[S]) -> (Vec<Pair>, Vec<Pair>) {
    all_pairs(speakers.len())
        .into_iter()
        .partition(|&(i, j)| speakers[i].as_ref() == speakers[j].as_ref())
}

/// Contrastive loss over every unordered pair, positives being same-speaker
/// pairs, averaged over the pair count.
pub fn speaker_contrastive_loss<V: AsRef<[f64]>, S: AsRef<str>>(
    vectors: &[V],
    speakers: &[S],
    margin: f64,
) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 speaker vectors, got {}",
            vectors.len()
        )));
    }
    if speakers.len() != vectors.len() {
        return Err(Error::Argument(format!(
            "{} vectors but {} speaker ids",
            vectors.len(),
            speakers.len()
        )));
    }
    let (same, diff) = speaker_pairs(speakers);
    Ok(contrastive_with_grad(vectors, &same, &diff, margin, false)?.0)
}

fn check_probs(probs: &[f64], same_speaker: &[bool]) -> Result<()> {
    if probs.len() != same_speaker.len() {
        return Err(Error::Argument(format!(
            "{} probabilities but {} labels",
            probs.len(),
            same_speaker.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Argument("no probabilities given".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn mean_bce(probs: &[f64], targets: impl Iterator<Item = bool>) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Mean binary cross-entropy, target 1 for same-speaker pairs.
pub fn discriminator_loss(probs: &[f64], same_speaker: &[bool]) -> Result<f64> {
    check_probs(probs, same_speaker)?;
    Ok(mean_bce(probs, same_speaker.iter().copied()))
}

/// Discriminator loss against flipped targets: low when the discriminator is wrong.
pub fn adversarial_loss(probs: &[f64], same_speaker: &[bool]) -> Result<f64> {
    check_probs(probs, same_speaker)?;
    Ok(mean_bce(probs, same_speaker.iter().map(|s| !s)))
}

/// Per-epoch means of the per-batch loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub spk: f64,
    pub adv: f64,
    pub disc: f64,
    /// Siamese term on `v_p`; present for joint training only.
    pub siamese: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub distance_evaluations: u64,
    /// `recon + alpha_spk * spk + alpha_adv * adv (+ gamma * siamese)`.
    pub total: f64,
}

/// CSV with `epoch,recon,spk,adv,disc`, plus siamese columns when present.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let joint = log.iter().any(|e| e.siamese.is_some());
    let mut out = String::from("epoch,recon,spk,adv,disc");
    if joint {
        out.push_str(",siamese,positives,negatives");
    }
    out.push('\n');
    for e in log {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.recon, e.spk, e.adv, e.disc
        );
        if joint {
            let _ = write!(
                out,
                ",{},{},{}",
                e.siamese.unwrap_or(0.0),
                e.positives,
                e.negatives
            );
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DisentangledModel,
    pub log: Vec<EpochLoss>,
}

fn speaker_keys(corpus: &Corpus) -> Result<Vec<&str>> {
    corpus
        .segments()
        .iter()
        .map(|s| {
            let key = s.speaker_key();
            if key.is_empty() {
                Err(Error::Data(format!(
                    "segment `{}` has neither speaker_id nor utterance_id",
                    s.segment_id
                )))
            } else {
                Ok(key)
            }
        })
        .collect()
}

/// Up to `cap` same-speaker and `cap` different-speaker pairs, seeded.
fn sample_disc_pairs(
    same: &[Pair],
    diff: &[Pair],
    cap: usize,
    rng: &mut crate::seed::Rng,
) -> Vec<(Pair, bool)> {
    let mut out = Vec::with_capacity(2 * cap);
    for (pool, label) in [(same, true), (diff, false)] {
        let take = cap.min(pool.len());
        let mut idx = sample(rng, pool.len(), take).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (pool[i], label)));
    }
    out
}

/// Everything the encoder-side objective needs for one batch.
pub(crate) struct BatchGraph<'a> {
    pub xs: Vec<&'a FeatureSequence>,
    pub speakers: Vec<&'a str>,
    pub disc_pairs: Vec<(Pair, bool)>,
    pub siamese_pairs: Option<(Vec<Pair>, Vec<Pair>)>,
}

/// Loss values of one encoder-side evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BatchLosses {
    pub recon: f64,
    pub spk: f64,
    pub adv: f64,
    pub siamese: f64,
}

pub(crate) struct EncoderGrads {
    pub phonetic: Encoder,
    pub speaker: Encoder,
    pub decoder: Decoder,
}

pub(crate) struct Weights {
    pub speaker_margin: f64,
    pub alpha_spk: f64,
    pub alpha_adv: f64,
    pub siamese_margin: f64,
    pub gamma: f64,
}

pub(crate) fn forward_phonetic(
    model: &DisentangledModel,
    xs: &[&FeatureSequence],
) -> Result<(Vec<Vec<f64>>, Vec<EncoderCache>)> {
    let mut vps = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (v, c) = model.phonetic.forward_cached(x)?;
        vps.push(v);
        caches.push(c);
    }
    Ok((vps, caches))
}

/// Encoder-side objective and its gradient with respect to `E_p`, `E_s` and the
/// decoder. The discriminator is held fixed.
pub(crate) fn encoder_objective(
    model: &DisentangledModel,
    batch: &BatchGraph<'_>,
    w: &Weights,
    phonetic: Option<(Vec<Vec<f64>>, Vec<EncoderCache>)>,
) -> Result<(BatchLosses, EncoderGrads)> {
    let n = batch.xs.len();
    let d = model.dims.embedding_dim;
    let (vps, p_caches) = match phonetic {
        Some(pc) => pc,
        None => forward_phonetic(model, &batch.xs)?,
    };
    let mut vss = Vec::with_capacity(n);
    let mut s_caches = Vec::with_capacity(n);
    for x in &batch.xs {
        let (v, c) = model.speaker.forward_cached(x)?;
        vss.push(v);
        s_caches.push(c);
    }

    let mut grads = EncoderGrads {
        phonetic: model.phonetic.zeros_like(),
        speaker: model.speaker.zeros_like(),
        decoder: model.decoder.zeros_like(),
    };
    let mut dvp = vec![vec![0.0; d]; n];
    let mut dvs = vec![vec![0.0; d]; n];
    let mut losses = BatchLosses::default();

    // Reconstruction, averaged over segments.
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let x = batch.xs[i];
        let (y, cache): (Vec<f64>, DecoderCache) =
            model.decoder.forward_cached(&vps[i], &vss[i], x.frames())?;
        losses.recon += mse(x.as_slice(), &y) * inv_n;
        let scale = 2.0 * inv_n / y.len() as f64;
        let dy: Vec<f64> = y
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| scale * (a - b))
            .collect();
        model.decoder.backward(
            &vps[i],
            &vss[i],
            x.frames(),
            &cache,
            &dy,
            &mut grads.decoder,
            &mut dvp[i],
            &mut dvs[i],
        );
    }

    // Speaker contrastive term on v_s.
    let (same, diff) = speaker_pairs(&batch.speakers);
    let (spk, spk_grad) = contrastive_with_grad(&vss, &same, &diff, w.speaker_margin, true)?;
    losses.spk = spk;
    if w.alpha_spk != 0.0 {
        for (g, sg) in dvs.iter_mut().zip(&spk_grad) {
            crate::neural::axpy(w.alpha_spk, sg, g);
        }
    }

    // Adversarial term: flipped targets through the frozen discriminator.
    if !batch.disc_pairs.is_empty() {
        let inv = 1.0 / batch.disc_pairs.len() as f64;
        let mut scratch = model.discriminator.zeros_like();
        for &((i, j), same_speaker) in &batch.disc_pairs {
            let (z, cache) = model.discriminator.logit_cached(&vps[i], &vps[j])?;
            let (l, dz) = crate::neural::bce_with_logit(z, !same_speaker);
            losses.adv += l * inv;
            if w.alpha_adv != 0.0 {
                let (lo, hi) = dvp.split_at_mut(j);
                model.discriminator.backward(
                    &cache,
                    w.alpha_adv * dz * inv,
                    &mut scratch,
                    Some((&mut lo[i], &mut hi[0])),
                );
            }
        }
    }

    // Siamese term on v_p (joint variant).
    if let Some((pos, neg)) = &batch.siamese_pairs {
        if !pos.is_empty() || !neg.is_empty() {
            let (siam, siam_grad) = contrastive_with_grad(&vps, pos, neg, w.siamese_margin, true)?;
            losses.siamese = siam;
            for (g, sg) in dvp.iter_mut().zip(&siam_grad) {
                crate::neural::axpy(w.gamma, sg, g);
            }
        }
    }

    for i in 0..n {
        model
            .phonetic
            .backward(batch.xs[i], &p_caches[i], &dvp[i], &mut grads.phonetic);
        model
            .speaker
            .backward(batch.xs[i], &s_caches[i], &dvs[i], &mut grads.speaker);
    }
    Ok((losses, grads))
}

/// One discriminator update on the given pairs; returns the mean loss before
/// the update.
fn discriminator_step(
    model: &mut DisentangledModel,
    vps: &[Vec<f64>],
    pairs: &[(Pair, bool)],
    state: &mut OptimState,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut grad = model.discriminator.zeros_like();
    let mut loss = 0.0;
    for &((i, j), same) in pairs {
        let (z, cache) = model.discriminator.logit_cached(&vps[i], &vps[j])?;
        let (l, dz) = crate::neural::bce_with_logit(z, same);
        loss += l * inv;
        model
            .discriminator
            .backward(&cache, dz * inv, &mut grad, None);
    }
    state.apply(&mut model.discriminator, &grad)?;
    Ok(loss)
}

/// Shared trainer for the disentangled autoencoder and its joint Siamese variant.
pub(crate) fn train_core(
    corpus: &Corpus,
    dims: &ModelDims,
    cfg: &DisentangleConfig,
    joint: Option<&SiameseConfig>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(s) = joint {
        s.validate()?;
    }
    if dims.feature_dim != corpus.feature_dim() {
        return Err(Error::Dimension(format!(
            "model expects feature dimension {}, corpus has {}",
            dims.feature_dim,
            corpus.feature_dim()
        )));
    }
    let speakers = speaker_keys(corpus)?;
    let mut model = DisentangledModel::init(dims, cfg.seed)?;
    let mut opt_p = OptimState::new(cfg.optim, &model.phonetic);
    let mut opt_s = OptimState::new(cfg.optim, &model.speaker);
    let mut opt_dec = OptimState::new(cfg.optim, &model.decoder);
    let mut opt_disc = OptimState::new(cfg.disc_optim, &model.discriminator);
    let mut disc_rng = rng_from(derive_seed(cfg.seed, "disentangle/disc-pairs"));
    let weights = Weights {
        speaker_margin: cfg.speaker_margin,
        alpha_spk: cfg.alpha_spk,
        alpha_adv: cfg.alpha_adv,
        siamese_margin: joint.map_or(1.0, |s| s.margin),
        gamma: joint.map_or(0.0, |s| s.gamma),
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            corpus.len(),
            cfg.batch_size,
            derive_indexed(cfg.seed, "disentangle/batches", epoch as u64),
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
        let mut sums = BatchLosses::default();
        let mut disc_sum = 0.0;
        let (mut positives, mut negatives, mut evaluations) = (0usize, 0usize, 0u64);
        for batch in &batches {
            let xs: Vec<&FeatureSequence> = batch
                .indices
                .iter()
                .map(|&i| &corpus.segments()[i].features)
                .collect();
            let spk: Vec<&str> = batch.indices.iter().map(|&i| speakers[i]).collect();
            let (same, diff) = speaker_pairs(&spk);
            let (vps, caches) = forward_phonetic(&model, &xs)?;

            let mut disc_pairs = Vec::new();
            let mut disc_loss = 0.0;
            for _ in 0..cfg.disc_steps {
                disc_pairs = sample_disc_pairs(&same, &diff, batch.len(), &mut disc_rng);
                disc_loss += discriminator_step(&mut model, &vps, &disc_pairs, &mut opt_disc)?;
            }
            disc_sum += disc_loss / cfg.disc_steps as f64;

            let siamese_pairs = match joint {
                Some(s) => {
                    let mined = pairmine::mine(
                        &vps,
                        &s.mining,
                        derive_indexed(s.seed, "joint/mine", batch_counter),
                    )?;
                    positives += mined.pairs.positives.len();
                    negatives += mined.pairs.negatives.len();
                    evaluations += mined.distance_evaluations;
                    Some((mined.pairs.positives, mined.pairs.negatives))
                }
                None => None,
            };
            batch_counter += 1;

            let graph = BatchGraph {
                xs,
                speakers: spk,
                disc_pairs,
                siamese_pairs,
            };
            let (losses, grads) = encoder_objective(&model, &graph, &weights, Some((vps, caches)))?;
            opt_p.apply(&mut model.phonetic, &grads.phonetic)?;
            opt_s.apply(&mut model.speaker, &grads.speaker)?;
            opt_dec.apply(&mut model.decoder, &grads.decoder)?;
            sums.recon += losses.recon;
            sums.spk += losses.spk;
            sums.adv += losses.adv;
            sums.siamese += losses.siamese;
        }
        let nb = batches.len() as f64;
        let (recon, spk, adv) = (sums.recon / nb, sums.spk / nb, sums.adv / nb);
        let siamese = joint.map(|_| sums.siamese / nb);
        let total = recon
            + cfg.alpha_spk * spk
            + cfg.alpha_adv * adv
            + siamese.map_or(0.0, |s| weights.gamma * s);
        log.push(EpochLoss {
            epoch: epoch + 1,
            recon,
            spk,
            adv,
            disc: disc_sum / nb,
            siamese,
            positives,
            negatives,
            distance_evaluations: evaluations,
            total,
        });
        log::debug!("disentangle epoch {} total {total:.6}", epoch + 1);
    }
    Ok(TrainOutcome { model, log })
}

/// Train the disentangled autoencoder.
pub fn train_disentangle(
    corpus: &Corpus,
    dims: &ModelDims,
    cfg: &DisentangleConfig,
) -> Result<TrainOutcome> {
    train_core(corpus, dims, cfg, None)
}

/// Held-out accuracy of a ridge-regression linear probe predicting `labels`
/// from `features`. Features are standardised on the training side; the split
/// is seeded.
pub fn linear_probe_accuracy<V: AsRef<[f64]>, S: AsRef<str>>(
    features: &[V],
    labels: &[S],
    test_fraction: f64,
    ridge: f64,
    seed: u64,
) -> Result<f64> {
    let n = features.len();
    if n != labels.len() || n < 2 {
        return Err(Error::Argument(
            "probe needs matching features and labels, at least 2".into(),
        ));
    }
    let d = features[0].as_ref().len();
    let classes: Vec<&str> = {
        let mut c: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let class_of = |s: &str| classes.binary_search(&s).expect("label is in class list");
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_from(seed));
    let n_test = ((n as f64 * test_fraction) as usize).clamp(1, n - 1);
    let (test, train) = order.split_at(n_test);

    let mut mean = vec![0.0; d];
    for &i in train {
        crate::neural::axpy(1.0, features[i].as_ref(), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; d];
    for &i in train {
        for (k, v) in features[i].as_ref().iter().enumerate() {
            sd[k] += (v - mean[k]) * (v - mean[k]);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let row = |i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = features[i]
            .as_ref()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - mean[k]) / sd[k])
            .collect();
        r.push(1.0);
        r
    };

    // Normal equations (X'X + ridge I) W = X'Y, solved by Cholesky.
    let p = d + 1;
    let c = classes.len();
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * c];
    for &i in train {
        let r = row(i);
        for a in 0..p {
            crate::neural::axpy(r[a], &r, &mut gram[a * p..(a + 1) * p]);
        }
        let y = class_of(labels[i].as_ref());
        for a in 0..p {
            rhs[a * c + y] += r[a];
        }
    }
    for a in 0..p {
        gram[a * p + a] += ridge;
    }
    let chol = cholesky(&gram, p)?;
    let weights = cholesky_solve(&chol, p, &rhs, c);

    let correct = test
        .iter()
        .filter(|&&i| {
            let r = row(i);
            let scores: Vec<f64> = (0..c)
                .map(|k| (0..p).map(|a| r[a] * weights[a * c + k]).sum())
                .collect();
            let best = scores
                .iter()
                .enumerate()
                .fold(0, |b, (k, s)| if *s > scores[b] { k } else { b });
            best == class_of(labels[i].as_ref())
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = a[i * n + i] - s;
                if !(v > 0.0) {
                    return Err(Error::Numeric("probe normal equations".into()));
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L' X = B` for `B` of shape `[n, m]`.
fn cholesky_solve(l: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for col in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + col]).sum();
            x[i * m + col] = (x[i * m + col] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + col]).sum();
            x[i * m + col] = (x[i * m + col] - s) / l[i * n + i];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::neural::finite_difference_error;

    fn fs(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::from_rows(rows).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let x = fs(&[vec![0.0, 0.0]]);
        let y = fs(&[vec![1.0, 1.0]]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&x, &y).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&y, &x).unwrap(), 1.0);
        let z = fs(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(reconstruction_loss(&x, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn speaker_contrastive_examples() {
        let v = [vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(speaker_contrastive_loss(&v, &["a", "a"], 1.0).unwrap(), 0.0);
        assert_eq!(speaker_contrastive_loss(&v, &["a", "b"], 1.0).unwrap(), 1.0);
        let far = [vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(
            speaker_contrastive_loss(&far, &["a", "b"], 1.0).unwrap(),
            0.0
        );
        assert!(matches!(
            speaker_contrastive_loss(&[vec![0.0]], &["a"], 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn discriminator_and_adversarial_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((discriminator_loss(&[0.5], &[true]).unwrap() - ln2).abs() < 1e-15);
        assert!((discriminator_loss(&[0.5], &[false]).unwrap() - ln2).abs() < 1e-15);
        assert!(discriminator_loss(&[1.0 - 1e-12], &[true]).unwrap() < 1e-11);
        assert!((discriminator_loss(&[0.9], &[false]).unwrap() - 2.302585092994046).abs() < 1e-12);
        assert!((adversarial_loss(&[0.5], &[true]).unwrap() - ln2).abs() < 1e-15);
        assert!((adversarial_loss(&[0.9], &[true]).unwrap() - 2.302585092994046).abs() < 1e-12);
        assert!(matches!(
            discriminator_loss(&[0.5, 0.2], &[true]),
            Err(Error::Argument(_))
        ));
    }

    fn tiny_dims(f: usize) -> ModelDims {
        ModelDims {
            feature_dim: f,
            embedding_dim: 6,
            encoder_hidden: 5,
            decoder_hidden: 5,
            discriminator_hidden: vec![4, 4],
            refine_hidden: 4,
            ..ModelDims::default()
        }
    }

    fn tiny_corpus() -> Corpus {
        let cfg = SynthConfig {
            n_units: 3,
            n_speakers: 2,
            instances_per_unit_speaker: 2,
            length_range: (2, 4),
            feature_dim: 3,
            ..SynthConfig::default()
        };
        synth_corpus(&cfg, 4).unwrap()
    }

    /// The full encoder-side objective, including the adversarial path through
    /// the discriminator and the siamese term, agrees with finite differences.
    #[test]
    fn encoder_objective_gradient_matches_finite_differences() {
        let corpus = tiny_corpus();
        let model = DisentangledModel::init(&tiny_dims(3), 8).unwrap();
        let xs: Vec<&FeatureSequence> =
            corpus.segments()[..6].iter().map(|s| &s.features).collect();
        let speakers: Vec<&str> = corpus.segments()[..6]
            .iter()
            .map(|s| s.speaker_key())
            .collect();
        let batch = BatchGraph {
            xs,
            speakers,
            disc_pairs: vec![((0, 1), true), ((0, 3), false), ((2, 5), false)],
            siamese_pairs: Some((vec![(1, 2), (3, 4)], vec![(0, 5), (1, 4)])),
        };
        let w = Weights {
            speaker_margin: 3.0,
            alpha_spk: 0.7,
            alpha_adv: 1.3,
            siamese_margin: 3.0,
            gamma: 0.9,
        };
        let total = |m: &DisentangledModel| {
            let (l, _) = encoder_objective(m, &batch, &w, None).unwrap();
            l.recon + w.alpha_spk * l.spk + w.alpha_adv * l.adv + w.gamma * l.siamese
        };
        let (_, g) = encoder_objective(&model, &batch, &w, None).unwrap();

        let err_p = finite_difference_error(&model.phonetic, &g.phonetic, |p| {
            let mut m = model.clone();
            m.phonetic = p.clone();
            total(&m)
        });
        let err_s = finite_difference_error(&model.speaker, &g.speaker, |p| {
            let mut m = model.clone();
            m.speaker = p.clone();
            total(&m)
        });
        let err_d = finite_difference_error(&model.decoder, &g.decoder, |p| {
            let mut m = model.clone();
            m.decoder = p.clone();
            total(&m)
        });
        assert!(
            err_p < 1e-4 && err_s < 1e-4 && err_d < 1e-4,
            "{err_p} {err_s} {err_d}"
        );
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let corpus = tiny_corpus();
        let cfg = DisentangleConfig {
            epochs: 3,
            batch_size: 4,
            ..DisentangleConfig::default()
        };
        let a = train_disentangle(&corpus, &tiny_dims(3), &cfg).unwrap();
        let b = train_disentangle(&corpus, &tiny_dims(3), &cfg).unwrap();
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert_eq!(a.log.len(), 3);
        let csv = loss_log_csv(&a.log);
        assert!(csv.starts_with("epoch,recon,spk,adv,disc\n1,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = DisentangledModel::init(&tiny_dims(3), 1).unwrap();
        let back = DisentangledModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn missing_speaker_information_is_data_error() {
        let mut segs = tiny_corpus().segments().to_vec();
        segs[0].speaker_id = None;
        segs[0].utterance_id = String::new();
        let corpus = Corpus::new(segs).unwrap();
        let cfg = DisentangleConfig {
            epochs: 1,
            batch_size: 4,
            ..DisentangleConfig::default()
        };
        assert!(matches!(
            train_disentangle(&corpus, &tiny_dims(3), &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let cfg = DisentangleConfig {
            epochs: 1,
            batch_size: 4,
            ..DisentangleConfig::default()
        };
        assert!(matches!(
            train_disentangle(&tiny_corpus(), &tiny_dims(5), &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn probe_separates_linearly_separable_classes() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let mut f = vec![(i as f64 * 0.37).sin() * 0.5, (i as f64).cos() * 0.5, 0.0];
            f[c] += 4.0;
            feats.push(f);
            labels.push(format!("c{c}"));
        }
        assert_eq!(
            linear_probe_accuracy(&feats, &labels, 0.3, 1e-3, 0).unwrap(),
            1.0
        );
    }
}
