use std::collections::BTreeSet;

use proptest::prelude::*;

use segemb::corpus::{load_corpus, make_batches, save_corpus, synth_corpus, SynthConfig};
use segemb::disentangle::{
    adversarial_loss, discriminator_loss, speaker_contrastive_loss, DisentangledModel,
};
use segemb::evalcluster::{cluster_accuracy, cosine, kmeans, ConfusionMatrix};
use segemb::evalstd::relevance_score;
use segemb::neural::{ModelDims, OptimConfig, OptimState, VecParams};
use segemb::pairmine::{knn_graph_pairs, pairwise_distances, topk_global_pairs, PairSets};
use segemb::siamese::contrastive_loss;

fn points(n: std::ops::RangeInclusive<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n)
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

fn check_pairsets(p: &PairSets, n: usize) {
    p.validate(n).unwrap();
    let pos: BTreeSet<_> = p.positives.iter().collect();
    assert!(p.negatives.iter().all(|q| !pos.contains(q)));
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_units: 3,
        n_speakers: 2,
        instances_per_unit_speaker: 2,
        length_range: (3, 5),
        feature_dim: 4,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_is_rotation_invariant(v in points(2..=8, 2), theta in 0.0..std::f64::consts::TAU, margin in 0.1..3.0f64, split in 0usize..100) {
        let n = v.len();
        let pairs = all_pairs(n);
        let cut = split % (pairs.len() + 1);
        let sets = PairSets { positives: pairs[..cut].to_vec(), negatives: pairs[cut..].to_vec(), k: 0 };
        let (s, c) = theta.sin_cos();
        let rotated: Vec<Vec<f64>> = v.iter().map(|p| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let a = contrastive_loss(&v, &sets, margin).unwrap();
        let b = contrastive_loss(&rotated, &sets, margin).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn contrastive_loss_vanishes_as_margin_shrinks(v in points(2..=8, 3)) {
        let n = v.len();
        let dist = pairwise_distances(&v).unwrap();
        let min_d = all_pairs(n).iter().map(|&(i, j)| dist.get(i, j)).fold(f64::INFINITY, f64::min);
        prop_assume!(min_d > 1e-6);
        let sets = PairSets { positives: vec![], negatives: all_pairs(n), k: 0 };
        prop_assert_eq!(contrastive_loss(&v, &sets, min_d / 2.0).unwrap(), 0.0);
        let tiny = contrastive_loss(&v, &sets, 1e-9).unwrap();
        prop_assert_eq!(tiny, 0.0);
    }

    #[test]
    fn losses_are_nonnegative(v in points(2..=8, 3), margin in 0.1..3.0f64, probs in prop::collection::vec(0.0..=1.0f64, 1..10), seed in any::<u64>()) {
        let speakers: Vec<String> = (0..v.len()).map(|i| format!("s{}", (seed >> i) & 1)).collect();
        prop_assert!(speaker_contrastive_loss(&v, &speakers, margin).unwrap() >= 0.0);
        let flags: Vec<bool> = (0..probs.len()).map(|i| (seed >> i) & 1 == 1).collect();
        prop_assert!(discriminator_loss(&probs, &flags).unwrap() >= 0.0);
        prop_assert!(adversarial_loss(&probs, &flags).unwrap() >= 0.0);
    }

    #[test]
    fn adversarial_is_discriminator_with_flipped_targets(probs in prop::collection::vec(0.0..=1.0f64, 1..20), seed in any::<u64>()) {
        let flags: Vec<bool> = (0..probs.len()).map(|i| (seed >> i) & 1 == 1).collect();
        let flipped: Vec<bool> = flags.iter().map(|f| !f).collect();
        prop_assert_eq!(adversarial_loss(&probs, &flags).unwrap(), discriminator_loss(&probs, &flipped).unwrap());
    }

    #[test]
    fn mined_pairs_satisfy_pairset_invariants(v in points(3..=12, 2), k in 1usize..6, seed in any::<u64>()) {
        let n = v.len();
        if k < n {
            check_pairsets(&knn_graph_pairs(&v, k).unwrap(), n);
        }
        if 2 * k <= n * (n - 1) / 2 {
            check_pairsets(&topk_global_pairs(&v, k, seed).unwrap(), n);
        }
    }

    #[test]
    fn knn_positives_follow_permutations(v in points(3..=10, 2), k in 1usize..4, seed in any::<u64>()) {
        let n = v.len();
        prop_assume!(k < n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (seed.rotate_left(i as u32) ^ i as u64, i));
        // Continuous coordinates make distance ties vanishingly rare, so the
        // neighbour sets do not depend on index tie-breaking.
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let base: BTreeSet<(usize, usize)> = knn_graph_pairs(&v, k).unwrap().positives.into_iter().collect();
        let moved: BTreeSet<(usize, usize)> = knn_graph_pairs(&permuted, k)
            .unwrap()
            .positives
            .into_iter()
            .map(|(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn topk_positives_are_shortest(v in points(3..=10, 2), k in 1usize..10, seed in any::<u64>()) {
        let n = v.len();
        prop_assume!(2 * k <= n * (n - 1) / 2);
        let dist = pairwise_distances(&v).unwrap();
        let sets = topk_global_pairs(&v, k, seed).unwrap();
        let pos: BTreeSet<_> = sets.positives.iter().copied().collect();
        let max_pos = pos.iter().map(|&(i, j)| dist.get(i, j)).fold(0.0, f64::max);
        let min_rest = all_pairs(n).into_iter().filter(|p| !pos.contains(p)).map(|(i, j)| dist.get(i, j)).fold(f64::INFINITY, f64::min);
        prop_assert!(max_pos <= min_rest);
    }

    #[test]
    fn cosine_is_scale_invariant(a in prop::collection::vec(-5.0..5.0f64, 3), b in prop::collection::vec(-5.0..5.0f64, 3), alpha in 0.01..100.0f64, beta in 0.01..100.0f64) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let sa: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let sb: Vec<f64> = b.iter().map(|x| beta * x).collect();
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((cosine(&sa, &sb).unwrap() - c).abs() <= 1e-12);
    }

    #[test]
    fn cluster_accuracy_ignores_column_order_and_scale(
        counts in prop::collection::vec(prop::collection::vec(0u64..20, 1..8), 1..6),
        factor in 1u64..7,
        seed in any::<u64>(),
    ) {
        let cols = counts.iter().map(Vec::len).min().unwrap();
        let mut counts: Vec<Vec<u64>> = counts.into_iter().map(|r| r[..cols].to_vec()).collect();
        if counts.iter().flatten().all(|&c| c == 0) {
            counts[0][0] = 1;
        }
        let base = cluster_accuracy(&ConfusionMatrix::from_counts(counts.clone())).unwrap();
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by_key(|&j| (seed.rotate_left(j as u32 * 7), j));
        let permuted: Vec<Vec<u64>> = counts.iter().map(|r| order.iter().map(|&j| r[j]).collect()).collect();
        let scaled: Vec<Vec<u64>> = counts.iter().map(|r| r.iter().map(|c| c * factor).collect()).collect();
        prop_assert_eq!(cluster_accuracy(&ConfusionMatrix::from_counts(permuted)).unwrap(), base);
        prop_assert_eq!(cluster_accuracy(&ConfusionMatrix::from_counts(scaled)).unwrap(), base);
    }

    #[test]
    fn kmeans_inertia_never_increases(v in points(4..=30, 2), n in 1usize..5, seed in any::<u64>()) {
        prop_assume!(n <= v.len());
        let out = kmeans(&v, n, seed).unwrap();
        for w in out.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", out.inertia);
        }
        prop_assert!(out.assignments.iter().all(|&a| a < n));
    }

    #[test]
    fn relevance_is_monotone(q in prop::collection::vec(-1.0..1.0f64, 2), doc in points(1..=6, 2), k in 1usize..8, which in 0usize..6) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3) && doc.iter().all(|w| w.iter().any(|x| x.abs() > 1e-3)));
        let before = relevance_score(&q, &doc, k).unwrap();
        let mut better = doc.clone();
        better[which % doc.len()] = q.clone();
        prop_assert!(relevance_score(&q, &better, k).unwrap() >= before - 1e-12);
        let scaled: Vec<Vec<f64>> = doc.iter().enumerate().map(|(i, w)| w.iter().map(|x| x * (1.0 + i as f64)).collect()).collect();
        prop_assert!((relevance_score(&q, &scaled, k).unwrap() - before).abs() <= 1e-12);
        if doc.len() <= k {
            prop_assert_eq!(relevance_score(&q, &doc, doc.len()).unwrap(), before);
        }
    }

    #[test]
    fn batches_cover_indices(m in 2usize..60, bs in 2usize..10, seed in any::<u64>(), drop_last in any::<bool>()) {
        let batches = make_batches(m, bs, seed, drop_last).unwrap();
        let mut seen = vec![0usize; m];
        for b in &batches {
            for &i in &b.indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c <= 1));
        if !drop_last {
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn zero_gradient_step_keeps_parameters(values in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 1..5), 1..4)) {
        let mut params = VecParams(values.clone());
        let zeros = VecParams(values.iter().map(|v| vec![0.0; v.len()]).collect());
        let mut state = OptimState::new(OptimConfig::default(), &params);
        state.apply(&mut params, &zeros).unwrap();
        prop_assert_eq!(params.0, values);
        prop_assert_eq!(state.step, 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synth_is_pure_and_round_trips(seed in any::<u64>()) {
        let cfg = small_synth();
        let a = synth_corpus(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &synth_corpus(&cfg, seed).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&path, &a).unwrap();
        prop_assert_eq!(load_corpus(&path).unwrap(), a);
    }

    #[test]
    fn noiseless_instances_depend_on_speaker_only(seed in any::<u64>()) {
        let cfg = SynthConfig {
            length_range: (4, 4),
            noise_scale: 0.0,
            speaker_shift_scale: 0.5,
            ..small_synth()
        };
        let corpus = synth_corpus(&cfg, seed).unwrap();
        let segs = corpus.segments();
        for a in segs {
            for b in segs {
                if a.unit_label != b.unit_label {
                    continue;
                }
                if a.speaker_id == b.speaker_id {
                    prop_assert_eq!(&a.features, &b.features);
                } else {
                    prop_assert_ne!(&a.features, &b.features);
                }
            }
        }
    }

    #[test]
    fn forward_is_pure_with_configured_sizes(seed in any::<u64>(), frames in 1usize..9) {
        let dims = ModelDims {
            feature_dim: 4,
            embedding_dim: 5,
            encoder_hidden: 6,
            decoder_hidden: 6,
            discriminator_hidden: vec![4],
            refine_hidden: 3,
            ..ModelDims::default()
        };
        let model = DisentangledModel::init(&dims, seed).unwrap();
        let corpus = synth_corpus(&SynthConfig { length_range: (frames, frames), ..small_synth() }, seed).unwrap();
        let x = &corpus.segments()[0].features;
        let vp = model.encode_phonetic(x).unwrap();
        let vs = model.encode_speaker(x).unwrap();
        prop_assert_eq!(vp.len(), 5);
        prop_assert_eq!(&vp, &model.encode_phonetic(x).unwrap());
        let y = model.decode(&vp, &vs, frames).unwrap();
        prop_assert_eq!(y.frames(), frames);
        prop_assert_eq!(y.dim(), 4);
        let p = model.discriminate(&vp, &vp).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
