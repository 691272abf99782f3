//! End-to-end synthetic experiment: generate a corpus, train every variant on
//! the training split, and evaluate cosine gap, clustering accuracy, retrieval
//! MAP and the speaker probe on the held-out split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{synth_corpus, Corpus};
use crate::disentangle::{
    linear_probe_accuracy, loss_log_csv, train_disentangle, DisentangledModel,
};
use crate::error::{Error, Result};
use crate::evalcluster::{
    accuracy_csv, accuracy_curve, cosine_gap_csv, intra_inter_stats, AccuracyPoint, CosineGapReport,
};
use crate::evalstd::{build_retrieval_task, evaluate_queries, retrieval_csv};
use crate::neural::Refiner;
use crate::siamese::{embed_corpus, refine_log_csv, train_joint, train_refine, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub gap: CosineGapReport,
    pub accuracy: Vec<AccuracyPoint>,
    /// `(top_k, MAP)`.
    pub map: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub speaker_from_vs: f64,
    pub speaker_from_vp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub train_segments: usize,
    pub test_segments: usize,
    pub variants: Vec<VariantReport>,
    /// Present when variant `b` is trained.
    pub probe: Option<ProbeReport>,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Trained models of one run.
#[derive(Debug, Clone)]
pub struct TrainedVariants {
    pub models: BTreeMap<Variant, DisentangledModel>,
    pub refiner: Option<Refiner>,
    /// `(file name, contents)` of training logs.
    pub logs: Vec<(String, String)>,
}

/// Train the requested variants. Variant `d` refines the variant-`b` model.
pub fn train_variants(cfg: &RunConfig, train: &Corpus) -> Result<TrainedVariants> {
    let wanted = &cfg.eval.variants;
    let dcfg = cfg.disentangle_cfg();
    let scfg = cfg.siamese_cfg();
    let mut models = BTreeMap::new();
    let mut logs = Vec::new();
    if wanted.contains(&Variant::A) {
        let out = train_disentangle(train, &cfg.model, &dcfg.clone().plain_autoencoder())?;
        logs.push(("train_a.csv".to_string(), loss_log_csv(&out.log)));
        models.insert(Variant::A, out.model);
    }
    if wanted.contains(&Variant::B) || wanted.contains(&Variant::D) {
        let out = train_disentangle(train, &cfg.model, &dcfg)?;
        logs.push(("train_b.csv".to_string(), loss_log_csv(&out.log)));
        models.insert(Variant::B, out.model);
    }
    if wanted.contains(&Variant::C) {
        let out = train_joint(train, &cfg.model, &dcfg, &scfg)?;
        logs.push(("train_c.csv".to_string(), loss_log_csv(&out.log)));
        models.insert(Variant::C, out.model);
    }
    let mut refiner = None;
    if wanted.contains(&Variant::D) {
        let out = train_refine(&models[&Variant::B], train, cfg.model.refine_hidden, &scfg)?;
        logs.push(("refine_d.csv".to_string(), refine_log_csv(&out.log)));
        refiner = Some(out.refiner);
    }
    Ok(TrainedVariants {
        models,
        refiner,
        logs,
    })
}

fn unit_labels(corpus: &Corpus) -> Result<Vec<&str>> {
    corpus
        .segments()
        .iter()
        .map(|s| {
            s.unit_label
                .as_deref()
                .ok_or_else(|| Error::Data(format!("segment `{}` has no unit label", s.segment_id)))
        })
        .collect()
}

/// Evaluate the trained variants on `test`.
pub fn evaluate_variants(
    cfg: &RunConfig,
    trained: &TrainedVariants,
    test: &Corpus,
) -> Result<ExperimentReport> {
    let labels = unit_labels(test)?;
    let m = match cfg.eval.cluster_labels {
        0 => {
            let mut u = labels.clone();
            u.sort_unstable();
            u.dedup();
            u.len()
        }
        m => m,
    };
    let n_values = if cfg.eval.cluster_counts.is_empty() {
        vec![m, 2 * m]
    } else {
        cfg.eval.cluster_counts.clone()
    };
    let task = build_retrieval_task(&labels, &cfg.retrieval, cfg.stage_seed("retrieval"))?;

    let mut variants = Vec::new();
    for &v in &cfg.eval.variants {
        let model = match v {
            Variant::D => &trained.models[&Variant::B],
            other => trained
                .models
                .get(&other)
                .ok_or_else(|| Error::Config(format!("variant {other} was not trained")))?,
        };
        let mut by_id: BTreeMap<String, Vec<f64>> =
            embed_corpus(model, trained.refiner.as_ref(), test, v)?
                .into_iter()
                .collect();
        let emb: Vec<Vec<f64>> = test
            .segments()
            .iter()
            .map(|s| by_id.remove(&s.segment_id).expect("every segment embedded"))
            .collect();
        let gap = intra_inter_stats(
            &emb,
            &labels,
            cfg.eval.cosine_pair_cap,
            cfg.stage_seed("cosine"),
        )?;
        let accuracy = accuracy_curve(&emb, &labels, m, &n_values, cfg.stage_seed("cluster"))?;
        let (index, queries) = task.instantiate(&labels, &emb)?;
        let map = cfg
            .retrieval
            .top_k
            .iter()
            .map(|&k| Ok((k, evaluate_queries(&queries, &index, k)?.map)))
            .collect::<Result<_>>()?;
        variants.push(VariantReport {
            variant: v,
            gap,
            accuracy,
            map,
        });
    }

    let probe = match trained.models.get(&Variant::B) {
        Some(model) => {
            let speakers: Vec<&str> = test.segments().iter().map(|s| s.speaker_key()).collect();
            let mut vs = Vec::with_capacity(test.len());
            let mut vp = Vec::with_capacity(test.len());
            for s in test.segments() {
                vs.push(model.encode_speaker(&s.features)?);
                vp.push(model.encode_phonetic(&s.features)?);
            }
            let seed = cfg.stage_seed("probe");
            let (frac, ridge) = (cfg.eval.probe_test_fraction, cfg.eval.probe_ridge);
            Some(ProbeReport {
                speaker_from_vs: linear_probe_accuracy(&vs, &speakers, frac, ridge, seed)?,
                speaker_from_vp: linear_probe_accuracy(&vp, &speakers, frac, ridge, seed)?,
            })
        }
        None => None,
    };

    Ok(ExperimentReport {
        seed: cfg.seed,
        train_segments: 0,
        test_segments: test.len(),
        variants,
        probe,
    })
}

/// Full pipeline from the master seed.
pub fn run_experiment(cfg: &RunConfig) -> Result<(ExperimentReport, TrainedVariants)> {
    cfg.validate()?;
    let corpus = synth_corpus(&cfg.synth, cfg.stage_seed("synth"))?;
    let (train, test) = corpus.split(cfg.eval.test_fraction, cfg.stage_seed("split"))?;
    let trained = train_variants(cfg, &train)?;
    let mut report = evaluate_variants(cfg, &trained, &test)?;
    report.train_segments = train.len();
    Ok((report, trained))
}

/// Report tables as `(file name, contents)`.
pub fn report_artifacts(report: &ExperimentReport) -> Vec<(String, String)> {
    let level = "synthetic".to_string();
    let gaps: Vec<(String, String, CosineGapReport)> = report
        .variants
        .iter()
        .map(|v| (v.variant.to_string(), level.clone(), v.gap.clone()))
        .collect();
    let acc: Vec<(String, Vec<AccuracyPoint>)> = report
        .variants
        .iter()
        .map(|v| (v.variant.to_string(), v.accuracy.clone()))
        .collect();
    let maps: Vec<(String, usize, f64)> = report
        .variants
        .iter()
        .flat_map(|v| {
            v.map
                .iter()
                .map(move |&(k, m)| (v.variant.to_string(), k, m))
        })
        .collect();
    let mut probe = String::from("feature,speaker_accuracy\n");
    if let Some(p) = &report.probe {
        let _ = writeln!(probe, "v_s,{}", p.speaker_from_vs);
        let _ = writeln!(probe, "v_p,{}", p.speaker_from_vp);
    }
    vec![
        ("cosine_gap.csv".to_string(), cosine_gap_csv(&gaps)),
        ("cluster_acc.csv".to_string(), accuracy_csv(&acc)),
        ("retrieval.csv".to_string(), retrieval_csv(&maps)),
        ("probe.csv".to_string(), probe),
    ]
}

/// Write report tables, training logs and checkpoints under `dir`.
pub fn write_artifacts(
    dir: &Path,
    report: &ExperimentReport,
    trained: &TrainedVariants,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = report_artifacts(report);
    files.extend(trained.logs.iter().cloned());
    for (v, model) in &trained.models {
        files.push((format!("model_{v}.json"), model.to_json()));
    }
    if let Some(r) = &trained.refiner {
        files.push((
            "refine_d.json".to_string(),
            serde_json::to_string(&crate::neural::arrays_of(r)).expect("refiner arrays serialize"),
        ));
    }
    let mut names = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(&name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    Ok(names)
}
