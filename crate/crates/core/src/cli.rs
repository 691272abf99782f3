//! Command-line surface.
//!
//! Every command resolves the run configuration (file, then `--set`
//! overrides, then `--seed`), writes it to `<out-dir>/config.toml`, runs one
//! stage and prints a one-line summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::corpus::{
    load_corpus, load_embeddings, make_batches, save_corpus, save_embeddings, synth_corpus, Corpus,
};
use crate::disentangle::{loss_log_csv, train_disentangle, DisentangledModel};
use crate::error::{Error, Result};
use crate::evalcluster::{accuracy_csv, accuracy_curve, cosine_gap_csv, intra_inter_stats};
use crate::evalstd::{build_retrieval_task, evaluate_queries, retrieval_csv};
use crate::pairmine::{mine, write_pair_dump, PairDumpRecord};
use crate::seed::derive_indexed;
use crate::siamese::{
    embed_corpus, load_refiner, refine_log_csv, save_refiner, train_joint, train_refine, Variant,
};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "segemb",
    version,
    about = "Audio segment embeddings: training, pair mining and evaluation"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the configuration file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every output artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Dotted-key override, e.g. `siamese.margin=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// Train variant a (plain autoencoder), b (disentangled) or c (joint).
    Train(TrainArgs),
    /// Train the refinement transform (variant d) on a frozen model.
    Refine(RefineArgs),
    /// Embed every segment of a corpus.
    Embed(EmbedArgs),
    /// Mine pairs batch by batch and report pair and distance counts.
    MineAudit(EvalArgs),
    /// Intra/inter-class cosine statistics.
    EvalSim(EvalArgs),
    /// k-means cluster accuracy over a range of cluster counts.
    EvalCluster(ClusterArgs),
    /// Spoken term detection MAP on a synthetic document collection.
    EvalStd(StdArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "b")]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Refinement checkpoint, required for variant d.
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    #[arg(long, default_value = "b")]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus supplying unit labels.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Name used in report rows.
    #[arg(long, default_value = "b")]
    pub variant: String,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Cluster counts as `lo..hi` (inclusive), `lo..hi:step` or a comma list.
    #[arg(long)]
    pub n: Option<String>,
}

#[derive(Debug, Args)]
pub struct StdArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// `variant=path` pairs, one per embedding file. Repeatable.
    #[arg(long = "embeddings", value_name = "VARIANT=PATH", required = true)]
    pub embeddings: Vec<String>,
}

/// Parse `lo..hi`, `lo..hi:step` or `a,b,c`.
pub fn parse_n_range(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse cluster counts `{text}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let values = if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, num(step)?),
            None => (num(rest)?, 1),
        };
        let lo = num(lo)?;
        if step == 0 || lo > hi {
            return Err(bad());
        }
        (lo..=hi).step_by(step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(bad());
    }
    Ok(values)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Embeddings joined with the corpus's unit labels, in embedding-file order.
fn labelled_embeddings(
    corpus: &Corpus,
    path: &Path,
) -> Result<(Vec<Vec<f64>>, Vec<String>, Vec<String>)> {
    let by_id: BTreeMap<&str, &crate::corpus::Segment> = corpus
        .segments()
        .iter()
        .map(|s| (s.segment_id.as_str(), s))
        .collect();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (id, v) in load_embeddings(path)? {
        let seg = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("embedding `{id}` has no segment in the corpus")))?;
        let label = seg
            .unit_label
            .clone()
            .ok_or_else(|| Error::Data(format!("segment `{id}` has no unit label")))?;
        vectors.push(v);
        labels.push(label);
        ids.push(id);
    }
    if vectors.is_empty() {
        return Err(Error::Data(format!("no embeddings in {}", path.display())));
    }
    Ok((vectors, labels, ids))
}

/// Run one command; returns the summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve(cli)?;
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    match &cli.command {
        Command::Synth => {
            let corpus = synth_corpus(&cfg.synth, cfg.stage_seed("synth"))?;
            let path = out.join("corpus.jsonl");
            save_corpus(&path, &corpus)?;
            Ok(format!(
                "synth: wrote {} segments to {}",
                corpus.len(),
                path.display()
            ))
        }
        Command::Train(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let dcfg = cfg.disentangle_cfg();
            let outcome = match args.variant {
                Variant::A => train_disentangle(&corpus, &cfg.model, &dcfg.plain_autoencoder())?,
                Variant::B => train_disentangle(&corpus, &cfg.model, &dcfg)?,
                Variant::C => train_joint(&corpus, &cfg.model, &dcfg, &cfg.siamese_cfg())?,
                Variant::D => {
                    return Err(Error::Config(
                        "variant d is produced by `refine`, not `train`".into(),
                    ));
                }
            };
            let v = args.variant;
            let model_path = out.join(format!("model_{v}.json"));
            outcome.model.save(&model_path)?;
            write(
                &out.join(format!("train_{v}.csv")),
                &loss_log_csv(&outcome.log),
            )?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.total);
            Ok(format!(
                "train: variant {v}, {} epochs, final loss {last:.6}, model {}",
                outcome.log.len(),
                model_path.display()
            ))
        }
        Command::Refine(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let base = DisentangledModel::load(&args.model)?;
            let outcome =
                train_refine(&base, &corpus, cfg.model.refine_hidden, &cfg.siamese_cfg())?;
            let path = out.join("refine_d.json");
            save_refiner(&path, &outcome.refiner)?;
            write(&out.join("refine_d.csv"), &refine_log_csv(&outcome.log))?;
            write_pair_dump(out.join("pairs_epoch1.jsonl"), &outcome.first_epoch_pairs)?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
            Ok(format!(
                "refine: {} epochs, final loss {last:.6}, refiner {}",
                outcome.log.len(),
                path.display()
            ))
        }
        Command::Embed(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let model = DisentangledModel::load(&args.model)?;
            let refiner = args.refiner.as_ref().map(load_refiner).transpose()?;
            let emb = embed_corpus(&model, refiner.as_ref(), &corpus, args.variant)?;
            let path = out.join(format!("embeddings_{}.jsonl", args.variant));
            save_embeddings(&path, &emb)?;
            Ok(format!(
                "embed: variant {}, {} embeddings to {}",
                args.variant,
                emb.len(),
                path.display()
            ))
        }
        Command::MineAudit(args) => {
            let vectors: Vec<Vec<f64>> = load_embeddings(&args.embeddings)?
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            let scfg = cfg.siamese_cfg();
            let batches = make_batches(
                vectors.len(),
                scfg.batch_size,
                derive_indexed(scfg.seed, "audit/batches", 0),
                scfg.drop_last,
            )?
            .into_iter()
            .filter(|b| b.len() >= 2)
            .collect::<Vec<_>>();
            let mut records = Vec::with_capacity(batches.len());
            let mut csv = String::from("batch,size,positives,negatives,distance_evaluations\n");
            let mut evaluations = 0u64;
            for (b, batch) in batches.iter().enumerate() {
                let v: Vec<&[f64]> = batch
                    .indices
                    .iter()
                    .map(|&i| vectors[i].as_slice())
                    .collect();
                let mined = mine(
                    &v,
                    &scfg.mining,
                    derive_indexed(scfg.seed, "audit/mine", b as u64),
                )?;
                evaluations += mined.distance_evaluations;
                csv.push_str(&format!(
                    "{b},{},{},{},{}\n",
                    batch.len(),
                    mined.pairs.positives.len(),
                    mined.pairs.negatives.len(),
                    mined.distance_evaluations
                ));
                records.push(PairDumpRecord {
                    batch: batch.indices.clone(),
                    positives: mined.pairs.positives,
                    negatives: mined.pairs.negatives,
                });
            }
            write(&out.join("mine_audit.csv"), &csv)?;
            write_pair_dump(out.join("pairs.jsonl"), &records)?;
            let bound = vectors.len() as u64 * scfg.batch_size as u64;
            Ok(format!(
                "mine-audit: {} batches, {evaluations} distance evaluations (bound M*|B| = {bound}), mode {}",
                batches.len(),
                scfg.mining.mode
            ))
        }
        Command::EvalSim(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let (vectors, labels, _) = labelled_embeddings(&corpus, &args.embeddings)?;
            let r = intra_inter_stats(
                &vectors,
                &labels,
                cfg.eval.cosine_pair_cap,
                cfg.stage_seed("cosine"),
            )?;
            let row = (args.variant.clone(), corpus.level().to_string(), r.clone());
            write(&out.join("cosine_gap.csv"), &cosine_gap_csv(&[row]))?;
            Ok(format!(
                "eval-sim: variant {}, intra {:.4}, inter {:.4}, delta {:.4}",
                args.variant, r.intra, r.inter, r.delta
            ))
        }
        Command::EvalCluster(args) => {
            let corpus = load_corpus(&args.eval.corpus)?;
            let (vectors, labels, _) = labelled_embeddings(&corpus, &args.eval.embeddings)?;
            let m = match cfg.eval.cluster_labels {
                0 => labels
                    .iter()
                    .collect::<std::collections::BTreeSet<_>>()
                    .len(),
                m => m,
            };
            let n_values = match &args.n {
                Some(text) => parse_n_range(text)?,
                None if cfg.eval.cluster_counts.is_empty() => vec![m, 2 * m],
                None => cfg.eval.cluster_counts.clone(),
            };
            let curve = accuracy_curve(&vectors, &labels, m, &n_values, cfg.stage_seed("cluster"))?;
            let best = curve
                .iter()
                .map(|p| p.acc)
                .fold(f64::NEG_INFINITY, f64::max);
            write(
                &out.join("cluster_acc.csv"),
                &accuracy_csv(&[(args.eval.variant.clone(), curve)]),
            )?;
            Ok(format!(
                "eval-cluster: variant {}, m = {m}, {} cluster counts, best acc {best:.4}",
                args.eval.variant,
                n_values.len()
            ))
        }
        Command::EvalStd(args) => {
            let corpus = load_corpus(&args.corpus)?;
            let mut rows = Vec::new();
            let mut task = None;
            let mut reference_ids: Option<Vec<String>> = None;
            for entry in &args.embeddings {
                let (variant, path) = entry.split_once('=').ok_or_else(|| {
                    Error::Config(format!("--embeddings expects VARIANT=PATH, got `{entry}`"))
                })?;
                let (vectors, labels, ids) = labelled_embeddings(&corpus, Path::new(path))?;
                match &reference_ids {
                    Some(r) if *r != ids => {
                        return Err(Error::Data(
                            "embedding files cover different segments".into(),
                        ));
                    }
                    Some(_) => {}
                    None => reference_ids = Some(ids),
                }
                let task = match &task {
                    Some(t) => t,
                    None => task.insert(build_retrieval_task(
                        &labels,
                        &cfg.retrieval,
                        cfg.stage_seed("retrieval"),
                    )?),
                };
                let (index, queries) = task.instantiate(&labels, &vectors)?;
                for &k in &cfg.retrieval.top_k {
                    rows.push((
                        variant.to_string(),
                        k,
                        evaluate_queries(&queries, &index, k)?.map,
                    ));
                }
            }
            write(&out.join("retrieval.csv"), &retrieval_csv(&rows))?;
            Ok(format!(
                "eval-std: {} variants x {} top_k values, {} queries",
                args.embeddings.len(),
                cfg.retrieval.top_k.len(),
                cfg.retrieval.n_queries
            ))
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_ranges() {
        assert_eq!(parse_n_range("10..13").unwrap(), vec![10, 11, 12, 13]);
        assert_eq!(parse_n_range("10..50:20").unwrap(), vec![10, 30, 50]);
        assert_eq!(parse_n_range("4,8").unwrap(), vec![4, 8]);
        assert!(parse_n_range("5..2").is_err());
        assert!(parse_n_range("x").is_err());
    }
}
