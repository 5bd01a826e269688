use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgsel_core::checkpoint::Checkpoint;
use kgsel_core::knowledge_index::{
    convert_conceptnet_line, parse_assertions, CONCEPTNET_RELATIONS, DEFAULT_MAX_N,
};
use kgsel_core::scoring_models::{desk_gradient_check, Memory};
use kgsel_core::text_pipeline::{default_stopwords, preprocess};
use kgsel_core::train_eval::io::{
    instances_from_jsonl, instances_to_jsonl, load_pretrained_embeddings, loss_trace_to_text,
    metrics_to_jsonl, pairs_to_tsv, parse_pairs_tsv, triples_from_jsonl, triples_to_jsonl,
};
use kgsel_core::train_eval::{
    build_training_set, case_report, filter_eval_pairs, make_candidate_sets, recall_at_k,
    synth_corpus, train, DialoguePair, Grounding, MetricRecord, SynthConfig, TrainConfig,
    TrainContext,
};
use kgsel_core::{Assertion, KnowledgeIndex, Model, ModelConfig, ModelKind, Vocabulary};

use crate::config::{parse_config, Resolver};
use crate::server::{self, AppState, LoadedModel};

/// Knowledge-grounded response selection tools.
///
/// Every option can also be set through a `KGSEL_<NAME>` environment
/// variable or a `key = value` line in the file given by --config. Flags
/// win over the environment, which wins over the file.
#[derive(Debug, Parser)]
#[command(name = "kgsel", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, env = "KGSEL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "KGSEL_SEED")]
    pub seed: Option<u64>,
    /// Knowledge index (JSON, from build-index).
    #[arg(long, global = true, env = "KGSEL_INDEX")]
    pub index: Option<PathBuf>,
    /// Vocabulary file (from build-vocab).
    #[arg(long, global = true, env = "KGSEL_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Model checkpoint to read or write.
    #[arg(long, global = true, env = "KGSEL_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Model kind: tfidf, bow, bow_knowledge, memnet, dual_lstm, tri_lstm.
    #[arg(long, global = true, env = "KGSEL_MODEL")]
    pub model: Option<ModelKind>,
    /// Recall cutoff.
    #[arg(long, global = true, env = "KGSEL_K")]
    pub k: Option<usize>,
    /// Service port.
    #[arg(long, global = true, env = "KGSEL_PORT")]
    pub port: Option<u16>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a pairs file (and optionally assertions).
    BuildVocab(BuildVocab),
    /// Build the concept index from an assertions file.
    BuildIndex(BuildIndex),
    /// Build training triples and evaluation candidate sets.
    MakeDataset(MakeDataset),
    /// Generate the planted-knowledge synthetic corpus.
    SynthCorpus(SynthCorpusArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Recall@k of a checkpoint on evaluation instances.
    Evaluate(Evaluate),
    /// Rank candidate responses for one message.
    Rank(Rank),
    /// Compare a baseline and a knowledge model instance by instance.
    CaseReport(CaseReportArgs),
    /// Finite-difference gradient check of a desk-scale model.
    Gradcheck(Gradcheck),
    /// Serve the JSON HTTP API.
    Serve(Serve),
    /// Index statistics, optionally with message coverage.
    Stats(Stats),
}

#[derive(Debug, Args)]
pub struct BuildVocab {
    #[arg(long, env = "KGSEL_PAIRS")]
    pairs: Option<PathBuf>,
    /// Also count the words of these assertions.
    #[arg(long, env = "KGSEL_ASSERTIONS")]
    assertions: Option<PathBuf>,
    #[arg(long, env = "KGSEL_MIN_FREQ")]
    min_freq: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndex {
    /// `relation \t concept1 \t concept2 [\t weight]` lines.
    #[arg(long, env = "KGSEL_ASSERTIONS")]
    assertions: Option<PathBuf>,
    /// The input is a ConceptNet 5 CSV dump; convert it first.
    #[arg(long)]
    conceptnet: bool,
    #[arg(long, env = "KGSEL_MAX_N")]
    max_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDataset {
    /// Training pairs; become positive/negative triples.
    #[arg(long, env = "KGSEL_PAIRS")]
    pairs: Option<PathBuf>,
    /// Evaluation pairs; become filtered candidate sets.
    #[arg(long)]
    eval_pairs: Option<PathBuf>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Keep evaluation pairs that fail the length/stopword/concept filter.
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    out_triples: Option<PathBuf>,
    #[arg(long)]
    out_eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    aliases: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Pairs in train.tsv / valid.tsv / test.tsv, in that order.
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training triples (from make-dataset).
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Validation instances for early stopping.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, env = "KGSEL_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "KGSEL_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "KGSEL_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Clip the global gradient norm of each batch.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    resample_negatives: Option<bool>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// GloVe-format vectors for the embedding matrix.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Write the per-epoch loss trace here.
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Evaluation instances (from make-dataset).
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Append a metrics record (JSON line) to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Rank {
    #[arg(long)]
    message: Option<String>,
    /// One candidate response per line.
    #[arg(long)]
    candidates_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaseReportArgs {
    /// Knowledge-free checkpoint; --checkpoint is the knowledge model.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    /// Print JSON lines instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Maximum accepted relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, env = "KGSEL_HOST")]
    host: Option<String>,
    /// Extra models as `id=path` (repeatable). --checkpoint is served
    /// under its model kind name.
    #[arg(long = "serve-model", value_name = "ID=PATH")]
    models: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Stats {
    /// Pairs whose messages are matched against the index.
    #[arg(long, env = "KGSEL_PAIRS")]
    pairs: Option<PathBuf>,
}

/// Parses `args` and runs the command. Usage errors exit with 2, runtime
/// failures with 1.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        bail!("missing input file: {}", path.display());
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_text(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_index(path: &Path) -> Result<KnowledgeIndex> {
    KnowledgeIndex::from_json(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path, expected: Option<ModelKind>) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("missing input file: {}", path.display());
    }
    Checkpoint::load(path, expected).with_context(|| format!("loading {}", path.display()))
}

fn encode_pairs(vocab: &Vocabulary, raw: &[(String, String)]) -> Vec<DialoguePair> {
    raw.iter().map(|(m, r)| DialoguePair::from_text(vocab, m, r)).collect()
}

fn echo(r: &Resolver) {
    eprintln!("{}", r.echo());
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.global.config {
        Some(p) => parse_config(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => BTreeMap::new(),
    };
    let mut r = Resolver::new(file);
    let g = cli.global;
    let seed = r.value("seed", g.seed, 0u64)?;
    match cli.command {
        Command::BuildVocab(a) => {
            let pairs: PathBuf = r.required("pairs", a.pairs)?;
            let assertions: Option<PathBuf> = r.optional("assertions", a.assertions)?;
            let min_freq = r.value("min-freq", a.min_freq, 1usize)?;
            let out: PathBuf = r.required("out", a.out)?;
            echo(&r);
            let raw = parse_pairs_tsv(&read(&pairs)?)?;
            let mut corpus: Vec<Vec<String>> =
                raw.iter().flat_map(|(m, r)| [preprocess(m), preprocess(r)]).collect();
            if let Some(p) = assertions {
                let (parsed, _) = parse_assertions(&read(&p)?, CONCEPTNET_RELATIONS);
                corpus.extend(parsed.iter().map(Assertion::linearize));
            }
            let vocab = Vocabulary::build(&corpus, min_freq, CONCEPTNET_RELATIONS)?;
            write(&out, &vocab.to_text())?;
            println!("vocabulary: {} tokens -> {}", vocab.len(), out.display());
        }
        Command::BuildIndex(a) => {
            let input: PathBuf = r.required("assertions", a.assertions)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let max_n = r.value("max-n", a.max_n, DEFAULT_MAX_N)?;
            let conceptnet = r.value("conceptnet", Some(a.conceptnet), false)?;
            let out: PathBuf = r.required("out", a.out)?;
            echo(&r);
            let vocab = load_vocab(&vocab_path)?;
            let mut text = read(&input)?;
            if conceptnet {
                text = text
                    .lines()
                    .filter_map(convert_conceptnet_line)
                    .collect::<Vec<_>>()
                    .join("\n");
            }
            let (parsed, warn) = parse_assertions(&text, CONCEPTNET_RELATIONS);
            let index = KnowledgeIndex::build(&parsed, &vocab, max_n, default_stopwords())?;
            write(&out, &index.to_json()?)?;
            println!(
                "index: {} assertions, {} concepts -> {}",
                index.assertions().len(),
                index.concept_count(),
                out.display()
            );
            println!(
                "skipped lines: {} malformed, {} unknown relation, {} non-English",
                warn.malformed, warn.unknown_relation, warn.non_english
            );
            println!("build: {}", serde_json::to_string(index.counts())?);
        }
        Command::MakeDataset(a) => {
            let pairs: PathBuf = r.required("pairs", a.pairs)?;
            let eval_pairs: Option<PathBuf> = r.optional("eval-pairs", a.eval_pairs)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: Option<PathBuf> = r.optional("index", g.index)?;
            let distractors = r.value("distractors", a.distractors, 9usize)?;
            let filter = !r.value("no-filter", Some(a.no_filter), false)?;
            let out_triples: PathBuf = r.required("out-triples", a.out_triples)?;
            let out_eval: Option<PathBuf> = r.optional("out-eval", a.out_eval)?;
            echo(&r);
            let vocab = load_vocab(&vocab_path)?;
            let train_pairs = encode_pairs(&vocab, &parse_pairs_tsv(&read(&pairs)?)?);
            let triples = build_training_set(&train_pairs, seed)?;
            write(&out_triples, &triples_to_jsonl(&triples)?)?;
            println!("triples: {} -> {}", triples.len(), out_triples.display());
            if let Some(ep) = eval_pairs {
                let out_eval = out_eval.ok_or_else(|| anyhow!("--eval-pairs needs --out-eval"))?;
                let index_path = index_path.ok_or_else(|| anyhow!("--eval-pairs needs --index"))?;
                let index = load_index(&index_path)?;
                let mut ev = encode_pairs(&vocab, &parse_pairs_tsv(&read(&ep)?)?);
                let before = ev.len();
                if filter {
                    ev = filter_eval_pairs(&ev, &index, index.stopwords());
                }
                let inst = make_candidate_sets(&ev, distractors, seed, Some(Grounding::new(&vocab, &index)))?;
                write(&out_eval, &instances_to_jsonl(&inst)?)?;
                println!(
                    "eval instances: {} of {} pairs kept -> {}",
                    inst.len(),
                    before,
                    out_eval.display()
                );
            }
        }
        Command::SynthCorpus(a) => {
            let out_dir: PathBuf = r.required("out-dir", a.out_dir)?;
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                n_pairs: r.value("pairs", a.pairs, d.n_pairs)?,
                n_concepts: r.value("concepts", a.concepts, d.n_concepts)?,
                aliases_per_concept: r.value("aliases", a.aliases, d.aliases_per_concept)?,
                noise_rate: r.value("noise", a.noise, d.noise_rate)?,
                seed,
                ..d
            };
            let n_train = r.value("n-train", a.n_train, cfg.n_pairs * 7 / 10)?;
            let n_valid = r.value("n-valid", a.n_valid, cfg.n_pairs / 10)?;
            let n_test = r.value("n-test", a.n_test, cfg.n_pairs - n_train - n_valid.min(cfg.n_pairs - n_train))?;
            echo(&r);
            if n_train + n_valid + n_test > cfg.n_pairs {
                bail!("splits ({n_train} + {n_valid} + {n_test}) exceed {} pairs", cfg.n_pairs);
            }
            let corpus = synth_corpus(&cfg)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let (tr, rest) = corpus.pairs.split_at(n_train);
            let (va, rest) = rest.split_at(n_valid);
            write(&out_dir.join("train.tsv"), &pairs_to_tsv(tr))?;
            write(&out_dir.join("valid.tsv"), &pairs_to_tsv(va))?;
            write(&out_dir.join("test.tsv"), &pairs_to_tsv(&rest[..n_test]))?;
            write(&out_dir.join("assertions.tsv"), &corpus.assertions_tsv())?;
            println!(
                "synthetic corpus: {n_train}/{n_valid}/{n_test} pairs, {} assertions ({} noisy) -> {}",
                corpus.assertions.len(),
                corpus.noisy_count(),
                out_dir.display()
            );
        }
        Command::Train(a) => {
            let kind: ModelKind = r.required("model", g.model)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: Option<PathBuf> = r.optional("index", g.index)?;
            let triples_path: PathBuf = r.required("triples", a.triples)?;
            let valid: Option<PathBuf> = r.optional("valid", a.valid)?;
            let out: PathBuf = r.required("checkpoint", g.checkpoint)?;
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                batch_size: r.value("batch-size", a.batch_size, d.batch_size)?,
                learning_rate: r.value("learning-rate", a.learning_rate, d.learning_rate)?,
                max_epochs: r.value("epochs", a.epochs, d.max_epochs)?,
                patience: r.value("patience", a.patience, d.patience)?,
                seed,
                clip_norm: r.optional("clip", a.clip)?,
                resample_negatives: r.value("resample-negatives", a.resample_negatives, d.resample_negatives)?,
            };
            let e = r.value("embedding-dim", a.embedding_dim, 16usize)?;
            let h = r.value("hidden-dim", a.hidden_dim, 32usize)?;
            let pretrained: Option<PathBuf> = r.optional("pretrained", a.pretrained)?;
            let loss_trace: Option<PathBuf> = r.optional("loss-trace", a.loss_trace)?;
            echo(&r);

            let vocab = load_vocab(&vocab_path)?;
            let index = index_path.as_deref().map(load_index).transpose()?;
            if kind.uses_knowledge() && index.is_none() {
                bail!("{kind} needs --index");
            }
            let triples = triples_from_jsonl(&read(&triples_path)?, &vocab)?;
            let mut model = Model::init(ModelConfig::new(kind, vocab.len(), e, h), seed)?;
            if let Some(p) = &pretrained {
                let n = load_pretrained_embeddings(&mut model, &vocab, &read(p)?)?;
                eprintln!("pretrained vectors for {n} of {} tokens", vocab.len());
            }
            let settings = r.hashed().clone();
            if !kind.is_trainable() {
                let docs: Vec<&[u32]> = triples
                    .iter()
                    .filter(|t| t.label == 1)
                    .flat_map(|t| [t.message.ids.as_slice(), t.response.ids.as_slice()])
                    .collect();
                model.fit_idf(&docs)?;
                Checkpoint::new(model, settings).save(&out)?;
                println!("fitted idf over {} documents -> {}", docs.len(), out.display());
                return Ok(ExitCode::SUCCESS);
            }
            let grounding = index.as_ref().map(|i| Grounding::new(&vocab, i));
            let validation = valid
                .as_deref()
                .map(|p| -> Result<_> { Ok(instances_from_jsonl(&read(p)?, &vocab, grounding)?) })
                .transpose()?;
            let ctx = TrainContext {
                grounding,
                validation: validation.as_deref(),
                checkpoint: Some(out.clone()),
                settings,
            };
            let outcome = train(model, &triples, &cfg, &ctx)?;
            if let Some(p) = &loss_trace {
                write(p, &loss_trace_to_text(&outcome.epochs))?;
            }
            for ep in &outcome.epochs {
                match ep.val_recall_at_1 {
                    Some(v) => println!("epoch {}\tloss {:.6}\tval R@1 {v:.4}", ep.epoch, ep.mean_loss),
                    None => println!("epoch {}\tloss {:.6}", ep.epoch, ep.mean_loss),
                }
            }
            println!(
                "best epoch {}{} -> {}",
                outcome.best_epoch,
                if outcome.stopped_early { " (early stop)" } else { "" },
                out.display()
            );
        }
        Command::Evaluate(a) => {
            let ckpt: PathBuf = r.required("checkpoint", g.checkpoint)?;
            let expected: Option<ModelKind> = r.optional("model", g.model)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: Option<PathBuf> = r.optional("index", g.index)?;
            let inst_path: PathBuf = r.required("instances", a.instances)?;
            let k = r.value("k", g.k, 1usize)?;
            let metrics: Option<PathBuf> = r.optional("metrics", a.metrics)?;
            echo(&r);
            let ck = load_checkpoint(&ckpt, expected)?;
            let vocab = load_vocab(&vocab_path)?;
            let index = index_path.as_deref().map(load_index).transpose()?;
            let grounding = index.as_ref().map(|i| Grounding::new(&vocab, i));
            if ck.model.kind().uses_knowledge() && grounding.is_none() {
                bail!("{} needs --index", ck.model.kind());
            }
            let inst = instances_from_jsonl(&read(&inst_path)?, &vocab, grounding)?;
            let fraction = recall_at_k(&ck.model, &inst, k)?;
            println!("recall@{k}\t{fraction}");
            if let Some(p) = metrics {
                let rec = MetricRecord {
                    model: ck.model.kind().name().to_owned(),
                    k,
                    fraction,
                    instances: inst.len(),
                    seed,
                    config_hash: ck.config_hash()?,
                };
                let mut text = if p.exists() { read(&p)? } else { String::new() };
                text.push_str(&metrics_to_jsonl(&[rec])?);
                write(&p, &text)?;
            }
        }
        Command::Rank(a) => {
            let ckpt: PathBuf = r.required("checkpoint", g.checkpoint)?;
            let expected: Option<ModelKind> = r.optional("model", g.model)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: Option<PathBuf> = r.optional("index", g.index)?;
            let message: String = r.required("message", a.message)?;
            let cand_path: PathBuf = r.required("candidates-file", a.candidates_file)?;
            echo(&r);
            let ck = load_checkpoint(&ckpt, expected)?;
            let vocab = load_vocab(&vocab_path)?;
            let index = index_path.as_deref().map(load_index).transpose()?;
            let candidates: Vec<String> = read(&cand_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_owned)
                .collect();
            let msg = vocab.encode(&preprocess(&message));
            let (retrieved, memory) = match &index {
                Some(i) if ck.model.kind().uses_knowledge() => Grounding::new(&vocab, i).ground(&msg),
                _ => (Default::default(), Memory::empty()),
            };
            let ids: Vec<Vec<u32>> = candidates.iter().map(|c| vocab.encode(&preprocess(c)).ids).collect();
            let ranked = ck.model.rank(&msg.ids, &ids, &memory)?;
            println!(
                "{} ({} scores), |A_x| = {}",
                ck.model.kind(),
                ck.model.kind().score_kind(),
                retrieved.len()
            );
            for (pos, c) in ranked.iter().enumerate() {
                let act = c
                    .activated_assertion_id
                    .and_then(|id| index.as_ref()?.assertion(id))
                    .map(|a| format!("\t[{a}]"))
                    .unwrap_or_default();
                println!("{}\t{:.6}\t{}{act}", pos + 1, c.score, candidates[c.index]);
            }
        }
        Command::CaseReport(a) => {
            let base_path: PathBuf = r.required("baseline", a.baseline)?;
            let ckpt: PathBuf = r.required("checkpoint", g.checkpoint)?;
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: PathBuf = r.required("index", g.index)?;
            let inst_path: PathBuf = r.required("instances", a.instances)?;
            let limit = r.value("limit", a.limit, 10usize)?;
            echo(&r);
            let base = load_checkpoint(&base_path, None)?;
            let know = load_checkpoint(&ckpt, None)?;
            let vocab = load_vocab(&vocab_path)?;
            let index = load_index(&index_path)?;
            let inst = instances_from_jsonl(&read(&inst_path)?, &vocab, Some(Grounding::new(&vocab, &index)))?;
            for i in inst.iter().take(limit) {
                let rep = case_report(&base.model, &know.model, i, &index)?;
                if a.json {
                    println!("{}", serde_json::to_string(&rep)?);
                } else {
                    println!("{rep}\n");
                }
            }
        }
        Command::Gradcheck(a) => {
            let kind: ModelKind = r.required("model", g.model)?;
            let eps = r.value("eps", a.eps, 1e-5)?;
            let samples = r.value("samples", a.samples, 200usize)?;
            let tol = r.value("tolerance", a.tolerance, 1e-4)?;
            echo(&r);
            let rep = desk_gradient_check(kind, eps, samples, seed)?;
            println!(
                "{kind}: max relative error {:.3e} over {} coordinates ({} nonzero), worst {}[{}]",
                rep.max_rel_error, rep.checked, rep.nonzero, rep.worst_param, rep.worst_index
            );
            if rep.max_rel_error.is_nan() || rep.max_rel_error > tol {
                eprintln!("gradient check failed: {:.3e} > {tol:.1e}", rep.max_rel_error);
                return Ok(ExitCode::from(1));
            }
        }
        Command::Serve(a) => {
            let vocab_path: PathBuf = r.required("vocab", g.vocab)?;
            let index_path: PathBuf = r.required("index", g.index)?;
            let ckpt: Option<PathBuf> = r.optional("checkpoint", g.checkpoint)?;
            let host = r.value("host", a.host, "127.0.0.1".to_owned())?;
            let port = r.value("port", g.port.map(usize::from), 8080usize)?;
            echo(&r);
            let mut specs: Vec<(Option<String>, PathBuf)> = Vec::new();
            if let Some(p) = ckpt {
                specs.push((None, p));
            }
            for m in &a.models {
                let (id, p) = m
                    .split_once('=')
                    .ok_or_else(|| anyhow!("--serve-model expects ID=PATH, got `{m}`"))?;
                specs.push((Some(id.to_owned()), PathBuf::from(p)));
            }
            if specs.is_empty() {
                bail!("nothing to serve: give --checkpoint or --serve-model");
            }
            let mut models = BTreeMap::new();
            for (id, p) in specs {
                let ck = load_checkpoint(&p, None)?;
                let id = id.unwrap_or_else(|| ck.model.kind().name().to_owned());
                let config_hash = ck.config_hash()?;
                models.insert(id, LoadedModel { model: ck.model, config_hash });
            }
            let state = Arc::new(AppState {
                vocab: load_vocab(&vocab_path)?,
                index: load_index(&index_path)?,
                models,
            });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(state, &format!("{host}:{port}")))?;
        }
        Command::Stats(a) => {
            let index_path: PathBuf = r.required("index", g.index)?;
            let pairs: Option<PathBuf> = r.optional("pairs", a.pairs)?;
            echo(&r);
            let index = load_index(&index_path)?;
            let messages: Vec<Vec<String>> = match pairs {
                Some(p) => parse_pairs_tsv(&read(&p)?)?.iter().map(|(m, _)| preprocess(m)).collect(),
                None => Vec::new(),
            };
            println!("{}", serde_json::to_string_pretty(&index.stats(&messages))?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
