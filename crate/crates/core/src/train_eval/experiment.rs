//! End-to-end run on the planted-knowledge corpus: generate, split, build
//! vocabulary and index, train every requested model with early stopping,
//! and report held-out Recall@k.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::knowledge_index::{parse_assertions, Assertion, KnowledgeIndex, CONCEPTNET_RELATIONS, DEFAULT_MAX_N};
use crate::scoring_models::{Model, ModelConfig, ModelKind};
use crate::text_pipeline::{default_stopwords, preprocess, Vocabulary};

use super::dataset::{build_training_set, make_candidate_sets, DialoguePair, EvalInstance, Grounding};
use super::eval::{ground_truth_ranks, recall_from_ranks};
use super::synth::{synth_corpus, SynthConfig, SynthCorpus};
use super::train::{train, EpochRecord, TrainConfig, TrainContext};

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub models: Vec<ModelKind>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_train: 3500,
            n_validation: 500,
            n_test: 1000,
            embedding_dim: 16,
            hidden_dim: 32,
            train: TrainConfig {
                learning_rate: 10.0,
                clip_norm: Some(0.5),
                max_epochs: 40,
                ..TrainConfig::default()
            },
            models: vec![
                ModelKind::Tfidf,
                ModelKind::Bow,
                ModelKind::BowKnowledge,
                ModelKind::Memnet,
                ModelKind::DualLstm,
                ModelKind::TriLstm,
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelResult {
    pub model: ModelKind,
    /// Held-out Recall@1, @2, @5.
    pub recall: [f64; 3],
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlantedReport {
    pub results: Vec<ModelResult>,
    pub test_instances: usize,
    pub seconds: f64,
}

impl PlantedReport {
    pub fn recall_at_1(&self, kind: ModelKind) -> Option<f64> {
        self.results.iter().find(|r| r.model == kind).map(|r| r.recall[0])
    }
}

/// Data shared by every model of a run.
pub struct PlantedData {
    pub corpus: SynthCorpus,
    pub vocab: Vocabulary,
    pub index: KnowledgeIndex,
    pub train: Vec<DialoguePair>,
    pub validation: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
}

impl PlantedData {
    /// Vocabulary over the training pairs plus the knowledge base text.
    pub fn build(cfg: &PlantedConfig) -> Result<Self> {
        if cfg.n_train + cfg.n_validation + cfg.n_test > cfg.synth.n_pairs {
            return Err(Error::invalid("splits exceed the number of generated pairs"));
        }
        let corpus = synth_corpus(&cfg.synth)?;
        let (assertions, _) = parse_assertions(&corpus.assertions_tsv(), CONCEPTNET_RELATIONS);
        let mut texts: Vec<Vec<String>> = corpus.pairs[..cfg.n_train]
            .iter()
            .flat_map(|(m, r)| [preprocess(m), preprocess(r)])
            .collect();
        texts.extend(assertions.iter().map(Assertion::linearize));
        let vocab = Vocabulary::build(&texts, 1, CONCEPTNET_RELATIONS)?;
        let index = KnowledgeIndex::build(&assertions, &vocab, DEFAULT_MAX_N, default_stopwords())?;
        let encode = |range: std::ops::Range<usize>| -> Vec<DialoguePair> {
            corpus.pairs[range]
                .iter()
                .map(|(m, r)| DialoguePair::from_text(&vocab, m, r))
                .collect()
        };
        let a = cfg.n_train;
        let b = a + cfg.n_validation;
        let train = encode(0..a);
        let grounding = Some(Grounding::new(&vocab, &index));
        let seed = cfg.synth.seed;
        let validation = make_candidate_sets(&encode(a..b), 9, seed ^ 0x5a11, grounding)?;
        let test = make_candidate_sets(&encode(b..b + cfg.n_test), 9, seed ^ 0x7e57, grounding)?;
        Ok(Self {
            corpus,
            vocab,
            index,
            train,
            validation,
            test,
        })
    }
}

/// Trains (or fits) one model kind on `data` and evaluates it on the test
/// split.
pub fn run_model(kind: ModelKind, data: &PlantedData, cfg: &PlantedConfig) -> Result<ModelResult> {
    let start = Instant::now();
    let config = ModelConfig::new(kind, data.vocab.len(), cfg.embedding_dim, cfg.hidden_dim);
    let mut model = Model::init(config, cfg.train.seed)?;
    let (model, best_epoch, epochs) = if kind.is_trainable() {
        let triples = build_training_set(&data.train, cfg.train.seed)?;
        let ctx = TrainContext {
            grounding: Some(Grounding::new(&data.vocab, &data.index)),
            validation: Some(&data.validation),
            checkpoint: None,
            settings: BTreeMap::new(),
        };
        let out = train(model, &triples, &cfg.train, &ctx)?;
        (out.model, out.best_epoch, out.epochs)
    } else {
        let docs: Vec<&[u32]> = data
            .train
            .iter()
            .flat_map(|p| [p.message.ids.as_slice(), p.response.ids.as_slice()])
            .collect();
        model.fit_idf(&docs)?;
        (model, 0, Vec::new())
    };
    let ranks = ground_truth_ranks(&model, &data.test)?;
    Ok(ModelResult {
        model: kind,
        recall: [1, 2, 5].map(|k| recall_from_ranks(&ranks, k)),
        best_epoch,
        epochs,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every configured model; independent runs train concurrently.
pub fn planted_experiment(cfg: &PlantedConfig) -> Result<PlantedReport> {
    let start = Instant::now();
    let data = PlantedData::build(cfg)?;
    let results = cfg
        .models
        .par_iter()
        .map(|&k| run_model(k, &data, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlantedReport {
        results,
        test_instances: data.test.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
