//! Compatibility scorers `f(message, response)` and the argmax ranking rule.
//!
//! The free functions (`score_dual`, `score_tri`, `score_bow`, ...) work on
//! already-encoded vectors and define each scorer. [`Model`] owns the
//! parameters, encodes token ids into those vectors for inference, and
//! rebuilds the same computation on a [`Tape`] for training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::dot;
use crate::numeric::tape::LstmVars;
use crate::numeric::{bilinear, lstm_encode, sigmoid, softmax, Array, LstmWeights, ParameterStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tfidf,
    Bow,
    BowKnowledge,
    Memnet,
    DualLstm,
    TriLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Tfidf,
        ModelKind::Bow,
        ModelKind::BowKnowledge,
        ModelKind::Memnet,
        ModelKind::DualLstm,
        ModelKind::TriLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tfidf => "tfidf",
            ModelKind::Bow => "bow",
            ModelKind::BowKnowledge => "bow_knowledge",
            ModelKind::Memnet => "memnet",
            ModelKind::DualLstm => "dual_lstm",
            ModelKind::TriLstm => "tri_lstm",
        }
    }

    pub fn uses_knowledge(self) -> bool {
        matches!(self, ModelKind::BowKnowledge | ModelKind::Memnet | ModelKind::TriLstm)
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, ModelKind::DualLstm | ModelKind::TriLstm)
    }

    pub fn is_trainable(self) -> bool {
        self != ModelKind::Tfidf
    }

    /// Post-sigmoid probability for LSTM models, raw value otherwise.
    pub fn score_kind(self) -> &'static str {
        if self.is_lstm() {
            "probability"
        } else {
            "raw"
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub tie_message_response_weights: bool,
    pub separate_assertion_encoder: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, vocab_size: usize, embedding_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            embedding_dim,
            hidden_dim,
            vocab_size,
            tie_message_response_weights: true,
            separate_assertion_encoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!(
                "dimensions must be positive (V={}, E={}, D={})",
                self.vocab_size, self.embedding_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    fn response_lstm(&self) -> &'static str {
        if self.tie_message_response_weights {
            MESSAGE_LSTM
        } else {
            RESPONSE_LSTM
        }
    }

    fn assertion_lstm(&self) -> &'static str {
        if self.separate_assertion_encoder {
            ASSERTION_LSTM
        } else {
            MESSAGE_LSTM
        }
    }

    /// Names and shapes of every parameter this configuration owns, in
    /// creation order.
    pub fn parameter_schema(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, d) = (self.vocab_size, self.embedding_dim, self.hidden_dim);
        let lstm = |prefix: &str| {
            vec![
                (format!("{prefix}.w_x"), vec![4 * d, e]),
                (format!("{prefix}.w_h"), vec![4 * d, d]),
                (format!("{prefix}.b"), vec![4 * d]),
            ]
        };
        let mut out = Vec::new();
        if self.kind == ModelKind::Tfidf {
            out.push((IDF.to_owned(), vec![v]));
            return out;
        }
        out.push((EMBEDDING.to_owned(), vec![v, e]));
        if self.kind.is_lstm() {
            out.extend(lstm(MESSAGE_LSTM));
            if !self.tie_message_response_weights {
                out.extend(lstm(RESPONSE_LSTM));
            }
            out.push((BILINEAR.to_owned(), vec![d, d]));
        }
        if self.kind == ModelKind::TriLstm {
            if self.separate_assertion_encoder {
                out.extend(lstm(ASSERTION_LSTM));
            }
            out.push((MATCH.to_owned(), vec![d, d]));
        }
        out
    }
}

pub const EMBEDDING: &str = "embedding";
pub const IDF: &str = "idf";
pub const BILINEAR: &str = "bilinear";
pub const MATCH: &str = "match";
pub const MESSAGE_LSTM: &str = "lstm";
pub const RESPONSE_LSTM: &str = "lstm_response";
pub const ASSERTION_LSTM: &str = "lstm_assertion";

/// Range of the uniform initialization of recurrent weights.
pub const RECURRENT_INIT: f64 = 0.08;
/// Range of the uniform initialization of word embeddings; roughly the
/// per-coordinate spread of GloVe vectors.
pub const EMBEDDING_INIT: f64 = 0.5;
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// The assertions retrieved for one message, as assertion ids and their
/// linearized token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub assertion_ids: Vec<u32>,
    pub sequences: Vec<Vec<u32>>,
}

impl Memory {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub score: f64,
    /// Pre-sigmoid value for LSTM models; equal to `score` otherwise.
    pub logit: f64,
    pub activated_assertion_id: Option<u32>,
}

/// `σ(x' W y)` together with its logit.
pub fn score_dual(x: &[f64], y: &[f64], w: &Array) -> Result<(f64, f64)> {
    let logit = bilinear(x, w, y)?;
    Ok((sigmoid(logit), logit))
}

/// `a' W_a y`.
pub fn assertion_match(a: &[f64], y: &[f64], w_a: &Array) -> Result<f64> {
    bilinear(a, w_a, y)
}

/// Best match over the memory and its index; `(0, None)` for no memory.
/// Ties go to the lowest index.
pub fn max_pool_match<A: AsRef<[f64]>>(
    assertions: &[A],
    y: &[f64],
    w_a: &Array,
) -> Result<(f64, Option<usize>)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, a) in assertions.iter().enumerate() {
        let m = assertion_match(a.as_ref(), y, w_a)?;
        if best.is_none_or(|(b, _)| m > b) {
            best = Some((m, i));
        }
    }
    Ok(best.map_or((0.0, None), |(m, i)| (m, Some(i))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriScore {
    pub score: f64,
    pub logit: f64,
    pub activated: Option<usize>,
}

/// `σ(x' W y + max_a a' W_a y)`. Without assertions this is exactly
/// [`score_dual`].
pub fn score_tri<A: AsRef<[f64]>>(
    x: &[f64],
    assertions: &[A],
    y: &[f64],
    w: &Array,
    w_a: &Array,
) -> Result<TriScore> {
    let mut logit = bilinear(x, w, y)?;
    let (m, activated) = max_pool_match(assertions, y, w_a)?;
    if activated.is_some() {
        logit += m;
    }
    Ok(TriScore {
        score: sigmoid(logit),
        logit,
        activated,
    })
}

pub fn score_bow(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y)
}

/// `x'y + max_a a'y`, with the max term dropped for an empty memory.
pub fn score_bow_knowledge<A: AsRef<[f64]>>(
    x: &[f64],
    assertions: &[A],
    y: &[f64],
) -> (f64, Option<usize>) {
    let mut best: Option<(f64, usize)> = None;
    for (i, a) in assertions.iter().enumerate() {
        let m = dot(a.as_ref(), y);
        if best.is_none_or(|(b, _)| m > b) {
            best = Some((m, i));
        }
    }
    let base = score_bow(x, y);
    match best {
        Some((m, i)) => (base + m, Some(i)),
        None => (base, None),
    }
}

/// One-hop memory network: attention `softmax(x'a_i)` from the message,
/// output `o = Σ p_i a_i`, score `(x + o)'y`. Empty memory gives `o = 0`.
pub fn score_memnet<A: AsRef<[f64]>>(x: &[f64], assertions: &[A], y: &[f64]) -> f64 {
    if assertions.is_empty() {
        return score_bow(x, y);
    }
    let att: Vec<f64> = assertions.iter().map(|a| dot(x, a.as_ref())).collect();
    let p = softmax(&att);
    let mut o = vec![0.0; x.len()];
    for (pi, a) in p.iter().zip(assertions) {
        for (ov, av) in o.iter_mut().zip(a.as_ref()) {
            *ov += pi * av;
        }
    }
    let xo: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    dot(&xo, y)
}

/// Inverse document frequencies over token ids, smoothed as
/// `ln((1 + N) / (1 + df)) + 1`.
pub fn idf_table<D: AsRef<[u32]>>(documents: &[D], vocab_size: usize) -> Vec<f64> {
    let mut df = vec![0usize; vocab_size];
    let mut seen = vec![usize::MAX; vocab_size];
    for (d, doc) in documents.iter().enumerate() {
        for &t in doc.as_ref() {
            let t = t as usize;
            if t < vocab_size && seen[t] != d {
                seen[t] = d;
                df[t] += 1;
            }
        }
    }
    let n = documents.len() as f64;
    df.into_iter()
        .map(|c| ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0)
        .collect()
}

fn tfidf_vector(tokens: &[u32], idf: &[f64]) -> Vec<(u32, f64)> {
    let mut counts: Vec<(u32, f64)> = Vec::new();
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    for t in sorted {
        match counts.last_mut() {
            Some((last, c)) if *last == t => *c += 1.0,
            _ => counts.push((t, 1.0)),
        }
    }
    counts
        .into_iter()
        .map(|(t, c)| (t, c * idf.get(t as usize).copied().unwrap_or(0.0)))
        .collect()
}

/// Cosine similarity of the raw-count TF-IDF vectors; 0 when either side is
/// the zero vector.
pub fn score_tfidf(x: &[u32], y: &[u32], idf: &[f64]) -> f64 {
    let a = tfidf_vector(x, idf);
    let b = tfidf_vector(y, idf);
    let norm = |v: &[(u32, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let (na, nb) = (norm(&a), norm(&b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut i, mut j, mut num) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                num += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    num / (na * nb)
}

/// Candidate order by descending score, ties by ascending index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// A model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
}

/// Message-side encodings computed once and reused across candidates.
#[derive(Debug, Clone)]
pub struct PreparedMessage {
    message_ids: Vec<u32>,
    message: Vec<f64>,
    memory: Vec<Vec<f64>>,
    assertion_ids: Vec<u32>,
}

impl PreparedMessage {
    pub fn message_encoding(&self) -> &[f64] {
        &self.message
    }

    pub fn memory_encodings(&self) -> &[Vec<f64>] {
        &self.memory
    }
}

struct TapeHandles {
    embedding: Var,
    lstm: Option<LstmVars>,
    lstm_response: Option<LstmVars>,
    lstm_assertion: Option<LstmVars>,
    bilinear: Option<Var>,
    match_: Option<Var>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], range: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-range..range)).collect();
    Array::new(shape.to_vec(), data).expect("shape and data agree")
}

impl Model {
    /// Fresh parameters: uniform(±0.08) recurrent weights, forget-gate
    /// biases at +1, identity bilinear and match matrices, uniform(±0.5)
    /// embeddings, unit idf.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        let d = config.hidden_dim;
        for (name, shape) in config.parameter_schema() {
            let value = if name == IDF {
                Array::new(shape, vec![1.0; config.vocab_size])?
            } else if name == EMBEDDING {
                uniform(&mut rng, &shape, EMBEDDING_INIT)
            } else if name == BILINEAR || name == MATCH {
                Array::identity(d)
            } else if name.ends_with(".b") {
                let mut b = Array::zeros(&shape);
                b.data_mut()[d..2 * d].fill(FORGET_BIAS_INIT);
                b
            } else {
                uniform(&mut rng, &shape, RECURRENT_INIT)
            };
            store.insert(&name, value)?;
        }
        Ok(Self { config, store })
    }

    /// Checks that `store` holds exactly the parameters `config` requires.
    pub fn from_parts(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let schema = config.parameter_schema();
        for (name, shape) in &schema {
            let a = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}` for {}", config.kind)))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    a.shape()
                )));
            }
        }
        if let Some(extra) = store.names().iter().find(|n| !schema.iter().any(|(s, _)| s == *n)) {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter `{extra}` for {}",
                config.kind
            )));
        }
        Ok(Self { config, store })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Replaces the tfidf model's unit idf with the smoothed idf of
    /// `documents`.
    pub fn fit_idf<D: AsRef<[u32]>>(&mut self, documents: &[D]) -> Result<()> {
        if self.config.kind != ModelKind::Tfidf {
            return Err(Error::invalid(format!("{} has no idf table", self.config.kind)));
        }
        let id = self.store.id(IDF)?;
        let table = idf_table(documents, self.config.vocab_size);
        self.store.by_id_mut(id).data_mut().copy_from_slice(&table);
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&Array> {
        self.store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    fn embedding_rows<'a>(&'a self, ids: &[u32]) -> Result<Vec<&'a [f64]>> {
        let emb = self.param(EMBEDDING)?;
        ids.iter()
            .map(|&i| {
                if (i as usize) < emb.rows() {
                    Ok(emb.row(i as usize))
                } else {
                    Err(Error::invalid(format!("token id {i} outside vocabulary of {}", emb.rows())))
                }
            })
            .collect()
    }

    fn lstm_weights(&self, prefix: &str) -> Result<LstmWeights<'_>> {
        Ok(LstmWeights {
            w_x: self.param(&format!("{prefix}.w_x"))?,
            w_h: self.param(&format!("{prefix}.w_h"))?,
            b: self.param(&format!("{prefix}.b"))?,
        })
    }

    /// Sum of the embeddings of `ids`.
    pub fn bag_of_words(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.embedding_dim];
        for row in self.embedding_rows(ids)? {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(out)
    }

    /// Last hidden state of the LSTM named by `prefix` over `ids`.
    pub fn encode_with(&self, prefix: &str, ids: &[u32]) -> Result<Vec<f64>> {
        let rows = self.embedding_rows(ids)?;
        lstm_encode(&self.lstm_weights(prefix)?, &rows)
    }

    pub fn encode_message(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if self.config.kind.is_lstm() {
            self.encode_with(MESSAGE_LSTM, ids)
        } else {
            self.bag_of_words(ids)
        }
    }

    pub fn encode_response(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if self.config.kind.is_lstm() {
            self.encode_with(self.config.response_lstm(), ids)
        } else {
            self.bag_of_words(ids)
        }
    }

    pub fn encode_assertion(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if self.config.kind.is_lstm() {
            self.encode_with(self.config.assertion_lstm(), ids)
        } else {
            self.bag_of_words(ids)
        }
    }

    pub fn prepare(&self, message: &[u32], memory: &Memory) -> Result<PreparedMessage> {
        let kind = self.config.kind;
        let message_enc = if kind == ModelKind::Tfidf {
            Vec::new()
        } else {
            self.encode_message(message)?
        };
        let memory_encs = if kind.uses_knowledge() {
            memory
                .sequences
                .iter()
                .map(|s| self.encode_assertion(s))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(PreparedMessage {
            message_ids: message.to_vec(),
            message: message_enc,
            memory: memory_encs,
            assertion_ids: if kind.uses_knowledge() {
                memory.assertion_ids.clone()
            } else {
                Vec::new()
            },
        })
    }

    /// Scores one response against a prepared message. Returns the
    /// candidate with `index` 0.
    pub fn score(&self, prep: &PreparedMessage, response: &[u32]) -> Result<ScoredCandidate> {
        let raw = |score: f64, act: Option<usize>| ScoredCandidate {
            index: 0,
            score,
            logit: score,
            activated_assertion_id: act.and_then(|i| prep.assertion_ids.get(i).copied()),
        };
        Ok(match self.config.kind {
            ModelKind::Tfidf => raw(
                score_tfidf(&prep.message_ids, response, self.param(IDF)?.data()),
                None,
            ),
            ModelKind::Bow => raw(score_bow(&prep.message, &self.bag_of_words(response)?), None),
            ModelKind::BowKnowledge => {
                let (s, act) =
                    score_bow_knowledge(&prep.message, &prep.memory, &self.bag_of_words(response)?);
                raw(s, act)
            }
            ModelKind::Memnet => raw(
                score_memnet(&prep.message, &prep.memory, &self.bag_of_words(response)?),
                None,
            ),
            ModelKind::DualLstm => {
                let y = self.encode_response(response)?;
                let (score, logit) = score_dual(&prep.message, &y, self.param(BILINEAR)?)?;
                ScoredCandidate {
                    index: 0,
                    score,
                    logit,
                    activated_assertion_id: None,
                }
            }
            ModelKind::TriLstm => {
                let y = self.encode_response(response)?;
                let t = score_tri(&prep.message, &prep.memory, &y, self.param(BILINEAR)?, self.param(MATCH)?)?;
                ScoredCandidate {
                    index: 0,
                    score: t.score,
                    logit: t.logit,
                    activated_assertion_id: t.activated.and_then(|i| prep.assertion_ids.get(i).copied()),
                }
            }
        })
    }

    /// Scores every candidate and orders them best first (ties by index).
    pub fn rank<C: AsRef<[u32]>>(
        &self,
        message: &[u32],
        candidates: &[C],
        memory: &Memory,
    ) -> Result<Vec<ScoredCandidate>> {
        if candidates.is_empty() {
            return Err(Error::invalid("no candidates to rank"));
        }
        let prep = self.prepare(message, memory)?;
        let mut scored = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut s = self.score(&prep, c.as_ref())?;
                s.index = i;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let order = rank_order(&scores);
        let mut out = Vec::with_capacity(scored.len());
        for i in order {
            out.push(std::mem::replace(&mut scored[i], ScoredCandidate {
                index: usize::MAX,
                score: 0.0,
                logit: 0.0,
                activated_assertion_id: None,
            }));
        }
        Ok(out)
    }

    fn tape_handles(&self, tape: &mut Tape<'_>) -> Result<TapeHandles> {
        let kind = self.config.kind;
        let lstm = if kind.is_lstm() { Some(tape.lstm_vars(MESSAGE_LSTM)?) } else { None };
        let lstm_response = match (kind.is_lstm(), self.config.tie_message_response_weights) {
            (true, false) => Some(tape.lstm_vars(RESPONSE_LSTM)?),
            _ => lstm,
        };
        let lstm_assertion = match (kind, self.config.separate_assertion_encoder) {
            (ModelKind::TriLstm, true) => Some(tape.lstm_vars(ASSERTION_LSTM)?),
            (ModelKind::TriLstm, false) => lstm,
            _ => None,
        };
        Ok(TapeHandles {
            embedding: tape.param(EMBEDDING)?,
            lstm,
            lstm_response,
            lstm_assertion,
            bilinear: if kind.is_lstm() { Some(tape.param(BILINEAR)?) } else { None },
            match_: if kind == ModelKind::TriLstm { Some(tape.param(MATCH)?) } else { None },
        })
    }

    fn tape_embed(&self, tape: &mut Tape<'_>, h: &TapeHandles, ids: &[u32]) -> Result<Vec<Var>> {
        ids.iter().map(|&i| tape.row(h.embedding, i as usize)).collect()
    }

    fn tape_bag(&self, tape: &mut Tape<'_>, h: &TapeHandles, ids: &[u32]) -> Result<Var> {
        let rows = self.tape_embed(tape, h, ids)?;
        tape.sum(&rows, self.config.embedding_dim)
    }

    fn tape_lstm(&self, tape: &mut Tape<'_>, h: &TapeHandles, w: Option<LstmVars>, ids: &[u32]) -> Result<Var> {
        let rows = self.tape_embed(tape, h, ids)?;
        let w = w.ok_or_else(|| Error::invalid("model has no LSTM"))?;
        tape.lstm(&w, &rows)
    }

    /// Records the scorer's logit for one (message, response, memory) on
    /// `tape`. Max-pooling routes the gradient to the argmax assertion only.
    fn tape_logit_with(
        &self,
        tape: &mut Tape<'_>,
        h: &TapeHandles,
        message: &[u32],
        response: &[u32],
        memory: &Memory,
    ) -> Result<(Var, Option<usize>)> {
        match self.config.kind {
            ModelKind::Tfidf => Err(Error::invalid("tfidf has no trainable logit")),
            ModelKind::Bow | ModelKind::BowKnowledge | ModelKind::Memnet => {
                let x = self.tape_bag(tape, h, message)?;
                let y = self.tape_bag(tape, h, response)?;
                let base = tape.dot(x, y)?;
                if self.config.kind == ModelKind::Bow || memory.is_empty() {
                    return Ok((base, None));
                }
                let bags = memory
                    .sequences
                    .iter()
                    .map(|s| self.tape_bag(tape, h, s))
                    .collect::<Result<Vec<_>>>()?;
                if self.config.kind == ModelKind::BowKnowledge {
                    let scores = bags.iter().map(|&a| tape.dot(a, y)).collect::<Result<Vec<_>>>()?;
                    let best = argmax(tape, &scores);
                    let total = tape.sum(&[base, scores[best]], 1)?;
                    Ok((total, Some(best)))
                } else {
                    let att = bags.iter().map(|&a| tape.dot(x, a)).collect::<Result<Vec<_>>>()?;
                    let att = tape.concat(&att);
                    let p = tape.softmax(att);
                    let mut weighted = Vec::with_capacity(bags.len());
                    for (i, &a) in bags.iter().enumerate() {
                        let pi = tape.slice(p, i, 1)?;
                        weighted.push(tape.scale(pi, a)?);
                    }
                    let o = tape.sum(&weighted, self.config.embedding_dim)?;
                    let xo = tape.add(x, o)?;
                    Ok((tape.dot(xo, y)?, None))
                }
            }
            ModelKind::DualLstm | ModelKind::TriLstm => {
                let x = self.tape_lstm(tape, h, h.lstm, message)?;
                let y = self.tape_lstm(tape, h, h.lstm_response, response)?;
                let wy = tape.matvec(h.bilinear.unwrap(), y)?;
                let base = tape.dot(x, wy)?;
                if self.config.kind == ModelKind::DualLstm || memory.is_empty() {
                    return Ok((base, None));
                }
                let way = tape.matvec(h.match_.unwrap(), y)?;
                let mut scores = Vec::with_capacity(memory.len());
                for s in &memory.sequences {
                    let a = self.tape_lstm(tape, h, h.lstm_assertion, s)?;
                    scores.push(tape.dot(a, way)?);
                }
                let best = argmax(tape, &scores);
                let total = tape.sum(&[base, scores[best]], 1)?;
                Ok((total, Some(best)))
            }
        }
    }

    /// Logit of one pair on a fresh set of parameter handles.
    pub fn tape_logit(
        &self,
        tape: &mut Tape<'_>,
        message: &[u32],
        response: &[u32],
        memory: &Memory,
    ) -> Result<(Var, Option<usize>)> {
        let h = self.tape_handles(tape)?;
        self.tape_logit_with(tape, &h, message, response, memory)
    }

    /// Mean binary cross-entropy of `σ(logit)` over labelled examples,
    /// recorded on `tape`.
    pub fn tape_batch_loss<'m, I>(&self, tape: &mut Tape<'_>, batch: I) -> Result<Var>
    where
        I: IntoIterator<Item = (&'m [u32], &'m [u32], &'m Memory, f64)>,
    {
        let h = self.tape_handles(tape)?;
        let mut losses = Vec::new();
        for (m, r, mem, label) in batch {
            let (z, _) = self.tape_logit_with(tape, &h, m, r, mem)?;
            losses.push(tape.bce_logit(z, label)?);
        }
        tape.mean(&losses)
    }
}

/// Index of the largest scalar; ties go to the lowest index.
fn argmax(tape: &Tape<'_>, scores: &[Var]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if tape.scalar(s) > tape.scalar(scores[best]) {
            best = i;
        }
    }
    best
}

/// Desk-scale model used for gradient checks: V = 12, E = 8, D = 16.
pub const DESK_VOCAB: usize = 12;
pub const DESK_EMBEDDING: usize = 8;
pub const DESK_HIDDEN: usize = 16;

/// Runs the finite-difference checker on a desk-scale `kind` model whose
/// parameters are drawn uniformly from ±0.5, over a two-example batch with a
/// five-assertion memory. Parameter points where the max-pool argmax is not
/// separated by at least 1e-3 are redrawn so the max is differentiable.
pub fn desk_gradient_check(
    kind: ModelKind,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<crate::numeric::GradCheckReport> {
    if !kind.is_trainable() {
        return Err(Error::invalid(format!("{kind} has no trainable parameters")));
    }
    let memory = Memory {
        assertion_ids: vec![0, 1, 2, 3, 4],
        sequences: vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9], vec![10, 2], vec![11, 0, 3]],
    };
    let batch: [(&[u32], &[u32], f64); 2] = [(&[1, 3, 5, 0], &[2, 4, 11], 1.0), (&[0, 10, 6], &[6, 7, 1], 0.0)];
    let config = ModelConfig::new(kind, DESK_VOCAB, DESK_EMBEDDING, DESK_HIDDEN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = loop {
        let mut m = Model::init(config.clone(), rng.random())?;
        for id in 0..m.store.len() {
            for v in m.store.by_id_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        if m.max_pool_margin(&batch, &memory)? > 1e-3 {
            break m;
        }
    };
    let loss_and_grad = |store: &ParameterStore| {
        let m = Model { config: model.config.clone(), store: store.clone() };
        let mut tape = Tape::new(&m.store);
        let loss = m.tape_batch_loss(&mut tape, batch.iter().map(|&(x, y, l)| (x, y, &memory, l)))?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    };
    crate::numeric::finite_diff_check(loss_and_grad, &model.store, eps, samples, seed)
}

impl Model {
    /// Smallest gap between the best and second-best assertion match over
    /// the batch; infinite for models without max-pooling.
    fn max_pool_margin(&self, batch: &[(&[u32], &[u32], f64)], memory: &Memory) -> Result<f64> {
        if !matches!(self.config.kind, ModelKind::TriLstm | ModelKind::BowKnowledge) || memory.len() < 2 {
            return Ok(f64::INFINITY);
        }
        let prep = self.prepare(&[], memory)?;
        let mut margin = f64::INFINITY;
        for (_, y, _) in batch {
            let y_enc = self.encode_response(y)?;
            let mut scores = prep
                .memory
                .iter()
                .map(|a| match self.config.kind {
                    ModelKind::TriLstm => assertion_match(a, &y_enc, self.param(MATCH)?),
                    _ => Ok(dot(a, &y_enc)),
                })
                .collect::<Result<Vec<f64>>>()?;
            scores.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(scores[0] - scores[1]);
        }
        Ok(margin)
    }
}
