use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_index::{KnowledgeIndex, RetrievedSet};
use crate::scoring_models::Memory;
use crate::text_pipeline::{preprocess, TokenSequence, Vocabulary};

pub const DEFAULT_DISTRACTORS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub message: TokenSequence,
    pub response: TokenSequence,
}

impl DialoguePair {
    /// Normalizes, tokenizes and encodes raw text.
    pub fn from_text(vocab: &Vocabulary, message: &str, response: &str) -> Self {
        Self {
            message: vocab.encode(&preprocess(message)),
            response: vocab.encode(&preprocess(response)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub message: TokenSequence,
    pub response: TokenSequence,
    pub label: u8,
}

/// Vocabulary and index used to turn a message into its memory.
#[derive(Debug, Clone, Copy)]
pub struct Grounding<'a> {
    pub vocab: &'a Vocabulary,
    pub index: &'a KnowledgeIndex,
}

impl<'a> Grounding<'a> {
    pub fn new(vocab: &'a Vocabulary, index: &'a KnowledgeIndex) -> Self {
        Self { vocab, index }
    }

    pub fn retrieve(&self, message: &TokenSequence) -> RetrievedSet {
        self.index.retrieve_porter(&message.tokens)
    }

    /// Linearized, encoded assertions of a retrieved set.
    pub fn memory(&self, retrieved: &RetrievedSet) -> Memory {
        let sequences = retrieved
            .assertion_ids
            .iter()
            .map(|&id| {
                let a = self.index.assertion(id).expect("retrieved ids come from the index");
                self.vocab.encode(&a.linearize()).ids
            })
            .collect();
        Memory {
            assertion_ids: retrieved.assertion_ids.clone(),
            sequences,
        }
    }

    pub fn ground(&self, message: &TokenSequence) -> (RetrievedSet, Memory) {
        let r = self.retrieve(message);
        let m = self.memory(&r);
        (r, m)
    }
}

/// One positive triple per pair plus one negative whose response comes
/// from a different pair (redrawn while it equals the ground truth). The
/// result is shuffled under `seed`.
pub fn build_training_set(pairs: &[DialoguePair], seed: u64) -> Result<Vec<LabeledTriple>> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 pairs to draw negatives, got {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (i, p) in pairs.iter().enumerate() {
        out.push(LabeledTriple {
            message: p.message.clone(),
            response: p.response.clone(),
            label: 1,
        });
        let mut tries = 0;
        let negative = loop {
            let mut j = rng.random_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            if pairs[j].response.tokens != p.response.tokens {
                break &pairs[j].response;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::invalid(format!(
                    "pair {i}: every other response equals its ground truth"
                )));
            }
        };
        out.push(LabeledTriple {
            message: p.message.clone(),
            response: negative.clone(),
            label: 0,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn has_content_word(tokens: &[String], stopwords: &BTreeSet<String>) -> bool {
    tokens
        .iter()
        .any(|t| t.chars().any(char::is_alphanumeric) && !stopwords.contains(t))
}

/// Keeps pairs whose message and response both have at least 3 tokens and
/// a non-stopword word, and whose message hits at least one concept.
pub fn filter_eval_pairs(
    pairs: &[DialoguePair],
    index: &KnowledgeIndex,
    stopwords: &BTreeSet<String>,
) -> Vec<DialoguePair> {
    pairs
        .iter()
        .filter(|p| {
            p.message.len() >= 3
                && p.response.len() >= 3
                && has_content_word(&p.message.tokens, stopwords)
                && has_content_word(&p.response.tokens, stopwords)
                && !index
                    .retrieve_porter(&p.message.tokens)
                    .matched_concepts
                    .is_empty()
        })
        .cloned()
        .collect()
}

/// A message, its ground-truth response and K−1 distractors. The ground
/// truth sits at `gt_position` of [`EvalInstance::candidates`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub message: TokenSequence,
    pub ground_truth: TokenSequence,
    pub distractors: Vec<TokenSequence>,
    pub gt_position: usize,
    pub retrieved: RetrievedSet,
    pub memory: Arc<Memory>,
}

impl EvalInstance {
    pub fn num_candidates(&self) -> usize {
        self.distractors.len() + 1
    }

    pub fn candidates(&self) -> Vec<&TokenSequence> {
        let mut c: Vec<&TokenSequence> = self.distractors.iter().collect();
        c.insert(self.gt_position, &self.ground_truth);
        c
    }

    pub fn candidate_ids(&self) -> Vec<&[u32]> {
        self.candidates().into_iter().map(|c| c.ids.as_slice()).collect()
    }
}

/// Builds one instance per pair with `distractor_count` responses sampled
/// without replacement from the other pairs, skipping exact copies of the
/// ground truth. The ground truth position is uniform under `seed`.
pub fn make_candidate_sets(
    pairs: &[DialoguePair],
    distractor_count: usize,
    seed: u64,
    grounding: Option<Grounding<'_>>,
) -> Result<Vec<EvalInstance>> {
    if pairs.len() <= distractor_count {
        return Err(Error::invalid(format!(
            "{} pairs cannot supply {distractor_count} distractors each",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut chosen: Vec<TokenSequence> = Vec::with_capacity(distractor_count);
        let mut used: BTreeSet<usize> = BTreeSet::new();
        used.insert(i);
        while chosen.len() < distractor_count {
            let need = distractor_count - chosen.len();
            let available: Vec<usize> = (0..pairs.len()).filter(|j| !used.contains(j)).collect();
            if available.len() < need {
                return Err(Error::invalid(format!(
                    "pair {i}: not enough responses distinct from the ground truth"
                )));
            }
            for k in index::sample(&mut rng, available.len(), need) {
                let j = available[k];
                used.insert(j);
                if pairs[j].response.tokens != p.response.tokens {
                    chosen.push(pairs[j].response.clone());
                }
            }
        }
        let gt_position = rng.random_range(0..=distractor_count);
        let (retrieved, memory) = match grounding {
            Some(g) => g.ground(&p.message),
            None => (RetrievedSet::default(), Memory::empty()),
        };
        out.push(EvalInstance {
            message: p.message.clone(),
            ground_truth: p.response.clone(),
            distractors: chosen,
            gt_position,
            retrieved,
            memory: Arc::new(memory),
        });
    }
    Ok(out)
}
