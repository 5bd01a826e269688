//! Planted-knowledge corpus: messages mention a rare concept token, the
//! ground-truth response carries that concept's signal token, and the only
//! link between the two is a knowledge-base assertion.
//!
//! Token families: `cpt{k}x{j}` surface forms (aliases) of concept `k`,
//! `sig{k}` signals, `cat{c}` decoy objects (knowledge base only) and `w{i}`
//! fillers. Each alias is rare in the corpus, so a model without the
//! knowledge base sees too few examples of it to learn its signal, while
//! every alias has its own planted assertion.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knowledge_index::Assertion;

pub const SIGNAL_RELATION: &str = "RelatedTo";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub n_concepts: usize,
    /// Distinct surface tokens per concept.
    pub aliases_per_concept: usize,
    pub n_fillers: usize,
    /// Filler tokens per message (the concept token is added on top).
    pub message_len: usize,
    /// Filler tokens per response (the signal token is added on top).
    pub response_len: usize,
    /// Extra assertions per alias pointing at decoy objects.
    pub decoys_per_concept: usize,
    pub n_decoy_objects: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 5000,
            n_concepts: 200,
            aliases_per_concept: 8,
            n_fillers: 400,
            message_len: 4,
            response_len: 4,
            decoys_per_concept: 3,
            n_decoy_objects: 50,
            noise_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<(String, String)>,
    /// Concept of each pair.
    pub pair_concepts: Vec<usize>,
    /// Alias of the concept used in each pair's message.
    pub pair_aliases: Vec<usize>,
    /// Every assertion of the synthetic knowledge base.
    pub assertions: Vec<Assertion>,
    /// `planted_signal[k][j]`: the signal the planted assertion of alias `j`
    /// of concept `k` points to; not `k` for noisy assertions.
    pub planted_signal: Vec<Vec<usize>>,
}

pub fn concept_token(k: usize, alias: usize) -> String {
    format!("cpt{k}x{alias}")
}

pub fn signal_token(k: usize) -> String {
    format!("sig{k}")
}

impl SynthCorpus {
    pub fn is_noisy(&self, concept: usize, alias: usize) -> bool {
        self.planted_signal[concept][alias] != concept
    }

    pub fn noisy_count(&self) -> usize {
        (0..self.planted_signal.len())
            .flat_map(|k| (0..self.planted_signal[k].len()).map(move |j| (k, j)))
            .filter(|&(k, j)| self.is_noisy(k, j))
            .count()
    }

    /// `relation \t concept1 \t concept2` lines.
    pub fn assertions_tsv(&self) -> String {
        let mut out = String::new();
        for a in &self.assertions {
            writeln!(out, "{}\t{}\t{}", a.relation, a.concept1, a.concept2).unwrap();
        }
        out
    }
}

/// Generates the corpus. Concepts are assigned to pairs by cycling through
/// a shuffled order, so every concept is used ⌊n/c⌋ or ⌈n/c⌉ times; the
/// alias is drawn uniformly. A `noise_rate` fraction of planted assertions
/// (rounded) point to a wrong signal.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_pairs == 0 || cfg.n_concepts < 2 || cfg.n_fillers == 0 || cfg.aliases_per_concept == 0 {
        return Err(Error::invalid(
            "n_pairs, n_fillers, aliases_per_concept must be positive and n_concepts ≥ 2",
        ));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::invalid(format!("noise_rate {} outside [0, 1)", cfg.noise_rate)));
    }
    if cfg.decoys_per_concept > cfg.n_decoy_objects {
        return Err(Error::invalid("more decoys per concept than decoy objects"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_aliases = cfg.aliases_per_concept;
    let n_planted = cfg.n_concepts * n_aliases;
    let n_noisy = (cfg.noise_rate * n_planted as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_planted).collect();
    order.shuffle(&mut rng);
    let mut planted_signal: Vec<Vec<usize>> = (0..cfg.n_concepts).map(|k| vec![k; n_aliases]).collect();
    for &p in &order[..n_noisy] {
        let k = p / n_aliases;
        let mut wrong = rng.random_range(0..cfg.n_concepts - 1);
        if wrong >= k {
            wrong += 1;
        }
        planted_signal[k][p % n_aliases] = wrong;
    }

    let mut assertions = Vec::new();
    for (k, signals) in planted_signal.iter().enumerate() {
        for (j, &sig) in signals.iter().enumerate() {
            let mut objects: Vec<String> =
                rand::seq::index::sample(&mut rng, cfg.n_decoy_objects, cfg.decoys_per_concept)
                    .into_iter()
                    .map(|c| format!("cat{c}"))
                    .collect();
            objects.push(signal_token(sig));
            objects.shuffle(&mut rng);
            for o in objects {
                assertions.push(Assertion::new(&concept_token(k, j), SIGNAL_RELATION, &o));
            }
        }
    }

    let mut cycle: Vec<usize> = (0..cfg.n_concepts).collect();
    cycle.shuffle(&mut rng);
    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..cfg.n_fillers));
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut pair_concepts = Vec::with_capacity(cfg.n_pairs);
    let mut pair_aliases = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let k = cycle[i % cfg.n_concepts];
        let j = rng.random_range(0..n_aliases);
        let mut msg: Vec<String> = (0..cfg.message_len).map(|_| filler(&mut rng)).collect();
        msg.insert(rng.random_range(0..=msg.len()), concept_token(k, j));
        let mut resp: Vec<String> = (0..cfg.response_len).map(|_| filler(&mut rng)).collect();
        resp.insert(rng.random_range(0..=resp.len()), signal_token(k));
        pairs.push((msg.join(" "), resp.join(" ")));
        pair_concepts.push(k);
        pair_aliases.push(j);
    }
    Ok(SynthCorpus {
        pairs,
        pair_concepts,
        pair_aliases,
        assertions,
        planted_signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_index::{parse_assertions, KnowledgeIndex, CONCEPTNET_RELATIONS};
    use crate::text_pipeline::{preprocess, Vocabulary};
    use crate::train_eval::{make_candidate_sets, recall_at_k_with, DialoguePair, Grounding};

    fn small(noise: f64, n_pairs: usize) -> SynthConfig {
        SynthConfig {
            n_pairs,
            n_concepts: 60,
            aliases_per_concept: 3,
            n_fillers: 40,
            noise_rate: noise,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    fn grounded(c: &SynthCorpus) -> (Vocabulary, KnowledgeIndex) {
        let (parsed, warn) = parse_assertions(&c.assertions_tsv(), CONCEPTNET_RELATIONS);
        assert_eq!(warn.total(), 0);
        let mut corpus: Vec<Vec<String>> = c.pairs.iter().flat_map(|(m, r)| [preprocess(m), preprocess(r)]).collect();
        corpus.extend(parsed.iter().map(Assertion::linearize));
        let vocab = Vocabulary::build(&corpus, 1, CONCEPTNET_RELATIONS).unwrap();
        let idx = KnowledgeIndex::build(&parsed, &vocab, 5, Vec::<String>::new()).unwrap();
        assert_eq!(idx.assertions().len(), parsed.len());
        (vocab, idx)
    }

    #[test]
    fn noiseless_planted_signal_in_ground_truth() {
        let c = synth_corpus(&small(0.0, 300)).unwrap();
        assert_eq!(c.noisy_count(), 0);
        for (i, (m, r)) in c.pairs.iter().enumerate() {
            let (k, j) = (c.pair_concepts[i], c.pair_aliases[i]);
            assert!(m.split(' ').any(|t| t == concept_token(k, j)));
            assert!(r.split(' ').any(|t| t == signal_token(c.planted_signal[k][j])));
        }
    }

    #[test]
    fn noise_count_and_concept_balance() {
        let c = synth_corpus(&small(0.15, 300)).unwrap();
        assert_eq!(c.noisy_count(), 27);
        let mut uses = vec![0; 60];
        for &k in &c.pair_concepts {
            uses[k] += 1;
        }
        assert!(uses.iter().all(|&u| u == 5));
        assert_eq!(c, synth_corpus(&small(0.15, 300)).unwrap());
        assert!(synth_corpus(&small(1.0, 10)).is_err());
    }

    #[test]
    fn every_message_retrieves_its_planted_assertion() {
        let c = synth_corpus(&small(0.15, 300)).unwrap();
        let (vocab, idx) = grounded(&c);
        for (i, (m, _)) in c.pairs.iter().enumerate() {
            let (k, j) = (c.pair_concepts[i], c.pair_aliases[i]);
            let r = idx.retrieve_porter(&preprocess(m));
            let objects: Vec<&str> = r
                .assertion_ids
                .iter()
                .map(|&id| idx.assertion(id).unwrap().concept2.as_str())
                .collect();
            assert!(objects.contains(&signal_token(c.planted_signal[k][j]).as_str()));
            assert_eq!(r.len(), 4);
        }
        assert!(vocab.contains("cat0"));
    }

    #[test]
    fn lookup_rule_is_perfect_without_noise() {
        let c = synth_corpus(&small(0.0, 60)).unwrap();
        let (vocab, idx) = grounded(&c);
        let pairs: Vec<DialoguePair> = c.pairs.iter().map(|(m, r)| DialoguePair::from_text(&vocab, m, r)).collect();
        let inst = make_candidate_sets(&pairs, 9, 3, Some(Grounding::new(&vocab, &idx))).unwrap();
        let r1 = recall_at_k_with(&inst, 1, |i| {
            let signals: Vec<&str> = i
                .retrieved
                .assertion_ids
                .iter()
                .map(|&id| idx.assertion(id).unwrap().concept2.as_str())
                .filter(|o| o.starts_with("sig"))
                .collect();
            Ok(i.candidates()
                .iter()
                .map(|c| c.tokens.iter().any(|t| signals.contains(&t.as_str())) as u8 as f64)
                .collect())
        })
        .unwrap();
        assert_eq!(r1, 1.0);
    }
}
