//! Commonsense assertion ingestion, the concept → assertions dictionary and
//! n-gram retrieval of the assertions relevant to a message.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_pipeline::Vocabulary;

pub const DEFAULT_MAX_N: usize = 5;

/// Relations of ConceptNet 5 that appear as plain symbols in the TSV format.
pub const CONCEPTNET_RELATIONS: &[&str] = &[
    "RelatedTo",
    "IsA",
    "PartOf",
    "HasA",
    "UsedFor",
    "CapableOf",
    "AtLocation",
    "Causes",
    "HasSubevent",
    "HasFirstSubevent",
    "HasLastSubevent",
    "HasPrerequisite",
    "HasProperty",
    "MotivatedByGoal",
    "ObstructedBy",
    "Desires",
    "CreatedBy",
    "Synonym",
    "Antonym",
    "DistinctFrom",
    "DerivedFrom",
    "SymbolOf",
    "DefinedAs",
    "MannerOf",
    "LocatedNear",
    "HasContext",
    "SimilarTo",
    "EtymologicallyRelatedTo",
    "CausesDesire",
    "MadeOf",
    "ReceivesAction",
    "FormOf",
    "NotDesires",
    "NotCapableOf",
    "NotHasProperty",
    "NotUsedFor",
    "InstanceOf",
    "Entails",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub concept1: String,
    pub relation: String,
    pub concept2: String,
    pub weight: f64,
}

impl Assertion {
    pub fn new(concept1: &str, relation: &str, concept2: &str) -> Self {
        Self {
            concept1: normalize_concept(concept1),
            relation: relation.to_owned(),
            concept2: normalize_concept(concept2),
            weight: 1.0,
        }
    }

    /// Token sequence fed to the assertion encoder: the words of the first
    /// concept, the relation as one token, then the words of the second.
    pub fn linearize(&self) -> Vec<String> {
        let mut out: Vec<String> = concept_words(&self.concept1).map(str::to_owned).collect();
        out.push(self.relation.clone());
        out.extend(concept_words(&self.concept2).map(str::to_owned));
        out
    }
}

impl std::fmt::Display for Assertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}, {}, {}", self.concept1, self.relation, self.concept2)
    }
}

fn concept_words(c: &str) -> impl Iterator<Item = &str> {
    c.split('_').filter(|w| !w.is_empty())
}

/// Lowercase, single underscores between words, no leading/trailing
/// underscores. Spaces count as word separators.
pub fn normalize_concept(raw: &str) -> String {
    let lower = raw.trim().to_lowercase().replace(' ', "_");
    concept_words(&lower).collect::<Vec<_>>().join("_")
}

fn is_english_concept(c: &str) -> bool {
    !c.is_empty() && c.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseWarnings {
    pub malformed: usize,
    pub unknown_relation: usize,
    pub non_english: usize,
}

impl ParseWarnings {
    pub fn total(&self) -> usize {
        self.malformed + self.unknown_relation + self.non_english
    }
}

/// Parses `relation \t concept1 \t concept2 [\t weight]` lines. Lines
/// starting with `#` and blank lines are ignored; bad lines are skipped
/// and counted, never fatal.
pub fn parse_assertions<S: AsRef<str>>(
    text: &str,
    relation_set: &[S],
) -> (Vec<Assertion>, ParseWarnings) {
    let relations: HashSet<&str> = relation_set.iter().map(AsRef::as_ref).collect();
    let mut out = Vec::new();
    let mut warn = ParseWarnings::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            log::warn!("assertions line {}: expected 3 or 4 fields", lineno + 1);
            warn.malformed += 1;
            continue;
        }
        let weight = match fields.get(3).map(|w| w.trim().parse::<f64>()) {
            None => 1.0,
            Some(Ok(w)) if w.is_finite() && w >= 0.0 => w,
            Some(_) => {
                log::warn!("assertions line {}: bad weight", lineno + 1);
                warn.malformed += 1;
                continue;
            }
        };
        let relation = fields[0].trim();
        if !relations.contains(relation) {
            warn.unknown_relation += 1;
            continue;
        }
        let c1 = normalize_concept(fields[1]);
        let c2 = normalize_concept(fields[2]);
        if c1.is_empty() || c2.is_empty() {
            warn.malformed += 1;
            continue;
        }
        if !is_english_concept(&c1) || !is_english_concept(&c2) {
            warn.non_english += 1;
            continue;
        }
        out.push(Assertion {
            concept1: c1,
            relation: relation.to_owned(),
            concept2: c2,
            weight,
        });
    }
    (out, warn)
}

/// Converts one line of a ConceptNet 5 CSV dump (`uri \t /r/Rel \t
/// /c/en/start[/pos] \t /c/en/end[/pos] \t {json}`) into the flat TSV
/// format. Returns `None` for non-English edges, relations with a `dbpedia`
/// or other namespace, and lines that do not follow the dump layout.
pub fn convert_conceptnet_line(line: &str) -> Option<String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 {
        return None;
    }
    let relation = fields[1].strip_prefix("/r/")?;
    if relation.contains('/') {
        return None;
    }
    let concept = |uri: &str| -> Option<String> {
        let rest = uri.strip_prefix("/c/en/")?;
        let term = rest.split('/').next()?;
        Some(normalize_concept(term))
    };
    let c1 = concept(fields[2])?;
    let c2 = concept(fields[3])?;
    let weight = fields
        .get(4)
        .and_then(|meta| serde_json::from_str::<serde_json::Value>(meta).ok())
        .and_then(|v| v.get("weight").and_then(serde_json::Value::as_f64))
        .unwrap_or(1.0);
    Some(format!("{relation}\t{c1}\t{c2}\t{weight}"))
}

/// Counters for what `KnowledgeIndex::build` filtered out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildCounts {
    pub input: usize,
    pub dropped_out_of_vocab: usize,
    pub dropped_no_key: usize,
    pub stopword_keys_skipped: usize,
    pub long_keys_skipped: usize,
}

/// The dictionary from concept keys to the assertions that mention them.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeIndex {
    assertions: Vec<Assertion>,
    entries: BTreeMap<String, Vec<u32>>,
    max_n: usize,
    stopwords: BTreeSet<String>,
    counts: BuildCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedConcept {
    pub key: String,
    pub position: usize,
}

/// Assertions retrieved for one message, de-duplicated in first-hit order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub assertion_ids: Vec<u32>,
    pub matched_concepts: Vec<MatchedConcept>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.assertion_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assertion_ids.is_empty()
    }
}

/// Porter stem of a lowercase word.
pub fn porter_stem(word: &str) -> String {
    porter_stemmer::stem(word)
}

const INDEX_FORMAT: &str = "kgsel-index";
const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    index: KnowledgeIndex,
}

impl KnowledgeIndex {
    /// Builds the dictionary. An assertion is dropped when any word of
    /// either concept (or its relation) is outside `vocab`. A concept becomes
    /// a key unless it is a stopword unigram or longer than `max_n` words.
    pub fn build<S: AsRef<str>>(
        assertions: &[Assertion],
        vocab: &Vocabulary,
        max_n: usize,
        stopwords: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        if max_n == 0 {
            return Err(Error::invalid("max_n must be at least 1"));
        }
        let stopwords: BTreeSet<String> =
            stopwords.into_iter().map(|s| s.as_ref().to_owned()).collect();
        let mut idx = Self {
            assertions: Vec::new(),
            entries: BTreeMap::new(),
            max_n,
            stopwords,
            counts: BuildCounts {
                input: assertions.len(),
                ..BuildCounts::default()
            },
        };
        for a in assertions {
            let in_vocab = vocab.contains(&a.relation)
                && concept_words(&a.concept1)
                    .chain(concept_words(&a.concept2))
                    .all(|w| vocab.contains(w));
            if !in_vocab {
                idx.counts.dropped_out_of_vocab += 1;
                continue;
            }
            let mut keys: Vec<&str> = Vec::with_capacity(2);
            for c in [a.concept1.as_str(), a.concept2.as_str()] {
                match idx.key_eligibility(c) {
                    KeyCheck::Ok => {
                        if !keys.contains(&c) {
                            keys.push(c);
                        }
                    }
                    KeyCheck::Stopword => idx.counts.stopword_keys_skipped += 1,
                    KeyCheck::TooLong => idx.counts.long_keys_skipped += 1,
                }
            }
            if keys.is_empty() {
                idx.counts.dropped_no_key += 1;
                continue;
            }
            let id = idx.assertions.len() as u32;
            for k in keys {
                idx.entries.entry(k.to_owned()).or_default().push(id);
            }
            idx.assertions.push(a.clone());
        }
        Ok(idx)
    }

    fn key_eligibility(&self, concept: &str) -> KeyCheck {
        let n = concept_words(concept).count();
        if n > self.max_n {
            KeyCheck::TooLong
        } else if n == 1 && self.stopwords.contains(concept) {
            KeyCheck::Stopword
        } else {
            KeyCheck::Ok
        }
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }

    pub fn is_stopword(&self, w: &str) -> bool {
        self.stopwords.contains(w)
    }

    pub fn counts(&self) -> &BuildCounts {
        &self.counts
    }

    pub fn assertions(&self) -> &[Assertion] {
        &self.assertions
    }

    pub fn assertion(&self, id: u32) -> Option<&Assertion> {
        self.assertions.get(id as usize)
    }

    pub fn lookup(&self, key: &str) -> &[u32] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn concept_count(&self) -> usize {
        self.entries.len()
    }

    /// Looks up every n-gram (n ≤ max_n) of the message. Unigrams skip
    /// stopwords and are tried both as written and stemmed; longer n-grams
    /// are matched on surface form only. Hits are appended by message
    /// position, then n, then index order, without duplicates.
    pub fn retrieve<S, F>(&self, tokens: &[S], stem: F) -> RetrievedSet
    where
        S: AsRef<str>,
        F: Fn(&str) -> String,
    {
        let mut out = RetrievedSet::default();
        let mut seen: HashSet<u32> = HashSet::new();
        let mut hit = |key: &str, pos: usize, out: &mut RetrievedSet| {
            if let Some(ids) = self.entries.get(key) {
                out.matched_concepts.push(MatchedConcept {
                    key: key.to_owned(),
                    position: pos,
                });
                for &id in ids {
                    if seen.insert(id) {
                        out.assertion_ids.push(id);
                    }
                }
            }
        };
        for start in 0..tokens.len() {
            let first = tokens[start].as_ref();
            if !self.stopwords.contains(first) {
                hit(first, start, &mut out);
                let stemmed = stem(first);
                if stemmed != first && !self.stopwords.contains(&stemmed) {
                    hit(&stemmed, start, &mut out);
                }
            }
            let mut key = first.to_owned();
            for end in start + 1..tokens.len().min(start + self.max_n) {
                key.push('_');
                key.push_str(tokens[end].as_ref());
                hit(&key, start, &mut out);
            }
        }
        out
    }

    pub fn retrieve_porter<S: AsRef<str>>(&self, tokens: &[S]) -> RetrievedSet {
        self.retrieve(tokens, porter_stem)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&IndexFile {
            format: INDEX_FORMAT.to_owned(),
            version: INDEX_VERSION,
            index: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(text)?;
        let bad = |detail: String| Error::Format {
            what: "knowledge index",
            detail,
        };
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let idx = file.index;
        if idx.max_n == 0 {
            return Err(bad("max_n is zero".into()));
        }
        for (k, ids) in &idx.entries {
            if concept_words(k).count() > idx.max_n {
                return Err(bad(format!("key `{k}` longer than max_n")));
            }
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= idx.assertions.len()) {
                return Err(bad(format!("key `{k}` refers to missing assertion {id}")));
            }
        }
        Ok(idx)
    }

    pub fn stats<S: AsRef<str>>(&self, messages: &[Vec<S>]) -> IndexStats {
        let concept_count = self.entries.len();
        let total_links: usize = self.entries.values().map(Vec::len).sum();
        let mut by_len = [0usize; 3];
        for k in self.entries.keys() {
            by_len[concept_words(k).count().clamp(1, 3) - 1] += 1;
        }
        let single = self.entries.values().filter(|v| v.len() == 1).count();
        let (mut concepts, mut retrieved, mut grounded) = (0usize, 0usize, 0usize);
        for m in messages {
            let r = self.retrieve_porter(m);
            let distinct: HashSet<&str> =
                r.matched_concepts.iter().map(|c| c.key.as_str()).collect();
            concepts += distinct.len();
            retrieved += r.len();
            grounded += usize::from(!r.is_empty());
        }
        let per = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        IndexStats {
            assertion_count: self.assertions.len(),
            concept_count,
            unigram_concepts: by_len[0],
            bigram_concepts: by_len[1],
            longer_concepts: by_len[2],
            single_assertion_concepts: single,
            mean_assertions_per_concept: per(total_links, concept_count),
            messages: messages.len(),
            mean_concepts_per_message: per(concepts, messages.len()),
            mean_retrieved_per_message: per(retrieved, messages.len()),
            grounded_message_fraction: per(grounded, messages.len()),
            build: self.counts.clone(),
        }
    }
}

enum KeyCheck {
    Ok,
    Stopword,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexStats {
    pub assertion_count: usize,
    pub concept_count: usize,
    pub unigram_concepts: usize,
    pub bigram_concepts: usize,
    pub longer_concepts: usize,
    pub single_assertion_concepts: usize,
    pub mean_assertions_per_concept: f64,
    pub messages: usize,
    pub mean_concepts_per_message: f64,
    pub mean_retrieved_per_message: f64,
    pub grounded_message_fraction: f64,
    pub build: BuildCounts,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_pipeline::{default_stopwords, preprocess};

    fn vocab_of(words: &[&str]) -> Vocabulary {
        Vocabulary::build(&[words.to_vec()], 1, CONCEPTNET_RELATIONS).unwrap()
    }

    #[test]
    fn parse_case_study_lines() {
        let text = "IsA\tchinese\thuman_language\nIsA\tbonjour\thello_in_french\n";
        let (a, w) = parse_assertions(text, CONCEPTNET_RELATIONS);
        assert_eq!(w.total(), 0);
        assert_eq!(a[0], Assertion::new("chinese", "IsA", "human_language"));
        assert_eq!(a[1], Assertion::new("bonjour", "IsA", "hello_in_french"));
        assert_eq!(a[1].weight, 1.0);
    }

    #[test]
    fn parse_skips_and_counts() {
        let text = "# comment\n\nIsA\tdog\npet\nFoo\tdog\tpet\nIsA\tcafé\tplace\nIsA\tdog\tpet\t-1\nIsA\tDog\tgood__boy\t2.5\n";
        let (a, w) = parse_assertions(text, CONCEPTNET_RELATIONS);
        assert_eq!(a, vec![Assertion {
            concept1: "dog".into(),
            relation: "IsA".into(),
            concept2: "good_boy".into(),
            weight: 2.5
        }]);
        assert_eq!(w, ParseWarnings { malformed: 3, unknown_relation: 1, non_english: 1 });
        let (a, w) = parse_assertions("", CONCEPTNET_RELATIONS);
        assert!(a.is_empty());
        assert_eq!(w.total(), 0);
    }

    #[test]
    fn conceptnet_conversion() {
        let line = "/a/[/r/IsA/,/c/en/dog/n/,/c/en/pet/]\t/r/IsA\t/c/en/dog/n\t/c/en/pet\t{\"weight\": 2.0}";
        assert_eq!(convert_conceptnet_line(line).unwrap(), "IsA\tdog\tpet\t2");
        let fr = "/a/x\t/r/IsA\t/c/fr/chien\t/c/en/dog\t{}";
        assert!(convert_conceptnet_line(fr).is_none());
        let db = "/a/x\t/r/dbpedia/genre\t/c/en/a\t/c/en/b\t{}";
        assert!(convert_conceptnet_line(db).is_none());
    }

    #[test]
    fn linearize_examples() {
        let a = Assertion::new("take_a_stand", "UsedFor", "debate");
        assert_eq!(a.linearize(), ["take", "a", "stand", "UsedFor", "debate"]);
        let a = Assertion::new("insomnia", "IsA", "sleep_problem");
        assert_eq!(a.linearize(), ["insomnia", "IsA", "sleep", "problem"]);
        let a = Assertion::new("Hawaii", "UsedFor", "tourism");
        assert_eq!(a.linearize(), ["hawaii", "UsedFor", "tourism"]);
    }

    #[test]
    fn build_basic_and_multiword() {
        let v = vocab_of(&["dog", "pet", "go", "shopping", "fun"]);
        let idx = KnowledgeIndex::build(
            &[Assertion::new("dog", "IsA", "pet"), Assertion::new("go_shopping", "IsA", "fun")],
            &v,
            5,
            default_stopwords(),
        )
        .unwrap();
        assert_eq!(idx.keys().collect::<Vec<_>>(), ["dog", "fun", "go_shopping", "pet"]);
        assert_eq!(idx.lookup("dog"), [0]);
        assert_eq!(idx.lookup("pet"), [0]);
        assert_eq!(idx.lookup("go_shopping"), [1]);
    }

    #[test]
    fn build_filters_oov_stopwords_and_long_keys() {
        let v = vocab_of(&["dog", "pet", "the", "a", "b", "c"]);
        let idx = KnowledgeIndex::build(
            &[
                Assertion::new("wolf", "IsA", "pet"),
                Assertion::new("the", "RelatedTo", "dog"),
                Assertion::new("a_b_c", "RelatedTo", "dog"),
            ],
            &v,
            2,
            default_stopwords(),
        )
        .unwrap();
        assert_eq!(idx.assertions().len(), 2);
        assert!(idx.lookup("pet").is_empty());
        assert!(idx.lookup("the").is_empty());
        assert!(idx.lookup("a_b_c").is_empty());
        assert_eq!(idx.lookup("dog"), [0, 1]);
        let c = idx.counts();
        assert_eq!((c.dropped_out_of_vocab, c.stopword_keys_skipped, c.long_keys_skipped), (1, 1, 1));
    }

    fn case_study_index() -> KnowledgeIndex {
        let words = preprocess("i was helping my brother with his chinese human language bonjour madame quoi de neuf hello in french");
        let v = vocab_of(&words.iter().map(String::as_str).collect::<Vec<_>>());
        KnowledgeIndex::build(
            &[
                Assertion::new("chinese", "IsA", "human_language"),
                Assertion::new("bonjour", "IsA", "hello_in_french"),
            ],
            &v,
            DEFAULT_MAX_N,
            default_stopwords(),
        )
        .unwrap()
    }

    #[test]
    fn retrieve_case_study_messages() {
        let idx = case_study_index();
        let r = idx.retrieve_porter(&preprocess("i was helping my brother with his chinese."));
        assert_eq!(r.assertion_ids, [0]);
        let r = idx.retrieve_porter(&preprocess("bonjour madame, quoi de neuf."));
        assert_eq!(r.assertion_ids, [1]);
        assert_eq!(r.matched_concepts, [MatchedConcept { key: "bonjour".into(), position: 0 }]);
        let r = idx.retrieve_porter(&preprocess("nothing here at all"));
        assert!(r.is_empty() && r.matched_concepts.is_empty());
    }

    #[test]
    fn retrieve_uses_stems_and_dedups() {
        let v = vocab_of(&["run", "sport", "new", "york", "city"]);
        let idx = KnowledgeIndex::build(
            &[
                Assertion::new("run", "IsA", "sport"),
                Assertion::new("new_york", "IsA", "city"),
                Assertion::new("york", "IsA", "city"),
            ],
            &v,
            5,
            default_stopwords(),
        )
        .unwrap();
        let r = idx.retrieve_porter(&["running", "sport"]);
        assert_eq!(r.assertion_ids, [0]);
        assert_eq!(r.matched_concepts.len(), 2);
        let r = idx.retrieve_porter(&["new", "york"]);
        assert_eq!(r.assertion_ids, [1, 2]);
    }

    #[test]
    fn stats_hand_count() {
        let v = vocab_of(&["k", "x", "y", "z", "p", "q", "r", "s", "t", "u", "w", "m"]);
        let a = |c1: &str, c2: &str| Assertion::new(c1, "RelatedTo", c2);
        // keys x (2 assertions), y (3), z (5), no overlap between them
        let kb = vec![
            a("x", "p"), a("x", "q"),
            a("y", "r"), a("y", "s"), a("y", "t"),
            a("z", "u"), a("z", "w"), a("z", "m"), a("z", "k"), a("z", "k"),
        ];
        let idx = KnowledgeIndex::build(&kb, &v, 5, default_stopwords()).unwrap();
        let st = idx.stats(&[vec!["x", "y", "z"]]);
        assert_eq!(st.mean_concepts_per_message, 3.0);
        assert_eq!(st.mean_retrieved_per_message, 10.0);

        let idx = KnowledgeIndex::build(&[a("x", "p")], &v, 5, default_stopwords()).unwrap();
        assert_eq!(idx.stats::<&str>(&[]).mean_assertions_per_concept, 1.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let v = vocab_of(&["a", "b", "c"]);
        let mut kb = vec![Assertion::new("a", "IsA", "b_c")];
        kb[0].weight = 0.1 + 0.2;
        let idx = KnowledgeIndex::build(&kb, &v, 5, default_stopwords()).unwrap();
        let s = idx.to_json().unwrap();
        let back = KnowledgeIndex::from_json(&s).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.assertions()[0].weight.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.to_json().unwrap(), s);
        let broken = s.replace("\"version\":1", "\"version\":9");
        assert!(KnowledgeIndex::from_json(&broken).is_err());
    }
}
