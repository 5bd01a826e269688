//! Utterance normalization, tokenization and the vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const URL_TOKEN: &str = "⟨url⟩";
pub const EMOTICON_TOKEN: &str = "⟨emoticon⟩";
pub const HASHTAG_TOKEN: &str = "⟨hashtag⟩";
pub const USER_TOKEN: &str = "@user";
pub const UNK_TOKEN: &str = "⟨unk⟩";

const STOPWORDS_TXT: &str = include_str!("../data/stopwords.txt");
const EMOTICONS_TXT: &str = include_str!("../data/emoticons.txt");

fn list_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// The checked-in English stopword list.
pub fn default_stopwords() -> HashSet<String> {
    list_lines(STOPWORDS_TXT).map(str::to_owned).collect()
}

fn emoticons() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| list_lines(EMOTICONS_TXT).map(str::to_lowercase).collect())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?i)(https?://|www\.)\S+$").unwrap())
}

fn handle_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@(\w+)(.*)$").unwrap())
}

fn hashtag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^#(\w+)(.*)$").unwrap())
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_placeholder(tok: &str) -> bool {
    matches!(tok, URL_TOKEN | EMOTICON_TOKEN | HASHTAG_TOKEN | USER_TOKEN)
}

/// Splits a piece of text into runs of word characters and single
/// punctuation characters.
fn split_punct(piece: &str, out: &mut Vec<String>) {
    let mut word = String::new();
    for c in piece.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
}

fn normalize_piece(piece: &str, out: &mut Vec<String>) {
    if is_placeholder(piece) {
        out.push(piece.to_owned());
        return;
    }
    if url_re().is_match(piece) {
        out.push(URL_TOKEN.to_owned());
        return;
    }
    let lower = piece.to_lowercase();
    if emoticons().contains(&lower) {
        out.push(EMOTICON_TOKEN.to_owned());
        return;
    }
    if let Some(caps) = handle_re().captures(&lower) {
        out.push(USER_TOKEN.to_owned());
        split_punct(&caps[2], out);
        return;
    }
    if let Some(caps) = hashtag_re().captures(&lower) {
        out.push(HASHTAG_TOKEN.to_owned());
        split_punct(&caps[1], out);
        split_punct(&caps[2], out);
        return;
    }
    split_punct(&lower, out);
}

/// Lowercases and replaces URLs, user handles, hashtags and emoticons with
/// placeholder tokens, then spaces out punctuation. Idempotent.
pub fn normalize(raw: &str) -> String {
    let mut toks = Vec::new();
    for piece in raw.split_whitespace() {
        normalize_piece(piece, &mut toks);
    }
    toks.join(" ")
}

/// Whitespace split with punctuation separated into standalone tokens.
/// Placeholder tokens are kept whole.
pub fn tokenize(normalized: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in normalized.split_whitespace() {
        if is_placeholder(piece) {
            out.push(piece.to_owned());
        } else {
            split_punct(piece, &mut out);
        }
    }
    out
}

/// `tokenize(normalize(raw))`.
pub fn preprocess(raw: &str) -> Vec<String> {
    tokenize(&normalize(raw))
}

/// Token ↔ id map. Ids are dense, corpus tokens first (by descending
/// frequency, ties alphabetical), then the unknown token, then relation
/// symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    unk_id: u32,
    min_freq: usize,
    relation_tokens: Vec<String>,
}

impl Vocabulary {
    fn from_parts(
        id_to_token: Vec<String>,
        unk_id: u32,
        min_freq: usize,
        relation_tokens: Vec<String>,
    ) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("duplicate token `{t}`"),
                });
            }
        }
        if unk_id as usize >= id_to_token.len() {
            return Err(Error::Format {
                what: "vocabulary",
                detail: format!("unk id {unk_id} out of range"),
            });
        }
        for r in &relation_tokens {
            if !token_to_id.contains_key(r) {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("relation `{r}` has no id"),
                });
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            unk_id,
            min_freq,
            relation_tokens,
        })
    }

    /// Counts tokens over `corpus` and keeps those seen at least `min_freq`
    /// times. Relation symbols always get an id.
    pub fn build<I, S>(corpus: I, min_freq: usize, relations: &[S]) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: IntoIterator,
        <I::Item as IntoIterator>::Item: AsRef<str>,
        S: AsRef<str>,
    {
        if min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in line {
                *counts.entry(tok.as_ref().to_owned()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = kept.into_iter().map(|(t, _)| t).collect();
        let unk_id = id_to_token.len() as u32;
        id_to_token.push(UNK_TOKEN.to_owned());
        let mut relation_tokens = Vec::new();
        for r in relations {
            let r = r.as_ref().to_owned();
            if !id_to_token.contains(&r) {
                id_to_token.push(r.clone());
            }
            if !relation_tokens.contains(&r) {
                relation_tokens.push(r);
            }
        }
        Self::from_parts(id_to_token, unk_id, min_freq, relation_tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn relation_tokens(&self) -> &[String] {
        &self.relation_tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|t| t.as_ref().to_owned()).collect(),
            ids: tokens.iter().map(|t| self.id(t.as_ref())).collect(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_owned())
            .collect()
    }

    /// Serializes to the line format: one header line, then one token per
    /// line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "#kgsel-vocab v1 size={} min_freq={} unk={} relations={}",
            self.len(),
            self.min_freq,
            self.unk_id,
            self.relation_tokens.join(",")
        )
        .unwrap();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "vocabulary",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some("#kgsel-vocab") || fields.next() != Some("v1") {
            return Err(bad(format!("bad header `{header}`")));
        }
        let (mut size, mut min_freq, mut unk, mut relations) = (None, None, None, Vec::new());
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header field `{f}`")))?;
            let num = || v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "size" => size = Some(num()?),
                "min_freq" => min_freq = Some(num()?),
                "unk" => unk = Some(num()? as u32),
                "relations" => {
                    relations = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_owned)
                        .collect()
                }
                _ => return Err(bad(format!("unknown header field `{k}`"))),
            }
        }
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        let size = size.ok_or_else(|| bad("missing size".into()))?;
        if tokens.len() != size {
            return Err(bad(format!("expected {size} tokens, found {}", tokens.len())));
        }
        Self::from_parts(
            tokens,
            unk.ok_or_else(|| bad("missing unk".into()))?,
            min_freq.ok_or_else(|| bad("missing min_freq".into()))?,
            relations,
        )
    }
}

/// Surface tokens with their vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}
