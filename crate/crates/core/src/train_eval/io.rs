//! File formats: pairs TSV, eval-instance and metrics JSON lines, loss
//! traces and GloVe-style pretrained embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring_models::{Model, EMBEDDING};
use crate::text_pipeline::{TokenSequence, Vocabulary};

use super::dataset::{EvalInstance, Grounding, LabeledTriple};
use super::eval::MetricRecord;
use super::train::EpochRecord;

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `message \t response` lines. Blank lines are skipped.
pub fn parse_pairs_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (m, r) = line.split_once('\t').ok_or_else(|| Error::Format {
            what: "pairs file",
            detail: format!("line {}: expected `message<TAB>response`", n + 1),
        })?;
        if r.contains('\t') {
            return Err(Error::Format {
                what: "pairs file",
                detail: format!("line {}: more than two fields", n + 1),
            });
        }
        out.push((m.to_owned(), r.to_owned()));
    }
    Ok(out)
}

pub fn pairs_to_tsv(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (m, r) in pairs {
        writeln!(out, "{m}\t{r}").unwrap();
    }
    out
}

/// On-disk form of an [`EvalInstance`]: token text only; retrieval is
/// recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub message: String,
    pub ground_truth: String,
    pub distractors: Vec<String>,
    pub gt_position: usize,
}

pub fn instances_to_jsonl(instances: &[EvalInstance]) -> Result<String> {
    let mut out = String::new();
    for i in instances {
        let rec = EvalRecord {
            message: i.message.text(),
            ground_truth: i.ground_truth.text(),
            distractors: i.distractors.iter().map(TokenSequence::text).collect(),
            gt_position: i.gt_position,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads instances written by [`instances_to_jsonl`]. Texts are already
/// tokenized and are split on single spaces.
pub fn instances_from_jsonl(
    text: &str,
    vocab: &Vocabulary,
    grounding: Option<Grounding<'_>>,
) -> Result<Vec<EvalInstance>> {
    let encode = |s: &str| encode_spaced(vocab, s);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            what: "eval instances",
            detail: format!("line {}: {e}", n + 1),
        })?;
        if rec.gt_position > rec.distractors.len() {
            return Err(Error::Format {
                what: "eval instances",
                detail: format!("line {}: gt_position out of range", n + 1),
            });
        }
        let message = encode(&rec.message);
        let (retrieved, memory) = match grounding {
            Some(g) => g.ground(&message),
            None => Default::default(),
        };
        out.push(EvalInstance {
            message,
            ground_truth: encode(&rec.ground_truth),
            distractors: rec.distractors.iter().map(|d| encode(d)).collect(),
            gt_position: rec.gt_position,
            retrieved,
            memory: Arc::new(memory),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    message: String,
    response: String,
    label: u8,
}

pub fn triples_to_jsonl(triples: &[LabeledTriple]) -> Result<String> {
    let mut out = String::new();
    for t in triples {
        let rec = TripleRecord {
            message: t.message.text(),
            response: t.response.text(),
            label: t.label,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn triples_from_jsonl(text: &str, vocab: &Vocabulary) -> Result<Vec<LabeledTriple>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            what: "training triples",
            detail: format!("line {}: {detail}", n + 1),
        };
        let rec: TripleRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.label > 1 {
            return Err(bad(format!("label {} is not 0 or 1", rec.label)));
        }
        out.push(LabeledTriple {
            message: encode_spaced(vocab, &rec.message),
            response: encode_spaced(vocab, &rec.response),
            label: rec.label,
        });
    }
    Ok(out)
}

fn encode_spaced(vocab: &Vocabulary, text: &str) -> TokenSequence {
    let toks: Vec<&str> = text.split(' ').filter(|t| !t.is_empty()).collect();
    vocab.encode(&toks)
}

pub fn metrics_to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Tab-separated `epoch mean_loss val_recall@1`, values in shortest
/// round-trip form so identical runs give identical bytes.
pub fn loss_trace_to_text(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tmean_loss\tval_recall_at_1\n");
    for e in epochs {
        let val = e.val_recall_at_1.map_or_else(|| "-".to_owned(), |v| format!("{v:?}"));
        writeln!(out, "{}\t{:?}\t{val}", e.epoch, e.mean_loss).unwrap();
    }
    out
}

/// Copies vectors from a GloVe-format text (`word v1 … vE` per line) into
/// the model's embedding rows. Returns how many vocabulary tokens were
/// found; the rest keep their initial values.
pub fn load_pretrained_embeddings(model: &mut Model, vocab: &Vocabulary, text: &str) -> Result<usize> {
    let dim = model.config.embedding_dim;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let id = model.store.id(EMBEDDING)?;
    let table = model.store.by_id_mut(id).data_mut();
    let mut found = 0;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                what: "embeddings",
                detail: format!("line {}: {e}", n + 1),
            })?;
        if values.len() != dim {
            return Err(Error::Format {
                what: "embeddings",
                detail: format!("line {}: {} values, expected {dim}", n + 1, values.len()),
            });
        }
        if let Some(row) = vocab.get(word) {
            let row = row as usize;
            table[row * dim..(row + 1) * dim].copy_from_slice(&values);
            found += 1;
        }
    }
    Ok(found)
}
