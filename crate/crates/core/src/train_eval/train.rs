use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numeric::{clip_global_norm, sgd_step, Tape};
use crate::scoring_models::{Memory, Model};

use super::dataset::{build_training_set, DialoguePair, EvalInstance, Grounding, LabeledTriple};
use super::eval::recall_at_k;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation Recall@1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Redraw the negative of every pair at the start of each epoch.
    pub resample_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            clip_norm: None,
            resample_negatives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub val_recall_at_1: Option<f64>,
}

/// Optional inputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainContext<'a> {
    /// Retrieval for knowledge models; without it they train on empty memory.
    pub grounding: Option<Grounding<'a>>,
    /// Early stopping set.
    pub validation: Option<&'a [EvalInstance]>,
    /// Written after every epoch; holds the best model when training ends.
    pub checkpoint: Option<PathBuf>,
    /// Resolved run settings stored in checkpoints.
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by validation Recall@1 (the last one without validation).
    pub model: Model,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn save(path: &std::path::Path, model: &Model, settings: &BTreeMap<String, String>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    Checkpoint::new(model.clone(), settings.clone()).save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Mini-batch SGD on mean binary cross-entropy of σ(logit) against the
/// labels. Examples are reshuffled every epoch under `cfg.seed`; a final
/// short batch is kept. A non-finite batch loss aborts the run, leaving the
/// checkpoint of the last completed epoch in place.
pub fn train(
    mut model: Model,
    triples: &[LabeledTriple],
    cfg: &TrainConfig,
    ctx: &TrainContext<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !model.kind().is_trainable() {
        return Err(Error::invalid(format!("{} has no trainable parameters", model.kind())));
    }
    if triples.is_empty() {
        return Err(Error::invalid("no training triples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut triples = triples.to_vec();
    let positives: Vec<DialoguePair> = triples
        .iter()
        .filter(|t| t.label == 1)
        .map(|t| DialoguePair {
            message: t.message.clone(),
            response: t.response.clone(),
        })
        .collect();

    let empty = Arc::new(Memory::empty());
    let mut memories: HashMap<Vec<u32>, Arc<Memory>> = HashMap::new();
    let uses_knowledge = model.kind().uses_knowledge();
    let mut memory_of = |msg: &crate::text_pipeline::TokenSequence| -> Arc<Memory> {
        match (ctx.grounding, uses_knowledge) {
            (Some(g), true) => memories
                .entry(msg.ids.clone())
                .or_insert_with(|| Arc::new(g.ground(msg).1))
                .clone(),
            _ => empty.clone(),
        }
    };

    let mut epochs = Vec::new();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        if cfg.resample_negatives && epoch > 1 {
            triples = build_training_set(&positives, cfg.seed.wrapping_add(epoch as u64))?;
        }
        let mems: Vec<Arc<Memory>> = triples.iter().map(|t| memory_of(&t.message)).collect();
        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = {
                let mut tape = Tape::new(&model.store);
                let batch = chunk.iter().map(|&i| {
                    let t = &triples[i];
                    (t.message.ids.as_slice(), t.response.ids.as_slice(), &*mems[i], f64::from(t.label))
                });
                let root = model.tape_batch_loss(&mut tape, batch)?;
                let loss = tape.scalar(root);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
                }
                (loss, tape.backward(root)?)
            };
            let mut grads = grads;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            sgd_step(&mut model.store, &grads, cfg.learning_rate)?;
            total += loss * chunk.len() as f64;
            batches += 1;
        }
        let mean_loss = total / triples.len() as f64;
        let val = ctx.validation.map(|v| recall_at_k(&model, v, 1)).transpose()?;
        log::info!(
            "{} epoch {epoch}: loss {mean_loss:.5}{}",
            model.kind(),
            val.map(|v| format!(", val R@1 {v:.4}")).unwrap_or_default()
        );
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            batches,
            val_recall_at_1: val,
        });
        if let Some(p) = &ctx.checkpoint {
            save(p, &model, &ctx.settings)?;
        }
        match val {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, model.clone(), epoch));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
            None => best = Some((0.0, model.clone(), epoch)),
        }
    }
    let (_, best_model, best_epoch) = best.expect("at least one epoch ran");
    if let Some(p) = &ctx.checkpoint {
        save(p, &best_model, &ctx.settings)?;
    }
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        epochs,
        stopped_early,
    })
}
