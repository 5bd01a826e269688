use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_index::KnowledgeIndex;
use crate::scoring_models::{rank_order, Model};

use super::dataset::EvalInstance;

/// 1-based rank of the ground truth among an instance's candidates under
/// `scores` (ties broken by candidate position).
fn gt_rank(inst: &EvalInstance, scores: &[f64]) -> usize {
    rank_order(scores)
        .iter()
        .position(|&i| i == inst.gt_position)
        .expect("ground truth is a candidate")
        + 1
}

fn check_k(instances: &[EvalInstance], k: usize) -> Result<()> {
    let big_k = instances.first().map_or(0, EvalInstance::num_candidates);
    if instances.iter().any(|i| i.num_candidates() != big_k) {
        return Err(Error::invalid("instances have different candidate counts"));
    }
    if k == 0 || k > big_k {
        return Err(Error::invalid(format!("k = {k} outside 1..={big_k}")));
    }
    Ok(())
}

/// Ground-truth ranks of every instance under `model`, in instance order.
/// Instances are scored in parallel; the model is only read.
pub fn ground_truth_ranks(model: &Model, instances: &[EvalInstance]) -> Result<Vec<usize>> {
    instances
        .par_iter()
        .map(|inst| {
            let ranked = model.rank(&inst.message.ids, &inst.candidate_ids(), &inst.memory)?;
            Ok(ranked.iter().position(|c| c.index == inst.gt_position).unwrap() + 1)
        })
        .collect()
}

/// Fraction of ranks ≤ k.
pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Recall@k of `model`: the fraction of instances whose ground truth ranks
/// within the top `k`.
pub fn recall_at_k(model: &Model, instances: &[EvalInstance], k: usize) -> Result<f64> {
    check_k(instances, k)?;
    Ok(recall_from_ranks(&ground_truth_ranks(model, instances)?, k))
}

/// Recall@k for an arbitrary scorer returning one score per candidate.
pub fn recall_at_k_with<F>(instances: &[EvalInstance], k: usize, mut scorer: F) -> Result<f64>
where
    F: FnMut(&EvalInstance) -> Result<Vec<f64>>,
{
    check_k(instances, k)?;
    let mut ranks = Vec::with_capacity(instances.len());
    for inst in instances {
        let scores = scorer(inst)?;
        if scores.len() != inst.num_candidates() {
            return Err(Error::invalid(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                inst.num_candidates()
            )));
        }
        ranks.push(gt_rank(inst, &scores));
    }
    Ok(recall_from_ranks(&ranks, k))
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub k: usize,
    pub fraction: f64,
    pub instances: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// One model's side of a case study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSide {
    pub model: String,
    pub selected_index: usize,
    pub selected: String,
    pub correct: bool,
}

/// Baseline vs knowledge model on one instance, with the assertion the
/// knowledge model's selection activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub message: String,
    pub ground_truth: String,
    pub baseline: CaseSide,
    pub knowledge: CaseSide,
    pub memory_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activated_assertion: Option<String>,
}

impl std::fmt::Display for CaseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = |c: bool| if c { "✓" } else { "✗" };
        writeln!(f, "message:      {}", self.message)?;
        writeln!(f, "ground truth: {}", self.ground_truth)?;
        writeln!(
            f,
            "{:<13} {} {}",
            format!("{}:", self.baseline.model),
            self.baseline.selected,
            mark(self.baseline.correct)
        )?;
        writeln!(
            f,
            "{:<13} {} {}",
            format!("{}:", self.knowledge.model),
            self.knowledge.selected,
            mark(self.knowledge.correct)
        )?;
        match &self.activated_assertion {
            Some(a) => write!(f, "activated:    {a} ({})", self.memory_size),
            None => write!(f, "activated:    - ({})", self.memory_size),
        }
    }
}

/// Ranks `instance` with both models and reports their top choices.
pub fn case_report(
    baseline: &Model,
    knowledge: &Model,
    instance: &EvalInstance,
    index: &KnowledgeIndex,
) -> Result<CaseReport> {
    let candidates = instance.candidates();
    let ids = instance.candidate_ids();
    let side = |m: &Model| -> Result<(CaseSide, Option<u32>)> {
        let top = m.rank(&instance.message.ids, &ids, &instance.memory)?.swap_remove(0);
        Ok((
            CaseSide {
                model: m.kind().name().to_owned(),
                selected_index: top.index,
                selected: candidates[top.index].text(),
                correct: top.index == instance.gt_position,
            },
            top.activated_assertion_id,
        ))
    };
    let (baseline_side, _) = side(baseline)?;
    let (knowledge_side, activated) = side(knowledge)?;
    Ok(CaseReport {
        message: instance.message.text(),
        ground_truth: instance.ground_truth.text(),
        baseline: baseline_side,
        knowledge: knowledge_side,
        memory_size: instance.memory.len(),
        activated_assertion: activated
            .and_then(|id| index.assertion(id))
            .map(ToString::to_string),
    })
}
