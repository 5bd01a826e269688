//! Dataset construction, training, Recall@k evaluation, case-study reports
//! and the synthetic planted-knowledge corpus.

mod dataset;
mod eval;
pub mod experiment;
pub mod io;
mod synth;
mod train;

pub use dataset::{
    build_training_set, filter_eval_pairs, make_candidate_sets, DialoguePair, EvalInstance,
    Grounding, LabeledTriple, DEFAULT_DISTRACTORS,
};
pub use eval::{
    case_report, ground_truth_ranks, recall_at_k, recall_at_k_with, recall_from_ranks, CaseReport,
    CaseSide, MetricRecord,
};
pub use synth::{concept_token, signal_token, synth_corpus, SynthConfig, SynthCorpus};
pub use train::{train, EpochRecord, TrainConfig, TrainContext, TrainOutcome};
