//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Run with `cargo test -p kgsel-core --test acceptance`.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgsel_core::checkpoint::Checkpoint;
use kgsel_core::knowledge_index::{porter_stem, DEFAULT_MAX_N};
use kgsel_core::numeric::ParameterStore;
use kgsel_core::scoring_models::{
    desk_gradient_check, score_bow, score_bow_knowledge, score_dual, score_memnet, score_tri, Memory,
};
use kgsel_core::text_pipeline::{default_stopwords, preprocess};
use kgsel_core::train_eval::experiment::{planted_experiment, PlantedConfig};
use kgsel_core::train_eval::io::loss_trace_to_text;
use kgsel_core::train_eval::{
    build_training_set, case_report, make_candidate_sets, recall_at_k_with, train, DialoguePair,
    EvalInstance, Grounding, TrainConfig, TrainContext,
};
use kgsel_core::{Array, Assertion, KnowledgeIndex, Model, ModelConfig, ModelKind, RetrievedSet, TokenSequence, Vocabulary};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// Message, ground truth, the knowledge-free pick, activated assertion.
type CaseRow = (&'static str, &'static str, &'static str, (&'static str, &'static str, &'static str));

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    for kind in [
        ModelKind::Bow,
        ModelKind::BowKnowledge,
        ModelKind::Memnet,
        ModelKind::DualLstm,
        ModelKind::TriLstm,
    ] {
        let r = desk_gradient_check(kind, 1e-5, 200, 2024).map_err(|e| e.to_string())?;
        ok &= r.max_rel_error <= 1e-4 && r.checked >= 200;
        worst.push(format!("{kind} {:.1e}", r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 60.0, format!("{} in {secs:.1}s", worst.join(", ")))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A dual LSTM sharing every parameter the tri LSTM has in common with it.
fn dual_from_tri(tri: &Model) -> Model {
    let mut config = tri.config.clone();
    config.kind = ModelKind::DualLstm;
    let mut store = ParameterStore::new(tri.store.rng_seed());
    for (name, _) in config.parameter_schema() {
        store.insert(&name, tri.store.get(&name).unwrap().clone()).unwrap();
    }
    Model::from_parts(config, store).unwrap()
}

fn degeneration_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 8;
    let empty: Vec<Vec<f64>> = Vec::new();
    let (mut tri_fail, mut bowk_fail, mut mem_gap) = (0, 0, 0.0f64);
    for _ in 0..1000 {
        let x = random_vec(&mut rng, d);
        let y = random_vec(&mut rng, d);
        let w = Array::matrix(d, d, random_vec(&mut rng, d * d)).unwrap();
        let w_a = Array::matrix(d, d, random_vec(&mut rng, d * d)).unwrap();
        let (dual, dual_logit) = score_dual(&x, &y, &w).unwrap();
        let tri = score_tri(&x, &empty, &y, &w, &w_a).unwrap();
        if tri.score.to_bits() != dual.to_bits() || tri.logit.to_bits() != dual_logit.to_bits() {
            tri_fail += 1;
        }
        if score_bow_knowledge(&x, &empty, &y).0.to_bits() != score_bow(&x, &y).to_bits() {
            bowk_fail += 1;
        }
        let a = [random_vec(&mut rng, d)];
        let gap = (score_memnet(&x, &a, &y) - score_bow_knowledge(&x, &a, &y).0).abs();
        mem_gap = mem_gap.max(gap);
    }

    // The same identity through whole models: token ids in, scores out.
    let mut model_fail = 0;
    for seed in 0..20 {
        let tri = Model::init(ModelConfig::new(ModelKind::TriLstm, 30, 8, 12), seed).unwrap();
        let dual = dual_from_tri(&tri);
        for _ in 0..10 {
            let msg: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..30)).collect();
            let cands: Vec<Vec<u32>> = (0..5)
                .map(|_| (0..rng.random_range(1..8)).map(|_| rng.random_range(0..30)).collect())
                .collect();
            let a = tri.rank(&msg, &cands, &Memory::empty()).unwrap();
            let b = dual.rank(&msg, &cands, &Memory::empty()).unwrap();
            let same = a.iter().zip(&b).all(|(p, q)| p.index == q.index && p.score.to_bits() == q.score.to_bits());
            if !same {
                model_fail += 1;
            }
        }
    }
    check(
        tri_fail == 0 && bowk_fail == 0 && model_fail == 0 && mem_gap <= 1e-12,
        format!(
            "tri≠dual {tri_fail}/1000, bow_knowledge≠bow {bowk_fail}/1000, model-level tri≠dual {model_fail}/200, max |memnet − bow_knowledge| {mem_gap:.1e}"
        ),
    )
}

fn vocab_of(words: &[&str], relations: &[&str]) -> Vocabulary {
    let corpus = vec![words.iter().map(|w| w.to_string()).collect::<Vec<_>>()];
    Vocabulary::build(&corpus, 1, relations).unwrap()
}

/// Every (position, key) pair, checked by direct comparison: unigram keys
/// against the token and its stem (neither a stopword), multi-word keys
/// against the joined window starting at the position.
fn brute_force_retrieve(index: &KnowledgeIndex, tokens: &[String]) -> RetrievedSet {
    let keys: Vec<String> = index.keys().map(str::to_owned).collect();
    let mut out = RetrievedSet::default();
    let mut seen = HashSet::new();
    for (pos, tok) in tokens.iter().enumerate() {
        let stem = porter_stem(tok);
        let mut candidates: Vec<String> = Vec::new();
        if !index.is_stopword(tok) {
            candidates.push(tok.clone());
            if stem != *tok && !index.is_stopword(&stem) {
                candidates.push(stem);
            }
        }
        for n in 2..=index.max_n() {
            if pos + n <= tokens.len() {
                candidates.push(tokens[pos..pos + n].join("_"));
            }
        }
        for cand in candidates {
            for key in &keys {
                if *key == cand {
                    out.matched_concepts.push(kgsel_core::knowledge_index::MatchedConcept {
                        key: key.clone(),
                        position: pos,
                    });
                    for &id in index.lookup(key) {
                        if seen.insert(id) {
                            out.assertion_ids.push(id);
                        }
                    }
                }
            }
        }
    }
    out
}

fn retrieval_oracle() -> Outcome {
    const WORDS: &[&str] = &[
        "run", "running", "runs", "cat", "cats", "new", "york", "city", "paint", "painting", "color",
        "colour", "pink", "the", "a", "of", "bonjour", "french", "language", "learn", "learning", "dog",
        "dogs", "play", "played", "ice", "cream", "hello",
    ];
    const RELATIONS: &[&str] = &["IsA", "RelatedTo", "UsedFor"];
    let vocab = vocab_of(WORDS, RELATIONS);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let concept = |rng: &mut ChaCha8Rng| -> String {
        let n = *[1usize, 1, 1, 2, 2, 3].choose(rng).unwrap();
        (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join("_")
    };
    let (mut mismatches, mut stem_cases, mut multi_cases) = (0, 0, 0);
    for _ in 0..500 {
        let kb: Vec<Assertion> = (0..rng.random_range(1..12))
            .map(|_| Assertion::new(&concept(&mut rng), RELATIONS.choose(&mut rng).unwrap(), &concept(&mut rng)))
            .collect();
        let max_n = rng.random_range(1..=DEFAULT_MAX_N);
        let index = KnowledgeIndex::build(&kb, &vocab, max_n, default_stopwords()).unwrap();
        let message: Vec<String> =
            (0..rng.random_range(0..10)).map(|_| WORDS.choose(&mut rng).unwrap().to_string()).collect();
        let got = index.retrieve_porter(&message);
        let want = brute_force_retrieve(&index, &message);
        if got != want {
            mismatches += 1;
        }
        if want.matched_concepts.iter().any(|c| !message.contains(&c.key) && !c.key.contains('_')) {
            stem_cases += 1;
        }
        if want.matched_concepts.iter().any(|c| c.key.contains('_')) {
            multi_cases += 1;
        }
    }
    check(
        mismatches == 0 && stem_cases > 0 && multi_cases > 0,
        format!("{mismatches}/500 mismatches ({stem_cases} cases hit a stemmed unigram, {multi_cases} a multi-word key)"),
    )
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence {
        tokens: ids.iter().map(|i| format!("t{i}")).collect(),
        ids: ids.to_vec(),
    }
}

fn recall_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances: Vec<EvalInstance> = (0..10_000)
        .map(|i| EvalInstance {
            message: seq(&[i as u32]),
            ground_truth: seq(&[0]),
            distractors: (1..10).map(|d| seq(&[d])).collect(),
            gt_position: rng.random_range(0..10),
            retrieved: RetrievedSet::default(),
            memory: Arc::new(Memory::empty()),
        })
        .collect();
    let recall = |k: usize, seed: u64| {
        let mut scores = ChaCha8Rng::seed_from_u64(seed);
        recall_at_k_with(&instances, k, |_| Ok((0..10).map(|_| scores.random::<f64>()).collect())).unwrap()
    };
    let r: Vec<f64> = [1, 2, 5, 10].iter().map(|&k| recall(k, 99)).collect();
    let ok = (r[0] - 0.10).abs() <= 0.01
        && (r[1] - 0.20).abs() <= 0.012
        && (r[2] - 0.50).abs() <= 0.015
        && r[3] == 1.0;
    check(ok, format!("R@1 {:.4}, R@2 {:.4}, R@5 {:.4}, R@10 {}", r[0], r[1], r[2], r[3]))
}

fn planted_knowledge() -> Outcome {
    let cfg = PlantedConfig {
        models: vec![ModelKind::DualLstm, ModelKind::TriLstm, ModelKind::BowKnowledge, ModelKind::Memnet],
        ..PlantedConfig::default()
    };
    let ok_setup = cfg.synth.n_pairs == 5000
        && cfg.synth.n_concepts == 200
        && cfg.synth.noise_rate == 0.15
        && cfg.n_test == 1000
        && cfg.hidden_dim == 32
        && cfg.embedding_dim == 16;
    let report = planted_experiment(&cfg).map_err(|e| e.to_string())?;
    let r = |k| report.recall_at_1(k).unwrap();
    let (dual, tri, bowk, mem) = (r(ModelKind::DualLstm), r(ModelKind::TriLstm), r(ModelKind::BowKnowledge), r(ModelKind::Memnet));
    check(
        ok_setup && report.test_instances == 1000 && tri - dual >= 0.10 && bowk > mem && report.seconds < 900.0,
        format!(
            "R@1 on {} held-out: tri {tri:.3} vs dual {dual:.3} (+{:.3}), bow_knowledge {bowk:.3} vs memnet {mem:.3}, {:.0}s",
            report.test_instances,
            tri - dual,
            report.seconds
        ),
    )
}

const CASE_STUDIES: [CaseRow; 4] = [
    (
        "i was helping my brother with his chinese.",
        "the language sounds interesting! i really gotta learn it !",
        "did yoga help?",
        ("chinese", "IsA", "human_language"),
    ),
    (
        "bonjour madame, quoi de neuf.",
        "loool . you can stick with english , its all good unless you want to improve your french .",
        "yeah me too !",
        ("bonjour", "IsA", "hello_in_french"),
    ),
    (
        "help what colour shoes can i wear with my dress to the wedding?",
        "very pale pink or black.",
        "i love that song",
        ("pink", "RelatedTo", "colour"),
    ),
    (
        "helping mum paint my bedroom.",
        "shouldn't it be your mum helping you? what color are you going for ?",
        "see you at the game tonight",
        ("paint", "RelatedTo", "household_color"),
    ),
];

fn case_study_fixtures() -> Outcome {
    let mut texts: Vec<Vec<String>> = Vec::new();
    for (m, gt, other, (c1, _, c2)) in CASE_STUDIES {
        texts.extend([preprocess(m), preprocess(gt), preprocess(other)]);
        texts.push(vec![c1.to_owned()]);
        texts.push(c2.split('_').map(str::to_owned).collect());
    }
    let vocab = Vocabulary::build(&texts, 1, &["IsA", "RelatedTo"]).unwrap();
    let kb: Vec<Assertion> = CASE_STUDIES.iter().map(|(_, _, _, (a, r, b))| Assertion::new(a, r, b)).collect();
    let index = KnowledgeIndex::build(&kb, &vocab, DEFAULT_MAX_N, default_stopwords()).unwrap();

    let mut problems = Vec::new();
    for (i, (m, ..)) in CASE_STUDIES.iter().enumerate() {
        let r = index.retrieve_porter(&preprocess(m));
        if !r.assertion_ids.contains(&(i as u32)) {
            problems.push(format!("row {} missing its assertion", i + 1));
        }
    }

    let pairs: Vec<DialoguePair> = CASE_STUDIES
        .iter()
        .flat_map(|(m, gt, other, _)| {
            [DialoguePair::from_text(&vocab, m, gt), DialoguePair::from_text(&vocab, "filler", other)]
        })
        .collect();
    let grounding = Grounding::new(&vocab, &index);
    let instances = make_candidate_sets(&pairs, 3, 5, Some(grounding)).unwrap();
    let dual = Model::init(ModelConfig::new(ModelKind::DualLstm, vocab.len(), 8, 8), 1).unwrap();
    let tri = Model::init(ModelConfig::new(ModelKind::TriLstm, vocab.len(), 8, 8), 1).unwrap();
    for (row, (m, gt, _, (a, rel, b))) in CASE_STUDIES.iter().enumerate() {
        let inst = &instances[2 * row];
        let rep = case_report(&dual, &tri, inst, &index).unwrap();
        let text = rep.to_string();
        let want_assertion = format!("{a}, {rel}, {b}");
        let fields_ok = rep.message == preprocess(m).join(" ")
            && rep.ground_truth == preprocess(gt).join(" ")
            && rep.baseline.model == "dual_lstm"
            && rep.knowledge.model == "tri_lstm"
            && !rep.baseline.selected.is_empty()
            && !rep.knowledge.selected.is_empty()
            && rep.memory_size == inst.memory.len()
            && rep.memory_size >= 1
            && rep.activated_assertion.as_deref() == Some(want_assertion.as_str())
            && text.contains(&rep.message)
            && text.contains(&want_assertion)
            && text.contains(&format!("({})", rep.memory_size));
        if !fields_ok {
            problems.push(format!("row {} report incomplete: {rep:?}", row + 1));
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "4/4 rows retrieved and reported".into() } else { problems.join("; ") })
}

fn reproducibility() -> Outcome {
    let cfg = PlantedConfig::default();
    let mut synth = cfg.synth.clone();
    synth.n_pairs = 600;
    synth.n_concepts = 30;
    let corpus = kgsel_core::train_eval::synth_corpus(&synth).map_err(|e| e.to_string())?;
    let mut texts: Vec<Vec<String>> =
        corpus.pairs.iter().flat_map(|(m, r)| [preprocess(m), preprocess(r)]).collect();
    texts.extend(corpus.assertions.iter().map(Assertion::linearize));
    let vocab = Vocabulary::build(&texts, 1, &["RelatedTo"]).unwrap();
    let index = KnowledgeIndex::build(&corpus.assertions, &vocab, DEFAULT_MAX_N, default_stopwords()).unwrap();
    let pairs: Vec<DialoguePair> =
        corpus.pairs.iter().map(|(m, r)| DialoguePair::from_text(&vocab, m, r)).collect();
    let grounding = Grounding::new(&vocab, &index);
    let valid = make_candidate_sets(&pairs[500..], 9, 1, Some(grounding)).unwrap();
    let triples = build_training_set(&pairs[..500], 4).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig { max_epochs: 3, learning_rate: 10.0, clip_norm: Some(0.5), seed: 4, ..cfg.train };
    let run = |name: &str| -> (Vec<u8>, String) {
        let path = dir.path().join(name);
        let ctx = TrainContext {
            grounding: Some(grounding),
            validation: Some(&valid),
            checkpoint: Some(path.clone()),
            settings: BTreeMap::from([("seed".to_owned(), "4".to_owned())]),
        };
        let model = Model::init(ModelConfig::new(ModelKind::TriLstm, vocab.len(), 8, 16), 4).unwrap();
        let out = train(model, &triples, &train_cfg, &ctx).unwrap();
        (std::fs::read(&path).unwrap(), loss_trace_to_text(&out.epochs))
    };
    let (ck_a, loss_a) = run("a.json");
    let (ck_b, loss_b) = run("b.json");
    let hash = Checkpoint::from_bytes(&ck_a, None).and_then(|c| c.config_hash()).map_err(|e| e.to_string())?;
    check(
        ck_a == ck_b && loss_a == loss_b,
        format!("checkpoints {} bytes, identical: {}, loss traces identical: {}, hash {}", ck_a.len(), ck_a == ck_b, loss_a == loss_b, &hash[..12]),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient correctness", gradient_correctness),
        ("degeneration identities", degeneration_identities),
        ("retrieval oracle", retrieval_oracle),
        ("recall@k calibration", recall_calibration),
        ("planted-knowledge experiment", planted_knowledge),
        ("case-study fixtures", case_study_fixtures),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
