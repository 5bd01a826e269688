//! JSON-over-HTTP service. Vocabulary, index and models are loaded once and
//! shared read-only between requests.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use kgsel_core::knowledge_index::normalize_concept;
use kgsel_core::scoring_models::Memory;
use kgsel_core::text_pipeline::preprocess;
use kgsel_core::train_eval::Grounding;
use kgsel_core::{Assertion, KnowledgeIndex, Model, RetrievedSet, Vocabulary};

pub const MAX_CANDIDATES: usize = 100;

pub struct LoadedModel {
    pub model: Model,
    pub config_hash: String,
}

pub struct AppState {
    pub vocab: Vocabulary,
    pub index: KnowledgeIndex,
    pub models: BTreeMap<String, LoadedModel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    pub message: String,
    pub candidates: Vec<String>,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionView {
    pub concept1: String,
    pub relation: String,
    pub concept2: String,
    pub weight: f64,
    /// `concept1, relation, concept2`
    pub text: String,
}

impl From<&Assertion> for AssertionView {
    fn from(a: &Assertion) -> Self {
        Self {
            concept1: a.concept1.clone(),
            relation: a.relation.clone(),
            concept2: a.concept2.clone(),
            weight: a.weight,
            text: a.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// Position in the request's candidate list.
    pub index: usize,
    pub candidate: String,
    pub score: f64,
    /// 1 = best.
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub activated_assertion: Option<AssertionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptHit {
    pub concept: String,
    pub position: usize,
    pub assertions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub model: String,
    pub score_kind: String,
    pub ranked: Vec<RankedCandidate>,
    pub matched_concepts: Vec<ConceptHit>,
    /// |A_x|: assertions retrieved for the message.
    pub memory_size: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub tokens: Vec<String>,
    pub concepts: Vec<ConceptHit>,
    pub total_assertions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionsResponse {
    pub concept: String,
    pub assertions: Vec<AssertionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: String,
    pub score_kind: String,
    pub config_hash: String,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "status": self.0.as_u16(), "message": self.1 } });
        (self.0, Json(body)).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/concepts", get(concepts))
        .route("/assertions/{concept}", get(assertions))
        .route("/rank", post(rank))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn models(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<ModelInfo> = s
        .models
        .iter()
        .map(|(id, m)| ModelInfo {
            id: id.clone(),
            kind: m.model.kind().name().to_owned(),
            score_kind: m.model.kind().score_kind().to_owned(),
            config_hash: m.config_hash.clone(),
            vocab_size: m.model.config.vocab_size,
            embedding_dim: m.model.config.embedding_dim,
            hidden_dim: m.model.config.hidden_dim,
        })
        .collect();
    Json(serde_json::json!({ "models": list }))
}

fn concept_hits(index: &KnowledgeIndex, r: &RetrievedSet) -> Vec<ConceptHit> {
    r.matched_concepts
        .iter()
        .map(|c| ConceptHit {
            concept: c.key.clone(),
            position: c.position,
            assertions: index.lookup(&c.key).len(),
        })
        .collect()
}

#[derive(Deserialize)]
struct ConceptsQuery {
    text: Option<String>,
}

async fn concepts(
    State(s): State<Arc<AppState>>,
    Query(q): Query<ConceptsQuery>,
) -> Result<Json<ConceptsResponse>, ApiError> {
    let text = q.text.ok_or_else(|| bad_request("missing query parameter `text`"))?;
    let tokens = preprocess(&text);
    let r = s.index.retrieve_porter(&tokens);
    Ok(Json(ConceptsResponse {
        concepts: concept_hits(&s.index, &r),
        total_assertions: r.len(),
        tokens,
    }))
}

async fn assertions(
    State(s): State<Arc<AppState>>,
    Path(concept): Path<String>,
) -> Result<Json<AssertionsResponse>, ApiError> {
    let key = normalize_concept(&concept);
    let ids = s.index.lookup(&key);
    if ids.is_empty() {
        return Err(not_found(format!("unknown concept `{key}`")));
    }
    let list = ids
        .iter()
        .filter_map(|&id| s.index.assertion(id))
        .map(AssertionView::from)
        .collect();
    Ok(Json(AssertionsResponse {
        concept: key,
        assertions: list,
    }))
}

async fn rank(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<RankResponse>, ApiError> {
    let req: RankRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed request body: {e}")))?;
    let start = Instant::now();
    let loaded = s
        .models
        .get(&req.model)
        .ok_or_else(|| not_found(format!("unknown model `{}`", req.model)))?;
    if req.candidates.is_empty() || req.candidates.len() > MAX_CANDIDATES {
        return Err(bad_request(format!(
            "expected 1..={MAX_CANDIDATES} candidates, got {}",
            req.candidates.len()
        )));
    }
    let message = s.vocab.encode(&preprocess(&req.message));
    let (retrieved, memory) = Grounding::new(&s.vocab, &s.index).ground(&message);
    let memory = if loaded.model.kind().uses_knowledge() {
        memory
    } else {
        Memory::empty()
    };
    let candidates: Vec<Vec<u32>> = req
        .candidates
        .iter()
        .map(|c| s.vocab.encode(&preprocess(c)).ids)
        .collect();
    let ranked = loaded
        .model
        .rank(&message.ids, &candidates, &memory)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let ranked = ranked
        .into_iter()
        .enumerate()
        .map(|(r, c)| RankedCandidate {
            index: c.index,
            candidate: req.candidates[c.index].clone(),
            score: c.score,
            rank: r + 1,
            activated_assertion: c
                .activated_assertion_id
                .and_then(|id| s.index.assertion(id))
                .map(AssertionView::from),
        })
        .collect();
    Ok(Json(RankResponse {
        model: req.model,
        score_kind: loaded.model.kind().score_kind().to_owned(),
        ranked,
        matched_concepts: concept_hits(&s.index, &retrieved),
        memory_size: retrieved.len(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
