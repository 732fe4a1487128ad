//! HTTP routes over a [`Store`].
//!
//! ```text
//! POST /session                          {"seed": u64?}  -> {"participant", "total"}
//! GET  /trial/{pid}                      -> {"status": "trial", ...} | {"status": "done"}
//! POST /response/{pid}                   {"block", "trial", "choice"} -> trial record
//! GET  /results/{pid}                    -> per-block accuracy
//! GET  /clip/{version}/{clip_id}/{frame} -> image/png
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bodyscene::stimpipe::{version_dir, StimulusVersion};
use serde::{Deserialize, Serialize};

use crate::error::ExpError;
use crate::store::Store;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    /// Dataset root holding the `<orig|body|bg>/<clip_id>` version directories.
    pub data_root: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub participant: String,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub block: usize,
    pub trial: usize,
    pub choice: usize,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ExpError {
    fn into_response(self) -> Response {
        let status = match &self {
            ExpError::NotFound(_) => StatusCode::NOT_FOUND,
            ExpError::Conflict(_) => StatusCode::CONFLICT,
            ExpError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ExpError::Io { .. } | ExpError::Log { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(ErrorBody {
                error: self.to_string(),
            }),
        )
            .into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/trial/{pid}", get(next_trial))
        .route("/response/{pid}", post(record_response))
        .route("/results/{pid}", get(results))
        .route("/clip/{version}/{clip_id}/{frame}", get(clip_frame))
        .with_state(state)
}

async fn create_session(
    State(s): State<AppState>,
    body: Option<Json<SessionRequest>>,
) -> Result<Json<SessionCreated>, ExpError> {
    let seed = body.and_then(|Json(b)| b.seed);
    let plan = s.store.create_session(seed)?;
    Ok(Json(SessionCreated {
        total: plan.total_trials(),
        participant: plan.participant,
    }))
}

async fn next_trial(
    State(s): State<AppState>,
    Path(pid): Path<String>,
) -> Result<impl IntoResponse, ExpError> {
    Ok(Json(s.store.next_trial(&pid)?))
}

async fn record_response(
    State(s): State<AppState>,
    Path(pid): Path<String>,
    Json(req): Json<ResponseRequest>,
) -> Result<impl IntoResponse, ExpError> {
    Ok(Json(
        s.store
            .record_response(&pid, req.block, req.trial, req.choice)?,
    ))
}

async fn results(
    State(s): State<AppState>,
    Path(pid): Path<String>,
) -> Result<impl IntoResponse, ExpError> {
    Ok(Json(s.store.participant_accuracy(&pid)?))
}

async fn clip_frame(
    State(s): State<AppState>,
    Path((version, clip_id, frame)): Path<(String, String, usize)>,
) -> Result<Response, ExpError> {
    let version: StimulusVersion = version
        .parse()
        .map_err(|e: bodyscene::Error| ExpError::NotFound(e.to_string()))?;
    let frames = s
        .store
        .catalog()
        .frames_of(&clip_id)
        .ok_or_else(|| ExpError::NotFound(format!("clip {clip_id}")))?;
    if frame >= frames {
        return Err(ExpError::NotFound(format!(
            "frame {frame} of clip {clip_id} ({frames} frames)"
        )));
    }
    let path = version_dir(&s.data_root, version, &clip_id).join(format!("frame_{frame:04}.png"));
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ExpError::NotFound(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
