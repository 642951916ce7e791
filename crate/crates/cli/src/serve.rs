//! Read-only HTTP API over one generator snapshot.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use lvgan_core::image::Image;
use lvgan_core::nets::model::{GanModel, ImageGenerator};
use lvgan_core::trainer::TrainerState;

use crate::error::CliResult;
use crate::png::encode_png;

pub const MAX_STEPS: usize = 64;

/// Immutable generator shared by all requests.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub model: GanModel,
    pub iteration: u64,
    pub tag: String,
}

impl Snapshot {
    pub fn from_state(state: TrainerState) -> Self {
        Self {
            iteration: state.iteration,
            tag: state.config.tag.clone(),
            model: state.model,
        }
    }

    fn d(&self) -> usize {
        self.model.arch.latent_dim
    }

    fn check_latent(&self, name: &str, h: &[f64]) -> Result<(), ApiError> {
        if h.len() != self.d() {
            return Err(ApiError(format!("{name} has length {}, expected d = {}", h.len(), self.d())));
        }
        if let Some((j, v)) = h.iter().enumerate().find(|(_, v)| !(v.is_finite() && v.abs() <= 1.0)) {
            return Err(ApiError(format!("{name}[{j}] = {v} is outside [-1, 1]")));
        }
        Ok(())
    }

    fn render(&self, h: &[f64]) -> Result<Image, ApiError> {
        self.model.generate(h).map_err(|e| ApiError(e.to_string()))
    }
}

struct ApiError(String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (StatusCode::BAD_REQUEST, Json(json!({ "error": self.0 }))).into_response()
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(format!("malformed request: {e}")))
}

#[derive(Deserialize)]
struct GenerateRequest {
    latent: Vec<f64>,
}

#[derive(Deserialize)]
struct InterpolateRequest {
    from: Vec<f64>,
    to: Vec<f64>,
    steps: usize,
}

/// PNM only when the client asks for it and does not also take PNG.
fn wants_pnm(headers: &HeaderMap) -> bool {
    let accept = headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).unwrap_or("");
    accept.contains("image/x-portable") && !accept.contains("image/png")
}

fn encode(img: &Image, pnm: bool) -> Result<(Vec<u8>, &'static str), ApiError> {
    if pnm {
        let mime = if img.shape.channels == 1 { "image/x-portable-graymap" } else { "image/x-portable-pixmap" };
        Ok((img.to_pnm().map_err(|e| ApiError(e.to_string()))?, mime))
    } else {
        Ok((encode_png(img).map_err(|e| ApiError(e.to_string()))?, "image/png"))
    }
}

async fn model_info(State(s): State<Arc<Snapshot>>) -> Json<serde_json::Value> {
    let a = &s.model.arch;
    Json(json!({
        "d": a.latent_dim,
        "s": a.stages,
        "partitions": a.partitions().iter().map(|&(lo, hi)| [lo, hi]).collect::<Vec<_>>(),
        "latent_ranges": vec![[-1.0, 1.0]; a.latent_dim],
        "image": { "channels": a.image.channels, "height": a.image.height, "width": a.image.width },
        "iteration": s.iteration,
        "tag": s.tag,
    }))
}

async fn generate(State(s): State<Arc<Snapshot>>, headers: HeaderMap, body: Bytes) -> Response {
    let run = || -> Result<Response, ApiError> {
        let req: GenerateRequest = parse(&body)?;
        s.check_latent("latent", &req.latent)?;
        let (bytes, mime) = encode(&s.render(&req.latent)?, wants_pnm(&headers))?;
        Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
    };
    run().unwrap_or_else(IntoResponse::into_response)
}

async fn interpolate(State(s): State<Arc<Snapshot>>, body: Bytes) -> Response {
    let run = || -> Result<Response, ApiError> {
        let req: InterpolateRequest = parse(&body)?;
        s.check_latent("from", &req.from)?;
        s.check_latent("to", &req.to)?;
        if req.steps == 0 || req.steps > MAX_STEPS {
            return Err(ApiError(format!("steps must be in 1..={MAX_STEPS}, got {}", req.steps)));
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut frames = Vec::with_capacity(req.steps);
        for k in 0..req.steps {
            let t = if req.steps == 1 { 0.0 } else { k as f64 / (req.steps - 1) as f64 };
            let h: Vec<f64> = req.from.iter().zip(&req.to).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            frames.push(b64.encode(encode(&s.render(&h)?, false)?.0));
        }
        Ok(Json(frames).into_response())
    };
    run().unwrap_or_else(IntoResponse::into_response)
}

pub fn router(snapshot: Arc<Snapshot>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/model", get(model_info))
        .route("/generate", post(generate))
        .route("/interpolate", post(interpolate))
        .with_state(snapshot)
}

/// Serves until the process is stopped.
pub async fn serve(snapshot: Snapshot, addr: SocketAddr) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} (iteration {}) on http://{}", snapshot.tag, snapshot.iteration, listener.local_addr()?);
    axum::serve(listener, router(Arc::new(snapshot))).await?;
    Ok(())
}
