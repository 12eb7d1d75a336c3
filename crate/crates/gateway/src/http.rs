//! HTTP/JSON routes over [`Platform`].

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, MatchedPath, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use edgepod_core::reservation::InventoryFilter;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::auth::ApiToken;
use crate::error::ApiError;
use crate::platform::{ConnectRequest, Platform, ReserveRequest};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut response = (status, Json(self.body())).into_response();
        if let ApiError::Unavailable { retry_after_s, .. } = &self {
            if let Ok(v) = HeaderValue::from_str(&retry_after_s.to_string()) {
                response.headers_mut().insert(header::RETRY_AFTER, v);
            }
        }
        response
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<Platform>;

/// Run a blocking platform call off the async workers.
async fn blocking<T, F>(platform: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Platform) -> ApiResult<T> + Send + 'static,
{
    let p = Arc::clone(platform);
    tokio::task::spawn_blocking(move || f(&p))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

/// Valid bearer token of the caller. Extracted before any body so that
/// unauthenticated requests get 401 regardless of payload.
struct Caller(ApiToken);

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, platform: &Shared) -> ApiResult<Self> {
        let raw = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::Unauthorized("missing bearer token".into()))?;
        platform.authorize(raw.trim()).map(Caller)
    }
}

/// `Json` with rejections rendered as JSON error bodies.
struct Body<T>(T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> ApiResult<Self> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(match e {
                JsonRejection::BytesRejection(b) if b.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                    ApiError::PayloadTooLarge(b.body_text())
                }
                other => ApiError::BadRequest(other.body_text()),
            }),
        }
    }
}

pub fn router(platform: Shared) -> Router {
    let upload_limit = platform.max_upload_bytes();
    Router::new()
        .route("/auth", post(auth))
        .route("/inventory", get(inventory))
        .route("/reservations", get(list_reservations).post(create_reservation))
        .route("/reservations/{id}", delete(cancel_reservation))
        .route("/sessions", get(list_sessions).post(connect))
        .route("/sessions/{id}", get(get_session).delete(disconnect))
        .route(
            "/sessions/{id}/files/{name}",
            post(upload).layer(DefaultBodyLimit::max(upload_limit)),
        )
        .route("/cluster", get(cluster))
        .route("/pods/{name}", get(pod_status))
        .route("/metrics", get(metrics))
        .layer(middleware::from_fn_with_state(Arc::clone(&platform), track))
        .with_state(platform)
}

async fn track(State(platform): State<Shared>, request: Request, next: Next) -> Response {
    let started = Instant::now();
    let method = request.method().to_string();
    let route = request
        .extensions()
        .get::<MatchedPath>()
        .map(|m| m.as_str().to_string())
        .unwrap_or_else(|| "unmatched".into());
    let response = next.run(request).await;
    platform.record_request(
        &route,
        &method,
        response.status().as_u16(),
        started.elapsed().as_secs_f64() * 1000.0,
    );
    response
}

#[derive(Debug, Deserialize)]
struct Credentials {
    user_id: String,
    password: String,
}

async fn auth(State(p): State<Shared>, Body(c): Body<Credentials>) -> ApiResult<Json<ApiToken>> {
    blocking(&p, move |p| p.authenticate(&c.user_id, &c.password))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct InventoryQuery {
    lab: Option<String>,
    testbed: Option<String>,
}

async fn inventory(
    State(p): State<Shared>,
    _caller: Caller,
    Query(q): Query<InventoryQuery>,
) -> ApiResult<Response> {
    let filter = match (q.lab, q.testbed) {
        (_, Some(tb)) => InventoryFilter::Testbed(tb),
        (Some(lab), None) => InventoryFilter::Lab(lab),
        (None, None) => InventoryFilter::All,
    };
    Ok(Json(p.inventory(&filter)?).into_response())
}

async fn list_reservations(State(p): State<Shared>, Caller(tok): Caller) -> ApiResult<Response> {
    Ok(Json(p.reservations(&tok)).into_response())
}

async fn create_reservation(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Body(req): Body<ReserveRequest>,
) -> ApiResult<Response> {
    let r = blocking(&p, move |p| p.reserve(&tok, req)).await?;
    Ok((StatusCode::CREATED, Json(r)).into_response())
}

async fn cancel_reservation(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    blocking(&p, move |p| p.cancel_reservation(&tok, &id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn connect(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Body(req): Body<ConnectRequest>,
) -> ApiResult<Response> {
    let s = blocking(&p, move |p| p.connect(&tok, req)).await?;
    Ok(Json(s).into_response())
}

async fn disconnect(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let s = blocking(&p, move |p| p.disconnect(&tok, &id)).await?;
    Ok(Json(s).into_response())
}

async fn list_sessions(State(p): State<Shared>, Caller(tok): Caller) -> ApiResult<Response> {
    let list = blocking(&p, move |p| Ok(p.list_sessions(&tok))).await?;
    Ok(Json(list).into_response())
}

async fn get_session(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let s = blocking(&p, move |p| p.session(&tok, &id)).await?;
    Ok(Json(s).into_response())
}

async fn upload(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Path((id, name)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let receipt = blocking(&p, move |p| p.upload(&tok, &id, &name, &body)).await?;
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

async fn cluster(State(p): State<Shared>, Caller(tok): Caller) -> ApiResult<Response> {
    let view = blocking(&p, move |p| Ok(p.cluster(&tok))).await?;
    Ok(Json(view).into_response())
}

async fn pod_status(
    State(p): State<Shared>,
    Caller(tok): Caller,
    Path(name): Path<String>,
) -> ApiResult<Response> {
    let view = blocking(&p, move |p| p.pod_status(&tok, &name)).await?;
    Ok(Json(view).into_response())
}

async fn metrics(State(p): State<Shared>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        p.scrape(),
    )
        .into_response()
}
