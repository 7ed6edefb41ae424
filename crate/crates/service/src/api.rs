//! HTTP routing for `/api/v1`.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use notigate_core::alerts::{Assignment, RuleMatch, RuleOrigin};
use notigate_core::availability::Preferences;
use notigate_core::gateway::{Command, ErrorClass, GatewayError, Response, RuleInput};
use notigate_core::ingestion::IngestError;
use notigate_core::model::{Channel, Signal};
use notigate_core::store::StoreError;
use notigate_core::time::{parse_rfc3339, Timestamp};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::app::App;

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": kind, "message": message.into()}),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Rejected(g) => g.into(),
            other => {
                tracing::error!(error = %other, "store failure");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string())
            }
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        if let GatewayError::Ingest(IngestError::Validation(v)) = &e {
            return Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({"error": "validation", "message": e.to_string(), "report": v}),
            };
        }
        let (status, kind) = match e.class() {
            ErrorClass::Invalid => (StatusCode::BAD_REQUEST, "bad_request"),
            ErrorClass::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            ErrorClass::Conflict => (StatusCode::CONFLICT, "conflict"),
        };
        Self::new(status, kind, e.to_string())
    }
}

type ApiResult = Result<HttpResponse, ApiError>;

async fn submit(app: &Arc<App>, cmd: Command) -> Result<Response, ApiError> {
    let app = app.clone();
    tokio::task::spawn_blocking(move || app.submit(cmd))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_time(field: &str, value: Option<&str>) -> Result<Option<Timestamp>, ApiError> {
    value
        .map(|s| parse_rfc3339(s).map_err(|_| ApiError::bad_request(format!("`{field}` must be an RFC 3339 timestamp"))))
        .transpose()
}

fn ok(body: impl serde::Serialize) -> ApiResult {
    Ok(Json(body).into_response())
}

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/events", post(post_event))
        .route("/rules", get(list_rules).post(create_rule))
        .route("/rules/{id}", get(get_rule).put(update_rule).delete(delete_rule))
        .route("/recommendations", get(recommendations))
        .route("/notifications", get(list_notifications))
        .route("/notifications/{id}", get(get_notification))
        .route("/notifications/{id}/ack", post(ack))
        .route("/feedback", post(feedback))
        .route("/users/{id}/preferences", get(get_preferences).put(put_preferences))
        .route("/users/{id}/availability", get(availability))
        .route("/decisions", get(decisions))
        .route("/policy", get(policy))
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new()
        .nest("/api/v1", api)
        .fallback(not_found)
        .with_state(app)
}

async fn not_found(uri: Uri) -> ApiError {
    ApiError::not_found(format!("no route for {}", uri.path()))
}

async fn auth(State(app): State<Arc<App>>, req: Request, next: Next) -> HttpResponse {
    let Some(token) = app.token() else {
        return next.run(req).await;
    };
    if req.uri().path().ends_with("/health") {
        return next.run(req).await;
    }
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response()
    }
}

#[derive(Deserialize)]
struct EventQuery {
    watcher: Option<String>,
}

async fn post_event(State(app): State<Arc<App>>, Query(q): Query<EventQuery>, Json(event): Json<Value>) -> ApiResult {
    let cmd = Command::Ingest {
        watcher_id: q.watcher,
        event,
        received_at: app.now(),
    };
    let r = submit(&app, cmd).await?;
    Ok((StatusCode::ACCEPTED, Json(r)).into_response())
}

#[derive(Deserialize)]
struct UserQuery {
    user: Option<String>,
}

#[derive(Deserialize)]
struct RuleDocument {
    #[serde(default)]
    rule_id: Option<String>,
    #[serde(default, alias = "user")]
    user_id: Option<String>,
    #[serde(rename = "match", default)]
    matcher: RuleMatch,
    #[serde(default)]
    assign: Assignment,
    #[serde(default)]
    enabled: Option<bool>,
    #[serde(default)]
    created_by: Option<RuleOrigin>,
}

impl RuleDocument {
    fn into_input(self, query_user: Option<String>, rule_id: Option<String>) -> Result<RuleInput, ApiError> {
        let user_id = self
            .user_id
            .or(query_user)
            .ok_or_else(|| ApiError::bad_request("rule needs a user_id"))?;
        Ok(RuleInput {
            rule_id: rule_id.or(self.rule_id),
            user_id,
            matcher: self.matcher,
            assign: self.assign,
            enabled: self.enabled.unwrap_or(true),
            created_by: self.created_by.unwrap_or(RuleOrigin::User),
        })
    }
}

async fn list_rules(State(app): State<Arc<App>>, Query(q): Query<UserQuery>) -> ApiResult {
    let rules = app.read(|g| {
        g.rules()
            .iter()
            .filter(|r| q.user.as_ref().is_none_or(|u| &r.user_id == u))
            .cloned()
            .collect::<Vec<_>>()
    });
    ok(rules)
}

async fn get_rule(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    match app.read(|g| g.rule(&id).cloned()) {
        Some(r) => ok(r),
        None => Err(ApiError::not_found(format!("unknown rule {id}"))),
    }
}

async fn create_rule(State(app): State<Arc<App>>, Query(q): Query<UserQuery>, Json(doc): Json<RuleDocument>) -> ApiResult {
    let rule = doc.into_input(q.user, None)?;
    let r = submit(&app, Command::CreateRule { rule }).await?;
    Ok((StatusCode::CREATED, Json(r)).into_response())
}

async fn update_rule(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(doc): Json<RuleDocument>,
) -> ApiResult {
    let existing_user = app.read(|g| g.rule(&id).map(|r| r.user_id.clone()));
    let Some(existing_user) = existing_user else {
        return Err(ApiError::not_found(format!("unknown rule {id}")));
    };
    let rule = doc.into_input(Some(existing_user), Some(id))?;
    ok(submit(&app, Command::UpdateRule { rule }).await?)
}

async fn delete_rule(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(submit(&app, Command::DeleteRule { rule_id: id }).await?)
}

fn require_user(q: UserQuery) -> Result<String, ApiError> {
    q.user.ok_or_else(|| ApiError::bad_request("query parameter `user` is required"))
}

async fn recommendations(State(app): State<Arc<App>>, Query(q): Query<UserQuery>) -> ApiResult {
    let user = require_user(q)?;
    ok(app.read(|g| g.recommendations(&user)))
}

#[derive(Deserialize)]
struct NotificationQuery {
    user: Option<String>,
    since: Option<String>,
    limit: Option<usize>,
}

/// Newest first by scheduled time.
async fn list_notifications(State(app): State<Arc<App>>, Query(q): Query<NotificationQuery>) -> ApiResult {
    let since = parse_time("since", q.since.as_deref())?;
    let views = app.read(|g| {
        let mut list: Vec<_> = g
            .notifications()
            .filter(|n| q.user.as_ref().is_none_or(|u| &n.user_id == u))
            .filter(|n| since.is_none_or(|s| n.scheduled_at >= s))
            .collect();
        list.sort_by(|a, b| (b.scheduled_at, &b.notification_id).cmp(&(a.scheduled_at, &a.notification_id)));
        list.into_iter()
            .take(q.limit.unwrap_or(usize::MAX))
            .map(|n| g.notification_view(n))
            .collect::<Vec<_>>()
    });
    ok(views)
}

async fn get_notification(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    match app.read(|g| g.notification(&id).map(|n| g.notification_view(n))) {
        Some(v) => ok(v),
        None => Err(ApiError::not_found(format!("unknown notification {id}"))),
    }
}

#[derive(Deserialize, Default)]
struct AtBody {
    at: Option<String>,
}

async fn ack(State(app): State<Arc<App>>, Path(id): Path<String>, body: Option<Json<AtBody>>) -> ApiResult {
    let at = parse_time("at", body.unwrap_or_default().0.at.as_deref())?.unwrap_or_else(|| app.now());
    ok(submit(&app, Command::Ack { notification_id: id, at }).await?)
}

#[derive(Deserialize)]
struct FeedbackBody {
    notification_id: Option<String>,
    /// Set instead of `notification_id` to report a suppressed alert as missed.
    decision_id: Option<String>,
    signal: Option<Signal>,
    at: Option<String>,
    #[serde(default = "explicit_by_default")]
    explicit: bool,
}

fn explicit_by_default() -> bool {
    true
}

async fn feedback(State(app): State<Arc<App>>, Json(body): Json<FeedbackBody>) -> ApiResult {
    let at = parse_time("at", body.at.as_deref())?.unwrap_or_else(|| app.now());
    let cmd = match (body.notification_id, body.decision_id) {
        (Some(notification_id), None) => Command::Feedback {
            notification_id,
            signal: body.signal.ok_or_else(|| ApiError::bad_request("`signal` is required"))?,
            at,
            explicit: body.explicit,
        },
        (None, Some(decision_id)) => {
            if body.signal.is_some_and(|s| !s.is_negative()) {
                return Err(ApiError::bad_request("a missed-alert report takes a negative signal"));
            }
            Command::MissedAlert { decision_id, at }
        }
        _ => return Err(ApiError::bad_request("give exactly one of `notification_id` or `decision_id`")),
    };
    ok(submit(&app, cmd).await?)
}

async fn get_preferences(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(app.read(|g| g.preferences(&id)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PreferencesPatch {
    channel_order: Option<Vec<Channel>>,
    quiet_hours: Option<BTreeSet<usize>>,
    availability_threshold: Option<f64>,
    timezone_offset_minutes: Option<i32>,
    digest_window_length_secs: Option<u64>,
    #[serde(default)]
    user_id: Option<String>,
}

async fn put_preferences(State(app): State<Arc<App>>, Path(id): Path<String>, Json(patch): Json<PreferencesPatch>) -> ApiResult {
    if patch.user_id.as_ref().is_some_and(|u| u != &id) {
        return Err(ApiError::bad_request("user_id in the body does not match the path"));
    }
    let current = app.read(|g| g.preferences(&id));
    let preferences = Preferences {
        user_id: id,
        channel_order: patch.channel_order.unwrap_or(current.channel_order),
        quiet_hours: patch.quiet_hours.unwrap_or(current.quiet_hours),
        digest_window_length_secs: patch.digest_window_length_secs.or(current.digest_window_length_secs),
        availability_threshold: patch.availability_threshold.unwrap_or(current.availability_threshold),
        timezone_offset_minutes: patch.timezone_offset_minutes.unwrap_or(current.timezone_offset_minutes),
    };
    ok(submit(&app, Command::SetPreferences { preferences }).await?)
}

async fn availability(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    let scores = app.read(|g| g.availability(&id));
    ok(json!({"user_id": id, "scores": scores}))
}

#[derive(Deserialize)]
struct DecisionQuery {
    alert_id: Option<String>,
    user: Option<String>,
    since: Option<String>,
}

async fn decisions(State(app): State<Arc<App>>, Query(q): Query<DecisionQuery>) -> ApiResult {
    let since = parse_time("since", q.since.as_deref())?;
    match (q.alert_id, q.user) {
        (Some(alert), None) => ok(app.read(|g| g.decision_for_alert(&alert).cloned().into_iter().collect::<Vec<_>>())),
        (None, Some(user)) => ok(app.read(|g| {
            g.decisions_for_user(&user, since)
                .into_iter()
                .cloned()
                .collect::<Vec<_>>()
        })),
        _ => Err(ApiError::bad_request("give exactly one of `alert_id` or `user`")),
    }
}

async fn policy(State(app): State<Arc<App>>, Query(q): Query<UserQuery>) -> ApiResult {
    let user = require_user(q)?;
    ok(app.read(|g| g.policy(&user)))
}

async fn metrics(State(app): State<Arc<App>>) -> ApiResult {
    ok(app.read(|g| {
        let c = g.conservation();
        json!({"gateway": g.metrics(), "conservation": c, "conservation_holds": c.holds()})
    }))
}

async fn health(State(app): State<Arc<App>>) -> ApiResult {
    let seq = app.last_seq();
    ok(json!({"status": "ok", "last_seq": seq, "now": notigate_core::time::format_rfc3339(app.now())}))
}
