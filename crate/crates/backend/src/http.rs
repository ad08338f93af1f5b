//! Webhook and metrics endpoints.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::node::Node;
use crate::sandbox::SandboxState;

#[derive(Debug, Deserialize)]
pub struct PushEvent {
    pub repo_id: String,
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/events/push", post(push_event))
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok\n" }))
        .with_state(node)
}

async fn push_event(
    State(node): State<Arc<Node>>,
    Json(event): Json<PushEvent>,
) -> (StatusCode, &'static str) {
    match node.repo(&event.repo_id) {
        Some(repo) => {
            repo.notify_push();
            (StatusCode::ACCEPTED, "accepted\n")
        }
        None => (StatusCode::NOT_FOUND, "unknown repository\n"),
    }
}

async fn metrics(State(node): State<Arc<Node>>) -> String {
    render_metrics(&node)
}

pub fn render_metrics(node: &Node) -> String {
    let mut gauges = Vec::new();
    for pool in node.pools() {
        let repo = pool.repo();
        let id = repo.id();
        let c = pool.counts();
        for (name, v) in [
            ("size", c.size),
            ("ready", c.ready),
            ("in_use", c.in_use),
            ("refreshing", c.refreshing),
        ] {
            gauges.push((
                format!("gitfarm_checkouts_{name}{{repo=\"{id}\"}}"),
                v as f64,
            ));
        }
        let status = repo.status();
        gauges.push((
            format!("gitfarm_sync_lag_seconds{{repo=\"{id}\"}}"),
            repo.sync_lag().as_secs_f64(),
        ));
        gauges.push((
            format!("gitfarm_sync_failures_total{{repo=\"{id}\"}}"),
            status.failures as f64,
        ));
        gauges.push((
            format!("gitfarm_repo_degraded{{repo=\"{id}\"}}"),
            status.degraded as u8 as f64,
        ));
    }
    let slots = node.sandboxes().slots();
    for (name, state) in [
        ("idle", SandboxState::Idle),
        ("bound", SandboxState::Bound),
        ("scrubbing", SandboxState::Scrubbing),
    ] {
        let n = slots.iter().filter(|s| s.state == state).count();
        gauges.push((format!("gitfarm_sandboxes_{name}"), n as f64));
    }
    gauges.push((
        "gitfarm_sessions_active".into(),
        node.active_sessions() as f64,
    ));
    node.metrics().render(&gauges)
}
