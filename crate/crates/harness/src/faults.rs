//! Fault injection, each paired with the assertions it exists to exercise.

use std::time::{Duration, Instant};

use gitfarm_backend::SyncTrigger;
use gitfarm_client::{ClientError, Session};
use gitfarm_protocol::{Command, ErrorCode};
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::workload::{error_kind, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    KillBackend,
    StopUpstream,
    DropClient,
    StallStatestore,
}

impl std::str::FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| format!("unknown fault `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReport {
    pub kind: FaultKind,
    pub checks: Vec<Check>,
}

impl FaultReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

const SETTLE: Duration = Duration::from_secs(60);

async fn open(target: &Target) -> Result<Session, ClientError> {
    let mut s = Session::connect(&target.endpoint, &target.repo_id, &target.token).await?;
    s.set_read_timeout(Some(Duration::from_secs(60)));
    Ok(s)
}

/// One short read-only session.
async fn probe(target: &Target) -> Result<String, ClientError> {
    let mut s = open(target).await?;
    let r = s.run(Command::git("head", ["rev-parse", "HEAD"])).await?;
    s.close().await?;
    Ok(r.stdout_lossy().trim().to_owned())
}

async fn conservation(cluster: &Cluster, report: &mut FaultReport) {
    let c = cluster.conservation(SETTLE).await;
    report.check("pool_conserved", c.holds(), c.problems.join("; "));
}

/// Applies `kind` to the cluster, evaluates its accompanying assertions and
/// restores the cluster.
pub async fn inject_fault(cluster: &mut Cluster, kind: FaultKind, target: &Target) -> FaultReport {
    let mut report = FaultReport {
        kind,
        checks: Vec::new(),
    };
    match kind {
        FaultKind::KillBackend => kill_backend(cluster, target, &mut report).await,
        FaultKind::StopUpstream => stop_upstream(cluster, target, &mut report).await,
        FaultKind::DropClient => drop_client(cluster, target, &mut report).await,
        FaultKind::StallStatestore => stall_store(cluster, target, &mut report).await,
    }
    report
}

async fn kill_backend(cluster: &mut Cluster, target: &Target, report: &mut FaultReport) {
    let mut s = match open(target).await {
        Ok(s) => s,
        Err(e) => return report.check("session_before_kill", false, e.to_string()),
    };
    let node = s.node_id().to_owned();
    let Some(i) = node.strip_prefix("node-").and_then(|n| n.parse().ok()) else {
        return report.check("session_before_kill", false, format!("unknown node {node}"));
    };
    let _ = cluster.kill_backend(i);
    let outcome = s
        .run(Command::git("after-kill", ["rev-parse", "HEAD"]))
        .await;
    let lost = matches!(&outcome, Err(ClientError::Fatal(e)) if e.code == ErrorCode::Unavailable);
    report.check(
        "in_flight_session_sees_unavailable",
        lost,
        match &outcome {
            Ok(_) => "command ran on a killed node".into(),
            Err(e) => e.to_string(),
        },
    );
    let next = probe(target).await;
    let others = cluster.live_backends().count() > 0;
    let acceptable = match &next {
        Ok(_) => others,
        Err(e) => matches!(
            e.session_error().map(|e| e.code),
            Some(ErrorCode::ResourceExhausted | ErrorCode::Unavailable)
        ),
    };
    report.check(
        "next_session_served_or_refused",
        acceptable,
        match &next {
            Ok(_) => "served".into(),
            Err(e) => error_kind(e),
        },
    );
    let restarted = cluster.restart_backend(i).await;
    report.check(
        "restart",
        restarted.is_ok(),
        restarted.err().map(|e| e.to_string()).unwrap_or_default(),
    );
    conservation(cluster, report).await;
}

async fn stop_upstream(cluster: &mut Cluster, target: &Target, report: &mut FaultReport) {
    let repo_id = target.repo_id.clone();
    let Some(daemon) = cluster.upstream() else {
        return report.check(
            "upstream_served_by_daemon",
            false,
            "cluster has no git daemon",
        );
    };
    daemon.stop();
    let mut failures = 0;
    for b in cluster.live_backends() {
        let Some(repo) = b.node().repo(&repo_id) else {
            continue;
        };
        for _ in 0..gitfarm_backend::repo::DEGRADED_AFTER {
            if repo.sync(SyncTrigger::Event).await.is_err() {
                failures += 1;
            }
        }
    }
    let degraded = cluster
        .live_backends()
        .filter_map(|b| b.node().repo(&repo_id).map(|r| r.status().degraded))
        .all(|d| d);
    report.check(
        "sync_fails_and_degrades",
        failures > 0 && degraded,
        format!("{failures} failed syncs"),
    );
    let served = probe(target).await;
    report.check(
        "degraded_repo_still_serves",
        served.is_ok(),
        served.err().map(|e| e.to_string()).unwrap_or_default(),
    );
    let restarted = cluster.upstream().map(|d| d.restart());
    report.check("upstream_restart", matches!(restarted, Some(Ok(()))), "");
    let mut recovered = true;
    for b in cluster.live_backends() {
        let Some(repo) = b.node().repo(&repo_id) else {
            continue;
        };
        recovered &= repo.sync(SyncTrigger::Event).await.is_ok() && !repo.status().degraded;
    }
    report.check("sync_recovers", recovered, "");
    conservation(cluster, report).await;
}

async fn drop_client(cluster: &mut Cluster, target: &Target, report: &mut FaultReport) {
    let before = cluster.gateway().gateway().metrics().snapshot()["client_disconnects"];
    match open(target).await {
        Ok(mut s) => {
            let _ = s
                .submit(Command::git("abandoned", ["log", "--oneline", "-n", "100"]))
                .await;
            drop(s);
        }
        Err(e) => return report.check("session_before_drop", false, e.to_string()),
    }
    conservation(cluster, report).await;
    let after = cluster.gateway().gateway().metrics().snapshot()["client_disconnects"];
    report.check(
        "disconnect_counted",
        after > before,
        format!("{before} -> {after}"),
    );
    let next = probe(target).await;
    report.check(
        "next_session_served",
        next.is_ok(),
        next.err().map(|e| e.to_string()).unwrap_or_default(),
    );
}

async fn stall_store(cluster: &mut Cluster, target: &Target, report: &mut FaultReport) {
    cluster.store().stall();
    let t0 = Instant::now();
    let stalled = tokio::time::timeout(Duration::from_secs(30), probe(target)).await;
    let elapsed = t0.elapsed();
    let refused = matches!(
        &stalled,
        Ok(Err(e)) if e.session_error().map(|e| e.code) == Some(ErrorCode::Unavailable)
    );
    report.check(
        "stalled_store_refuses_with_unavailable",
        refused,
        match &stalled {
            Ok(Ok(_)) => "served while the store was stalled".into(),
            Ok(Err(e)) => format!("{} after {elapsed:?}", error_kind(e)),
            Err(_) => "client hung".into(),
        },
    );
    cluster.store().resume();
    let next = probe(target).await;
    report.check(
        "served_after_resume",
        next.is_ok(),
        next.err().map(|e| e.to_string()).unwrap_or_default(),
    );
    conservation(cluster, report).await;
}
