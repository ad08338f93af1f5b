use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch. Shared across processes, so it is wall
/// clock rather than `Instant`.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn now() -> Self {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis();
        Timestamp(ms as u64)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_add(d.as_millis() as u64))
    }

    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Static facts about a backend node, registered once at startup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub node_id: String,
    pub cluster_id: String,
    /// Where the node accepts session streams.
    pub address: String,
    /// Configured checkout pool size per repository.
    pub checkout_pools: BTreeMap<String, u32>,
    pub sandbox_pool: u32,
}

/// Heartbeat payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node_id: String,
    pub cluster_id: String,
    /// Checkouts not held by a session, per repository.
    pub free_checkouts: BTreeMap<String, u32>,
    pub free_sandboxes: u32,
    pub heartbeat_time: Timestamp,
    /// Leases the node currently has a session bound to. Live leases missing
    /// from this set are still in flight and are subtracted from the reported
    /// counts.
    #[serde(default)]
    pub active_leases: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: String,
    pub node_id: String,
    pub cluster_id: String,
    pub repo_id: String,
    pub acquired_at: Timestamp,
    pub expires_at: Timestamp,
}

/// Point-in-time view of one node as the registry sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeView {
    pub registration: NodeRegistration,
    pub free_checkouts: BTreeMap<String, u32>,
    pub free_sandboxes: u32,
    pub last_heartbeat: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    /// A node whose last heartbeat is at least this old gets no new leases.
    pub staleness: Duration,
    pub lease_ttl: Duration,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            staleness: Duration::from_secs(15),
            lease_ttl: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusOutcome {
    Applied,
    /// Older than what the registry already holds; ignored.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Released,
    /// Lease was never granted, already released, or reclaimed by expiry.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid registration: {0}")]
    InvalidRegistration(String),
    #[error("invalid status from `{node}`: {reason}")]
    InvalidStatus { node: String, reason: String },
    #[error("no capacity for `{repo}` in cluster `{cluster}`")]
    NoCapacity { repo: String, cluster: String },
    #[error("statestore unavailable: {0}")]
    Unavailable(String),
}
