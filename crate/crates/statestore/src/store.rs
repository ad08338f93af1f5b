use async_trait::async_trait;

use crate::types::*;

/// The registry contract shared by the in-process and external backings.
///
/// Counters are linearizable per (node, repository). Selection picks the
/// eligible node with the most free checkouts for the repository, breaking
/// ties by the lexicographically smallest node id; a node is eligible when it
/// belongs to the requested cluster, heartbeated within the staleness
/// threshold, and has at least one free checkout and one free sandbox.
#[async_trait]
pub trait StateStore: Send + Sync + 'static {
    fn config(&self) -> StoreConfig;

    /// Adds or replaces a node. A (re)registered node is ineligible until its
    /// first heartbeat.
    async fn register_node(&self, registration: NodeRegistration) -> Result<(), StoreError>;

    /// Applies a heartbeat. Heartbeats older than the stored one are ignored.
    async fn update_status(&self, status: NodeStatus) -> Result<StatusOutcome, StoreError>;

    async fn select_and_occupy_excluding(
        &self,
        repo_id: &str,
        cluster_id: &str,
        exclude: &[String],
    ) -> Result<Lease, StoreError>;

    async fn select_and_occupy(
        &self,
        repo_id: &str,
        cluster_id: &str,
    ) -> Result<Lease, StoreError> {
        self.select_and_occupy_excluding(repo_id, cluster_id, &[])
            .await
    }

    /// Returns the lease's checkout and sandbox to the pool. Idempotent per
    /// lease id.
    async fn release(&self, lease: &Lease) -> Result<ReleaseOutcome, StoreError>;

    /// Releases every lease with `expires_at <= now` and returns them.
    async fn expire_leases(&self, now: Timestamp) -> Result<Vec<Lease>, StoreError>;

    async fn node(&self, node_id: &str) -> Result<Option<NodeView>, StoreError>;

    async fn nodes(&self) -> Result<Vec<NodeView>, StoreError>;

    async fn live_leases(&self) -> Result<Vec<Lease>, StoreError>;
}

pub(crate) fn validate_registration(reg: &NodeRegistration) -> Result<(), StoreError> {
    let bad = |why: String| Err(StoreError::InvalidRegistration(why));
    for (what, id) in [("node_id", &reg.node_id), ("cluster_id", &reg.cluster_id)] {
        if id.is_empty() || id.contains(':') {
            return bad(format!("{what} `{id}` must be non-empty and free of ':'"));
        }
    }
    if matches!(reg.cluster_id.as_str(), "lease" | "node") {
        return bad(format!("cluster id `{}` is reserved", reg.cluster_id));
    }
    if reg.sandbox_pool == 0 {
        return bad("sandbox pool must be at least 1".into());
    }
    for (repo, size) in &reg.checkout_pools {
        if repo.is_empty() || repo.contains(':') {
            return bad(format!(
                "repo id `{repo}` must be non-empty and free of ':'"
            ));
        }
        if *size == 0 {
            return bad(format!("checkout pool for `{repo}` must be at least 1"));
        }
    }
    Ok(())
}

pub(crate) fn validate_status(
    reg: &NodeRegistration,
    status: &NodeStatus,
) -> Result<(), StoreError> {
    let bad = |reason: String| {
        Err(StoreError::InvalidStatus {
            node: status.node_id.clone(),
            reason,
        })
    };
    if status.cluster_id != reg.cluster_id {
        return bad(format!(
            "cluster `{}` != registered `{}`",
            status.cluster_id, reg.cluster_id
        ));
    }
    for (repo, free) in &status.free_checkouts {
        match reg.checkout_pools.get(repo) {
            None => return bad(format!("repo `{repo}` not registered")),
            Some(pool) if free > pool => {
                return bad(format!(
                    "{free} free `{repo}` checkouts exceeds pool of {pool}"
                ))
            }
            _ => {}
        }
    }
    if status.free_sandboxes > reg.sandbox_pool {
        return bad(format!(
            "{} free sandboxes exceeds pool of {}",
            status.free_sandboxes, reg.sandbox_pool
        ));
    }
    Ok(())
}

pub(crate) fn new_lease_id() -> String {
    uuid::Uuid::new_v4().to_string()
}
