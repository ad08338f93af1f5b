//! [`StateStore`] over the networked KV server.
//!
//! Key layout:
//!
//! | key                              | value                          |
//! |----------------------------------|--------------------------------|
//! | `gf:{cluster}:{node}:{repo}:free`| free checkout count            |
//! | `gf:{cluster}:{node}:hb`         | last heartbeat (ms)            |
//! | `gf:lease:{lease_id}`            | lease JSON, with TTL           |
//! | `gf:{cluster}:{node}:sandboxes`  | free sandbox count             |
//! | `gf:node:{node_id}`              | registration JSON              |
//!
//! Counters are only ever modified through compare-and-swap retry loops, so
//! each one is linearizable on the server.

use std::net::SocketAddr;
use std::sync::Arc;

use async_trait::async_trait;

use crate::clock::{Clock, SystemClock};
use crate::kv::KvClient;
use crate::store::{new_lease_id, validate_registration, validate_status, StateStore};
use crate::types::*;

const MAX_SELECT_ROUNDS: usize = 64;

pub fn free_key(cluster: &str, node: &str, repo: &str) -> String {
    format!("gf:{cluster}:{node}:{repo}:free")
}

pub fn heartbeat_key(cluster: &str, node: &str) -> String {
    format!("gf:{cluster}:{node}:hb")
}

pub fn lease_key(lease_id: &str) -> String {
    format!("gf:lease:{lease_id}")
}

fn sandbox_key(cluster: &str, node: &str) -> String {
    format!("gf:{cluster}:{node}:sandboxes")
}

fn node_key(node: &str) -> String {
    format!("gf:node:{node}")
}

pub struct RemoteStore {
    kv: KvClient,
    clock: Arc<dyn Clock>,
    config: StoreConfig,
}

fn parse_count(v: &Option<String>) -> i64 {
    v.as_deref().and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn corrupt(what: &str, e: impl std::fmt::Display) -> StoreError {
    StoreError::Unavailable(format!("corrupt {what}: {e}"))
}

impl RemoteStore {
    pub fn new(addr: SocketAddr, config: StoreConfig) -> Self {
        Self::with_clock(KvClient::new(addr), config, Arc::new(SystemClock))
    }

    pub fn with_clock(kv: KvClient, config: StoreConfig, clock: Arc<dyn Clock>) -> Self {
        Self { kv, clock, config }
    }

    async fn registration(&self, node_id: &str) -> Result<Option<NodeRegistration>, StoreError> {
        self.kv
            .get(&node_key(node_id))
            .await?
            .map(|raw| serde_json::from_str(&raw).map_err(|e| corrupt("registration", e)))
            .transpose()
    }

    async fn registrations(&self) -> Result<Vec<NodeRegistration>, StoreError> {
        self.kv
            .scan("gf:node:")
            .await?
            .into_iter()
            .map(|(_, raw)| serde_json::from_str(&raw).map_err(|e| corrupt("registration", e)))
            .collect()
    }

    async fn heartbeat(&self, reg: &NodeRegistration) -> Result<Option<Timestamp>, StoreError> {
        let raw = self
            .kv
            .get(&heartbeat_key(&reg.cluster_id, &reg.node_id))
            .await?;
        Ok(raw.and_then(|s| s.parse().ok()).map(Timestamp))
    }

    /// Adds `delta`, clamping at `max`. Returns false (and changes nothing)
    /// if the result would be negative.
    async fn adjust(&self, key: &str, delta: i64, max: u32) -> Result<bool, StoreError> {
        let mut current = self.kv.get(key).await?;
        loop {
            let next = parse_count(&current) + delta;
            if next < 0 {
                return Ok(false);
            }
            let next = next.min(max as i64);
            match self
                .kv
                .cas(key, current.clone(), Some(next.to_string()), None)
                .await?
            {
                Ok(()) => return Ok(true),
                Err(actual) => current = actual,
            }
        }
    }

    async fn put_value(&self, key: &str, value: Option<String>) -> Result<(), StoreError> {
        let mut current = self.kv.get(key).await?;
        loop {
            match self
                .kv
                .cas(key, current.clone(), value.clone(), None)
                .await?
            {
                Ok(()) => return Ok(()),
                Err(actual) => current = actual,
            }
        }
    }

    async fn leases(&self) -> Result<Vec<Lease>, StoreError> {
        self.kv
            .scan("gf:lease:")
            .await?
            .into_iter()
            .map(|(_, raw)| serde_json::from_str(&raw).map_err(|e| corrupt("lease", e)))
            .collect()
    }

    async fn release_by_id(&self, lease_id: &str) -> Result<ReleaseOutcome, StoreError> {
        let key = lease_key(lease_id);
        let Some(raw) = self.kv.get(&key).await? else {
            tracing::warn!(lease_id, "release of unknown lease");
            return Ok(ReleaseOutcome::Unknown);
        };
        if self
            .kv
            .cas(&key, Some(raw.clone()), None, None)
            .await?
            .is_err()
        {
            return Ok(ReleaseOutcome::Unknown);
        }
        let lease: Lease = serde_json::from_str(&raw).map_err(|e| corrupt("lease", e))?;
        if let Some(reg) = self.registration(&lease.node_id).await? {
            let pool = reg.checkout_pools.get(&lease.repo_id).copied().unwrap_or(0);
            self.adjust(
                &free_key(&reg.cluster_id, &reg.node_id, &lease.repo_id),
                1,
                pool,
            )
            .await?;
            self.adjust(
                &sandbox_key(&reg.cluster_id, &reg.node_id),
                1,
                reg.sandbox_pool,
            )
            .await?;
        }
        Ok(ReleaseOutcome::Released)
    }

    async fn view(&self, reg: NodeRegistration) -> Result<NodeView, StoreError> {
        let mut free_checkouts = std::collections::BTreeMap::new();
        for repo in reg.checkout_pools.keys() {
            let v = self
                .kv
                .get(&free_key(&reg.cluster_id, &reg.node_id, repo))
                .await?;
            free_checkouts.insert(repo.clone(), parse_count(&v).max(0) as u32);
        }
        let sandboxes = self
            .kv
            .get(&sandbox_key(&reg.cluster_id, &reg.node_id))
            .await?;
        let last_heartbeat = self.heartbeat(&reg).await?;
        Ok(NodeView {
            free_checkouts,
            free_sandboxes: parse_count(&sandboxes).max(0) as u32,
            last_heartbeat,
            registration: reg,
        })
    }
}

#[async_trait]
impl StateStore for RemoteStore {
    fn config(&self) -> StoreConfig {
        self.config
    }

    async fn register_node(&self, registration: NodeRegistration) -> Result<(), StoreError> {
        validate_registration(&registration)?;
        if let Some(old) = self.registration(&registration.node_id).await? {
            if old.cluster_id != registration.cluster_id {
                return Err(StoreError::InvalidRegistration(format!(
                    "node `{}` already registered in cluster `{}`",
                    registration.node_id, old.cluster_id
                )));
            }
        }
        let (cluster, node) = (&registration.cluster_id, &registration.node_id);
        self.put_value(&heartbeat_key(cluster, node), None).await?;
        for (repo, pool) in &registration.checkout_pools {
            self.kv
                .set(&free_key(cluster, node, repo), pool.to_string(), None)
                .await?;
        }
        self.kv
            .set(
                &sandbox_key(cluster, node),
                registration.sandbox_pool.to_string(),
                None,
            )
            .await?;
        let raw = serde_json::to_string(&registration).expect("registration serializes");
        self.kv.set(&node_key(node), raw, None).await
    }

    async fn update_status(&self, status: NodeStatus) -> Result<StatusOutcome, StoreError> {
        let reg = self
            .registration(&status.node_id)
            .await?
            .ok_or_else(|| StoreError::UnknownNode(status.node_id.clone()))?;
        validate_status(&reg, &status)?;

        let hb = heartbeat_key(&reg.cluster_id, &reg.node_id);
        let mut current = self.kv.get(&hb).await?;
        loop {
            let prev = current.as_deref().and_then(|s| s.parse::<u64>().ok());
            if prev.is_some_and(|p| status.heartbeat_time.0 < p) {
                return Ok(StatusOutcome::Stale);
            }
            let next = Some(status.heartbeat_time.0.to_string());
            match self.kv.cas(&hb, current.clone(), next, None).await? {
                Ok(()) => break,
                Err(actual) => current = actual,
            }
        }

        let in_flight: Vec<Lease> = self
            .leases()
            .await?
            .into_iter()
            .filter(|l| l.node_id == reg.node_id && !status.active_leases.contains(&l.lease_id))
            .collect();
        for repo in reg.checkout_pools.keys() {
            let reported = status.free_checkouts.get(repo).copied().unwrap_or(0);
            let pending = in_flight.iter().filter(|l| &l.repo_id == repo).count() as u32;
            let value = reported.saturating_sub(pending).to_string();
            self.kv
                .set(&free_key(&reg.cluster_id, &reg.node_id, repo), value, None)
                .await?;
        }
        let sandboxes = status.free_sandboxes.saturating_sub(in_flight.len() as u32);
        self.kv
            .set(
                &sandbox_key(&reg.cluster_id, &reg.node_id),
                sandboxes.to_string(),
                None,
            )
            .await?;
        Ok(StatusOutcome::Applied)
    }

    async fn select_and_occupy_excluding(
        &self,
        repo_id: &str,
        cluster_id: &str,
        exclude: &[String],
    ) -> Result<Lease, StoreError> {
        let no_capacity = || StoreError::NoCapacity {
            repo: repo_id.to_owned(),
            cluster: cluster_id.to_owned(),
        };
        let regs: Vec<NodeRegistration> = self
            .registrations()
            .await?
            .into_iter()
            .filter(|r| r.cluster_id == cluster_id && r.checkout_pools.contains_key(repo_id))
            .filter(|r| !exclude.contains(&r.node_id))
            .collect();

        'round: for _ in 0..MAX_SELECT_ROUNDS {
            let now = self.clock.now();
            let mut candidates = Vec::new();
            for reg in &regs {
                let fresh = self
                    .heartbeat(reg)
                    .await?
                    .is_some_and(|hb| now.since(hb) < self.config.staleness);
                if !fresh {
                    continue;
                }
                let key = free_key(&reg.cluster_id, &reg.node_id, repo_id);
                let raw = self.kv.get(&key).await?;
                let count = parse_count(&raw);
                if count > 0 {
                    candidates.push((count, reg, key, raw));
                }
            }
            candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.node_id.cmp(&b.1.node_id)));

            for (count, reg, key, raw) in candidates {
                let taken = Some((count - 1).to_string());
                if self.kv.cas(&key, raw, taken, None).await?.is_err() {
                    // counter moved under us; re-rank from scratch
                    continue 'round;
                }
                let sandboxes = sandbox_key(&reg.cluster_id, &reg.node_id);
                if !self.adjust(&sandboxes, -1, reg.sandbox_pool).await? {
                    let pool = reg.checkout_pools[repo_id];
                    self.adjust(&key, 1, pool).await?;
                    continue;
                }
                let lease = Lease {
                    lease_id: new_lease_id(),
                    node_id: reg.node_id.clone(),
                    cluster_id: cluster_id.to_owned(),
                    repo_id: repo_id.to_owned(),
                    acquired_at: now,
                    expires_at: now.plus(self.config.lease_ttl),
                };
                let raw = serde_json::to_string(&lease).expect("lease serializes");
                // the sweeper reclaims at expires_at; the TTL only bounds garbage
                let ttl = self.config.lease_ttl * 2;
                self.kv
                    .set(&lease_key(&lease.lease_id), raw, Some(ttl))
                    .await?;
                return Ok(lease);
            }
            return Err(no_capacity());
        }
        Err(no_capacity())
    }

    async fn release(&self, lease: &Lease) -> Result<ReleaseOutcome, StoreError> {
        self.release_by_id(&lease.lease_id).await
    }

    async fn expire_leases(&self, now: Timestamp) -> Result<Vec<Lease>, StoreError> {
        let mut reclaimed = Vec::new();
        for lease in self.leases().await? {
            if lease.expires_at <= now
                && self.release_by_id(&lease.lease_id).await? == ReleaseOutcome::Released
            {
                reclaimed.push(lease);
            }
        }
        Ok(reclaimed)
    }

    async fn node(&self, node_id: &str) -> Result<Option<NodeView>, StoreError> {
        match self.registration(node_id).await? {
            Some(reg) => self.view(reg).await.map(Some),
            None => Ok(None),
        }
    }

    async fn nodes(&self) -> Result<Vec<NodeView>, StoreError> {
        let mut views = Vec::new();
        for reg in self.registrations().await? {
            views.push(self.view(reg).await?);
        }
        Ok(views)
    }

    async fn live_leases(&self) -> Result<Vec<Lease>, StoreError> {
        self.leases().await
    }
}
