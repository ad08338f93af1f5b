//! In-process registry.
//!
//! Lock order, outermost first: node status lock, per-(cluster, repo) counter
//! lock, node sandbox lock, lease table. The heartbeat cell is a leaf.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};

use crate::clock::{Clock, SystemClock};
use crate::store::{new_lease_id, validate_registration, validate_status, StateStore};
use crate::types::*;

type RepoKey = (String, String);
type Counters = Arc<Mutex<BTreeMap<String, u32>>>;

struct NodeEntry {
    registration: NodeRegistration,
    status_lock: Mutex<()>,
    heartbeat: Mutex<Option<Timestamp>>,
    sandboxes: Mutex<u32>,
}

#[derive(Default)]
struct Registry {
    nodes: HashMap<String, Arc<NodeEntry>>,
    counters: HashMap<RepoKey, Counters>,
}

pub struct MemoryStore {
    clock: Arc<dyn Clock>,
    config: StoreConfig,
    registry: RwLock<Registry>,
    leases: Mutex<HashMap<String, Lease>>,
}

impl MemoryStore {
    pub fn new(config: StoreConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: StoreConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            config,
            registry: RwLock::new(Registry::default()),
            leases: Mutex::new(HashMap::new()),
        }
    }

    fn entry(&self, node_id: &str) -> Option<Arc<NodeEntry>> {
        self.registry.read().nodes.get(node_id).cloned()
    }

    fn counters(&self, cluster: &str, repo: &str) -> Option<Counters> {
        self.registry
            .read()
            .counters
            .get(&(cluster.to_owned(), repo.to_owned()))
            .cloned()
    }

    fn is_fresh(&self, entry: &NodeEntry, now: Timestamp) -> bool {
        match *entry.heartbeat.lock() {
            Some(hb) => now.since(hb) < self.config.staleness,
            None => false,
        }
    }

    fn view(&self, entry: &NodeEntry) -> NodeView {
        let reg = &entry.registration;
        let free_checkouts = reg
            .checkout_pools
            .keys()
            .map(|repo| {
                let free = self
                    .counters(&reg.cluster_id, repo)
                    .and_then(|c| c.lock().get(&reg.node_id).copied())
                    .unwrap_or(0);
                (repo.clone(), free)
            })
            .collect();
        NodeView {
            registration: reg.clone(),
            free_checkouts,
            free_sandboxes: *entry.sandboxes.lock(),
            last_heartbeat: *entry.heartbeat.lock(),
        }
    }

    fn release_sync(&self, lease_id: &str) -> ReleaseOutcome {
        let Some(stored) = self.leases.lock().get(lease_id).cloned() else {
            tracing::warn!(lease_id, "release of unknown lease");
            return ReleaseOutcome::Unknown;
        };
        let entry = self.entry(&stored.node_id);
        let counters = self.counters(&stored.cluster_id, &stored.repo_id);

        let mut free = counters.as_ref().map(|c| c.lock());
        if self.leases.lock().remove(lease_id).is_none() {
            // lost a race with a concurrent release or expiry
            return ReleaseOutcome::Unknown;
        }
        if let (Some(free), Some(entry)) = (free.as_mut(), entry.as_ref()) {
            let pool = entry
                .registration
                .checkout_pools
                .get(&stored.repo_id)
                .copied()
                .unwrap_or(0);
            if let Some(count) = free.get_mut(&stored.node_id) {
                *count = (*count + 1).min(pool);
            }
        }
        drop(free);
        if let Some(entry) = entry {
            let mut sb = entry.sandboxes.lock();
            *sb = (*sb + 1).min(entry.registration.sandbox_pool);
        }
        ReleaseOutcome::Released
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new(StoreConfig::default())
    }
}

#[async_trait]
impl StateStore for MemoryStore {
    fn config(&self) -> StoreConfig {
        self.config
    }

    async fn register_node(&self, registration: NodeRegistration) -> Result<(), StoreError> {
        validate_registration(&registration)?;
        let mut registry = self.registry.write();
        if let Some(old) = registry.nodes.get(&registration.node_id) {
            if old.registration.cluster_id != registration.cluster_id {
                return Err(StoreError::InvalidRegistration(format!(
                    "node `{}` already registered in cluster `{}`",
                    registration.node_id, old.registration.cluster_id
                )));
            }
            for repo in old.registration.checkout_pools.keys() {
                if let Some(c) = registry
                    .counters
                    .get(&(old.registration.cluster_id.clone(), repo.clone()))
                {
                    c.lock().remove(&registration.node_id);
                }
            }
        }
        for (repo, pool) in &registration.checkout_pools {
            registry
                .counters
                .entry((registration.cluster_id.clone(), repo.clone()))
                .or_default()
                .lock()
                .insert(registration.node_id.clone(), *pool);
        }
        let entry = NodeEntry {
            status_lock: Mutex::new(()),
            heartbeat: Mutex::new(None),
            sandboxes: Mutex::new(registration.sandbox_pool),
            registration,
        };
        registry
            .nodes
            .insert(entry.registration.node_id.clone(), Arc::new(entry));
        Ok(())
    }

    async fn update_status(&self, status: NodeStatus) -> Result<StatusOutcome, StoreError> {
        let entry = self
            .entry(&status.node_id)
            .ok_or_else(|| StoreError::UnknownNode(status.node_id.clone()))?;
        let reg = &entry.registration;
        validate_status(reg, &status)?;

        let _serial = entry.status_lock.lock();
        if matches!(*entry.heartbeat.lock(), Some(prev) if status.heartbeat_time < prev) {
            return Ok(StatusOutcome::Stale);
        }
        let in_flight = |repo: Option<&str>| {
            self.leases
                .lock()
                .values()
                .filter(|l| l.node_id == reg.node_id)
                .filter(|l| repo.is_none_or(|r| l.repo_id == r))
                .filter(|l| !status.active_leases.contains(&l.lease_id))
                .count() as u32
        };
        for repo in reg.checkout_pools.keys() {
            let reported = status.free_checkouts.get(repo).copied().unwrap_or(0);
            if let Some(counters) = self.counters(&reg.cluster_id, repo) {
                let mut free = counters.lock();
                free.insert(
                    reg.node_id.clone(),
                    reported.saturating_sub(in_flight(Some(repo))),
                );
            }
        }
        {
            let mut sb = entry.sandboxes.lock();
            *sb = status.free_sandboxes.saturating_sub(in_flight(None));
        }
        *entry.heartbeat.lock() = Some(status.heartbeat_time);
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
        let (counters, entries) = {
            let registry = self.registry.read();
            let counters = registry
                .counters
                .get(&(cluster_id.to_owned(), repo_id.to_owned()))
                .cloned()
                .ok_or_else(no_capacity)?;
            let entries: HashMap<String, Arc<NodeEntry>> = registry
                .nodes
                .iter()
                .filter(|(_, e)| e.registration.cluster_id == cluster_id)
                .map(|(id, e)| (id.clone(), e.clone()))
                .collect();
            (counters, entries)
        };
        let now = self.clock.now();

        let mut free = counters.lock();
        let mut candidates: Vec<(String, u32, Arc<NodeEntry>)> = free
            .iter()
            .filter(|(node, count)| **count > 0 && !exclude.contains(node))
            .filter_map(|(node, count)| {
                entries.get(node).map(|e| (node.clone(), *count, e.clone()))
            })
            .filter(|(_, _, e)| self.is_fresh(e, now))
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        for (node_id, _, entry) in candidates {
            {
                let mut sb = entry.sandboxes.lock();
                if *sb == 0 {
                    continue;
                }
                *sb -= 1;
            }
            *free.get_mut(&node_id).expect("candidate came from map") -= 1;
            let lease = Lease {
                lease_id: new_lease_id(),
                node_id,
                cluster_id: cluster_id.to_owned(),
                repo_id: repo_id.to_owned(),
                acquired_at: now,
                expires_at: now.plus(self.config.lease_ttl),
            };
            self.leases
                .lock()
                .insert(lease.lease_id.clone(), lease.clone());
            return Ok(lease);
        }
        Err(no_capacity())
    }

    async fn release(&self, lease: &Lease) -> Result<ReleaseOutcome, StoreError> {
        Ok(self.release_sync(&lease.lease_id))
    }

    async fn expire_leases(&self, now: Timestamp) -> Result<Vec<Lease>, StoreError> {
        let expired: Vec<Lease> = self
            .leases
            .lock()
            .values()
            .filter(|l| l.expires_at <= now)
            .cloned()
            .collect();
        Ok(expired
            .into_iter()
            .filter(|l| self.release_sync(&l.lease_id) == ReleaseOutcome::Released)
            .collect())
    }

    async fn node(&self, node_id: &str) -> Result<Option<NodeView>, StoreError> {
        Ok(self.entry(node_id).map(|e| self.view(&e)))
    }

    async fn nodes(&self) -> Result<Vec<NodeView>, StoreError> {
        let mut entries: Vec<_> = self.registry.read().nodes.values().cloned().collect();
        entries.sort_by(|a, b| a.registration.node_id.cmp(&b.registration.node_id));
        Ok(entries.iter().map(|e| self.view(e)).collect())
    }

    async fn live_leases(&self) -> Result<Vec<Lease>, StoreError> {
        Ok(self.leases.lock().values().cloned().collect())
    }
}
