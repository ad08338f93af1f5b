//! An in-process deployment: one gateway, N backend nodes and a shared
//! statestore, with hooks for killing and restarting nodes and stalling the
//! store.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use gitfarm_backend::{BackendConfig, BackendHandle, Limits, Node, PoolMode, RepositoryConfig};
use gitfarm_gateway::{ClientPolicy, GatewayConfig, GatewayHandle, Timeouts};
use gitfarm_protocol::Allowlist;
use gitfarm_statestore::{
    Lease, MemoryStore, NodeRegistration, NodeStatus, NodeView, ReleaseOutcome, StateStore,
    StatusOutcome, StoreConfig, StoreError, Timestamp,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::watch;

use crate::daemon::GitDaemon;

pub const CLIENT_ID: &str = "bench-bot";
pub const TOKEN: &str = "tok-bench";
const SECRET: &str = "bench-secret";

/// Statestore wrapper that can be stalled. While stalled every call waits
/// for `resume`, giving up with `Unavailable` after `max_stall`.
pub struct FaultyStore {
    inner: Arc<dyn StateStore>,
    stalled: watch::Sender<bool>,
    max_stall: Duration,
}

impl FaultyStore {
    pub fn new(inner: Arc<dyn StateStore>, max_stall: Duration) -> Self {
        Self {
            inner,
            stalled: watch::channel(false).0,
            max_stall,
        }
    }

    pub fn stall(&self) {
        self.stalled.send_replace(true);
    }

    pub fn resume(&self) {
        self.stalled.send_replace(false);
    }

    pub fn is_stalled(&self) -> bool {
        *self.stalled.borrow()
    }

    async fn gate(&self) -> Result<(), StoreError> {
        let mut rx = self.stalled.subscribe();
        if !*rx.borrow_and_update() {
            return Ok(());
        }
        let resumed = tokio::time::timeout(self.max_stall, rx.wait_for(|s| !*s))
            .await
            .is_ok_and(|r| r.is_ok());
        if resumed {
            Ok(())
        } else {
            Err(StoreError::Unavailable("statestore stalled".into()))
        }
    }
}

#[async_trait]
impl StateStore for FaultyStore {
    fn config(&self) -> StoreConfig {
        self.inner.config()
    }

    async fn register_node(&self, registration: NodeRegistration) -> Result<(), StoreError> {
        self.gate().await?;
        self.inner.register_node(registration).await
    }

    async fn update_status(&self, status: NodeStatus) -> Result<StatusOutcome, StoreError> {
        self.gate().await?;
        self.inner.update_status(status).await
    }

    async fn select_and_occupy_excluding(
        &self,
        repo_id: &str,
        cluster_id: &str,
        exclude: &[String],
    ) -> Result<Lease, StoreError> {
        self.gate().await?;
        self.inner
            .select_and_occupy_excluding(repo_id, cluster_id, exclude)
            .await
    }

    async fn release(&self, lease: &Lease) -> Result<ReleaseOutcome, StoreError> {
        self.gate().await?;
        self.inner.release(lease).await
    }

    async fn expire_leases(&self, now: Timestamp) -> Result<Vec<Lease>, StoreError> {
        self.gate().await?;
        self.inner.expire_leases(now).await
    }

    async fn node(&self, node_id: &str) -> Result<Option<NodeView>, StoreError> {
        self.gate().await?;
        self.inner.node(node_id).await
    }

    async fn nodes(&self) -> Result<Vec<NodeView>, StoreError> {
        self.gate().await?;
        self.inner.nodes().await
    }

    async fn live_leases(&self) -> Result<Vec<Lease>, StoreError> {
        self.gate().await?;
        self.inner.live_leases().await
    }
}

/// A repository the cluster serves.
#[derive(Debug, Clone)]
pub struct RepoSource {
    pub repo_id: String,
    pub url: String,
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub cluster_id: String,
    /// Checkouts per repository per node.
    pub pool_size: u32,
    pub sandboxes: u32,
    pub pool_mode: PoolMode,
    pub limits: Limits,
    pub sync_interval: Duration,
    pub allowlist: Vec<String>,
    /// Serve the webhook endpoint on each node.
    pub webhooks: bool,
    pub timeouts: Timeouts,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            nodes: 1,
            cluster_id: "bench".into(),
            pool_size: 4,
            sandboxes: 4,
            pool_mode: PoolMode::Warm,
            limits: Limits {
                heartbeat_interval: Duration::from_millis(250),
                acquire_wait: Duration::from_secs(2),
                ..Limits::default()
            },
            sync_interval: Duration::from_secs(300),
            allowlist: vec!["git".into()],
            webhooks: true,
            timeouts: Timeouts::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("backend {node}: {source}")]
    Backend {
        node: String,
        source: gitfarm_backend::StartError,
    },
    #[error("gateway: {0}")]
    Gateway(#[from] gitfarm_gateway::StartError),
    #[error("no backend {0}")]
    NoSuchNode(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What a conservation check found.
#[derive(Debug, Clone, Default)]
pub struct Conservation {
    pub problems: Vec<String>,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.problems.is_empty()
    }
}

pub struct Cluster {
    spec: ClusterSpec,
    root: PathBuf,
    repos: Vec<RepoSource>,
    memory: Arc<MemoryStore>,
    store: Arc<FaultyStore>,
    gateway: GatewayHandle,
    backends: Vec<Option<BackendHandle>>,
    /// Every node incarnation, including killed ones, for counter checks.
    incarnations: Vec<Arc<Node>>,
    upstream: Option<GitDaemon>,
}

impl Cluster {
    /// Starts the statestore, every node (cloning and warming pools) and the
    /// gateway. `root` holds node data.
    pub async fn start(
        spec: ClusterSpec,
        root: &Path,
        repos: Vec<RepoSource>,
        upstream: Option<GitDaemon>,
    ) -> Result<Self, ClusterError> {
        let memory = Arc::new(MemoryStore::new(StoreConfig::default()));
        let store = Arc::new(FaultyStore::new(memory.clone(), Duration::from_secs(2)));
        let repo_ids: std::collections::BTreeSet<String> =
            repos.iter().map(|r| r.repo_id.clone()).collect();
        let gateway = gitfarm_gateway::start(
            GatewayConfig {
                version: 1,
                listen: "127.0.0.1:0".parse().expect("literal address"),
                http_listen: None,
                statestore: "memory".into(),
                gateway_secret: SECRET.into(),
                clusters: [spec.cluster_id.clone()].into(),
                repos: repo_ids.clone(),
                clients: vec![ClientPolicy {
                    client_id: CLIENT_ID.into(),
                    display_name: "Bench Bot".into(),
                    token: TOKEN.into(),
                    cluster_id: spec.cluster_id.clone(),
                    allowed_repos: repo_ids,
                }],
                timeouts: spec.timeouts,
            },
            store.clone(),
        )
        .await?;
        let mut cluster = Self {
            spec,
            root: root.to_owned(),
            repos,
            memory,
            store,
            gateway,
            backends: Vec::new(),
            incarnations: Vec::new(),
            upstream,
        };
        for i in 0..cluster.spec.nodes {
            cluster.backends.push(None);
            cluster.restart_backend(i).await?;
        }
        Ok(cluster)
    }

    pub fn node_id(i: usize) -> String {
        format!("node-{i}")
    }

    fn backend_config(&self, i: usize) -> BackendConfig {
        let spec = &self.spec;
        BackendConfig {
            version: 1,
            node_id: Self::node_id(i),
            cluster_id: spec.cluster_id.clone(),
            listen: "127.0.0.1:0".parse().expect("literal address"),
            http_listen: spec
                .webhooks
                .then(|| "127.0.0.1:0".parse().expect("literal address")),
            advertise: None,
            statestore: "memory".into(),
            data_dir: self.root.join(Self::node_id(i)),
            gateway_secret: SECRET.into(),
            sandbox_pool_size: spec.sandboxes,
            allowlist: Allowlist::new(spec.allowlist.iter().cloned()),
            exec_path: "/usr/local/bin:/usr/bin:/bin".into(),
            repos: self
                .repos
                .iter()
                .map(|r| {
                    let mut rc = RepositoryConfig::new(&r.repo_id, &r.url, spec.pool_size);
                    rc.sync_interval = spec.sync_interval;
                    rc
                })
                .collect(),
            pool_mode: spec.pool_mode,
            limits: spec.limits.clone(),
        }
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn endpoint(&self) -> String {
        self.gateway.addr().to_string()
    }

    pub fn gateway(&self) -> &GatewayHandle {
        &self.gateway
    }

    pub fn store(&self) -> &Arc<FaultyStore> {
        &self.store
    }

    pub fn memory(&self) -> &Arc<MemoryStore> {
        &self.memory
    }

    pub fn repos(&self) -> &[RepoSource] {
        &self.repos
    }

    pub fn backend(&self, i: usize) -> Option<&BackendHandle> {
        self.backends.get(i).and_then(Option::as_ref)
    }

    pub fn live_backends(&self) -> impl Iterator<Item = &BackendHandle> {
        self.backends.iter().flatten()
    }

    pub fn upstream(&mut self) -> Option<&mut GitDaemon> {
        self.upstream.as_mut()
    }

    /// Crashes node `i`: its tasks stop, running commands die, connections
    /// drop, and nothing is cleaned up.
    pub fn kill_backend(&mut self, i: usize) -> Result<(), ClusterError> {
        let h = self
            .backends
            .get_mut(i)
            .and_then(Option::take)
            .ok_or(ClusterError::NoSuchNode(i))?;
        h.kill();
        Ok(())
    }

    /// (Re)starts node `i` on its existing data directory.
    pub async fn restart_backend(&mut self, i: usize) -> Result<(), ClusterError> {
        if let Some(old) = self.backends.get_mut(i).and_then(Option::take) {
            old.shutdown().await;
        }
        let cfg = self.backend_config(i);
        let h = gitfarm_backend::start(cfg, self.store.clone())
            .await
            .map_err(|source| ClusterError::Backend {
                node: Self::node_id(i),
                source,
            })?;
        self.incarnations.push(h.node().clone());
        self.backends[i] = Some(h);
        Ok(())
    }

    /// Posts a push event for `repo_id` to every live node's webhook.
    /// Returns how many nodes accepted it.
    pub async fn push_event(&self, repo_id: &str) -> usize {
        let mut accepted = 0;
        for b in self.live_backends() {
            let Some(addr) = b.http_addr() else { continue };
            if matches!(
                post_json(
                    addr,
                    "/events/push",
                    &serde_json::json!({ "repo_id": repo_id }).to_string()
                )
                .await,
                Ok(202)
            ) {
                accepted += 1;
            }
        }
        accepted
    }

    pub async fn wait_quiescent(&self, timeout: Duration) -> bool {
        let until = tokio::time::Instant::now() + timeout;
        for b in self.live_backends() {
            let left = until.saturating_duration_since(tokio::time::Instant::now());
            if !b.wait_quiescent(left).await {
                return false;
            }
        }
        true
    }

    /// Sum of a counter over every node incarnation.
    pub fn counter(&self, name: &str) -> u64 {
        self.incarnations
            .iter()
            .map(|n| n.metrics().snapshot().get(name).copied().unwrap_or(0))
            .sum()
    }

    /// Waits up to `timeout` for the cluster to be at rest with every slot
    /// accounted for, and reports what is still off.
    pub async fn conservation(&self, timeout: Duration) -> Conservation {
        let until = tokio::time::Instant::now() + timeout;
        loop {
            let c = self.check_conservation().await;
            if c.holds() || tokio::time::Instant::now() >= until {
                return c;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }

    async fn check_conservation(&self) -> Conservation {
        let mut problems = Vec::new();
        for b in self.live_backends() {
            let id = b.node_id().to_owned();
            if !b.is_quiescent() {
                problems.push(format!("{id}: not quiescent"));
            }
            for r in &self.repos {
                if let Some(pool) = b.node().pool(&r.repo_id) {
                    let c = pool.counts();
                    if c.ready != self.spec.pool_size {
                        problems.push(format!(
                            "{id}/{}: {} of {} slots ready",
                            r.repo_id, c.ready, self.spec.pool_size
                        ));
                    }
                }
            }
            match self.memory.node(&id).await {
                Ok(Some(view)) => {
                    for r in &self.repos {
                        let free = view.free_checkouts.get(&r.repo_id).copied().unwrap_or(0);
                        if free != self.spec.pool_size {
                            problems.push(format!(
                                "{id}/{}: store free {free} != pool {}",
                                r.repo_id, self.spec.pool_size
                            ));
                        }
                    }
                    if view.free_sandboxes != self.spec.sandboxes {
                        problems.push(format!(
                            "{id}: store free sandboxes {} != {}",
                            view.free_sandboxes, self.spec.sandboxes
                        ));
                    }
                }
                Ok(None) => problems.push(format!("{id}: not registered")),
                Err(e) => problems.push(format!("{id}: store: {e}")),
            }
        }
        match self.memory.live_leases().await {
            Ok(l) if l.is_empty() => {}
            Ok(l) => problems.push(format!("{} live leases", l.len())),
            Err(e) => problems.push(format!("store: {e}")),
        }
        for name in ["double_allocations", "state_violations"] {
            let n = self.counter(name);
            if n != 0 {
                problems.push(format!("{name} = {n}"));
            }
        }
        Conservation { problems }
    }

    /// Stops everything.
    pub async fn shutdown(mut self) {
        for b in self.backends.iter_mut() {
            if let Some(h) = b.take() {
                h.shutdown().await;
            }
        }
        self.gateway.shutdown().await;
    }
}

/// Minimal HTTP/1.1 POST; returns the status code.
pub async fn post_json(addr: std::net::SocketAddr, path: &str, body: &str) -> std::io::Result<u16> {
    let mut s = tokio::net::TcpStream::connect(addr).await?;
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await?;
    let mut resp = Vec::new();
    s.read_to_end(&mut resp).await?;
    let head = String::from_utf8_lossy(&resp);
    head.split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad HTTP response"))
}
