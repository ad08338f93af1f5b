//! Node lifecycle: startup, accounting between pools and the registry,
//! heartbeats and background loops.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use gitfarm_protocol::{Codec, ErrorCode, FrameLimits, SessionError, SessionGrant};
use gitfarm_statestore::{Lease, NodeRegistration, NodeStatus, StateStore, StoreError, Timestamp};
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::task::JoinSet;

use crate::checkout::{Availability, CheckoutHandle, CheckoutPool, Take};
use crate::config::BackendConfig;
use crate::exec::ExecContext;
use crate::git::GitError;
use crate::metrics::Metrics;
use crate::repo::BareRepo;
use crate::sandbox::{Binding, ProcessSandbox, SandboxDriver, SandboxPool};
use crate::session::{session_deadline, SessionContext};

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("preparing {what}: {source}")]
    Io {
        what: String,
        source: std::io::Error,
    },
    #[error("repository `{repo}`: {source}")]
    Repo { repo: String, source: GitError },
    #[error("registering with statestore: {0}")]
    Store(#[from] StoreError),
}

/// Which slots and leases are bound to live sessions. Every change that
/// moves a free count happens under this lock, so heartbeats see the counts
/// and the active lease set consistently.
#[derive(Default)]
struct Ledger {
    active: BTreeMap<String, (String, String)>,
    live_checkouts: HashSet<PathBuf>,
    live_sandboxes: HashSet<String>,
}

#[derive(Default)]
struct Tasks {
    set: Mutex<JoinSet<()>>,
    closed: AtomicBool,
}

impl Tasks {
    fn spawn(&self, fut: impl std::future::Future<Output = ()> + Send + 'static) {
        if self.closed.load(Ordering::SeqCst) {
            return;
        }
        let mut set = self.set.lock();
        while set.try_join_next().is_some() {}
        set.spawn(fut);
    }

    fn abort_all(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.set.lock().abort_all();
    }

    fn take(&self) -> JoinSet<()> {
        std::mem::take(&mut *self.set.lock())
    }
}

pub struct Node {
    config: BackendConfig,
    store: Arc<dyn StateStore>,
    repos: BTreeMap<String, Arc<BareRepo>>,
    pools: BTreeMap<String, Arc<CheckoutPool>>,
    sandboxes: Arc<SandboxPool>,
    metrics: Arc<Metrics>,
    ledger: Mutex<Ledger>,
    codec: Codec,
    tasks: Tasks,
    /// Background work still running after sessions end (refresh, scrub).
    recycling: Arc<AtomicUsize>,
}

impl Node {
    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn repo(&self, repo_id: &str) -> Option<&Arc<BareRepo>> {
        self.repos.get(repo_id)
    }

    pub fn pool(&self, repo_id: &str) -> Option<&Arc<CheckoutPool>> {
        self.pools.get(repo_id)
    }

    pub fn pools(&self) -> impl Iterator<Item = &Arc<CheckoutPool>> {
        self.pools.values()
    }

    pub fn sandboxes(&self) -> &SandboxPool {
        &self.sandboxes
    }

    pub fn active_sessions(&self) -> usize {
        self.ledger.lock().active.len()
    }

    /// The heartbeat payload: free checkouts per repository, free sandboxes,
    /// and the leases bound to running sessions.
    pub fn status(&self) -> NodeStatus {
        let ledger = self.ledger.lock();
        NodeStatus {
            node_id: self.config.node_id.clone(),
            cluster_id: self.config.cluster_id.clone(),
            free_checkouts: self
                .pools
                .iter()
                .map(|(id, p)| (id.clone(), p.free()))
                .collect(),
            free_sandboxes: self.sandboxes.free(),
            heartbeat_time: Timestamp::now(),
            active_leases: ledger.active.keys().cloned().collect(),
        }
    }

    pub async fn emit_heartbeat(&self) -> Result<NodeStatus, StoreError> {
        let status = self.status();
        match self.store.update_status(status.clone()).await {
            Ok(_) => {
                Metrics::inc(&self.metrics.heartbeats_sent);
                Ok(status)
            }
            Err(e) => {
                Metrics::inc(&self.metrics.heartbeat_failures);
                Err(e)
            }
        }
    }

    pub fn registration(&self, address: String) -> NodeRegistration {
        NodeRegistration {
            node_id: self.config.node_id.clone(),
            cluster_id: self.config.cluster_id.clone(),
            address,
            checkout_pools: self
                .pools
                .iter()
                .map(|(id, p)| (id.clone(), p.size()))
                .collect(),
            sandbox_pool: self.sandboxes.size(),
        }
    }

    /// Binds a checkout and a sandbox to a new session, waiting up to
    /// `acquire_wait` for slots that are being recycled.
    pub(crate) async fn acquire(
        &self,
        grant: &SessionGrant,
        session_id: &str,
    ) -> Result<SessionContext, SessionError> {
        let start = Instant::now();
        let exhausted = || {
            SessionError::new(
                ErrorCode::ResourceExhausted,
                "no free checkout or sandbox on node",
            )
        };
        let pool = self
            .pools
            .get(&grant.repo_id)
            .ok_or_else(|| SessionError::new(ErrorCode::PermissionDenied, "permission denied"))?;
        let identity = grant.identity();
        let give_up = tokio::time::Instant::now() + self.config.limits.acquire_wait;
        let mut ready = pool.subscribe();

        let (take, sandbox_id) = loop {
            ready.borrow_and_update();
            {
                let mut ledger = self.ledger.lock();
                let checkout = pool.availability();
                let sandbox_now = self.sandboxes.has_idle();
                if checkout == Availability::None || (!sandbox_now && !self.sandboxes.has_pending())
                {
                    return Err(exhausted());
                }
                if checkout == Availability::Now && sandbox_now {
                    let take = pool.take();
                    let sandbox_id = self
                        .sandboxes
                        .take(&identity)
                        .expect("idle sandbox under ledger lock");
                    let taken = match &take {
                        Take::Slot(h) => Some(h.slot_id.clone()),
                        Take::Reserved(_) => None,
                        Take::Pending | Take::Empty => {
                            unreachable!("availability checked under ledger lock")
                        }
                    };
                    ledger.active.insert(
                        grant.lease_id.clone(),
                        (taken.unwrap_or_default(), sandbox_id.clone()),
                    );
                    if !ledger.live_sandboxes.insert(sandbox_id.clone()) {
                        Metrics::inc(&self.metrics.double_allocations);
                    }
                    break (take, sandbox_id);
                }
            }
            tokio::select! {
                _ = ready.changed() => {}
                _ = tokio::time::sleep(Duration::from_millis(10)) => {}
                _ = tokio::time::sleep_until(give_up) => return Err(exhausted()),
            }
        };

        let checkout = match take {
            Take::Slot(h) => h,
            Take::Reserved(r) => match pool.realize(r).await {
                Ok(h) => h,
                Err(e) => {
                    self.undo_acquire(&grant.lease_id, None, &sandbox_id);
                    return Err(SessionError::new(
                        ErrorCode::Internal,
                        format!("materializing checkout: {e}"),
                    ));
                }
            },
            Take::Pending | Take::Empty => unreachable!(),
        };
        {
            let mut ledger = self.ledger.lock();
            if !ledger.live_checkouts.insert(checkout.path.clone()) {
                Metrics::inc(&self.metrics.double_allocations);
                tracing::error!(path = %checkout.path.display(), "checkout handed to two sessions");
            }
            if let Some(entry) = ledger.active.get_mut(&grant.lease_id) {
                entry.0 = checkout.slot_id.clone();
            }
        }

        let binding = Binding {
            session_id: session_id.to_owned(),
            repo_id: grant.repo_id.clone(),
            identity: identity.clone(),
            checkout: checkout.path.clone(),
        };
        let sandbox = match self.sandboxes.bind(&sandbox_id, &binding) {
            Ok(env) => env,
            Err(e) => {
                self.undo_acquire(&grant.lease_id, Some(&checkout), &sandbox_id);
                return Err(SessionError::new(
                    ErrorCode::Internal,
                    format!("binding sandbox: {e}"),
                ));
            }
        };
        self.metrics.acquire_latency.observe(start.elapsed());

        let limits = &self.config.limits;
        Ok(SessionContext {
            session_id: session_id.to_owned(),
            lease_id: grant.lease_id.clone(),
            repo_id: grant.repo_id.clone(),
            exec: ExecContext {
                workdir: checkout.path.clone(),
                sandbox,
                identity: identity.clone(),
                session_id: session_id.to_owned(),
                path_var: self.config.exec_path.clone(),
                timeout: limits.command_timeout,
                output_cap: limits.output_cap_bytes,
            },
            identity,
            sandbox_id,
            started: start,
            deadline: session_deadline(start, limits.session_cap, grant.expires_at_ms),
            checkout,
            completed: Vec::new(),
        })
    }

    fn undo_acquire(&self, lease_id: &str, checkout: Option<&CheckoutHandle>, sandbox_id: &str) {
        let ctx_checkout = checkout.cloned();
        let sandbox_id = sandbox_id.to_owned();
        let repo = self.ledger_finish(lease_id, ctx_checkout.as_ref(), &sandbox_id);
        let pools = repo.and_then(|r| self.pools.get(&r).cloned());
        let sandboxes = self.sandboxes.clone();
        self.track_recycle(async move {
            if let (Some(pool), Some(c)) = (pools, ctx_checkout) {
                pool.refresh(&c.slot_id).await;
            }
            sandboxes.scrub(&sandbox_id).await;
        });
    }

    /// Marks the session's slots as recycling and drops it from the active
    /// set, atomically with respect to heartbeats.
    fn ledger_finish(
        &self,
        lease_id: &str,
        checkout: Option<&CheckoutHandle>,
        sandbox_id: &str,
    ) -> Option<String> {
        let mut ledger = self.ledger.lock();
        ledger.active.remove(lease_id);
        ledger.live_sandboxes.remove(sandbox_id);
        self.sandboxes.begin_scrub(sandbox_id);
        let c = checkout?;
        ledger.live_checkouts.remove(&c.path);
        self.pools.get(&c.repo_id)?.begin_refresh(&c.slot_id);
        Some(c.repo_id.clone())
    }

    /// Scrubs the sandbox and refreshes the checkout in the background, then
    /// releases the lease (a no-op if the gateway already did).
    pub(crate) fn recycle(self: &Arc<Self>, ctx: SessionContext, lease: Lease) {
        self.ledger_finish(&ctx.lease_id, Some(&ctx.checkout), &ctx.sandbox_id);
        let node = self.clone();
        self.track_recycle(async move {
            let pool = node.pools.get(&ctx.repo_id).cloned();
            let refresh = async {
                if let Some(pool) = pool {
                    pool.refresh(&ctx.checkout.slot_id).await;
                }
            };
            tokio::join!(refresh, node.sandboxes.scrub(&ctx.sandbox_id));
            node.release_lease(&lease).await;
        });
    }

    fn track_recycle(&self, fut: impl std::future::Future<Output = ()> + Send + 'static) {
        let pending = self.recycling.clone();
        pending.fetch_add(1, Ordering::SeqCst);
        self.tasks.spawn(async move {
            fut.await;
            pending.fetch_sub(1, Ordering::SeqCst);
        });
    }

    /// Recycles still in flight.
    pub fn recycling(&self) -> usize {
        self.recycling.load(Ordering::SeqCst)
    }

    pub(crate) async fn release_lease(&self, lease: &Lease) {
        match self.store.release(lease).await {
            Ok(_) => Metrics::inc(&self.metrics.lease_releases),
            Err(e) => {
                tracing::warn!(lease_id = %lease.lease_id, error = %e, "lease release failed; expiry will reclaim it")
            }
        }
    }
}

/// Starts a node: clones or reuses bare clones, warms pools, binds listeners,
/// registers with the statestore and launches the background loops.
pub async fn start(
    config: BackendConfig,
    store: Arc<dyn StateStore>,
) -> Result<BackendHandle, StartError> {
    start_with_driver(config, store, Arc::new(ProcessSandbox)).await
}

pub async fn start_with_driver(
    config: BackendConfig,
    store: Arc<dyn StateStore>,
    driver: Arc<dyn SandboxDriver>,
) -> Result<BackendHandle, StartError> {
    let io = |what: &str| {
        let what = what.to_owned();
        move |source| StartError::Io { what, source }
    };
    let metrics = Arc::new(Metrics::default());
    let data = &config.data_dir;
    std::fs::create_dir_all(data).map_err(io("data dir"))?;

    let mut repos = BTreeMap::new();
    let mut pools = BTreeMap::new();
    for rc in &config.repos {
        let repo =
            BareRepo::open_or_clone(rc.clone(), &data.join("bare"), config.limits.git_timeout)
                .await
                .map_err(|source| StartError::Repo {
                    repo: rc.repo_id.clone(),
                    source,
                })?;
        let pool = CheckoutPool::new(
            repo.clone(),
            data.join("checkouts").join(&rc.repo_id),
            config.pool_mode,
            metrics.clone(),
        );
        pool.warm().await.map_err(|source| StartError::Repo {
            repo: rc.repo_id.clone(),
            source,
        })?;
        repos.insert(rc.repo_id.clone(), repo);
        pools.insert(rc.repo_id.clone(), pool);
    }
    let sandboxes = SandboxPool::new(
        &data.join("sandboxes"),
        config.sandbox_pool_size,
        driver,
        metrics.clone(),
    )
    .map_err(io("sandboxes"))?;

    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(io("session listener"))?;
    let session_addr = listener.local_addr().map_err(io("session listener"))?;
    let http_listener = match config.http_listen {
        Some(addr) => Some(TcpListener::bind(addr).await.map_err(io("http listener"))?),
        None => None,
    };
    let http_addr = match &http_listener {
        Some(l) => Some(l.local_addr().map_err(io("http listener"))?),
        None => None,
    };
    let advertise = config
        .advertise
        .clone()
        .unwrap_or_else(|| session_addr.to_string());

    let limits = FrameLimits {
        max_stdin: config.limits.stdin_cap_bytes,
        max_output: config.limits.output_cap_bytes,
        ..FrameLimits::default()
    };
    let node = Arc::new(Node {
        config,
        store,
        repos,
        pools,
        sandboxes: Arc::new(sandboxes),
        metrics,
        ledger: Mutex::new(Ledger::default()),
        codec: Codec::new(limits),
        tasks: Tasks::default(),
        recycling: Arc::new(AtomicUsize::new(0)),
    });

    node.store
        .register_node(node.registration(advertise))
        .await?;
    if let Err(e) = node.emit_heartbeat().await {
        tracing::warn!(error = %e, "initial heartbeat failed");
    }

    let n = node.clone();
    node.tasks.spawn(async move { heartbeat_loop(n).await });
    for repo in node.repos.values() {
        node.tasks.spawn(repo.clone().run_sync_loop());
    }
    let idle = node.config.limits.idle_refresh_interval;
    if !idle.is_zero() {
        for pool in node.pools.values() {
            let pool = pool.clone();
            node.tasks.spawn(async move {
                loop {
                    tokio::time::sleep(idle).await;
                    pool.refresh_stale().await;
                }
            });
        }
    }
    let n = node.clone();
    node.tasks
        .spawn(async move { accept_loop(n, listener).await });
    if let Some(l) = http_listener {
        let app = crate::http::router(node.clone());
        node.tasks.spawn(async move {
            if let Err(e) = axum::serve(l, app).await {
                tracing::error!(error = %e, "http server stopped");
            }
        });
    }
    tracing::info!(node = %node.config.node_id, %session_addr, ?http_addr, "backend ready");
    Ok(BackendHandle {
        node,
        session_addr,
        http_addr,
    })
}

async fn heartbeat_loop(node: Arc<Node>) {
    let mut tick = tokio::time::interval(node.config.limits.heartbeat_interval);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        if let Err(e) = node.emit_heartbeat().await {
            tracing::warn!(error = %e, "heartbeat failed; will retry");
        }
    }
}

async fn accept_loop(node: Arc<Node>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                let n = node.clone();
                node.tasks
                    .spawn(crate::session::handle_connection(n, stream));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

/// A running node.
pub struct BackendHandle {
    node: Arc<Node>,
    session_addr: SocketAddr,
    http_addr: Option<SocketAddr>,
}

impl BackendHandle {
    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn session_addr(&self) -> SocketAddr {
        self.session_addr
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    pub fn node_id(&self) -> &str {
        &self.node.config.node_id
    }

    /// True when no session is running, nothing is recycling, and every slot
    /// is `Ready` and every sandbox `Idle`.
    pub fn is_quiescent(&self) -> bool {
        let n = &self.node;
        n.active_sessions() == 0
            && n.recycling() == 0
            && n.pools.values().all(|p| {
                let c = p.counts();
                c.in_use == 0 && c.refreshing == 0
            })
            && n.sandboxes
                .slots()
                .iter()
                .all(|s| s.state == crate::sandbox::SandboxState::Idle)
    }

    pub async fn wait_quiescent(&self, timeout: Duration) -> bool {
        let until = Instant::now() + timeout;
        while Instant::now() < until {
            if self.is_quiescent() {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        self.is_quiescent()
    }

    /// Simulates a crash: every task stops at once, running commands are
    /// killed, connections drop. Nothing is cleaned up.
    pub fn kill(&self) {
        self.node.tasks.abort_all();
    }

    /// Stops accepting work and waits for background tasks to wind down.
    pub async fn shutdown(self) {
        self.node.tasks.abort_all();
        let mut set = self.node.tasks.take();
        while set.join_next().await.is_some() {}
    }
}

impl Drop for BackendHandle {
    fn drop(&mut self) {
        self.node.tasks.abort_all();
    }
}
