use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::routing::get;
use axum::Router;
use gitfarm_protocol::Codec;
use gitfarm_statestore::{StateStore, SystemClock};
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::task::JoinSet;

use crate::config::GatewayConfig;
use crate::metrics::Metrics;
use crate::policy::{Policies, PolicyTable};

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

pub struct Gateway {
    config: GatewayConfig,
    store: Arc<dyn StateStore>,
    policies: Policies,
    metrics: Arc<Metrics>,
    codec: Codec,
    tasks: Tasks,
}

impl Gateway {
    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<dyn StateStore> {
        &self.store
    }

    pub fn policies(&self) -> &Policies {
        &self.policies
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub(crate) fn metrics_arc(&self) -> Arc<Metrics> {
        self.metrics.clone()
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    /// Installs a new client table. Sessions already past admission keep
    /// running.
    pub fn reload(&self, config: &GatewayConfig) -> Result<(), crate::config::ConfigError> {
        config.validate()?;
        self.policies.swap(PolicyTable::from_config(config));
        tracing::info!(clients = config.clients.len(), "policy table reloaded");
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("binding {what}: {source}")]
pub struct StartError {
    what: &'static str,
    source: std::io::Error,
}

/// Binds the listeners and starts the accept loop and the lease expiry
/// sweeper.
pub async fn start(
    config: GatewayConfig,
    store: Arc<dyn StateStore>,
) -> Result<GatewayHandle, StartError> {
    let err = |what| move |source| StartError { what, source };
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(err("session listener"))?;
    let addr = listener.local_addr().map_err(err("session listener"))?;
    let http = match config.http_listen {
        Some(a) => Some(TcpListener::bind(a).await.map_err(err("http listener"))?),
        None => None,
    };
    let http_addr = match &http {
        Some(l) => Some(l.local_addr().map_err(err("http listener"))?),
        None => None,
    };
    let gw = Arc::new(Gateway {
        policies: Policies::new(PolicyTable::from_config(&config)),
        config,
        store,
        metrics: Arc::default(),
        codec: Codec::default(),
        tasks: Tasks::default(),
    });

    let sweeper = gitfarm_statestore::spawn_expiry_sweeper(
        gw.store.clone(),
        Arc::new(SystemClock),
        gw.config.timeouts.expiry_sweep,
    );
    gw.tasks.spawn(async move {
        let _ = sweeper.await;
    });
    let g = gw.clone();
    gw.tasks.spawn(accept_loop(g, listener));
    if let Some(l) = http {
        let g = gw.clone();
        let app = Router::new()
            .route("/metrics", get(move || async move { g.metrics.render() }))
            .route("/healthz", get(|| async { "ok\n" }));
        gw.tasks.spawn(async move {
            if let Err(e) = axum::serve(l, app).await {
                tracing::error!(error = %e, "http server stopped");
            }
        });
    }
    tracing::info!(%addr, ?http_addr, "gateway ready");
    Ok(GatewayHandle {
        gateway: gw,
        addr,
        http_addr,
    })
}

async fn accept_loop(gw: Arc<Gateway>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                let g = gw.clone();
                gw.tasks.spawn(crate::proxy::handle_client(g, stream));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

pub struct GatewayHandle {
    gateway: Arc<Gateway>,
    addr: SocketAddr,
    http_addr: Option<SocketAddr>,
}

impl GatewayHandle {
    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    pub async fn shutdown(self) {
        self.gateway.tasks.abort_all();
        let mut set = self.gateway.tasks.take();
        while set.join_next().await.is_some() {}
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.gateway.tasks.abort_all();
    }
}
