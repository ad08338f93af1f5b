//! Availability registry used by gateways to route sessions.
//!
//! Backends heartbeat their free checkout and sandbox counts; gateways pick
//! the freshest node with the most free checkouts for a repository and hold a
//! [`Lease`] on it until the session ends. Two backings implement
//! [`StateStore`]: [`MemoryStore`] for single-process deployments and tests,
//! and [`RemoteStore`] speaking to the networked server in [`kv`].

pub mod clock;
pub mod kv;
mod memory;
mod remote;
mod store;
mod types;

use std::sync::Arc;
use std::time::Duration;

pub use clock::{Clock, ManualClock, SystemClock};
pub use memory::MemoryStore;
pub use remote::{free_key, heartbeat_key, lease_key, RemoteStore};
pub use store::StateStore;
pub use types::*;

/// Periodically reclaims expired leases so crashed sessions cannot leak
/// capacity.
pub fn spawn_expiry_sweeper(
    store: Arc<dyn StateStore>,
    clock: Arc<dyn Clock>,
    every: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            match store.expire_leases(clock.now()).await {
                Ok(reclaimed) => {
                    for lease in reclaimed {
                        tracing::info!(lease_id = %lease.lease_id, node = %lease.node_id, "reclaimed expired lease");
                    }
                }
                Err(e) => tracing::warn!(error = %e, "lease sweep failed"),
            }
        }
    })
}

/// Parses a statestore endpoint: `memory` or `kv://host:port`.
pub fn connect(endpoint: &str, config: StoreConfig) -> Result<Arc<dyn StateStore>, StoreError> {
    if endpoint == "memory" {
        return Ok(Arc::new(MemoryStore::new(config)));
    }
    let addr = endpoint
        .strip_prefix("kv://")
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| {
            StoreError::Unavailable(format!("unsupported statestore endpoint `{endpoint}`"))
        })?;
    Ok(Arc::new(RemoteStore::new(addr, config)))
}
