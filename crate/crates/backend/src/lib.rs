//! gitfarm backend node.
//!
//! A node keeps one bare clone per configured repository in sync with
//! upstream, a fixed-size pool of working checkouts per repository, and a
//! pool of sandboxes. A session arrives from a gateway with a signed grant,
//! gets one checkout and one sandbox, runs its commands strictly in order,
//! and both are recycled afterwards. Free counts are heartbeated to the
//! statestore so gateways can route.

pub mod checkout;
pub mod config;
pub mod exec;
mod git;
pub mod http;
pub mod metrics;
pub mod node;
pub mod repo;
pub mod sandbox;
pub mod session;

pub use checkout::{CheckoutHandle, CheckoutPool, CheckoutSlot, SlotState};
pub use config::{BackendConfig, Limits, PoolMode, RepositoryConfig, TIMEOUT_EXIT_CODE};
pub use git::GitError;
pub use metrics::Metrics;
pub use node::{start, start_with_driver, BackendHandle, Node, StartError};
pub use repo::{BareRepo, SyncReport, SyncStatus, SyncTrigger};
pub use sandbox::{ProcessSandbox, SandboxDriver, SandboxSlot, SandboxState};
pub use session::{SessionContext, SessionEnd};
