//! Client-facing entry point. Authenticates a bearer token, checks the
//! client's repository grants, takes a lease from the statestore in the
//! client's cluster, and proxies the session to the leased backend with a
//! signed grant in place of the client's credentials.

pub mod config;
pub mod metrics;
pub mod policy;
mod proxy;
mod server;

pub use config::{ClientPolicy, ConfigError, GatewayConfig, Timeouts};
pub use metrics::Metrics;
pub use policy::{Policies, PolicyTable};
pub use server::{start, Gateway, GatewayHandle, StartError};
