//! Backend node configuration.
//!
//! Loaded from TOML. Durations are given in (fractional) seconds.
//!
//! ```toml
//! version = 1
//! node_id = "node-a"
//! cluster_id = "shared"
//! listen = "127.0.0.1:7100"
//! http_listen = "127.0.0.1:7101"
//! statestore = "kv://127.0.0.1:7300"
//! data_dir = "/var/lib/gitfarm"
//! gateway_secret = "change-me"
//! sandbox_pool_size = 10
//!
//! [[repos]]
//! repo_id = "go-mono"
//! upstream_url = "git://git.internal/go-mono"
//! checkout_pool_size = 4
//! ```
//!
//! Sizing: pools should be small enough that sync, refresh and sandbox
//! upkeep stay under roughly a fifth of the node's CPU, leaving the rest for
//! session commands.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gitfarm_protocol::Allowlist;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Exit code reported for commands killed by the per-command timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryConfig {
    pub repo_id: String,
    pub upstream_url: String,
    pub checkout_pool_size: u32,
    #[serde(default = "defaults::sync_interval", with = "secs")]
    pub sync_interval: Duration,
    /// Clients allowed to open sessions on this repository. `None` trusts the
    /// gateway's authorization alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_clients: Option<Vec<String>>,
}

impl RepositoryConfig {
    pub fn new(repo_id: impl Into<String>, upstream_url: impl Into<String>, pool: u32) -> Self {
        Self {
            repo_id: repo_id.into(),
            upstream_url: upstream_url.into(),
            checkout_pool_size: pool,
            sync_interval: defaults::sync_interval(),
            allowed_clients: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub version: u32,
    pub node_id: String,
    pub cluster_id: String,
    pub listen: SocketAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_listen: Option<SocketAddr>,
    /// Address gateways should dial; defaults to the bound session address.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertise: Option<String>,
    pub statestore: String,
    pub data_dir: PathBuf,
    pub gateway_secret: String,
    pub sandbox_pool_size: u32,
    #[serde(default)]
    pub allowlist: Allowlist,
    #[serde(default = "defaults::exec_path")]
    pub exec_path: String,
    pub repos: Vec<RepositoryConfig>,
    #[serde(default)]
    pub pool_mode: PoolMode,
    #[serde(default)]
    pub limits: Limits,
}

/// `cold` skips prewarming and materializes a throwaway checkout per session.
/// It exists to measure what the warm pool saves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Warm,
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    #[serde(with = "secs")]
    pub command_timeout: Duration,
    #[serde(with = "secs")]
    pub session_cap: Duration,
    pub output_cap_bytes: usize,
    pub stdin_cap_bytes: usize,
    #[serde(with = "secs")]
    pub heartbeat_interval: Duration,
    /// How long an acquire waits for a slot that is being refreshed.
    #[serde(with = "secs")]
    pub acquire_wait: Duration,
    #[serde(with = "secs")]
    pub hello_timeout: Duration,
    /// Background pass re-basing idle checkouts onto the bare clone's tip.
    /// Zero disables it; checkouts are then only refreshed at recycle.
    #[serde(with = "secs")]
    pub idle_refresh_interval: Duration,
    #[serde(with = "secs")]
    pub git_timeout: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            command_timeout: Duration::from_secs(120),
            session_cap: Duration::from_secs(300),
            output_cap_bytes: gitfarm_protocol::codec::DEFAULT_MAX_OUTPUT,
            stdin_cap_bytes: gitfarm_protocol::codec::DEFAULT_MAX_STDIN,
            heartbeat_interval: Duration::from_secs(5),
            acquire_wait: Duration::from_secs(5),
            hello_timeout: Duration::from_secs(10),
            idle_refresh_interval: Duration::from_secs(600),
            git_timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.node_id.is_empty() || self.cluster_id.is_empty() {
            return bad("node_id and cluster_id are required".into());
        }
        if self.sandbox_pool_size == 0 {
            return bad("sandbox_pool_size must be at least 1".into());
        }
        if self.gateway_secret.is_empty() {
            return bad("gateway_secret is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for repo in &self.repos {
            if repo.repo_id.is_empty()
                || repo.repo_id.contains(['/', ':', '\\'])
                || repo.repo_id.starts_with('.')
            {
                return bad(format!("invalid repo_id `{}`", repo.repo_id));
            }
            if !seen.insert(&repo.repo_id) {
                return bad(format!("duplicate repo_id `{}`", repo.repo_id));
            }
            if repo.checkout_pool_size == 0 {
                return bad(format!(
                    "checkout_pool_size for `{}` must be at least 1",
                    repo.repo_id
                ));
            }
            if repo.sync_interval.is_zero() {
                return bad(format!(
                    "sync_interval for `{}` must be positive",
                    repo.repo_id
                ));
            }
        }
        if self.limits.session_cap > Duration::from_secs(300) {
            return bad("session_cap may not exceed 300 s".into());
        }
        Ok(())
    }

    pub fn repo(&self, repo_id: &str) -> Option<&RepositoryConfig> {
        self.repos.iter().find(|r| r.repo_id == repo_id)
    }
}

mod defaults {
    use std::time::Duration;

    pub fn sync_interval() -> Duration {
        Duration::from_secs(300)
    }

    pub fn exec_path() -> String {
        "/usr/local/bin:/usr/bin:/bin".into()
    }
}

pub(crate) mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}
