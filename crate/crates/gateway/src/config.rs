//! Gateway configuration: listeners, statestore and the placement policy.
//!
//! ```toml
//! version = 1
//! listen = "0.0.0.0:7400"
//! statestore = "kv://10.0.0.5:7300"
//! gateway_secret = "shared-with-backends"
//! clusters = ["shared", "ios"]
//! repos = ["go-mono", "ios-mono"]
//!
//! [[clients]]
//! client_id = "audit-bot"
//! display_name = "Audit Bot"
//! token = "tok-audit"
//! cluster_id = "shared"
//! allowed_repos = ["go-mono"]
//! ```

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPolicy {
    pub client_id: String,
    pub display_name: String,
    pub token: String,
    pub cluster_id: String,
    pub allowed_repos: BTreeSet<String>,
}

impl std::fmt::Debug for ClientPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientPolicy")
            .field("client_id", &self.client_id)
            .field("display_name", &self.display_name)
            .field("token", &"<redacted>")
            .field("cluster_id", &self.cluster_id)
            .field("allowed_repos", &self.allowed_repos)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub version: u32,
    pub listen: SocketAddr,
    #[serde(default)]
    pub http_listen: Option<SocketAddr>,
    pub statestore: String,
    pub gateway_secret: String,
    pub clusters: BTreeSet<String>,
    pub repos: BTreeSet<String>,
    #[serde(default)]
    pub clients: Vec<ClientPolicy>,
    #[serde(default)]
    pub timeouts: Timeouts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    #[serde(with = "secs")]
    pub hello: Duration,
    #[serde(with = "secs")]
    pub backend_connect: Duration,
    /// How long to wait for the backend to accept or refuse the hello. It
    /// covers the backend's own wait for a recycling slot.
    #[serde(with = "secs")]
    pub backend_accept: Duration,
    /// Slack past lease expiry before the proxy gives up on a backend that
    /// has stopped talking.
    #[serde(with = "secs")]
    pub session_slack: Duration,
    #[serde(with = "secs")]
    pub expiry_sweep: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            hello: Duration::from_secs(10),
            backend_connect: Duration::from_secs(3),
            backend_accept: Duration::from_secs(30),
            session_slack: Duration::from_secs(30),
            expiry_sweep: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
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
        if self.gateway_secret.is_empty() {
            return bad("gateway_secret must not be empty".into());
        }
        let mut ids = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        for c in &self.clients {
            if c.client_id.is_empty() {
                return bad("client_id must not be empty".into());
            }
            if !ids.insert(&c.client_id) {
                return bad(format!("duplicate client `{}`", c.client_id));
            }
            if c.token.is_empty() || !tokens.insert(&c.token) {
                return bad(format!(
                    "client `{}` needs a unique, non-empty token",
                    c.client_id
                ));
            }
            if !self.clusters.contains(&c.cluster_id) {
                return bad(format!(
                    "client `{}` references unknown cluster `{}`",
                    c.client_id, c.cluster_id
                ));
            }
            if let Some(r) = c.allowed_repos.iter().find(|r| !self.repos.contains(*r)) {
                return bad(format!(
                    "client `{}` references unknown repository `{r}`",
                    c.client_id
                ));
            }
        }
        Ok(())
    }
}

mod secs {
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

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        version = 1
        listen = "127.0.0.1:7400"
        statestore = "memory"
        gateway_secret = "s"
        clusters = ["shared"]
        repos = ["go-mono", "ios-mono"]

        [timeouts]
        backend_connect = 0.5

        [[clients]]
        client_id = "audit-bot"
        display_name = "Audit Bot"
        token = "tok-audit"
        cluster_id = "shared"
        allowed_repos = ["go-mono"]
    "#;

    #[test]
    fn parses_sample() {
        let c = GatewayConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.clients[0].allowed_repos.len(), 1);
        assert_eq!(c.timeouts.backend_connect, Duration::from_millis(500));
        assert_eq!(c.timeouts.hello, Duration::from_secs(10));
        assert!(!format!("{:?}", c.clients[0]).contains("tok-audit"));
    }

    #[test]
    fn rejects_dangling_references() {
        for (from, to) in [
            ("cluster_id = \"shared\"", "cluster_id = \"nowhere\""),
            ("allowed_repos = [\"go-mono\"]", "allowed_repos = [\"x\"]"),
            ("token = \"tok-audit\"", "token = \"\""),
            ("version = 1", "version = 2"),
        ] {
            let text = SAMPLE.replace(from, to);
            assert!(GatewayConfig::from_toml(&text).is_err(), "{to}");
        }
    }
}
