//! Token authentication and per-client repository authorization.

use std::collections::BTreeSet;
use std::sync::Arc;

use gitfarm_protocol::{ErrorCode, Identity, SessionError};
use parking_lot::RwLock;
use sha2::{Digest, Sha256};

use crate::config::{ClientPolicy, GatewayConfig};

type TokenDigest = [u8; 32];

fn digest(token: &str) -> TokenDigest {
    Sha256::digest(token.as_bytes()).into()
}

/// Compares without early exit so timing does not reveal a matching prefix.
fn ct_eq(a: &TokenDigest, b: &TokenDigest) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Clone)]
struct Entry {
    token: TokenDigest,
    identity: Identity,
    cluster_id: String,
    allowed_repos: BTreeSet<String>,
}

/// An immutable snapshot of the client table.
#[derive(Debug, Clone, Default)]
pub struct PolicyTable {
    entries: Vec<Entry>,
}

impl PolicyTable {
    pub fn new(clients: &[ClientPolicy]) -> Self {
        Self {
            entries: clients
                .iter()
                .map(|c| Entry {
                    token: digest(&c.token),
                    identity: Identity {
                        client_id: c.client_id.clone(),
                        display_name: c.display_name.clone(),
                    },
                    cluster_id: c.cluster_id.clone(),
                    allowed_repos: c.allowed_repos.clone(),
                })
                .collect(),
        }
    }

    pub fn from_config(config: &GatewayConfig) -> Self {
        Self::new(&config.clients)
    }

    /// Resolves a bearer token. Every entry is compared, matching or not.
    pub fn authenticate(&self, token: &str) -> Result<Identity, SessionError> {
        let unauthenticated =
            || SessionError::new(ErrorCode::Unauthenticated, "invalid identity token");
        if token.is_empty() {
            return Err(unauthenticated());
        }
        let presented = digest(token);
        let mut found = None;
        for e in &self.entries {
            if ct_eq(&e.token, &presented) {
                found = Some(e);
            }
        }
        found
            .map(|e| e.identity.clone())
            .ok_or_else(unauthenticated)
    }

    /// Returns the client's cluster. Unknown and disallowed repositories are
    /// refused with the same error.
    pub fn authorize(&self, identity: &Identity, repo_id: &str) -> Result<String, SessionError> {
        self.entries
            .iter()
            .find(|e| e.identity.client_id == identity.client_id)
            .filter(|e| e.allowed_repos.contains(repo_id))
            .map(|e| e.cluster_id.clone())
            .ok_or_else(|| SessionError::new(ErrorCode::PermissionDenied, "permission denied"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The live table; readers take a snapshot, reloads swap it whole.
#[derive(Debug, Default)]
pub struct Policies(RwLock<Arc<PolicyTable>>);

impl Policies {
    pub fn new(table: PolicyTable) -> Self {
        Self(RwLock::new(Arc::new(table)))
    }

    pub fn snapshot(&self) -> Arc<PolicyTable> {
        self.0.read().clone()
    }

    pub fn swap(&self, table: PolicyTable) {
        *self.0.write() = Arc::new(table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PolicyTable {
        PolicyTable::new(&[
            ClientPolicy {
                client_id: "audit-bot".into(),
                display_name: "Audit Bot".into(),
                token: "tok-audit".into(),
                cluster_id: "shared".into(),
                allowed_repos: ["go-mono".to_string()].into(),
            },
            ClientPolicy {
                client_id: "ios-ci".into(),
                display_name: "iOS CI".into(),
                token: "tok-ios".into(),
                cluster_id: "ios".into(),
                allowed_repos: BTreeSet::new(),
            },
        ])
    }

    #[test]
    fn authenticates_by_token() {
        let t = table();
        assert_eq!(t.authenticate("tok-audit").unwrap().client_id, "audit-bot");
        for bad in ["", "tok-audi", "tok-audit ", "TOK-AUDIT"] {
            assert_eq!(
                t.authenticate(bad).unwrap_err().code,
                ErrorCode::Unauthenticated
            );
        }
    }

    #[test]
    fn authorization_is_per_client() {
        let t = table();
        let audit = t.authenticate("tok-audit").unwrap();
        assert_eq!(t.authorize(&audit, "go-mono").unwrap(), "shared");
        let denied = t.authorize(&audit, "ios-mono").unwrap_err();
        let unknown = t.authorize(&audit, "no-such-repo").unwrap_err();
        assert_eq!(denied, unknown);
        assert_eq!(denied.code, ErrorCode::PermissionDenied);
        // Authenticated but without any grants: refused at authorization.
        let ios = t.authenticate("tok-ios").unwrap();
        assert_eq!(
            t.authorize(&ios, "go-mono").unwrap_err().code,
            ErrorCode::PermissionDenied
        );
    }

    #[test]
    fn swap_replaces_table() {
        let p = Policies::new(table());
        let before = p.snapshot();
        p.swap(PolicyTable::default());
        assert!(p.snapshot().authenticate("tok-audit").is_err());
        assert!(before.authenticate("tok-audit").is_ok());
    }
}
