//! Gateway-issued grant signatures.
//!
//! The backend only trusts identity metadata that arrives with a valid HMAC
//! computed under the secret it shares with the gateways.

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::message::SessionGrant;

type HmacSha256 = Hmac<Sha256>;

fn mac_for(secret: &[u8], grant: &SessionGrant) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    for part in [
        grant.lease_id.as_bytes(),
        grant.node_id.as_bytes(),
        grant.repo_id.as_bytes(),
        grant.client_id.as_bytes(),
        grant.display_name.as_bytes(),
    ] {
        mac.update(&(part.len() as u64).to_be_bytes());
        mac.update(part);
    }
    mac.update(&grant.expires_at_ms.to_be_bytes());
    mac
}

pub fn sign_grant(secret: &[u8], grant: &SessionGrant) -> String {
    hex::encode(mac_for(secret, grant).finalize().into_bytes())
}

pub fn verify_grant(secret: &[u8], grant: &SessionGrant, tag: &str) -> bool {
    let Ok(bytes) = hex::decode(tag) else {
        return false;
    };
    mac_for(secret, grant).verify_slice(&bytes).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grant() -> SessionGrant {
        SessionGrant {
            lease_id: "l-1".into(),
            node_id: "node-a".into(),
            repo_id: "go-mono".into(),
            client_id: "audit-bot".into(),
            display_name: "Audit Bot".into(),
            expires_at_ms: 1_700_000_300_000,
        }
    }

    #[test]
    fn sign_and_verify() {
        let tag = sign_grant(b"s3cret", &grant());
        assert!(verify_grant(b"s3cret", &grant(), &tag));
        assert!(!verify_grant(b"other", &grant(), &tag));
        assert!(!verify_grant(b"s3cret", &grant(), "zz"));
    }

    #[test]
    fn tampered_identity_fails() {
        let tag = sign_grant(b"s3cret", &grant());
        let mut forged = grant();
        forged.client_id = "root".into();
        assert!(!verify_grant(b"s3cret", &forged, &tag));
    }

    #[test]
    fn field_boundaries_are_unambiguous() {
        let mut a = grant();
        a.lease_id = "ab".into();
        a.node_id = "c".into();
        let mut b = grant();
        b.lease_id = "a".into();
        b.node_id = "bc".into();
        assert_ne!(sign_grant(b"k", &a), sign_grant(b"k", &b));
    }
}
