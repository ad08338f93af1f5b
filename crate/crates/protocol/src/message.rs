//! The tagged session message union.
//!
//! A session is a bidirectional stream of [`SessionMessage`] values. The client
//! opens with [`ClientHello`], the server answers with [`SessionAccepted`] or
//! [`SessionError`], then commands and results flow until either side sends a
//! terminal message. Between gateway and backend, [`BackendHello`] replaces the
//! client hello and carries the authenticated identity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::command::{Command, CommandResult};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkspaceType {
    #[default]
    #[serde(rename = "FULL_CHECKOUT")]
    FullCheckout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Unauthenticated,
    PermissionDenied,
    ResourceExhausted,
    Unavailable,
    Deadline,
    InvalidArgument,
    /// Infrastructure failure inside the session (e.g. the child could not be spawned).
    Internal,
    Aborted,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Unauthenticated => "UNAUTHENTICATED",
            ErrorCode::PermissionDenied => "PERMISSION_DENIED",
            ErrorCode::ResourceExhausted => "RESOURCE_EXHAUSTED",
            ErrorCode::Unavailable => "UNAVAILABLE",
            ErrorCode::Deadline => "DEADLINE",
            ErrorCode::InvalidArgument => "INVALID_ARGUMENT",
            ErrorCode::Internal => "INTERNAL",
            ErrorCode::Aborted => "ABORTED",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientHello {
    pub version: u32,
    pub repo_id: String,
    #[serde(default)]
    pub workspace_type: WorkspaceType,
    pub identity_token: String,
}

impl ClientHello {
    pub fn new(repo_id: impl Into<String>, identity_token: impl Into<String>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            repo_id: repo_id.into(),
            workspace_type: WorkspaceType::FullCheckout,
            identity_token: identity_token.into(),
        }
    }
}

impl fmt::Debug for ClientHello {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientHello")
            .field("version", &self.version)
            .field("repo_id", &self.repo_id)
            .field("workspace_type", &self.workspace_type)
            .field("identity_token", &"<redacted>")
            .finish()
    }
}

/// Server acknowledgment of a hello.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionAccepted {
    pub session_id: String,
    pub node_id: String,
}

/// An authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub client_id: String,
    pub display_name: String,
}

/// What the gateway hands a backend: the lease it holds and who the caller is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionGrant {
    pub lease_id: String,
    pub node_id: String,
    pub repo_id: String,
    pub client_id: String,
    pub display_name: String,
    /// Lease expiry, milliseconds since the Unix epoch.
    pub expires_at_ms: u64,
}

impl SessionGrant {
    pub fn identity(&self) -> Identity {
        Identity {
            client_id: self.client_id.clone(),
            display_name: self.display_name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHello {
    pub version: u32,
    #[serde(default)]
    pub workspace_type: WorkspaceType,
    pub grant: SessionGrant,
    /// Hex HMAC over the grant, proving it was issued by a gateway.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionError {
    pub code: ErrorCode,
    pub message: String,
}

impl SessionError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for SessionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for SessionError {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionClose {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionMessage {
    ClientHello(ClientHello),
    SessionAccepted(SessionAccepted),
    SubmitCommand(Command),
    ServerResult(CommandResult),
    SessionError(SessionError),
    SessionClose(SessionClose),
    BackendHello(BackendHello),
}

impl SessionMessage {
    pub fn close(reason: impl Into<String>) -> Self {
        SessionMessage::SessionClose(SessionClose {
            reason: reason.into(),
        })
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        SessionMessage::SessionError(SessionError::new(code, message))
    }

    /// True for messages after which the sender emits nothing further.
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            SessionMessage::SessionError(_) | SessionMessage::SessionClose(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SessionMessage::ClientHello(_) => "client_hello",
            SessionMessage::SessionAccepted(_) => "session_accepted",
            SessionMessage::SubmitCommand(_) => "submit_command",
            SessionMessage::ServerResult(_) => "server_result",
            SessionMessage::SessionError(_) => "session_error",
            SessionMessage::SessionClose(_) => "session_close",
            SessionMessage::BackendHello(_) => "backend_hello",
        }
    }
}
