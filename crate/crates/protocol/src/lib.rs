//! Wire schema shared by gitfarm clients, gateways and backends.
//!
//! Messages travel as length-prefixed canonical JSON frames over any reliable
//! bidirectional byte stream; see [`codec`].

mod b64;
pub mod codec;
pub mod command;
pub mod message;
pub mod provenance;

pub use codec::{decode_message, encode_message, Codec, CodecError, FrameLimits};
pub use command::{validate_command, Allowlist, Command, CommandResult, Violation};
pub use message::{
    BackendHello, ClientHello, ErrorCode, Identity, SessionAccepted, SessionClose, SessionError,
    SessionGrant, SessionMessage, WorkspaceType, PROTOCOL_VERSION,
};
