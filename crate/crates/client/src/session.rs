//! A client session over one gateway connection.

use std::time::Duration;

use gitfarm_protocol::{
    ClientHello, Codec, CodecError, Command, CommandResult, ErrorCode, SessionError, SessionMessage,
};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use crate::script::ScriptError;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connecting to {endpoint}: {source}")]
    Connect {
        endpoint: String,
        source: std::io::Error,
    },
    /// The session was refused before it started.
    #[error("session refused: {0}")]
    Refused(SessionError),
    /// The server ended a running session with an error.
    #[error("session failed: {0}")]
    Fatal(SessionError),
    #[error("server closed the session: {0}")]
    Closed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection: {0}")]
    Codec(#[from] CodecError),
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    Script(#[from] ScriptError),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const UNAUTHENTICATED: i32 = 3;
    pub const DENIED: i32 = 4;
    pub const CAPACITY: i32 = 5;
    pub const SESSION_FATAL: i32 = 6;
    pub const COMMAND_FAILED: i32 = 7;
}

/// Exit code for a server-reported error.
pub fn exit_code_for(code: ErrorCode) -> i32 {
    match code {
        ErrorCode::Unauthenticated => exit::UNAUTHENTICATED,
        ErrorCode::PermissionDenied => exit::DENIED,
        ErrorCode::ResourceExhausted => exit::CAPACITY,
        _ => exit::SESSION_FATAL,
    }
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Refused(e) | ClientError::Fatal(e) => exit_code_for(e.code),
            ClientError::Script(_) => exit::VALIDATION,
            _ => exit::SESSION_FATAL,
        }
    }

    /// The server's error, when there is one.
    pub fn session_error(&self) -> Option<&SessionError> {
        match self {
            ClientError::Refused(e) | ClientError::Fatal(e) => Some(e),
            _ => None,
        }
    }
}

pub struct Session {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    codec: Codec,
    session_id: String,
    node_id: String,
    read_timeout: Option<Duration>,
    finished: bool,
}

impl Session {
    /// Connects and performs the hello exchange.
    pub async fn connect(endpoint: &str, repo_id: &str, token: &str) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(endpoint)
            .await
            .map_err(|source| ClientError::Connect {
                endpoint: endpoint.to_owned(),
                source,
            })?;
        let _ = stream.set_nodelay(true);
        let (reader, writer) = stream.into_split();
        let mut s = Session {
            reader,
            writer,
            codec: Codec::default(),
            session_id: String::new(),
            node_id: String::new(),
            read_timeout: None,
            finished: false,
        };
        let hello = SessionMessage::ClientHello(ClientHello::new(repo_id, token));
        s.codec.write_message(&mut s.writer, &hello).await?;
        match s.read().await? {
            SessionMessage::SessionAccepted(a) => {
                s.session_id = a.session_id;
                s.node_id = a.node_id;
                Ok(s)
            }
            SessionMessage::SessionError(e) => Err(ClientError::Refused(e)),
            other => Err(ClientError::Protocol(format!(
                "expected session_accepted, got {}",
                other.kind()
            ))),
        }
    }

    /// Bounds every subsequent wait for a server message.
    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) {
        self.read_timeout = timeout;
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    async fn read(&mut self) -> Result<SessionMessage, ClientError> {
        let read = self.codec.read_message(&mut self.reader);
        let msg = match self.read_timeout {
            Some(t) => tokio::time::timeout(t, read)
                .await
                .map_err(|_| ClientError::Timeout)??,
            None => read.await?,
        };
        msg.ok_or_else(|| ClientError::Closed("connection closed".into()))
    }

    /// Queues a command without waiting for its result.
    pub async fn submit(&mut self, cmd: Command) -> Result<(), ClientError> {
        self.codec
            .write_message(&mut self.writer, &SessionMessage::SubmitCommand(cmd))
            .await?;
        Ok(())
    }

    /// Waits for the next result, in submission order.
    pub async fn next_result(&mut self) -> Result<CommandResult, ClientError> {
        if self.finished {
            return Err(ClientError::Closed("session already ended".into()));
        }
        match self.read().await? {
            SessionMessage::ServerResult(r) => Ok(r),
            SessionMessage::SessionError(e) => {
                self.finished = true;
                Err(ClientError::Fatal(e))
            }
            SessionMessage::SessionClose(c) => {
                self.finished = true;
                Err(ClientError::Closed(c.reason))
            }
            other => Err(ClientError::Protocol(format!(
                "unexpected {} in session",
                other.kind()
            ))),
        }
    }

    /// Submits one command and waits for its result.
    pub async fn run(&mut self, cmd: Command) -> Result<CommandResult, ClientError> {
        self.submit(cmd).await?;
        self.next_result().await
    }

    /// Ends the session, collecting any results still in flight.
    pub async fn close(mut self) -> Result<Vec<CommandResult>, ClientError> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.codec
            .write_message(&mut self.writer, &SessionMessage::close("client done"))
            .await?;
        let mut pending = Vec::new();
        loop {
            match self.read().await? {
                SessionMessage::ServerResult(r) => pending.push(r),
                SessionMessage::SessionClose(_) => return Ok(pending),
                SessionMessage::SessionError(e) => return Err(ClientError::Fatal(e)),
                other => {
                    return Err(ClientError::Protocol(format!(
                        "unexpected {} while closing",
                        other.kind()
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            ErrorCode::Unauthenticated,
            ErrorCode::PermissionDenied,
            ErrorCode::ResourceExhausted,
        ]
        .map(exit_code_for);
        assert_eq!(codes, [3, 4, 5]);
        for c in [
            ErrorCode::Unavailable,
            ErrorCode::Deadline,
            ErrorCode::InvalidArgument,
            ErrorCode::Internal,
            ErrorCode::Aborted,
        ] {
            assert_eq!(exit_code_for(c), exit::SESSION_FATAL);
        }
        assert_eq!(
            ClientError::Script(ScriptError::Empty).exit_code(),
            exit::VALIDATION
        );
    }
}
