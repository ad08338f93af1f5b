//! Length-prefixed framing.
//!
//! ```text
//! +----------------------+---------------------------------+
//! | length (u32, BE)     | canonical JSON body (length B)  |
//! +----------------------+---------------------------------+
//! ```
//!
//! Bodies are serialized with struct fields in declaration order and maps in
//! key order, so equal messages always produce identical bytes.

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::message::SessionMessage;

pub const LENGTH_PREFIX: usize = 4;

pub const DEFAULT_MAX_STDIN: usize = 4 * 1024 * 1024;
pub const DEFAULT_MAX_OUTPUT: usize = 4 * 1024 * 1024;
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("truncated frame")]
    Truncated,
    #[error("frame of {len} bytes exceeds limit of {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("{extra} trailing bytes after frame")]
    TrailingBytes { extra: usize },
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("invalid `{field}`: {reason}")]
    InvalidField {
        field: &'static str,
        reason: &'static str,
    },
    #[error("`{field}` is {len} bytes, cap is {max}")]
    Oversize {
        field: &'static str,
        len: usize,
        max: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CodecError {
    /// Name of the offending field, when one can be identified.
    pub fn field(&self) -> Option<&str> {
        match self {
            CodecError::InvalidField { field, .. } | CodecError::Oversize { field, .. } => {
                Some(field)
            }
            _ => None,
        }
    }
}

/// Size caps enforced symmetrically on encode and decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLimits {
    pub max_stdin: usize,
    pub max_output: usize,
    pub max_frame: usize,
}

impl Default for FrameLimits {
    fn default() -> Self {
        Self {
            max_stdin: DEFAULT_MAX_STDIN,
            max_output: DEFAULT_MAX_OUTPUT,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Codec {
    pub limits: FrameLimits,
}

impl Codec {
    pub fn new(limits: FrameLimits) -> Self {
        Self { limits }
    }

    pub fn encode(&self, msg: &SessionMessage) -> Result<Vec<u8>, CodecError> {
        self.check(msg)?;
        let mut frame = vec![0u8; LENGTH_PREFIX];
        serde_json::to_writer(&mut frame, msg).map_err(|e| CodecError::Malformed(e.to_string()))?;
        let body_len = frame.len() - LENGTH_PREFIX;
        if body_len > self.limits.max_frame {
            return Err(CodecError::FrameTooLarge {
                len: body_len,
                max: self.limits.max_frame,
            });
        }
        frame[..LENGTH_PREFIX].copy_from_slice(&(body_len as u32).to_be_bytes());
        Ok(frame)
    }

    /// Decodes exactly one frame. Never panics on arbitrary input.
    pub fn decode(&self, frame: &[u8]) -> Result<SessionMessage, CodecError> {
        let body_len = self.body_len(frame)?;
        let body = &frame[LENGTH_PREFIX..];
        if body.len() < body_len {
            return Err(CodecError::Truncated);
        }
        if body.len() > body_len {
            return Err(CodecError::TrailingBytes {
                extra: body.len() - body_len,
            });
        }
        self.decode_body(body)
    }

    pub fn decode_body(&self, body: &[u8]) -> Result<SessionMessage, CodecError> {
        let msg: SessionMessage =
            serde_json::from_slice(body).map_err(|e| CodecError::Malformed(e.to_string()))?;
        self.check(&msg)?;
        Ok(msg)
    }

    fn body_len(&self, frame: &[u8]) -> Result<usize, CodecError> {
        let prefix: [u8; LENGTH_PREFIX] = frame
            .get(..LENGTH_PREFIX)
            .ok_or(CodecError::Truncated)?
            .try_into()
            .expect("prefix");
        let len = u32::from_be_bytes(prefix) as usize;
        if len > self.limits.max_frame {
            return Err(CodecError::FrameTooLarge {
                len,
                max: self.limits.max_frame,
            });
        }
        Ok(len)
    }

    /// Structural invariants plus payload caps.
    fn check(&self, msg: &SessionMessage) -> Result<(), CodecError> {
        let limits = &self.limits;
        match msg {
            SessionMessage::ClientHello(h) => {
                non_empty("repo_id", &h.repo_id)?;
            }
            SessionMessage::SessionAccepted(a) => {
                non_empty("session_id", &a.session_id)?;
            }
            SessionMessage::SubmitCommand(c) => {
                non_empty("alias", &c.alias)?;
                non_empty("binary", &c.binary)?;
                if let Some(stdin) = &c.stdin {
                    capped("stdin_b64", stdin.len(), limits.max_stdin)?;
                }
            }
            SessionMessage::ServerResult(r) => {
                non_empty("alias", &r.alias)?;
                capped("stdout_b64", r.stdout.len(), limits.max_output)?;
                capped("stderr_b64", r.stderr.len(), limits.max_output)?;
            }
            SessionMessage::BackendHello(h) => {
                non_empty("repo_id", &h.grant.repo_id)?;
                non_empty("lease_id", &h.grant.lease_id)?;
                non_empty("client_id", &h.grant.client_id)?;
            }
            SessionMessage::SessionError(_) | SessionMessage::SessionClose(_) => {}
        }
        Ok(())
    }

    /// Reads one raw frame (prefix included). `Ok(None)` on clean EOF at a
    /// frame boundary.
    pub async fn read_frame<R>(&self, reader: &mut R) -> Result<Option<Vec<u8>>, CodecError>
    where
        R: AsyncRead + Unpin,
    {
        let mut prefix = [0u8; LENGTH_PREFIX];
        let mut filled = 0;
        while filled < LENGTH_PREFIX {
            let n = reader.read(&mut prefix[filled..]).await?;
            if n == 0 {
                return if filled == 0 {
                    Ok(None)
                } else {
                    Err(CodecError::Truncated)
                };
            }
            filled += n;
        }
        let len = self.body_len(&prefix)?;
        let mut frame = Vec::with_capacity(LENGTH_PREFIX + len);
        frame.extend_from_slice(&prefix);
        frame.resize(LENGTH_PREFIX + len, 0);
        reader
            .read_exact(&mut frame[LENGTH_PREFIX..])
            .await
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    CodecError::Truncated
                } else {
                    CodecError::Io(e)
                }
            })?;
        Ok(Some(frame))
    }

    pub async fn read_message<R>(
        &self,
        reader: &mut R,
    ) -> Result<Option<SessionMessage>, CodecError>
    where
        R: AsyncRead + Unpin,
    {
        match self.read_frame(reader).await? {
            Some(frame) => self.decode_body(&frame[LENGTH_PREFIX..]).map(Some),
            None => Ok(None),
        }
    }

    pub async fn write_message<W>(
        &self,
        writer: &mut W,
        msg: &SessionMessage,
    ) -> Result<(), CodecError>
    where
        W: AsyncWrite + Unpin,
    {
        let frame = self.encode(msg)?;
        writer.write_all(&frame).await?;
        writer.flush().await?;
        Ok(())
    }
}

fn non_empty(field: &'static str, value: &str) -> Result<(), CodecError> {
    if value.is_empty() {
        Err(CodecError::InvalidField {
            field,
            reason: "must be non-empty",
        })
    } else {
        Ok(())
    }
}

fn capped(field: &'static str, len: usize, max: usize) -> Result<(), CodecError> {
    if len > max {
        Err(CodecError::Oversize { field, len, max })
    } else {
        Ok(())
    }
}

/// Encodes with default limits.
pub fn encode_message(msg: &SessionMessage) -> Result<Vec<u8>, CodecError> {
    Codec::default().encode(msg)
}

/// Decodes with default limits.
pub fn decode_message(frame: &[u8]) -> Result<SessionMessage, CodecError> {
    Codec::default().decode(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::{Command, CommandResult};
    use crate::message::*;

    #[test]
    fn close_round_trips() {
        let msg = SessionMessage::close("done");
        let frame = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&frame).unwrap(), msg);
    }

    #[test]
    fn submit_round_trips() {
        let msg = SessionMessage::SubmitCommand(Command::git("a", ["--version"]));
        let frame = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&frame).unwrap(), msg);
    }

    #[test]
    fn hello_round_trips() {
        let msg = SessionMessage::ClientHello(ClientHello::new("go-mono", "tok-audit"));
        let frame = encode_message(&msg).unwrap();
        assert_eq!(decode_message(&frame).unwrap(), msg);
    }

    #[test]
    fn oversize_stdin_is_an_encoding_error() {
        let codec = Codec::new(FrameLimits {
            max_stdin: 1 << 20,
            ..Default::default()
        });
        let msg = SessionMessage::SubmitCommand(
            Command::git("big", ["hash-object", "--stdin"]).with_stdin(vec![b'x'; 10 << 20]),
        );
        let err = codec.encode(&msg).unwrap_err();
        assert!(
            matches!(
                err,
                CodecError::Oversize {
                    field: "stdin_b64",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn oversize_output_rejected_both_ways() {
        let small = Codec::new(FrameLimits {
            max_output: 8,
            ..Default::default()
        });
        let msg = SessionMessage::ServerResult(CommandResult {
            alias: "a".into(),
            exit_code: 0,
            stdout: vec![0; 9],
            stderr: vec![],
            truncated: false,
        });
        assert!(small.encode(&msg).is_err());
        let frame = encode_message(&msg).unwrap();
        let err = small.decode(&frame).unwrap_err();
        assert_eq!(err.field(), Some("stdout_b64"));
    }

    #[test]
    fn empty_input_is_truncated() {
        let err = decode_message(&[]).unwrap_err();
        assert_eq!(err.to_string(), "truncated frame");
    }

    #[test]
    fn short_body_is_truncated() {
        let mut frame = encode_message(&SessionMessage::close("x")).unwrap();
        frame.pop();
        assert!(matches!(decode_message(&frame), Err(CodecError::Truncated)));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut frame = encode_message(&SessionMessage::close("x")).unwrap();
        frame.push(b' ');
        assert!(matches!(
            decode_message(&frame),
            Err(CodecError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn huge_length_prefix_rejected_without_allocating() {
        let frame = [0xff, 0xff, 0xff, 0xff, b'{'];
        assert!(matches!(
            decode_message(&frame),
            Err(CodecError::FrameTooLarge { .. })
        ));
    }

    fn frame_of(body: &str) -> Vec<u8> {
        let mut f = (body.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(body.as_bytes());
        f
    }

    #[test]
    fn unknown_tag_rejected() {
        let err = decode_message(&frame_of(r#"{"type":"launch_missiles"}"#)).unwrap_err();
        assert!(err.to_string().contains("launch_missiles"), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let err =
            decode_message(&frame_of(r#"{"type":"submit_command","binary":"git"}"#)).unwrap_err();
        assert!(err.to_string().contains("alias"), "{err}");
    }

    #[test]
    fn empty_alias_is_invalid_field() {
        let err = decode_message(&frame_of(
            r#"{"type":"submit_command","alias":"","binary":"git"}"#,
        ))
        .unwrap_err();
        assert_eq!(err.field(), Some("alias"));
    }

    #[test]
    fn bad_base64_rejected() {
        let body = r#"{"type":"server_result","alias":"a","exit_code":0,"stdout_b64":"!!","stderr_b64":""}"#;
        assert!(matches!(
            decode_message(&frame_of(body)),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn wire_field_names() {
        let cmd = Command::git("a", ["status"])
            .with_stdin(b"hi".to_vec())
            .with_env("K", "v");
        let frame = encode_message(&SessionMessage::SubmitCommand(cmd)).unwrap();
        let body = std::str::from_utf8(&frame[4..]).unwrap();
        assert_eq!(
            body,
            r#"{"type":"submit_command","alias":"a","binary":"git","arguments":["status"],"stdin_b64":"aGk=","environment":{"K":"v"}}"#
        );

        let hello =
            encode_message(&SessionMessage::ClientHello(ClientHello::new("r", "t"))).unwrap();
        assert_eq!(
            std::str::from_utf8(&hello[4..]).unwrap(),
            r#"{"type":"client_hello","version":1,"repo_id":"r","workspace_type":"FULL_CHECKOUT","identity_token":"t"}"#
        );

        let err =
            encode_message(&SessionMessage::error(ErrorCode::ResourceExhausted, "full")).unwrap();
        assert_eq!(
            std::str::from_utf8(&err[4..]).unwrap(),
            r#"{"type":"session_error","code":"RESOURCE_EXHAUSTED","message":"full"}"#
        );
    }

    #[test]
    fn unsupported_workspace_type_rejected() {
        let body = r#"{"type":"client_hello","version":1,"repo_id":"r","workspace_type":"SPARSE","identity_token":"t"}"#;
        let err = decode_message(&frame_of(body)).unwrap_err();
        assert!(err.to_string().contains("SPARSE"), "{err}");
    }

    #[tokio::test]
    async fn stream_read_write() {
        let codec = Codec::default();
        let (mut a, mut b) = tokio::io::duplex(64);
        let msgs = vec![
            SessionMessage::SubmitCommand(Command::git("one", ["status"])),
            SessionMessage::SubmitCommand(Command::git("two", ["log", "-1"])),
            SessionMessage::close("bye"),
        ];
        let sent = msgs.clone();
        let writer = tokio::spawn(async move {
            for m in &sent {
                codec.write_message(&mut a, m).await.unwrap();
            }
        });
        let mut got = Vec::new();
        while got.len() < msgs.len() {
            got.push(codec.read_message(&mut b).await.unwrap().unwrap());
        }
        writer.await.unwrap();
        assert_eq!(got, msgs);
        drop(b);
    }

    #[tokio::test]
    async fn eof_mid_prefix_is_truncated() {
        let codec = Codec::default();
        let mut input: &[u8] = &[0, 0];
        assert!(matches!(
            codec.read_message(&mut input).await,
            Err(CodecError::Truncated)
        ));
        let mut empty: &[u8] = &[];
        assert!(codec.read_message(&mut empty).await.unwrap().is_none());
    }
}
