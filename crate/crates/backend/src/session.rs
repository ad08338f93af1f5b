//! One gateway connection: verify the grant, acquire a checkout and sandbox,
//! run commands strictly in order, recycle.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use gitfarm_protocol::{
    provenance, validate_command, BackendHello, CodecError, Command, ErrorCode, Identity,
    SessionAccepted, SessionError, SessionGrant, SessionMessage, PROTOCOL_VERSION,
};
use gitfarm_statestore::{Lease, Timestamp};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::checkout::CheckoutHandle;
use crate::exec::{execute, ExecContext};
use crate::metrics::Metrics;
use crate::node::Node;

/// A session's resources, held from acquire until recycle.
#[derive(Debug, Clone)]
pub struct SessionContext {
    pub session_id: String,
    pub lease_id: String,
    pub repo_id: String,
    pub identity: Identity,
    pub checkout: CheckoutHandle,
    pub sandbox_id: String,
    pub exec: ExecContext,
    pub started: Instant,
    pub deadline: Instant,
    /// `(alias, exit_code)` of every command run so far, in order.
    pub completed: Vec<(String, i32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    Closed,
    Deadline,
    Fatal,
    Disconnected,
}

pub(crate) async fn handle_connection(node: Arc<Node>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (mut reader, mut writer) = stream.into_split();
    let codec = node.codec();

    let hello = match tokio::time::timeout(
        node.config().limits.hello_timeout,
        codec.read_message(&mut reader),
    )
    .await
    {
        Ok(Ok(Some(SessionMessage::BackendHello(h)))) => h,
        Ok(Ok(None)) => return,
        Ok(Ok(Some(other))) => {
            return reject(
                &node,
                &mut writer,
                ErrorCode::InvalidArgument,
                format!("expected backend_hello, got {}", other.kind()),
            )
            .await;
        }
        Ok(Err(e)) => {
            return reject(
                &node,
                &mut writer,
                ErrorCode::InvalidArgument,
                e.to_string(),
            )
            .await
        }
        Err(_) => {
            return reject(
                &node,
                &mut writer,
                ErrorCode::Deadline,
                "no hello received".into(),
            )
            .await
        }
    };
    if let Err(e) = verify_hello(&node, &hello) {
        return reject(&node, &mut writer, e.code, e.message).await;
    }
    let grant = hello.grant;
    let lease = lease_of(&node, &grant);
    let session_id = uuid::Uuid::new_v4().to_string();

    let ctx = match node.acquire(&grant, &session_id).await {
        Ok(ctx) => ctx,
        Err(e) => {
            if e.code == ErrorCode::ResourceExhausted {
                Metrics::inc(&node.metrics().acquire_no_capacity);
            }
            reject(&node, &mut writer, e.code, e.message).await;
            node.release_lease(&lease).await;
            return;
        }
    };
    Metrics::inc(&node.metrics().sessions_started);
    let accepted = SessionMessage::SessionAccepted(SessionAccepted {
        session_id: ctx.session_id.clone(),
        node_id: node.config().node_id.clone(),
    });
    let (end, last) = match codec.write_message(&mut writer, &accepted).await {
        Ok(()) => run_session(&node, ctx.clone(), reader, &mut writer).await,
        Err(_) => (SessionEnd::Disconnected, None),
    };
    let counter = match end {
        SessionEnd::Closed => &node.metrics().sessions_closed,
        SessionEnd::Disconnected => &node.metrics().sessions_aborted,
        SessionEnd::Deadline | SessionEnd::Fatal => &node.metrics().sessions_failed,
    };
    Metrics::inc(counter);
    // Slots are marked recycling before the client hears the session is over,
    // so an immediate follow-up session can wait for them.
    node.recycle(ctx, lease);
    if let Some(msg) = last {
        let _ = codec.write_message(&mut writer, &msg).await;
    }
}

async fn reject(node: &Node, writer: &mut OwnedWriteHalf, code: ErrorCode, message: String) {
    Metrics::inc(&node.metrics().sessions_rejected);
    tracing::info!(%code, %message, "session rejected");
    let _ = node
        .codec()
        .write_message(writer, &SessionMessage::error(code, message))
        .await;
}

fn verify_hello(node: &Node, hello: &BackendHello) -> Result<(), SessionError> {
    let config = node.config();
    let g = &hello.grant;
    if hello.version != PROTOCOL_VERSION {
        return Err(SessionError::new(
            ErrorCode::InvalidArgument,
            format!("unsupported protocol version {}", hello.version),
        ));
    }
    if !provenance::verify_grant(config.gateway_secret.as_bytes(), g, &hello.provenance) {
        return Err(SessionError::new(
            ErrorCode::Unauthenticated,
            "grant provenance check failed",
        ));
    }
    if g.node_id != config.node_id {
        return Err(SessionError::new(
            ErrorCode::InvalidArgument,
            format!("grant is for node `{}`", g.node_id),
        ));
    }
    if Timestamp::now().millis() >= g.expires_at_ms {
        return Err(SessionError::new(ErrorCode::Deadline, "grant expired"));
    }
    // Defense in depth: the gateway already authorized this pair.
    let denied = match config.repo(&g.repo_id) {
        None => true,
        Some(repo) => repo
            .allowed_clients
            .as_ref()
            .is_some_and(|allowed| !allowed.contains(&g.client_id)),
    };
    if denied {
        return Err(SessionError::new(
            ErrorCode::PermissionDenied,
            "permission denied",
        ));
    }
    Ok(())
}

fn lease_of(node: &Node, grant: &SessionGrant) -> Lease {
    let expires_at = Timestamp(grant.expires_at_ms);
    Lease {
        lease_id: grant.lease_id.clone(),
        node_id: grant.node_id.clone(),
        cluster_id: node.config().cluster_id.clone(),
        repo_id: grant.repo_id.clone(),
        acquired_at: Timestamp(
            expires_at
                .millis()
                .saturating_sub(node.config().limits.session_cap.as_millis() as u64),
        ),
        expires_at,
    }
}

enum Outcome<T> {
    Done(T),
    Deadline,
    Interrupted,
}

enum Inbound {
    Msg(SessionMessage),
    Bad(CodecError),
    Eof,
}

struct AbortOnDrop(tokio::task::JoinHandle<()>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        self.0.abort();
    }
}

fn spawn_reader(node: &Node, mut reader: OwnedReadHalf) -> (mpsc::Receiver<Inbound>, AbortOnDrop) {
    let codec = node.codec();
    let (tx, rx) = mpsc::channel(64);
    let task = tokio::spawn(async move {
        loop {
            let inbound = match codec.read_message(&mut reader).await {
                Ok(Some(msg)) => Inbound::Msg(msg),
                Ok(None) => Inbound::Eof,
                Err(e) => Inbound::Bad(e),
            };
            let last = !matches!(&inbound, Inbound::Msg(m) if !m.is_terminal());
            if tx.send(inbound).await.is_err() || last {
                break;
            }
        }
    });
    (rx, AbortOnDrop(task))
}

/// Inbound events that arrive while a command runs or while idle.
#[derive(Default)]
struct Intake {
    queue: VecDeque<Command>,
    closing: bool,
    disconnected: bool,
    fatal: Option<String>,
    reader_done: bool,
}

impl Intake {
    fn absorb(&mut self, event: Option<Inbound>) {
        match event {
            Some(Inbound::Msg(SessionMessage::SubmitCommand(cmd))) => self.queue.push_back(cmd),
            Some(Inbound::Msg(SessionMessage::SessionClose(_))) => self.closing = true,
            Some(Inbound::Msg(other)) => {
                self.fatal = Some(format!("unexpected {} in session", other.kind()))
            }
            Some(Inbound::Bad(e)) => self.fatal = Some(e.to_string()),
            Some(Inbound::Eof) => self.disconnected = true,
            None => self.reader_done = true,
        }
    }

    fn listening(&self) -> bool {
        !self.reader_done && !self.closing && !self.disconnected && self.fatal.is_none()
    }
}

/// Executes submitted commands one at a time until the client closes, the
/// deadline passes, or a fatal error occurs. Each result is written before
/// the next command starts. The terminal message, if any, is returned for
/// the caller to send.
pub(crate) async fn run_session(
    node: &Node,
    mut ctx: SessionContext,
    reader: OwnedReadHalf,
    writer: &mut OwnedWriteHalf,
) -> (SessionEnd, Option<SessionMessage>) {
    let codec = node.codec();
    let allowlist = &node.config().allowlist;
    let (mut rx, _reader_task) = spawn_reader(node, reader);
    let deadline = tokio::time::Instant::from_std(ctx.deadline);
    let mut intake = Intake::default();
    let mut aliases = HashSet::new();

    let fail = |code: ErrorCode, message: String| SessionMessage::error(code, message);

    loop {
        if intake.disconnected {
            return (SessionEnd::Disconnected, None);
        }
        if let Some(reason) = intake.fatal.take() {
            return (
                SessionEnd::Fatal,
                Some(fail(ErrorCode::InvalidArgument, reason)),
            );
        }
        let Some(cmd) = intake.queue.pop_front() else {
            if intake.closing || intake.reader_done {
                return (
                    SessionEnd::Closed,
                    Some(SessionMessage::close("client closed")),
                );
            }
            tokio::select! {
                ev = rx.recv() => intake.absorb(ev),
                _ = tokio::time::sleep_until(deadline) => {
                    return (SessionEnd::Deadline, Some(fail(ErrorCode::Deadline, "session deadline exceeded".into())));
                }
            }
            continue;
        };

        if let Err(v) = validate_command(&cmd, allowlist) {
            return (
                SessionEnd::Fatal,
                Some(fail(
                    ErrorCode::InvalidArgument,
                    format!("command `{}`: {v}", cmd.alias),
                )),
            );
        }
        if !aliases.insert(cmd.alias.clone()) {
            return (
                SessionEnd::Fatal,
                Some(fail(
                    ErrorCode::InvalidArgument,
                    format!("duplicate alias `{}`", cmd.alias),
                )),
            );
        }

        let mut exec_ctx = ctx.exec.clone();
        exec_ctx.timeout = exec_ctx
            .timeout
            .min(deadline.saturating_duration_since(tokio::time::Instant::now()));
        let run = execute(&exec_ctx, &cmd);
        tokio::pin!(run);
        let outcome = loop {
            tokio::select! {
                biased;
                r = &mut run => break Outcome::Done(r),
                _ = tokio::time::sleep_until(deadline) => break Outcome::Deadline,
                ev = rx.recv(), if intake.listening() => {
                    intake.absorb(ev);
                    if intake.disconnected || intake.fatal.is_some() {
                        // Dropping `run` kills the command's process group.
                        break Outcome::Interrupted;
                    }
                }
            }
        };
        match outcome {
            Outcome::Interrupted => continue,
            Outcome::Deadline => {
                return (
                    SessionEnd::Deadline,
                    Some(fail(
                        ErrorCode::Deadline,
                        "session deadline exceeded".into(),
                    )),
                );
            }
            Outcome::Done(Err(e)) => {
                Metrics::inc(&node.metrics().spawn_failures);
                tracing::warn!(session = %ctx.session_id, error = %e, "spawn failed; terminating session");
                return (
                    SessionEnd::Fatal,
                    Some(fail(ErrorCode::Internal, e.to_string())),
                );
            }
            Outcome::Done(Ok(result)) => {
                Metrics::inc(&node.metrics().commands_executed);
                if result.exit_code == crate::config::TIMEOUT_EXIT_CODE
                    && result.stderr_lossy().contains("gitfarm: command timed out")
                {
                    Metrics::inc(&node.metrics().commands_timed_out);
                }
                ctx.completed.push((result.alias.clone(), result.exit_code));
                if codec
                    .write_message(writer, &SessionMessage::ServerResult(result))
                    .await
                    .is_err()
                {
                    return (SessionEnd::Disconnected, None);
                }
            }
        }
    }
}

/// Session cap, shortened to the lease's expiry.
pub(crate) fn session_deadline(started: Instant, cap: Duration, expires_at_ms: u64) -> Instant {
    let until_expiry =
        Duration::from_millis(expires_at_ms.saturating_sub(Timestamp::now().millis()));
    started + cap.min(until_expiry)
}
