//! One client session: authenticate, authorize, place, then pump frames
//! between the client and the chosen backend.

use std::sync::Arc;
use std::time::Duration;

use gitfarm_protocol::{
    provenance, BackendHello, ClientHello, Codec, CodecError, ErrorCode, Identity, SessionError,
    SessionGrant, SessionMessage, PROTOCOL_VERSION,
};
use gitfarm_statestore::{Lease, StateStore, StoreError, Timestamp};
use tokio::io::AsyncRead;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::metrics::Metrics;
use crate::server::Gateway;

/// Releases the lease once: explicitly at session end, or from `Drop` if the
/// session task is cancelled first.
struct LeaseGuard {
    store: Arc<dyn StateStore>,
    metrics: Arc<Metrics>,
    lease: Option<Lease>,
}

impl LeaseGuard {
    fn lease(&self) -> &Lease {
        self.lease.as_ref().expect("lease held until release")
    }

    async fn release(mut self) {
        if let Some(lease) = self.lease.take() {
            release(&*self.store, &self.metrics, &lease).await;
        }
    }
}

impl Drop for LeaseGuard {
    fn drop(&mut self) {
        if let Some(lease) = self.lease.take() {
            let store = self.store.clone();
            let metrics = self.metrics.clone();
            if let Ok(rt) = tokio::runtime::Handle::try_current() {
                rt.spawn(async move { release(&*store, &metrics, &lease).await });
            }
        }
    }
}

async fn release(store: &dyn StateStore, metrics: &Metrics, lease: &Lease) {
    match store.release(lease).await {
        Ok(_) => Metrics::inc(&metrics.leases_released),
        Err(e) => {
            Metrics::inc(&metrics.release_failures);
            tracing::warn!(lease_id = %lease.lease_id, error = %e, "lease release failed; expiry will reclaim it");
        }
    }
}

enum Inbound {
    Msg(SessionMessage),
    Bad(CodecError),
    Eof,
}

/// Decodes frames on a dedicated task so the pump can select on both sides
/// without losing partially read frames.
fn spawn_reader<R>(codec: Codec, mut reader: R) -> (mpsc::Receiver<Inbound>, AbortOnDrop)
where
    R: AsyncRead + Unpin + Send + 'static,
{
    let (tx, rx) = mpsc::channel(64);
    let task = tokio::spawn(async move {
        loop {
            let inbound = match codec.read_message(&mut reader).await {
                Ok(Some(m)) => Inbound::Msg(m),
                Ok(None) => Inbound::Eof,
                Err(e) => Inbound::Bad(e),
            };
            let last = !matches!(&inbound, Inbound::Msg(_));
            if tx.send(inbound).await.is_err() || last {
                break;
            }
        }
    });
    (rx, AbortOnDrop(task))
}

struct AbortOnDrop(tokio::task::JoinHandle<()>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        self.0.abort();
    }
}

async fn refuse(gw: &Gateway, writer: &mut OwnedWriteHalf, err: SessionError) {
    let m = gw.metrics();
    let counter = match err.code {
        ErrorCode::Unauthenticated => &m.rejected_unauthenticated,
        ErrorCode::PermissionDenied => &m.rejected_permission_denied,
        ErrorCode::ResourceExhausted => &m.rejected_no_capacity,
        _ => &m.rejected_invalid,
    };
    Metrics::inc(counter);
    tracing::debug!(code = %err.code, message = %err.message, "session refused");
    let _ = gw
        .codec()
        .write_message(writer, &SessionMessage::SessionError(err))
        .await;
}

pub(crate) async fn handle_client(gw: Arc<Gateway>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (client_r, mut client_w) = stream.into_split();
    let codec = gw.codec();
    let (mut from_client, _client_reader) = spawn_reader(codec, client_r);

    let hello = match tokio::time::timeout(gw.config().timeouts.hello, from_client.recv()).await {
        Ok(Some(Inbound::Msg(SessionMessage::ClientHello(h)))) => h,
        Ok(Some(Inbound::Msg(other))) => {
            let e = SessionError::new(
                ErrorCode::InvalidArgument,
                format!("expected client_hello, got {}", other.kind()),
            );
            return refuse(&gw, &mut client_w, e).await;
        }
        Ok(Some(Inbound::Bad(e))) => {
            let e = SessionError::new(ErrorCode::InvalidArgument, e.to_string());
            return refuse(&gw, &mut client_w, e).await;
        }
        Ok(Some(Inbound::Eof) | None) => return,
        Err(_) => {
            let e = SessionError::new(ErrorCode::Deadline, "no hello received");
            return refuse(&gw, &mut client_w, e).await;
        }
    };

    let (identity, cluster_id) = match admit(&gw, &hello) {
        Ok(v) => v,
        Err(e) => return refuse(&gw, &mut client_w, e).await,
    };
    let (guard, backend) = match place(&gw, &hello.repo_id, &cluster_id).await {
        Ok(v) => v,
        Err(e) => return refuse(&gw, &mut client_w, e).await,
    };
    let lease = guard.lease().clone();
    tracing::debug!(lease_id = %lease.lease_id, node = %lease.node_id, client = %identity.client_id, "session placed");

    let (backend_r, mut backend_w) = backend.into_split();
    let grant = SessionGrant {
        lease_id: lease.lease_id.clone(),
        node_id: lease.node_id.clone(),
        repo_id: lease.repo_id.clone(),
        client_id: identity.client_id,
        display_name: identity.display_name,
        expires_at_ms: lease.expires_at.millis(),
    };
    let provenance = provenance::sign_grant(gw.config().gateway_secret.as_bytes(), &grant);
    let backend_hello = SessionMessage::BackendHello(BackendHello {
        version: PROTOCOL_VERSION,
        workspace_type: hello.workspace_type,
        grant,
        provenance,
    });
    let (mut from_backend, _backend_reader) = spawn_reader(codec, backend_r);
    if codec
        .write_message(&mut backend_w, &backend_hello)
        .await
        .is_err()
    {
        Metrics::inc(&gw.metrics().backend_lost);
        let e = SessionError::new(ErrorCode::Unavailable, "backend connection lost");
        refuse(&gw, &mut client_w, e).await;
        return guard.release().await;
    }

    let accept_wait = gw.config().timeouts.backend_accept;
    match tokio::time::timeout(accept_wait, from_backend.recv()).await {
        Ok(Some(Inbound::Msg(m @ SessionMessage::SessionAccepted(_)))) => {
            if codec.write_message(&mut client_w, &m).await.is_err() {
                Metrics::inc(&gw.metrics().client_disconnects);
                return guard.release().await;
            }
        }
        Ok(Some(Inbound::Msg(SessionMessage::SessionError(e)))) => {
            Metrics::inc(&gw.metrics().rejected_by_backend);
            let _ = codec
                .write_message(&mut client_w, &SessionMessage::SessionError(e))
                .await;
            return guard.release().await;
        }
        _ => {
            Metrics::inc(&gw.metrics().backend_lost);
            let e = SessionError::new(ErrorCode::Unavailable, "backend did not accept the session");
            refuse(&gw, &mut client_w, e).await;
            return guard.release().await;
        }
    }
    Metrics::inc(&gw.metrics().sessions_routed);

    let slack = gw.config().timeouts.session_slack;
    let until_expiry = Duration::from_millis(
        lease
            .expires_at
            .millis()
            .saturating_sub(Timestamp::now().millis()),
    );
    let deadline = tokio::time::Instant::now() + until_expiry + slack;
    pump(
        &gw,
        &mut from_client,
        &mut client_w,
        &mut from_backend,
        &mut backend_w,
        deadline,
    )
    .await;
    drop(backend_w);
    guard.release().await;
}

/// Authentication then authorization, before any statestore traffic.
fn admit(gw: &Gateway, hello: &ClientHello) -> Result<(Identity, String), SessionError> {
    if hello.version != PROTOCOL_VERSION {
        return Err(SessionError::new(
            ErrorCode::InvalidArgument,
            format!("unsupported protocol version {}", hello.version),
        ));
    }
    let policies = gw.policies().snapshot();
    let identity = policies.authenticate(&hello.identity_token)?;
    let cluster = policies.authorize(&identity, &hello.repo_id)?;
    Ok((identity, cluster))
}

/// Takes a lease and connects to its node, falling back once to the
/// next-best node if the connection fails.
async fn place(
    gw: &Gateway,
    repo_id: &str,
    cluster_id: &str,
) -> Result<(LeaseGuard, TcpStream), SessionError> {
    let store = gw.store();
    let mut excluded: Vec<String> = Vec::new();
    for _ in 0..2 {
        let lease = match store
            .select_and_occupy_excluding(repo_id, cluster_id, &excluded)
            .await
        {
            Ok(lease) => lease,
            // Also on the fallback attempt: the remaining nodes are full.
            Err(StoreError::NoCapacity { .. }) => {
                return Err(SessionError::new(
                    ErrorCode::ResourceExhausted,
                    format!("no capacity for `{repo_id}`"),
                ))
            }
            Err(e) => {
                Metrics::inc(&gw.metrics().store_errors);
                tracing::warn!(error = %e, "statestore selection failed");
                return Err(SessionError::new(
                    ErrorCode::Unavailable,
                    "placement temporarily unavailable",
                ));
            }
        };
        let guard = LeaseGuard {
            store: store.clone(),
            metrics: gw.metrics_arc(),
            lease: Some(lease),
        };
        let node_id = guard.lease().node_id.clone();
        match connect(gw, &node_id).await {
            Ok(stream) => return Ok((guard, stream)),
            Err(e) => {
                tracing::warn!(node = %node_id, error = %e, "backend connect failed");
                Metrics::inc(&gw.metrics().connect_fallbacks);
                guard.release().await;
                excluded.push(node_id);
            }
        }
    }
    Err(SessionError::new(
        ErrorCode::Unavailable,
        "no reachable backend",
    ))
}

async fn connect(gw: &Gateway, node_id: &str) -> std::io::Result<TcpStream> {
    let other = |m: String| std::io::Error::other(m);
    let view = gw
        .store()
        .node(node_id)
        .await
        .map_err(|e| other(e.to_string()))?
        .ok_or_else(|| other(format!("node `{node_id}` not registered")))?;
    let address = view.registration.address;
    let stream = tokio::time::timeout(
        gw.config().timeouts.backend_connect,
        TcpStream::connect(address.as_str()),
    )
    .await
    .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "connect timed out"))??;
    let _ = stream.set_nodelay(true);
    Ok(stream)
}

/// Forwards client commands and backend results until either side ends the
/// session. Returns once a terminal message has reached the client or the
/// client is gone.
async fn pump(
    gw: &Gateway,
    from_client: &mut mpsc::Receiver<Inbound>,
    client_w: &mut OwnedWriteHalf,
    from_backend: &mut mpsc::Receiver<Inbound>,
    backend_w: &mut OwnedWriteHalf,
    deadline: tokio::time::Instant,
) {
    let codec = gw.codec();
    let metrics = gw.metrics();
    let mut client_closed = false;
    let mut client_done = false;
    let to_client = |e: SessionError| SessionMessage::SessionError(e);
    loop {
        tokio::select! {
            ev = from_client.recv(), if !client_done => match ev {
                Some(Inbound::Msg(m @ (SessionMessage::SubmitCommand(_) | SessionMessage::SessionClose(_)))) => {
                    client_closed |= matches!(m, SessionMessage::SessionClose(_));
                    // A failed write means the backend is gone; its reader
                    // reports that below.
                    let _ = codec.write_message(backend_w, &m).await;
                }
                Some(Inbound::Msg(other)) => {
                    let e = SessionError::new(
                        ErrorCode::InvalidArgument,
                        format!("unexpected {} in session", other.kind()),
                    );
                    let _ = codec.write_message(client_w, &to_client(e)).await;
                    return;
                }
                Some(Inbound::Bad(e)) => {
                    let e = SessionError::new(ErrorCode::InvalidArgument, e.to_string());
                    let _ = codec.write_message(client_w, &to_client(e)).await;
                    return;
                }
                Some(Inbound::Eof) | None => {
                    if !client_closed {
                        // Dropping the backend connection aborts the session
                        // there as well.
                        Metrics::inc(&metrics.client_disconnects);
                        return;
                    }
                    client_done = true;
                }
            },
            ev = from_backend.recv() => match ev {
                Some(Inbound::Msg(m)) => {
                    let terminal = m.is_terminal();
                    if codec.write_message(client_w, &m).await.is_err() {
                        Metrics::inc(&metrics.client_disconnects);
                        return;
                    }
                    if terminal {
                        Metrics::inc(&metrics.sessions_completed);
                        return;
                    }
                }
                _ => {
                    Metrics::inc(&metrics.backend_lost);
                    let e = SessionError::new(ErrorCode::Unavailable, "backend connection lost");
                    let _ = codec.write_message(client_w, &to_client(e)).await;
                    return;
                }
            },
            _ = tokio::time::sleep_until(deadline) => {
                let e = SessionError::new(ErrorCode::Deadline, "session exceeded its lease");
                let _ = codec.write_message(client_w, &to_client(e)).await;
                return;
            }
        }
    }
}
