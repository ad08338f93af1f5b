//! A small networked key-value server with compare-and-swap and TTL keys.
//!
//! Requests and responses are single JSON lines. Every request is applied
//! atomically against the whole keyspace.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::types::StoreError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KvRequest {
    Ping,
    Get {
        key: String,
    },
    Set {
        key: String,
        value: String,
        ttl_ms: Option<u64>,
    },
    /// Swap iff the current value equals `expected` (`None` = absent).
    /// `value: None` deletes.
    Cas {
        key: String,
        expected: Option<String>,
        value: Option<String>,
        ttl_ms: Option<u64>,
    },
    Scan {
        prefix: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum KvResponse {
    Ok,
    Value {
        value: Option<String>,
    },
    Cas {
        swapped: bool,
        current: Option<String>,
    },
    Entries {
        entries: Vec<(String, String)>,
    },
    Error {
        message: String,
    },
}

struct Entry {
    value: String,
    expires: Option<Instant>,
}

impl Entry {
    fn live(&self, now: Instant) -> bool {
        self.expires.is_none_or(|e| e > now)
    }
}

#[derive(Default)]
struct Keyspace {
    map: Mutex<BTreeMap<String, Entry>>,
}

impl Keyspace {
    fn apply(&self, req: KvRequest) -> KvResponse {
        let now = Instant::now();
        let ttl = |ms: Option<u64>| ms.map(|ms| now + Duration::from_millis(ms));
        let mut map = self.map.lock();
        let current = |map: &BTreeMap<String, Entry>, key: &str| {
            map.get(key)
                .filter(|e| e.live(now))
                .map(|e| e.value.clone())
        };
        match req {
            KvRequest::Ping => KvResponse::Ok,
            KvRequest::Get { key } => KvResponse::Value {
                value: current(&map, &key),
            },
            KvRequest::Set { key, value, ttl_ms } => {
                map.insert(
                    key,
                    Entry {
                        value,
                        expires: ttl(ttl_ms),
                    },
                );
                KvResponse::Ok
            }
            KvRequest::Cas {
                key,
                expected,
                value,
                ttl_ms,
            } => {
                let cur = current(&map, &key);
                if cur != expected {
                    return KvResponse::Cas {
                        swapped: false,
                        current: cur,
                    };
                }
                match value {
                    Some(v) => {
                        map.insert(
                            key,
                            Entry {
                                value: v.clone(),
                                expires: ttl(ttl_ms),
                            },
                        );
                        KvResponse::Cas {
                            swapped: true,
                            current: Some(v),
                        }
                    }
                    None => {
                        map.remove(&key);
                        KvResponse::Cas {
                            swapped: true,
                            current: None,
                        }
                    }
                }
            }
            KvRequest::Scan { prefix } => {
                let entries = map
                    .range(prefix.clone()..)
                    .take_while(|(k, _)| k.starts_with(&prefix))
                    .filter(|(_, e)| e.live(now))
                    .map(|(k, e)| (k.clone(), e.value.clone()))
                    .collect();
                KvResponse::Entries { entries }
            }
        }
    }

    fn purge(&self) {
        let now = Instant::now();
        self.map.lock().retain(|_, e| e.live(now));
    }
}

struct ServerShared {
    keyspace: Keyspace,
    stalled: AtomicBool,
    resumed: Notify,
}

/// A running KV server. Dropping the handle does not stop it; call
/// [`KvServerHandle::shutdown`].
pub struct KvServerHandle {
    addr: SocketAddr,
    shared: Arc<ServerShared>,
    tasks: Vec<JoinHandle<()>>,
}

impl KvServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// While stalled, the server accepts requests but does not answer them.
    pub fn set_stalled(&self, stalled: bool) {
        self.shared.stalled.store(stalled, Ordering::SeqCst);
        if !stalled {
            self.shared.resumed.notify_waiters();
        }
    }

    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<KvServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(ServerShared {
        keyspace: Keyspace::default(),
        stalled: AtomicBool::new(false),
        resumed: Notify::new(),
    });

    let accept_shared = shared.clone();
    let accept = tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                continue;
            };
            let shared = accept_shared.clone();
            tokio::spawn(async move {
                if let Err(e) = handle_conn(stream, shared).await {
                    tracing::debug!(error = %e, "kv connection closed");
                }
            });
        }
    });
    let purge_shared = shared.clone();
    let purge = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(1));
        loop {
            tick.tick().await;
            purge_shared.keyspace.purge();
        }
    });
    Ok(KvServerHandle {
        addr,
        shared,
        tasks: vec![accept, purge],
    })
}

async fn handle_conn(stream: TcpStream, shared: Arc<ServerShared>) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        while shared.stalled.load(Ordering::SeqCst) {
            let resumed = shared.resumed.notified();
            if !shared.stalled.load(Ordering::SeqCst) {
                break;
            }
            resumed.await;
        }
        let resp = match serde_json::from_str::<KvRequest>(&line) {
            Ok(req) => shared.keyspace.apply(req),
            Err(e) => KvResponse::Error {
                message: e.to_string(),
            },
        };
        let mut out = serde_json::to_vec(&resp).expect("response serializes");
        out.push(b'\n');
        write.write_all(&out).await?;
    }
    Ok(())
}

struct Conn {
    lines: tokio::io::Lines<BufReader<tokio::net::tcp::OwnedReadHalf>>,
    write: tokio::net::tcp::OwnedWriteHalf,
}

/// Pooled client for [`serve`].
pub struct KvClient {
    addr: SocketAddr,
    timeout: Duration,
    idle: Mutex<Vec<Conn>>,
}

impl KvClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            timeout: Duration::from_secs(2),
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub async fn call(&self, req: &KvRequest) -> Result<KvResponse, StoreError> {
        let unavailable = |e: String| StoreError::Unavailable(format!("{}: {e}", self.addr));
        let attempt = async {
            let pooled = self.idle.lock().pop();
            let mut conn = match pooled {
                Some(c) => c,
                None => {
                    let stream = TcpStream::connect(self.addr)
                        .await
                        .map_err(|e| e.to_string())?;
                    stream.set_nodelay(true).map_err(|e| e.to_string())?;
                    let (read, write) = stream.into_split();
                    Conn {
                        lines: BufReader::new(read).lines(),
                        write,
                    }
                }
            };
            let mut line = serde_json::to_vec(req).map_err(|e| e.to_string())?;
            line.push(b'\n');
            conn.write
                .write_all(&line)
                .await
                .map_err(|e| e.to_string())?;
            let resp = conn
                .lines
                .next_line()
                .await
                .map_err(|e| e.to_string())?
                .ok_or_else(|| "connection closed".to_string())?;
            let resp: KvResponse = serde_json::from_str(&resp).map_err(|e| e.to_string())?;
            self.idle.lock().push(conn);
            Ok::<_, String>(resp)
        };
        let resp = tokio::time::timeout(self.timeout, attempt)
            .await
            .map_err(|_| unavailable("timed out".into()))?
            .map_err(unavailable)?;
        if let KvResponse::Error { message } = resp {
            return Err(unavailable(message));
        }
        Ok(resp)
    }

    pub async fn get(&self, key: &str) -> Result<Option<String>, StoreError> {
        match self.call(&KvRequest::Get { key: key.into() }).await? {
            KvResponse::Value { value } => Ok(value),
            other => Err(unexpected(other)),
        }
    }

    pub async fn set(
        &self,
        key: &str,
        value: String,
        ttl: Option<Duration>,
    ) -> Result<(), StoreError> {
        let req = KvRequest::Set {
            key: key.into(),
            value,
            ttl_ms: ttl.map(|d| d.as_millis() as u64),
        };
        match self.call(&req).await? {
            KvResponse::Ok => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    /// Returns `Ok(None)` on success, `Ok(Some(current))` on mismatch.
    pub async fn cas(
        &self,
        key: &str,
        expected: Option<String>,
        value: Option<String>,
        ttl: Option<Duration>,
    ) -> Result<Result<(), Option<String>>, StoreError> {
        let req = KvRequest::Cas {
            key: key.into(),
            expected,
            value,
            ttl_ms: ttl.map(|d| d.as_millis() as u64),
        };
        match self.call(&req).await? {
            KvResponse::Cas { swapped: true, .. } => Ok(Ok(())),
            KvResponse::Cas {
                swapped: false,
                current,
            } => Ok(Err(current)),
            other => Err(unexpected(other)),
        }
    }

    pub async fn scan(&self, prefix: &str) -> Result<Vec<(String, String)>, StoreError> {
        match self
            .call(&KvRequest::Scan {
                prefix: prefix.into(),
            })
            .await?
        {
            KvResponse::Entries { entries } => Ok(entries),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(resp: KvResponse) -> StoreError {
    StoreError::Unavailable(format!("unexpected response {resp:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cas_semantics() {
        let ks = Keyspace::default();
        let cas = |expected: Option<&str>, value: Option<&str>| {
            ks.apply(KvRequest::Cas {
                key: "k".into(),
                expected: expected.map(Into::into),
                value: value.map(Into::into),
                ttl_ms: None,
            })
        };
        assert!(matches!(
            cas(None, Some("1")),
            KvResponse::Cas { swapped: true, .. }
        ));
        assert!(
            matches!(cas(None, Some("2")), KvResponse::Cas { swapped: false, current: Some(ref c) } if c == "1")
        );
        assert!(matches!(
            cas(Some("1"), Some("2")),
            KvResponse::Cas { swapped: true, .. }
        ));
        assert!(matches!(
            cas(Some("2"), None),
            KvResponse::Cas {
                swapped: true,
                current: None
            }
        ));
        assert_eq!(
            ks.apply(KvRequest::Get { key: "k".into() }),
            KvResponse::Value { value: None }
        );
    }

    #[test]
    fn ttl_expires() {
        let ks = Keyspace::default();
        ks.apply(KvRequest::Set {
            key: "t".into(),
            value: "v".into(),
            ttl_ms: Some(0),
        });
        assert_eq!(
            ks.apply(KvRequest::Get { key: "t".into() }),
            KvResponse::Value { value: None }
        );
    }

    #[test]
    fn scan_is_prefix_bounded() {
        let ks = Keyspace::default();
        for k in ["a:1", "a:2", "ab", "b:1"] {
            ks.apply(KvRequest::Set {
                key: k.into(),
                value: k.into(),
                ttl_ms: None,
            });
        }
        let KvResponse::Entries { entries } = ks.apply(KvRequest::Scan {
            prefix: "a:".into(),
        }) else {
            panic!()
        };
        assert_eq!(
            entries.iter().map(|e| e.0.as_str()).collect::<Vec<_>>(),
            ["a:1", "a:2"]
        );
    }

    #[tokio::test]
    async fn over_the_wire() {
        let server = serve("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let client = KvClient::new(server.addr());
        client.set("x", "1".into(), None).await.unwrap();
        assert_eq!(client.get("x").await.unwrap().as_deref(), Some("1"));
        assert_eq!(
            client
                .cas("x", Some("0".into()), Some("2".into()), None)
                .await
                .unwrap(),
            Err(Some("1".into()))
        );
        assert_eq!(
            client
                .cas("x", Some("1".into()), Some("2".into()), None)
                .await
                .unwrap(),
            Ok(())
        );
        server.shutdown();
    }

    #[tokio::test]
    async fn stalled_server_times_out() {
        let server = serve("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let client = KvClient::new(server.addr()).with_timeout(Duration::from_millis(100));
        client.set("x", "1".into(), None).await.unwrap();
        server.set_stalled(true);
        assert!(matches!(
            client.get("x").await,
            Err(StoreError::Unavailable(_))
        ));
        server.set_stalled(false);
        let fresh = KvClient::new(server.addr());
        assert_eq!(fresh.get("x").await.unwrap().as_deref(), Some("1"));
        server.shutdown();
    }
}
