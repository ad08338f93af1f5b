#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::sync::Arc;
use std::time::Duration;

use gitfarm_backend::{BackendConfig, BackendHandle, Limits, PoolMode, RepositoryConfig};
use gitfarm_protocol::{
    provenance, BackendHello, Codec, Command, SessionGrant, SessionMessage, WorkspaceType,
    PROTOCOL_VERSION,
};
use gitfarm_statestore::{MemoryStore, StateStore, StoreConfig, Timestamp};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

pub const SECRET: &str = "test-secret";

pub fn git(dir: &Path, args: &[&str]) -> String {
    let out = Proc::new("git")
        .current_dir(dir)
        .args(args)
        .env("GIT_AUTHOR_NAME", "Fixture")
        .env("GIT_AUTHOR_EMAIL", "fixture@example.com")
        .env("GIT_COMMITTER_NAME", "Fixture")
        .env("GIT_COMMITTER_EMAIL", "fixture@example.com")
        .env("GIT_AUTHOR_DATE", "1700000000 +0000")
        .env("GIT_COMMITTER_DATE", "1700000000 +0000")
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "git {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A bare upstream with `main` (3 commits) and `br-a`/`br-b` forking at the
/// second commit, plus the work tree used to build it.
pub struct Upstream {
    pub bare: PathBuf,
    pub work: PathBuf,
    pub fork_point: String,
}

impl Upstream {
    pub fn create(dir: &Path) -> Self {
        let bare = dir.join("upstream.git");
        let work = dir.join("work");
        std::fs::create_dir_all(&work).unwrap();
        git(
            dir,
            &[
                "init",
                "--quiet",
                "--bare",
                "-b",
                "main",
                bare.to_str().unwrap(),
            ],
        );
        git(&work, &["init", "--quiet", "-b", "main"]);
        for (i, name) in ["README", "src/lib.txt"].iter().enumerate() {
            let p = work.join(name);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(&p, format!("file {i}\n")).unwrap();
            git(&work, &["add", "."]);
            git(&work, &["commit", "--quiet", "-m", &format!("c{i}")]);
        }
        std::fs::write(work.join("OWNERS"), "team-a\n").unwrap();
        std::fs::write(work.join(".gitignore"), "*.log\n").unwrap();
        git(&work, &["add", "."]);
        git(&work, &["commit", "--quiet", "-m", "owners"]);
        let fork_point = git(&work, &["rev-parse", "HEAD"]).trim().to_owned();
        for br in ["br-a", "br-b"] {
            git(&work, &["checkout", "--quiet", "-b", br, &fork_point]);
            std::fs::write(work.join(format!("{br}.txt")), br).unwrap();
            git(&work, &["add", "."]);
            git(&work, &["commit", "--quiet", "-m", br]);
        }
        git(&work, &["checkout", "--quiet", "main"]);
        std::fs::write(work.join("main.txt"), "main\n").unwrap();
        git(&work, &["add", "."]);
        git(&work, &["commit", "--quiet", "-m", "main"]);
        git(&work, &["remote", "add", "origin", bare.to_str().unwrap()]);
        git(
            &work,
            &["push", "--quiet", "origin", "main", "br-a", "br-b"],
        );
        Self {
            bare,
            work,
            fork_point,
        }
    }

    pub fn url(&self) -> String {
        self.bare.to_string_lossy().into_owned()
    }

    /// Adds a commit on main and pushes it; returns its hash.
    pub fn push_commit(&self, name: &str) -> String {
        std::fs::write(self.work.join(name), name).unwrap();
        git(&self.work, &["add", "."]);
        git(&self.work, &["commit", "--quiet", "-m", name]);
        git(&self.work, &["push", "--quiet", "origin", "main"]);
        git(&self.work, &["rev-parse", "HEAD"]).trim().to_owned()
    }

    pub fn rev(&self, rev: &str) -> String {
        git(&self.bare, &["rev-parse", rev]).trim().to_owned()
    }
}

pub fn config(data_dir: &Path, upstream: &str, pool: u32, sandboxes: u32) -> BackendConfig {
    BackendConfig {
        version: 1,
        node_id: "node-a".into(),
        cluster_id: "shared".into(),
        listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: Some("127.0.0.1:0".parse().unwrap()),
        advertise: None,
        statestore: "memory".into(),
        data_dir: data_dir.to_owned(),
        gateway_secret: SECRET.into(),
        sandbox_pool_size: sandboxes,
        allowlist: gitfarm_protocol::Allowlist::new(["git", "sh"]),
        exec_path: "/usr/local/bin:/usr/bin:/bin".into(),
        repos: vec![RepositoryConfig::new("go", upstream, pool)],
        pool_mode: PoolMode::Warm,
        limits: Limits {
            heartbeat_interval: Duration::from_millis(200),
            acquire_wait: Duration::from_millis(300),
            ..Limits::default()
        },
    }
}

pub struct Setup {
    pub dir: tempfile::TempDir,
    pub upstream: Upstream,
    pub store: Arc<MemoryStore>,
    pub backend: BackendHandle,
}

pub async fn setup(pool: u32, sandboxes: u32, tweak: impl FnOnce(&mut BackendConfig)) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let upstream = Upstream::create(dir.path());
    let mut cfg = config(&dir.path().join("node"), &upstream.url(), pool, sandboxes);
    tweak(&mut cfg);
    let store = Arc::new(MemoryStore::new(StoreConfig::default()));
    let backend = gitfarm_backend::start(cfg, store.clone() as Arc<dyn StateStore>)
        .await
        .unwrap();
    Setup {
        dir,
        upstream,
        store,
        backend,
    }
}

pub fn grant(lease_id: &str, repo: &str) -> SessionGrant {
    SessionGrant {
        lease_id: lease_id.into(),
        node_id: "node-a".into(),
        repo_id: repo.into(),
        client_id: "audit-bot".into(),
        display_name: "Audit Bot".into(),
        expires_at_ms: Timestamp::now().millis() + 300_000,
    }
}

pub struct Conn {
    pub r: OwnedReadHalf,
    pub w: OwnedWriteHalf,
    pub codec: Codec,
}

impl Conn {
    pub async fn open(
        addr: std::net::SocketAddr,
        grant: SessionGrant,
        secret: &str,
    ) -> (Self, SessionMessage) {
        let stream = TcpStream::connect(addr).await.unwrap();
        let (r, w) = stream.into_split();
        let mut c = Conn {
            r,
            w,
            codec: Codec::default(),
        };
        let provenance = provenance::sign_grant(secret.as_bytes(), &grant);
        let hello = SessionMessage::BackendHello(BackendHello {
            version: PROTOCOL_VERSION,
            workspace_type: WorkspaceType::FullCheckout,
            grant,
            provenance,
        });
        c.send(&hello).await;
        let first = c.recv().await.expect("reply to hello");
        (c, first)
    }

    pub async fn send(&mut self, m: &SessionMessage) {
        self.codec.write_message(&mut self.w, m).await.unwrap();
    }

    pub async fn submit(&mut self, cmd: Command) {
        self.send(&SessionMessage::SubmitCommand(cmd)).await;
    }

    pub async fn recv(&mut self) -> Option<SessionMessage> {
        tokio::time::timeout(
            Duration::from_secs(60),
            self.codec.read_message(&mut self.r),
        )
        .await
        .expect("timed out waiting for backend")
        .unwrap()
    }

    /// Submits all commands, closes, and collects everything until a
    /// terminal message.
    pub async fn run(mut self, cmds: Vec<Command>) -> Vec<SessionMessage> {
        for c in cmds {
            self.submit(c).await;
        }
        self.send(&SessionMessage::close("done")).await;
        let mut out = Vec::new();
        while let Some(m) = self.recv().await {
            let terminal = m.is_terminal();
            out.push(m);
            if terminal {
                break;
            }
        }
        out
    }
}

pub fn results(msgs: &[SessionMessage]) -> Vec<&gitfarm_protocol::CommandResult> {
    msgs.iter()
        .filter_map(|m| match m {
            SessionMessage::ServerResult(r) => Some(r),
            _ => None,
        })
        .collect()
}
