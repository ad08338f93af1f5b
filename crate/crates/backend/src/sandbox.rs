//! Per-session execution environments.
//!
//! The shipped driver, [`ProcessSandbox`], isolates by directory and
//! environment: each sandbox owns a private `HOME`, `TMPDIR`, global git
//! config and credential file, and commands run in their own process group
//! with a scrubbed environment. Container-backed drivers can implement
//! [`SandboxDriver`] instead.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gitfarm_protocol::Identity;
use parking_lot::Mutex;

use crate::metrics::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SandboxState {
    Idle,
    Bound,
    Scrubbing,
}

impl SandboxState {
    pub fn can_become(self, next: SandboxState) -> bool {
        use SandboxState::*;
        matches!(
            (self, next),
            (Idle, Bound) | (Bound, Scrubbing) | (Scrubbing, Idle)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxSlot {
    pub sandbox_id: String,
    pub state: SandboxState,
    pub mount_point: PathBuf,
    pub identity: Option<Identity>,
}

/// What a bound sandbox is for.
#[derive(Debug, Clone)]
pub struct Binding {
    pub session_id: String,
    pub repo_id: String,
    pub identity: Identity,
    pub checkout: PathBuf,
}

/// Paths a bound sandbox exposes to commands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxEnv {
    pub home: PathBuf,
    pub tmp: PathBuf,
    pub gitconfig: PathBuf,
    pub credential_file: PathBuf,
    /// Where the checkout is mounted inside the sandbox.
    pub workspace: PathBuf,
}

pub trait SandboxDriver: Send + Sync + 'static {
    /// Binds a clean sandbox rooted at `root` to one session.
    fn bind(&self, root: &Path, binding: &Binding) -> io::Result<SandboxEnv>;

    /// Removes everything the previous session left and restores the empty
    /// skeleton.
    fn scrub(&self, root: &Path) -> io::Result<()>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ProcessSandbox;

impl ProcessSandbox {
    fn layout(root: &Path) -> SandboxEnv {
        let home = root.join("home");
        SandboxEnv {
            gitconfig: home.join(".gitconfig"),
            credential_file: root.join("credentials"),
            tmp: root.join("tmp"),
            workspace: root.join("workspace"),
            home,
        }
    }
}

impl SandboxDriver for ProcessSandbox {
    fn bind(&self, root: &Path, binding: &Binding) -> io::Result<SandboxEnv> {
        let env = Self::layout(root);
        std::os::unix::fs::symlink(&binding.checkout, &env.workspace)?;
        let id = &binding.identity;
        let mut gitconfig = String::new();
        let _ = writeln!(gitconfig, "[user]");
        let _ = writeln!(gitconfig, "\tname = {}", quote(&id.display_name));
        let _ = writeln!(
            gitconfig,
            "\temail = {}",
            quote(&format!("{}@gitfarm.invalid", id.client_id))
        );
        let _ = writeln!(gitconfig, "[advice]");
        let _ = writeln!(gitconfig, "\tdetachedHead = false");
        std::fs::write(&env.gitconfig, gitconfig)?;
        let creds = format!(
            "client_id={}\ndisplay_name={}\nsession_id={}\nrepo_id={}\n",
            id.client_id, id.display_name, binding.session_id, binding.repo_id
        );
        write_private(&env.credential_file, creds.as_bytes())?;
        Ok(env)
    }

    fn scrub(&self, root: &Path) -> io::Result<()> {
        if root.exists() {
            std::fs::remove_dir_all(root)?;
        }
        let env = Self::layout(root);
        std::fs::create_dir_all(&env.home)?;
        std::fs::create_dir_all(&env.tmp)?;
        let leftovers =
            std::fs::read_dir(&env.home)?.count() + std::fs::read_dir(&env.tmp)?.count();
        if leftovers != 0 {
            return Err(io::Error::other("sandbox not empty after scrub"));
        }
        Ok(())
    }
}

fn quote(v: &str) -> String {
    let mut out = String::from("\"");
    for c in v.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' | '\r' => out.push(' '),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn write_private(path: &Path, data: &[u8]) -> io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(0o600)
        .open(path)?;
    f.write_all(data)
}

struct Entry {
    slot: SandboxSlot,
    root: PathBuf,
    healthy: bool,
}

pub struct SandboxPool {
    driver: Arc<dyn SandboxDriver>,
    entries: Mutex<Vec<Entry>>,
    metrics: Arc<Metrics>,
}

impl SandboxPool {
    /// Creates `size` idle sandboxes under `dir`, scrubbing any leftovers.
    pub fn new(
        dir: &Path,
        size: u32,
        driver: Arc<dyn SandboxDriver>,
        metrics: Arc<Metrics>,
    ) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for i in 0..size {
            let root = dir.join(format!("sb-{i}"));
            driver.scrub(&root)?;
            entries.push(Entry {
                slot: SandboxSlot {
                    sandbox_id: format!("sb-{i}"),
                    state: SandboxState::Idle,
                    mount_point: root.join("workspace"),
                    identity: None,
                },
                root,
                healthy: true,
            });
        }
        Ok(Self {
            driver,
            entries: Mutex::new(entries),
            metrics,
        })
    }

    pub fn size(&self) -> u32 {
        self.entries.lock().len() as u32
    }

    /// Idle sandboxes plus those being scrubbed.
    pub fn free(&self) -> u32 {
        self.entries
            .lock()
            .iter()
            .filter(|e| match e.slot.state {
                SandboxState::Idle => true,
                SandboxState::Scrubbing => e.healthy,
                SandboxState::Bound => false,
            })
            .count() as u32
    }

    pub fn has_idle(&self) -> bool {
        self.entries
            .lock()
            .iter()
            .any(|e| e.slot.state == SandboxState::Idle)
    }

    pub fn has_pending(&self) -> bool {
        self.entries
            .lock()
            .iter()
            .any(|e| e.slot.state == SandboxState::Scrubbing && e.healthy)
    }

    pub fn slots(&self) -> Vec<SandboxSlot> {
        self.entries.lock().iter().map(|e| e.slot.clone()).collect()
    }

    /// Moves an idle sandbox to `Bound` for `identity`.
    pub fn take(&self, identity: &Identity) -> Option<String> {
        let mut entries = self.entries.lock();
        let entry = entries
            .iter_mut()
            .find(|e| e.slot.state == SandboxState::Idle)?;
        if !self.transition(entry, SandboxState::Bound) {
            return None;
        }
        entry.slot.identity = Some(identity.clone());
        Some(entry.slot.sandbox_id.clone())
    }

    /// Writes the session's identity material into a taken sandbox.
    pub fn bind(&self, sandbox_id: &str, binding: &Binding) -> io::Result<SandboxEnv> {
        let root = self
            .root(sandbox_id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, sandbox_id.to_owned()))?;
        self.driver.bind(&root, binding)
    }

    pub fn begin_scrub(&self, sandbox_id: &str) -> bool {
        let mut entries = self.entries.lock();
        match entries.iter_mut().find(|e| e.slot.sandbox_id == sandbox_id) {
            Some(entry) => self.transition(entry, SandboxState::Scrubbing),
            None => false,
        }
    }

    /// Scrubs a sandbox back to `Idle`, retrying until the filesystem
    /// cooperates.
    pub async fn scrub(&self, sandbox_id: &str) {
        let Some(root) = self.root(sandbox_id) else {
            return;
        };
        let mut failures = 0u32;
        loop {
            let driver = self.driver.clone();
            let r = root.clone();
            let result = tokio::task::spawn_blocking(move || driver.scrub(&r))
                .await
                .unwrap_or_else(|e| Err(io::Error::other(e.to_string())));
            match result {
                Ok(()) => break,
                Err(e) => {
                    failures += 1;
                    self.set_healthy(sandbox_id, false);
                    tracing::error!(sandbox = sandbox_id, error = %e, "scrub failed");
                    tokio::time::sleep(Duration::from_millis(100 << failures.min(9))).await;
                }
            }
        }
        Metrics::inc(&self.metrics.scrubs);
        let mut entries = self.entries.lock();
        if let Some(entry) = entries.iter_mut().find(|e| e.slot.sandbox_id == sandbox_id) {
            entry.slot.identity = None;
            entry.healthy = true;
            self.transition(entry, SandboxState::Idle);
        }
    }

    fn root(&self, sandbox_id: &str) -> Option<PathBuf> {
        self.entries
            .lock()
            .iter()
            .find(|e| e.slot.sandbox_id == sandbox_id)
            .map(|e| e.root.clone())
    }

    fn set_healthy(&self, sandbox_id: &str, healthy: bool) {
        if let Some(e) = self
            .entries
            .lock()
            .iter_mut()
            .find(|e| e.slot.sandbox_id == sandbox_id)
        {
            e.healthy = healthy;
        }
    }

    fn transition(&self, entry: &mut Entry, next: SandboxState) -> bool {
        if !entry.slot.state.can_become(next) {
            Metrics::inc(&self.metrics.state_violations);
            tracing::error!(sandbox = %entry.slot.sandbox_id, from = ?entry.slot.state, to = ?next, "illegal sandbox transition");
            return false;
        }
        entry.slot.state = next;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> Identity {
        Identity {
            client_id: "audit-bot".into(),
            display_name: "Audit \"Bot\"".into(),
        }
    }

    #[test]
    fn lifecycle_and_scrub() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = Arc::new(Metrics::default());
        let pool =
            SandboxPool::new(dir.path(), 2, Arc::new(ProcessSandbox), metrics.clone()).unwrap();
        assert_eq!(pool.free(), 2);
        let id = pool.take(&identity()).unwrap();
        assert_eq!(pool.free(), 1);
        let checkout = dir.path().join("checkout");
        std::fs::create_dir(&checkout).unwrap();
        let env = pool
            .bind(
                &id,
                &Binding {
                    session_id: "s1".into(),
                    repo_id: "go".into(),
                    identity: identity(),
                    checkout: checkout.clone(),
                },
            )
            .unwrap();
        assert_eq!(std::fs::read_link(&env.workspace).unwrap(), checkout);
        let cfg = std::fs::read_to_string(&env.gitconfig).unwrap();
        assert!(cfg.contains("name = \"Audit \\\"Bot\\\"\""), "{cfg}");
        assert!(std::fs::read_to_string(&env.credential_file)
            .unwrap()
            .contains("client_id=audit-bot"));
        std::fs::write(env.home.join("marker"), "x").unwrap();
        std::fs::write(env.tmp.join("marker"), "x").unwrap();

        assert!(pool.begin_scrub(&id));
        assert_eq!(pool.free(), 2);
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(pool.scrub(&id));
        let slot = pool
            .slots()
            .into_iter()
            .find(|s| s.sandbox_id == id)
            .unwrap();
        assert_eq!(slot.state, SandboxState::Idle);
        assert!(slot.identity.is_none());
        assert_eq!(std::fs::read_dir(&env.home).unwrap().count(), 0);
        assert_eq!(std::fs::read_dir(&env.tmp).unwrap().count(), 0);
        assert!(!env.credential_file.exists());
        assert!(std::fs::symlink_metadata(&env.workspace).is_err());
        assert!(
            checkout.exists(),
            "scrub must not follow the workspace link"
        );
        assert_eq!(Metrics::get(&metrics.state_violations), 0);
    }

    #[test]
    fn illegal_transition_counted() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = Arc::new(Metrics::default());
        let pool =
            SandboxPool::new(dir.path(), 1, Arc::new(ProcessSandbox), metrics.clone()).unwrap();
        assert!(!pool.begin_scrub("sb-0"));
        assert_eq!(Metrics::get(&metrics.state_violations), 1);
        pool.take(&identity()).unwrap();
        assert!(pool.take(&identity()).is_none());
    }
}
