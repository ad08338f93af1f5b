//! Fixed-size pools of working checkouts materialized from the bare clone.
//!
//! Each slot is a separate `git clone --local` of the bare clone, so sessions
//! never share refs, index or config. A slot moves through
//! `Ready -> InUse -> Refreshing -> Ready`; any other transition is counted as
//! a state violation and refused.
//!
//! Checkouts carry two remotes: `origin` is the local bare clone (cheap
//! refresh) and `upstream` is the real upstream, so pushes and explicit
//! fetches inside a session reach the source of truth.
//!
//! Idle `Ready` slots lag the bare clone until the next recycle or the
//! periodic idle pass, whichever comes first. Sessions that need the newest
//! upstream state fetch `upstream` explicitly.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::sync::watch;

use crate::config::PoolMode;
use crate::git::{git, rev_parse, GitError};
use crate::metrics::Metrics;
use crate::repo::{backoff, BareRepo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotState {
    Ready,
    InUse,
    Refreshing,
}

impl SlotState {
    pub fn can_become(self, next: SlotState) -> bool {
        use SlotState::*;
        matches!(
            (self, next),
            (Ready, InUse) | (InUse, Refreshing) | (Refreshing, Ready)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckoutSlot {
    pub slot_id: String,
    pub repo_id: String,
    pub path: PathBuf,
    pub state: SlotState,
    pub base_commit: String,
}

struct Entry {
    slot: CheckoutSlot,
    /// `.git/config` as written at materialization, restored on refresh.
    config: Vec<u8>,
    /// False while a rebuild keeps failing; such slots are not offered.
    healthy: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolCounts {
    pub size: u32,
    pub ready: u32,
    pub in_use: u32,
    pub refreshing: u32,
}

/// A checkout held by one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckoutHandle {
    pub slot_id: String,
    pub repo_id: String,
    pub path: PathBuf,
    pub base_commit: String,
}

/// Outcome of a non-blocking take.
#[derive(Debug)]
pub enum Take {
    Slot(CheckoutHandle),
    /// Cold mode: capacity reserved, materialize with [`CheckoutPool::realize`].
    Reserved(ColdReservation),
    /// Nothing ready, but a slot is being refreshed and will be back shortly.
    Pending,
    Empty,
}

#[derive(Debug)]
#[must_use]
pub struct ColdReservation {
    slot_id: String,
}

pub struct CheckoutPool {
    repo: Arc<BareRepo>,
    dir: PathBuf,
    size: u32,
    mode: PoolMode,
    entries: Mutex<Vec<Entry>>,
    cold_reserved: Mutex<u32>,
    cold_seq: AtomicU64,
    ready_tx: watch::Sender<u64>,
    metrics: Arc<Metrics>,
}

impl CheckoutPool {
    pub fn new(
        repo: Arc<BareRepo>,
        dir: PathBuf,
        mode: PoolMode,
        metrics: Arc<Metrics>,
    ) -> Arc<Self> {
        let size = repo.config().checkout_pool_size;
        Arc::new(Self {
            repo,
            dir,
            size,
            mode,
            entries: Mutex::new(Vec::new()),
            cold_reserved: Mutex::new(0),
            cold_seq: AtomicU64::new(0),
            ready_tx: watch::channel(0).0,
            metrics,
        })
    }

    pub fn repo(&self) -> &Arc<BareRepo> {
        &self.repo
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// Fills a warm pool to its configured size. Leftover slot directories
    /// from a previous run are discarded and rebuilt.
    pub async fn warm(&self) -> Result<(), GitError> {
        if self.mode == PoolMode::Cold {
            if self.dir.exists() {
                std::fs::remove_dir_all(&self.dir)?;
            }
            std::fs::create_dir_all(&self.dir)?;
            return Ok(());
        }
        std::fs::create_dir_all(&self.dir)?;
        let mut jobs = tokio::task::JoinSet::new();
        for i in 0..self.size {
            let repo = self.repo.clone();
            let path = self.dir.join(format!("slot-{i}"));
            jobs.spawn(async move {
                let (base_commit, config) = materialize(&repo, &path).await?;
                Ok::<_, GitError>((i, path, base_commit, config))
            });
        }
        let mut built = Vec::new();
        while let Some(joined) = jobs.join_next().await {
            built.push(joined.expect("materialize task panicked")?);
        }
        built.sort_by_key(|b| b.0);
        let built = built.into_iter().map(|(i, path, base_commit, config)| {
            Ok::<_, GitError>(Entry {
                slot: CheckoutSlot {
                    slot_id: format!("{}-{i}", self.repo.id()),
                    repo_id: self.repo.id().to_owned(),
                    path,
                    state: SlotState::Ready,
                    base_commit,
                },
                config,
                healthy: true,
            })
        });
        let mut entries = self.entries.lock();
        entries.clear();
        for entry in built {
            entries.push(entry?);
        }
        drop(entries);
        self.ready_tx.send_modify(|g| *g += 1);
        Ok(())
    }

    pub fn counts(&self) -> PoolCounts {
        let entries = self.entries.lock();
        let mut c = PoolCounts {
            size: self.size,
            ..Default::default()
        };
        for e in entries.iter() {
            match e.slot.state {
                SlotState::Ready => c.ready += 1,
                SlotState::InUse => c.in_use += 1,
                SlotState::Refreshing => c.refreshing += 1,
            }
        }
        c
    }

    /// Checkouts this node can promise to new sessions: ready ones plus those
    /// being refreshed. In cold mode, the unused share of the concurrency cap.
    pub fn free(&self) -> u32 {
        let entries = self.entries.lock();
        match self.mode {
            PoolMode::Warm => entries
                .iter()
                .filter(|e| match e.slot.state {
                    SlotState::Ready => true,
                    SlotState::Refreshing => e.healthy,
                    SlotState::InUse => false,
                })
                .count() as u32,
            PoolMode::Cold => {
                let in_use = entries
                    .iter()
                    .filter(|e| e.slot.state == SlotState::InUse)
                    .count() as u32;
                self.size
                    .saturating_sub(in_use + *self.cold_reserved.lock())
            }
        }
    }

    pub fn slots(&self) -> Vec<CheckoutSlot> {
        self.entries.lock().iter().map(|e| e.slot.clone()).collect()
    }

    /// Subscribes to "a slot became ready" notifications.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.ready_tx.subscribe()
    }

    /// Non-blocking peek at what [`take`](Self::take) would return.
    pub fn availability(&self) -> Availability {
        let entries = self.entries.lock();
        match self.mode {
            PoolMode::Warm => {
                if entries.iter().any(|e| e.slot.state == SlotState::Ready) {
                    Availability::Now
                } else if entries
                    .iter()
                    .any(|e| e.slot.state == SlotState::Refreshing && e.healthy)
                {
                    Availability::Soon
                } else {
                    Availability::None
                }
            }
            PoolMode::Cold => {
                drop(entries);
                if self.free() > 0 {
                    Availability::Now
                } else {
                    Availability::None
                }
            }
        }
    }

    pub fn take(&self) -> Take {
        if self.mode == PoolMode::Cold {
            let entries = self.entries.lock();
            let in_use = entries
                .iter()
                .filter(|e| e.slot.state == SlotState::InUse)
                .count() as u32;
            let mut reserved = self.cold_reserved.lock();
            if in_use + *reserved >= self.size {
                return Take::Empty;
            }
            *reserved += 1;
            let n = self.cold_seq.fetch_add(1, Ordering::Relaxed);
            return Take::Reserved(ColdReservation {
                slot_id: format!("{}-cold-{n}", self.repo.id()),
            });
        }
        let mut entries = self.entries.lock();
        if let Some(entry) = entries
            .iter_mut()
            .find(|e| e.slot.state == SlotState::Ready)
        {
            self.transition(entry, SlotState::InUse);
            return Take::Slot(handle(&entry.slot));
        }
        if entries
            .iter()
            .any(|e| e.slot.state == SlotState::Refreshing && e.healthy)
        {
            Take::Pending
        } else {
            Take::Empty
        }
    }

    /// Materializes a cold checkout on demand.
    pub async fn realize(&self, reservation: ColdReservation) -> Result<CheckoutHandle, GitError> {
        let path = self.dir.join(&reservation.slot_id);
        let result = materialize(&self.repo, &path).await;
        let mut entries = self.entries.lock();
        *self.cold_reserved.lock() -= 1;
        let (base_commit, config) = match result {
            Ok(r) => r,
            Err(e) => {
                Metrics::inc(&self.metrics.materialize_failures);
                drop(entries);
                let _ = std::fs::remove_dir_all(&path);
                return Err(e);
            }
        };
        let mut entry = Entry {
            slot: CheckoutSlot {
                slot_id: reservation.slot_id,
                repo_id: self.repo.id().to_owned(),
                path,
                state: SlotState::Ready,
                base_commit,
            },
            config,
            healthy: true,
        };
        self.transition(&mut entry, SlotState::InUse);
        let h = handle(&entry.slot);
        entries.push(entry);
        Ok(h)
    }

    /// Marks a session's slot as refreshing. Returns false if the slot was not
    /// in use.
    pub fn begin_refresh(&self, slot_id: &str) -> bool {
        let mut entries = self.entries.lock();
        match entries.iter_mut().find(|e| e.slot.slot_id == slot_id) {
            Some(entry) => self.transition(entry, SlotState::Refreshing),
            None => false,
        }
    }

    /// Returns a refreshing slot to `Ready`: in-place refresh first, destroy
    /// and re-materialize on any anomaly. Cold slots are simply destroyed.
    pub async fn refresh(&self, slot_id: &str) {
        let Some((path, config)) =
            self.with_entry(slot_id, |e| (e.slot.path.clone(), e.config.clone()))
        else {
            return;
        };
        if self.mode == PoolMode::Cold {
            let _ = tokio::fs::remove_dir_all(&path).await;
            self.entries.lock().retain(|e| e.slot.slot_id != slot_id);
            self.ready_tx.send_modify(|g| *g += 1);
            return;
        }
        let outcome = match refresh_in_place(&self.repo, &path, &config).await {
            Ok(base) => {
                Metrics::inc(&self.metrics.refreshes);
                Some((base, config))
            }
            Err(e) => {
                tracing::warn!(slot = slot_id, error = %e, "refresh failed; rebuilding");
                None
            }
        };
        let (base_commit, config) = match outcome {
            Some(done) => done,
            None => self.rebuild(slot_id, &path).await,
        };
        let mut entries = self.entries.lock();
        if let Some(entry) = entries.iter_mut().find(|e| e.slot.slot_id == slot_id) {
            entry.slot.base_commit = base_commit;
            entry.config = config;
            entry.healthy = true;
            self.transition(entry, SlotState::Ready);
        }
        drop(entries);
        self.ready_tx.send_modify(|g| *g += 1);
    }

    /// Re-materializes until it succeeds, backing off between failures.
    async fn rebuild(&self, slot_id: &str, path: &Path) -> (String, Vec<u8>) {
        Metrics::inc(&self.metrics.rebuilds);
        let mut failures = 0;
        loop {
            match materialize(&self.repo, path).await {
                Ok(done) => return done,
                Err(e) => {
                    failures += 1;
                    Metrics::inc(&self.metrics.materialize_failures);
                    self.with_entry(slot_id, |entry| entry.healthy = false);
                    tracing::error!(slot = slot_id, error = %e, "re-materialize failed; pool below size");
                    tokio::time::sleep(backoff(failures)).await;
                }
            }
        }
    }

    /// Re-bases idle slots that lag the bare clone's tip. Each slot goes
    /// through the normal `InUse -> Refreshing -> Ready` path.
    pub async fn refresh_stale(&self) {
        let Ok(tip) = self.repo.tip().await else {
            return;
        };
        let stale: Vec<String> = {
            let mut entries = self.entries.lock();
            let mut picked = Vec::new();
            for entry in entries.iter_mut() {
                if entry.slot.state == SlotState::Ready && entry.slot.base_commit != tip {
                    self.transition(entry, SlotState::InUse);
                    self.transition(entry, SlotState::Refreshing);
                    picked.push(entry.slot.slot_id.clone());
                }
            }
            picked
        };
        for slot_id in stale {
            self.refresh(&slot_id).await;
        }
    }

    fn with_entry<T>(&self, slot_id: &str, f: impl FnOnce(&mut Entry) -> T) -> Option<T> {
        self.entries
            .lock()
            .iter_mut()
            .find(|e| e.slot.slot_id == slot_id)
            .map(f)
    }

    fn transition(&self, entry: &mut Entry, next: SlotState) -> bool {
        if !entry.slot.state.can_become(next) {
            Metrics::inc(&self.metrics.state_violations);
            tracing::error!(slot = %entry.slot.slot_id, from = ?entry.slot.state, to = ?next, "illegal checkout transition");
            return false;
        }
        entry.slot.state = next;
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    Now,
    Soon,
    None,
}

fn handle(slot: &CheckoutSlot) -> CheckoutHandle {
    CheckoutHandle {
        slot_id: slot.slot_id.clone(),
        repo_id: slot.repo_id.clone(),
        path: slot.path.clone(),
        base_commit: slot.base_commit.clone(),
    }
}

/// Clones the bare clone into `path` at its default branch and wires up the
/// `upstream` remote. Returns the checked-out commit and the resulting
/// `.git/config`.
pub async fn materialize(repo: &BareRepo, path: &Path) -> Result<(String, Vec<u8>), GitError> {
    if tokio::fs::symlink_metadata(path).await.is_ok() {
        remove_path(path).await?;
    }
    let parent = path.parent().unwrap_or(Path::new("/"));
    tokio::fs::create_dir_all(parent).await?;
    let timeout = repo.git_timeout();
    let args: [&OsStr; 9] = [
        "clone".as_ref(),
        "--local".as_ref(),
        "--quiet".as_ref(),
        "--branch".as_ref(),
        repo.default_branch().as_ref(),
        "-c".as_ref(),
        "gc.auto=0".as_ref(),
        repo.path().as_os_str(),
        path.as_os_str(),
    ];
    git(parent, args, timeout).await?;
    git(
        path,
        [
            "remote",
            "add",
            "upstream",
            repo.config().upstream_url.as_str(),
        ],
        timeout,
    )
    .await?;
    let base = rev_parse(path, "HEAD", timeout).await?;
    let config = tokio::fs::read(path.join(".git/config")).await?;
    Ok((base, config))
}

async fn remove_path(path: &Path) -> std::io::Result<()> {
    let meta = tokio::fs::symlink_metadata(path).await?;
    if meta.is_dir() {
        tokio::fs::remove_dir_all(path).await
    } else {
        tokio::fs::remove_file(path).await
    }
}

/// Leftovers a session may have created inside `.git`.
const GIT_STATE_PATHS: &[&str] = &[
    "rebase-merge",
    "rebase-apply",
    "sequencer",
    "MERGE_HEAD",
    "MERGE_MSG",
    "MERGE_MODE",
    "MERGE_RR",
    "CHERRY_PICK_HEAD",
    "REVERT_HEAD",
    "BISECT_LOG",
    "BISECT_START",
    "BISECT_TERMS",
    "BISECT_NAMES",
    "BISECT_EXPECTED_REV",
    "AUTO_MERGE",
    "ORIG_HEAD",
    "FETCH_HEAD",
    "index.lock",
    "HEAD.lock",
    "config.lock",
    "packed-refs.lock",
    "hooks",
    "info/attributes",
    "info/sparse-checkout",
    "info/grafts",
    "rr-cache",
    "logs",
];

/// Files whose presence means the slot's object store was tampered with;
/// these force a rebuild instead of an in-place refresh.
const GIT_FATAL_PATHS: &[&str] = &[
    "shallow",
    "objects/info/alternates",
    "commondir",
    "worktrees",
];

#[derive(Debug, thiserror::Error)]
pub enum RefreshError {
    #[error(transparent)]
    Git(#[from] GitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("slot anomaly: {0}")]
    Anomaly(String),
}

/// Resets a used checkout to a clean tree at the bare clone's current tip.
pub async fn refresh_in_place(
    repo: &BareRepo,
    path: &Path,
    config: &[u8],
) -> Result<String, RefreshError> {
    let timeout = repo.git_timeout();
    let dot_git = path.join(".git");
    let meta = tokio::fs::symlink_metadata(&dot_git).await?;
    if !meta.is_dir() {
        return Err(RefreshError::Anomaly(".git is not a directory".into()));
    }
    for p in GIT_FATAL_PATHS {
        if tokio::fs::symlink_metadata(dot_git.join(p)).await.is_ok() {
            return Err(RefreshError::Anomaly(format!(".git/{p} present")));
        }
    }
    tokio::fs::write(dot_git.join("config"), config).await?;
    for p in GIT_STATE_PATHS {
        let target = dot_git.join(p);
        if tokio::fs::symlink_metadata(&target).await.is_ok() {
            remove_path(&target).await?;
        }
    }
    tokio::fs::create_dir_all(dot_git.join("hooks")).await?;

    let branch = repo.default_branch();
    let head_ref = format!("refs/heads/{branch}");
    let origin_ref = format!("refs/remotes/origin/{branch}");
    maintenance(path, vec!["symbolic-ref", "HEAD", &head_ref], timeout).await?;

    let refs = maintenance(path, vec!["for-each-ref", "--format=%(refname)"], timeout).await?;
    let mut deletions = String::new();
    for r in refs
        .lines()
        .filter(|r| !r.starts_with("refs/remotes/origin/"))
    {
        deletions.push_str(&format!("delete {r}\n"));
    }
    if !deletions.is_empty() {
        update_ref_stdin(path, &deletions, timeout).await?;
    }
    maintenance(
        path,
        vec!["fetch", "--prune", "--tags", "--force", "--quiet", "origin"],
        timeout,
    )
    .await?;
    // A session that left the tree untouched needs no checkout or clean:
    // point the branch at the tip and verify.
    let tip = rev_parse(path, &origin_ref, timeout).await?;
    maintenance(path, vec!["update-ref", &head_ref, &tip], timeout).await?;
    let mut status = porcelain_status(path, timeout).await?;
    if !status.trim().is_empty() {
        maintenance(
            path,
            vec![
                "checkout",
                "--force",
                "--quiet",
                "--no-track",
                "-B",
                branch,
                &origin_ref,
            ],
            timeout,
        )
        .await?;
        maintenance(path, vec!["clean", "-ffdxq"], timeout).await?;
        status = porcelain_status(path, timeout).await?;
    }
    if !status.trim().is_empty() {
        return Err(RefreshError::Anomaly(format!(
            "dirty after refresh: {}",
            first_line(&status)
        )));
    }
    let flags = maintenance(path, vec!["ls-files", "-v"], timeout).await?;
    if let Some(line) = flags.lines().find(|l| !l.starts_with("H ")) {
        return Err(RefreshError::Anomaly(format!("index flag set: {line}")));
    }
    let head = rev_parse(path, "HEAD", timeout).await?;
    if head != tip {
        return Err(RefreshError::Anomaly(format!("HEAD {head} != tip {tip}")));
    }
    Ok(head)
}

async fn porcelain_status(path: &Path, timeout: Duration) -> Result<String, GitError> {
    maintenance(
        path,
        vec![
            "status",
            "--porcelain=v1",
            "--untracked-files=all",
            "--ignored=matching",
        ],
        timeout,
    )
    .await
}

/// Hooks are disabled for every maintenance command regardless of config.
async fn maintenance(path: &Path, args: Vec<&str>, timeout: Duration) -> Result<String, GitError> {
    let mut full = vec!["-c", "core.hooksPath=/dev/null"];
    full.extend(args);
    git(path, full, timeout).await
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

async fn update_ref_stdin(path: &Path, input: &str, timeout: Duration) -> Result<(), GitError> {
    use std::process::Stdio;
    use tokio::io::AsyncWriteExt;

    let mut child = tokio::process::Command::new("git")
        .current_dir(path)
        .args(["update-ref", "--no-deref", "--stdin"])
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("LC_ALL", "C")
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .spawn()?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = input.to_owned();
    let writer = tokio::spawn(async move {
        let _ = stdin.write_all(input.as_bytes()).await;
    });
    let out = tokio::time::timeout(timeout, child.wait_with_output())
        .await
        .map_err(|_| GitError::Timeout {
            args: "update-ref --stdin".into(),
            timeout,
        })??;
    let _ = writer.await;
    if !out.status.success() {
        return Err(GitError::Failed {
            args: "update-ref --stdin".into(),
            code: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_owned(),
        });
    }
    Ok(())
}
