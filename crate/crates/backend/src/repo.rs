//! Per-repository bare clone and its synchronization with upstream.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tokio::sync::Notify;

use crate::config::RepositoryConfig;
use crate::git::{git, rev_parse, GitError};

/// Consecutive failed syncs after which a repository reports degraded. It
/// keeps serving from the last good state.
pub const DEGRADED_AFTER: u32 = 3;
pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_CAP: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncTrigger {
    Event,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncReport {
    pub tip: String,
    pub changed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SyncStatus {
    pub consecutive_failures: u32,
    pub degraded: bool,
    pub last_success: Option<Instant>,
    pub last_error: Option<String>,
    pub syncs: u64,
    pub failures: u64,
}

/// Retry delay after `failures` consecutive failures (1-based).
pub fn backoff(failures: u32) -> Duration {
    let exp = failures.saturating_sub(1).min(16);
    BACKOFF_BASE.saturating_mul(1 << exp).min(BACKOFF_CAP)
}

pub struct BareRepo {
    config: RepositoryConfig,
    path: PathBuf,
    default_branch: String,
    git_timeout: Duration,
    status: Mutex<SyncStatus>,
    fetch_lock: tokio::sync::Mutex<()>,
    events: Notify,
}

impl BareRepo {
    /// Opens the bare clone under `dir`, mirror-cloning it first if absent.
    pub async fn open_or_clone(
        config: RepositoryConfig,
        dir: &Path,
        git_timeout: Duration,
    ) -> Result<Arc<Self>, GitError> {
        let path = dir.join(format!("{}.git", config.repo_id));
        let usable = path.is_dir()
            && git(&path, ["rev-parse", "--is-bare-repository"], git_timeout)
                .await
                .is_ok();
        if !usable {
            if path.exists() {
                std::fs::remove_dir_all(&path)?;
            }
            std::fs::create_dir_all(dir)?;
            let args = [
                OsStr::new("clone"),
                OsStr::new("--mirror"),
                OsStr::new("--quiet"),
                OsStr::new(&config.upstream_url),
                path.as_os_str(),
            ];
            if let Err(e) = git(dir, args, git_timeout).await {
                let _ = std::fs::remove_dir_all(&path);
                return Err(e);
            }
            git(&path, ["config", "gc.auto", "0"], git_timeout).await?;
        }
        let default_branch = git(&path, ["symbolic-ref", "--short", "HEAD"], git_timeout)
            .await?
            .trim()
            .to_owned();
        let repo = Arc::new(Self {
            config,
            path,
            default_branch,
            git_timeout,
            status: Mutex::new(SyncStatus {
                last_success: Some(Instant::now()),
                ..Default::default()
            }),
            fetch_lock: tokio::sync::Mutex::new(()),
            events: Notify::new(),
        });
        if usable {
            // Reused from a previous run: catch up, but a dead upstream must not
            // stop the node from serving what it has.
            if let Err(e) = repo.sync(SyncTrigger::Periodic).await {
                tracing::warn!(repo = %repo.id(), error = %e, "startup sync failed");
            }
        }
        Ok(repo)
    }

    pub fn id(&self) -> &str {
        &self.config.repo_id
    }

    pub fn config(&self) -> &RepositoryConfig {
        &self.config
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn default_branch(&self) -> &str {
        &self.default_branch
    }

    pub fn git_timeout(&self) -> Duration {
        self.git_timeout
    }

    pub fn status(&self) -> SyncStatus {
        self.status.lock().clone()
    }

    /// Current tip of the default branch.
    pub async fn tip(&self) -> Result<String, GitError> {
        rev_parse(
            &self.path,
            &format!("refs/heads/{}", self.default_branch),
            self.git_timeout,
        )
        .await
    }

    /// One fetch from upstream. Only the bare clone is touched.
    pub async fn sync(&self, trigger: SyncTrigger) -> Result<SyncReport, GitError> {
        let _guard = self.fetch_lock.lock().await;
        let before = self.tip().await.ok();
        let result = git(
            &self.path,
            ["fetch", "--prune", "--quiet", "origin"],
            self.git_timeout,
        )
        .await;
        {
            let mut status = self.status.lock();
            status.syncs += 1;
            match result {
                Ok(_) => {
                    status.consecutive_failures = 0;
                    status.degraded = false;
                    status.last_success = Some(Instant::now());
                    status.last_error = None;
                }
                Err(e) => {
                    status.failures += 1;
                    status.consecutive_failures += 1;
                    status.last_error = Some(e.to_string());
                    if status.consecutive_failures >= DEGRADED_AFTER && !status.degraded {
                        status.degraded = true;
                        tracing::error!(repo = %self.id(), error = %e, "repository degraded; serving last synced state");
                    }
                    return Err(e);
                }
            }
        }
        let tip = self.tip().await?;
        tracing::debug!(repo = %self.id(), ?trigger, %tip, "synced");
        Ok(SyncReport {
            changed: before.as_deref() != Some(tip.as_str()),
            tip,
        })
    }

    /// Asks the sync loop to fetch now.
    pub fn notify_push(&self) {
        self.events.notify_one();
    }

    /// Fetches on push events and every `sync_interval`, backing off
    /// exponentially while upstream is failing.
    pub async fn run_sync_loop(self: Arc<Self>) {
        let mut wait = self.config.sync_interval;
        loop {
            let trigger = tokio::select! {
                _ = self.events.notified() => SyncTrigger::Event,
                _ = tokio::time::sleep(wait) => SyncTrigger::Periodic,
            };
            wait = match self.sync(trigger).await {
                Ok(_) => self.config.sync_interval,
                Err(e) => {
                    let failures = self.status.lock().consecutive_failures;
                    let delay = backoff(failures);
                    tracing::warn!(repo = %self.id(), error = %e, retry_in = ?delay, "sync failed");
                    delay.min(self.config.sync_interval)
                }
            };
        }
    }

    /// Time since the last successful sync.
    pub fn sync_lag(&self) -> Duration {
        self.status
            .lock()
            .last_success
            .map(|t| t.elapsed())
            .unwrap_or(Duration::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_cap() {
        let got: Vec<_> = (1..=8).map(|n| backoff(n).as_secs()).collect();
        assert_eq!(got, [1, 2, 4, 8, 16, 32, 60, 60]);
        assert_eq!(backoff(1000), BACKOFF_CAP);
    }
}
