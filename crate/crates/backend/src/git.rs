//! Infrastructure git invocations (clone, fetch, refresh). Session commands
//! go through [`crate::exec`] instead.

use std::ffi::OsStr;
use std::path::Path;
use std::process::Stdio;
use std::time::Duration;

use tokio::process::Command;

#[derive(Debug, thiserror::Error)]
pub enum GitError {
    #[error("spawning git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("`git {args}` exited with {code:?}: {stderr}")]
    Failed {
        args: String,
        code: Option<i32>,
        stderr: String,
    },
    #[error("`git {args}` timed out after {timeout:?}")]
    Timeout { args: String, timeout: Duration },
}

pub(crate) async fn git<I, S>(dir: &Path, args: I, timeout: Duration) -> Result<String, GitError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let args: Vec<_> = args.into_iter().map(|a| a.as_ref().to_owned()).collect();
    let mut cmd = Command::new("git");
    cmd.current_dir(dir)
        .args(&args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("LC_ALL", "C")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true);
    let describe = || {
        args.iter()
            .map(|a| a.to_string_lossy())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let output = match tokio::time::timeout(timeout, cmd.output()).await {
        Ok(out) => out?,
        Err(_) => {
            return Err(GitError::Timeout {
                args: describe(),
                timeout,
            })
        }
    };
    if !output.status.success() {
        return Err(GitError::Failed {
            args: describe(),
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
        });
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

pub(crate) async fn rev_parse(
    dir: &Path,
    rev: &str,
    timeout: Duration,
) -> Result<String, GitError> {
    Ok(git(dir, ["rev-parse", "--verify", "--quiet", rev], timeout)
        .await?
        .trim()
        .to_owned())
}
