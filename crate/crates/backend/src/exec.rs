//! Runs one session command inside a bound sandbox.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Stdio;
use std::time::Duration;

use gitfarm_protocol::{Command, CommandResult, Identity};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};

use crate::config::TIMEOUT_EXIT_CODE;
use crate::sandbox::SandboxEnv;

/// Everything a command's environment is derived from.
#[derive(Debug, Clone)]
pub struct ExecContext {
    pub workdir: PathBuf,
    pub sandbox: SandboxEnv,
    pub identity: Identity,
    pub session_id: String,
    pub path_var: String,
    pub timeout: Duration,
    pub output_cap: usize,
}

impl ExecContext {
    /// Scrubbed base environment plus identity variables. Client-supplied
    /// variables are layered on top by [`execute`]; admission has already
    /// rejected any that would shadow these.
    pub fn base_env(&self) -> BTreeMap<String, String> {
        let s = |p: &std::path::Path| p.to_string_lossy().into_owned();
        let email = format!("{}@gitfarm.invalid", self.identity.client_id);
        BTreeMap::from([
            ("PATH".into(), self.path_var.clone()),
            ("HOME".into(), s(&self.sandbox.home)),
            ("TMPDIR".into(), s(&self.sandbox.tmp)),
            ("USER".into(), self.identity.client_id.clone()),
            ("LOGNAME".into(), self.identity.client_id.clone()),
            ("LC_ALL".into(), "C".into()),
            ("GIT_CONFIG_NOSYSTEM".into(), "1".into()),
            ("GIT_CONFIG_GLOBAL".into(), s(&self.sandbox.gitconfig)),
            ("GIT_TERMINAL_PROMPT".into(), "0".into()),
            (
                "GIT_COMMITTER_NAME".into(),
                self.identity.display_name.clone(),
            ),
            ("GIT_COMMITTER_EMAIL".into(), email.clone()),
            ("GIT_AUTHOR_NAME".into(), self.identity.display_name.clone()),
            ("GIT_AUTHOR_EMAIL".into(), email),
            ("GITFARM_CLIENT_ID".into(), self.identity.client_id.clone()),
            ("GITFARM_SESSION_ID".into(), self.session_id.clone()),
            (
                "GITFARM_CREDENTIAL_FILE".into(),
                s(&self.sandbox.credential_file),
            ),
        ])
    }
}

/// The command could not be started; the session cannot continue.
#[derive(Debug, thiserror::Error)]
#[error("spawning `{binary}`: {source}")]
pub struct SpawnError {
    pub binary: String,
    #[source]
    pub source: std::io::Error,
}

/// Kills the whole process group when dropped, so a cancelled session leaves
/// no stragglers behind.
struct GroupGuard(Option<i32>);

impl GroupGuard {
    fn kill(&mut self) {
        if let Some(pgid) = self.0.take() {
            // SAFETY: killpg has no memory-safety preconditions.
            unsafe {
                libc::killpg(pgid, libc::SIGKILL);
            }
        }
    }
}

impl Drop for GroupGuard {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Runs `cmd` to completion, the timeout, or cancellation (dropping the
/// future kills the process group).
pub async fn execute(ctx: &ExecContext, cmd: &Command) -> Result<CommandResult, SpawnError> {
    let mut env = ctx.base_env();
    env.extend(cmd.environment.iter().map(|(k, v)| (k.clone(), v.clone())));

    let mut child = tokio::process::Command::new(&cmd.binary)
        .args(&cmd.arguments)
        .current_dir(&ctx.workdir)
        .env_clear()
        .envs(&env)
        .stdin(if cmd.stdin.is_some() {
            Stdio::piped()
        } else {
            Stdio::null()
        })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .kill_on_drop(true)
        .spawn()
        .map_err(|source| SpawnError {
            binary: cmd.binary.clone(),
            source,
        })?;
    let mut guard = GroupGuard(child.id().map(|pid| pid as i32));

    let stdin_task = match (child.stdin.take(), cmd.stdin.clone()) {
        (Some(mut pipe), Some(data)) => Some(tokio::spawn(async move {
            // A child that exits without reading stdin is not an error.
            let _ = pipe.write_all(&data).await;
        })),
        _ => None,
    };
    let stdout = tokio::spawn(read_capped(
        child.stdout.take().expect("piped stdout"),
        ctx.output_cap,
    ));
    let stderr = tokio::spawn(read_capped(
        child.stderr.take().expect("piped stderr"),
        ctx.output_cap,
    ));

    let status = tokio::time::timeout(ctx.timeout, child.wait()).await;
    // Reap anything the command left running in its group; their open pipes
    // would otherwise hold the readers.
    guard.kill();
    if let Some(t) = stdin_task {
        t.abort();
    }
    let (stdout, out_trunc) = stdout.await.unwrap_or_default();
    let (mut stderr, err_trunc) = stderr.await.unwrap_or_default();

    let exit_code = match status {
        Ok(Ok(status)) => exit_code(status),
        Ok(Err(e)) => {
            stderr.extend_from_slice(
                format!("\ngitfarm: waiting for command failed: {e}\n").as_bytes(),
            );
            -1
        }
        Err(_) => {
            let _ = child.kill().await;
            stderr.extend_from_slice(
                format!(
                    "\ngitfarm: command timed out after {}s and was killed\n",
                    ctx.timeout.as_secs_f64()
                )
                .as_bytes(),
            );
            TIMEOUT_EXIT_CODE
        }
    };
    Ok(CommandResult {
        alias: cmd.alias.clone(),
        exit_code,
        stdout,
        stderr,
        truncated: out_trunc || err_trunc,
    })
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Reads to EOF, keeping at most `cap` bytes.
async fn read_capped<R: AsyncRead + Unpin>(mut r: R, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match r.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    (kept, truncated)
}
