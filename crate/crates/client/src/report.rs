//! Running scripts and single commands, and reporting the outcome.

use std::collections::HashMap;
use std::time::Duration;

use gitfarm_protocol::{Command, CommandResult};
use serde::Serialize;

use crate::script::{render, SessionScript};
use crate::session::{exit, ClientError, Session};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub alias: String,
    pub binary: String,
    pub arguments: Vec<String>,
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub truncated: bool,
    pub allow_fail: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportError {
    /// Server error code, or `CLIENT` for local failures.
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub repo_id: String,
    pub session_id: Option<String>,
    pub node_id: Option<String>,
    pub steps: Vec<StepReport>,
    pub error: Option<ReportError>,
    pub exit_code: i32,
    /// Raw results in submission order.
    #[serde(skip)]
    pub results: Vec<CommandResult>,
}

impl Report {
    fn new(repo_id: &str) -> Self {
        Self {
            repo_id: repo_id.to_owned(),
            session_id: None,
            node_id: None,
            steps: Vec::new(),
            error: None,
            exit_code: exit::OK,
            results: Vec::new(),
        }
    }

    fn fail(&mut self, e: &ClientError) {
        self.exit_code = e.exit_code();
        self.error = Some(match e.session_error() {
            Some(s) => ReportError {
                code: s.code.to_string(),
                message: s.message.clone(),
            },
            None => ReportError {
                code: "CLIENT".into(),
                message: e.to_string(),
            },
        });
    }

    fn record(&mut self, cmd: &Command, result: CommandResult, allow_fail: bool) {
        self.steps.push(StepReport {
            alias: result.alias.clone(),
            binary: cmd.binary.clone(),
            arguments: cmd.arguments.clone(),
            exit_code: result.exit_code,
            stdout: result.stdout_lossy(),
            stderr: result.stderr_lossy(),
            truncated: result.truncated,
            allow_fail,
        });
        self.results.push(result);
    }

    /// Human-readable summary.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!("== {} (exit {})\n", s.alias, s.exit_code));
            out.push_str(&s.stdout);
            if !s.stdout.is_empty() && !s.stdout.ends_with('\n') {
                out.push('\n');
            }
            if !s.stderr.is_empty() {
                out.push_str("-- stderr\n");
                out.push_str(&s.stderr);
                if !s.stderr.ends_with('\n') {
                    out.push('\n');
                }
            }
        }
        if let Some(e) = &self.error {
            out.push_str(&format!("error: {}: {}\n", e.code, e.message));
        }
        out
    }
}

/// Runs every step over one session, substituting earlier outputs into later
/// steps. A failed step that is not `allow_fail` makes the run exit 7; a
/// later step that references it is not run and the session ends there.
pub async fn run_script(
    script: &SessionScript,
    endpoint: &str,
    token: &str,
    timeout: Option<Duration>,
) -> Report {
    let mut report = Report::new(&script.repo_id);
    if let Err(e) = script.validate() {
        report.fail(&e.into());
        return report;
    }
    let run = drive(script, endpoint, token, &mut report);
    let outcome = match timeout {
        Some(t) => tokio::time::timeout(t, run)
            .await
            .unwrap_or(Err(ClientError::Timeout)),
        None => run.await,
    };
    if let Err(e) = outcome {
        report.fail(&e);
    } else if report
        .steps
        .iter()
        .any(|s| s.exit_code != 0 && !s.allow_fail)
    {
        report.exit_code = exit::COMMAND_FAILED;
    }
    report
}

async fn drive(
    script: &SessionScript,
    endpoint: &str,
    token: &str,
    report: &mut Report,
) -> Result<(), ClientError> {
    let mut session = Session::connect(endpoint, &script.repo_id, token).await?;
    report.session_id = Some(session.session_id().to_owned());
    report.node_id = Some(session.node_id().to_owned());
    let mut outputs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut failed: HashMap<&str, i32> = HashMap::new();
    for step in &script.steps {
        let blocked = script
            .references(step)?
            .into_iter()
            .find_map(|r| failed.get(r.as_str()).map(|code| (r, *code)));
        if let Some((target, code)) = blocked {
            report.exit_code = exit::COMMAND_FAILED;
            report.error = Some(ReportError {
                code: "CLIENT".into(),
                message: format!(
                    "step `{}` needs output of `{target}`, which failed with exit code {code}",
                    step.alias
                ),
            });
            session.close().await?;
            return Ok(());
        }
        let cmd = render(step, &outputs)?;
        let result = session.run(cmd.clone()).await?;
        if result.exit_code != 0 && !step.allow_fail {
            failed.insert(&step.alias, result.exit_code);
        }
        outputs.insert(step.alias.clone(), result.stdout.clone());
        report.record(&cmd, result, step.allow_fail);
    }
    session.close().await?;
    Ok(())
}

/// One-command session.
pub async fn exec_once(
    endpoint: &str,
    repo_id: &str,
    token: &str,
    cmd: Command,
    timeout: Option<Duration>,
) -> Report {
    let mut report = Report::new(repo_id);
    let run = async {
        let mut session = Session::connect(endpoint, repo_id, token).await?;
        report.session_id = Some(session.session_id().to_owned());
        report.node_id = Some(session.node_id().to_owned());
        let result = session.run(cmd.clone()).await?;
        report.record(&cmd, result, false);
        session.close().await?;
        Ok::<_, ClientError>(())
    };
    let outcome = match timeout {
        Some(t) => tokio::time::timeout(t, run)
            .await
            .unwrap_or(Err(ClientError::Timeout)),
        None => run.await,
    };
    match outcome {
        Err(e) => report.fail(&e),
        Ok(()) if report.steps.iter().any(|s| s.exit_code != 0) => {
            report.exit_code = exit::COMMAND_FAILED
        }
        Ok(()) => {}
    }
    report
}
