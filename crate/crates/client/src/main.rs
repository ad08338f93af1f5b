use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use gitfarm_client::{exec_once, run_script, Report, SessionScript};
use gitfarm_protocol::Command;

/// Runs Git commands against a repository held by a gitfarm deployment.
///
/// Exit codes: 0 ok, 2 invalid input, 3 unauthenticated, 4 permission
/// denied, 5 no capacity, 6 session failed, 7 a command failed.
#[derive(Debug, Parser)]
#[command(name = "gitfarm", version)]
struct Args {
    /// Gateway address.
    #[arg(
        long,
        global = true,
        env = "GITFARM_ENDPOINT",
        default_value = "127.0.0.1:7400"
    )]
    endpoint: String,
    /// Gives up after this many seconds.
    #[arg(long, global = true)]
    timeout: Option<f64>,
    /// Prints a JSON report instead of plain output.
    #[arg(long, global = true)]
    json: bool,
    /// Identity token.
    #[arg(long, global = true, env = "GITFARM_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Runs one command and prints its stdout verbatim.
    Exec {
        #[arg(long)]
        repo: String,
        /// Program to run; must be on the server's allowlist.
        #[arg(long, default_value = "git")]
        binary: String,
        #[arg(last = true, required = true)]
        args: Vec<String>,
    },
    /// Runs a multi-step session script.
    Script {
        #[arg(long)]
        file: PathBuf,
    },
}

fn finish(report: &Report, json: bool) -> ExitCode {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
    }
    ExitCode::from(report.exit_code as u8)
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let timeout = match args.timeout.map(Duration::try_from_secs_f64) {
        None => None,
        Some(Ok(t)) => Some(t),
        Some(Err(_)) => {
            eprintln!("gitfarm: --timeout must be a non-negative number of seconds");
            return ExitCode::from(2);
        }
    };
    let Some(token) = args.token else {
        eprintln!("gitfarm: --token or GITFARM_TOKEN is required");
        return ExitCode::from(2);
    };
    match args.command {
        Cmd::Exec {
            repo,
            binary,
            args: argv,
        } => {
            let cmd = Command::new("exec", binary).with_args(argv);
            let report = exec_once(&args.endpoint, &repo, &token, cmd, timeout).await;
            if !args.json {
                if let Some(r) = report.results.first() {
                    let _ = std::io::stdout().write_all(&r.stdout);
                    let _ = std::io::stderr().write_all(&r.stderr);
                }
                if let Some(e) = &report.error {
                    eprintln!("gitfarm: {}: {}", e.code, e.message);
                }
            }
            finish(&report, args.json)
        }
        Cmd::Script { file } => {
            let script = match SessionScript::load(&file) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("gitfarm: {e}");
                    return ExitCode::from(2);
                }
            };
            let report = run_script(&script, &args.endpoint, &token, timeout).await;
            if !args.json {
                print!("{}", report.render_text());
            }
            finish(&report, args.json)
        }
    }
}
