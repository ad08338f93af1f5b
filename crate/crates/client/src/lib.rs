//! Client SDK and `gitfarm` command-line tool.
//!
//! ```no_run
//! # async fn demo() -> Result<(), gitfarm_client::ClientError> {
//! use gitfarm_client::Session;
//! use gitfarm_protocol::Command;
//!
//! let mut s = Session::connect("127.0.0.1:7400", "go-mono", "tok-audit").await?;
//! let owners = s.run(Command::git("owners", ["show", "HEAD:OWNERS"])).await?;
//! print!("{}", owners.stdout_lossy());
//! s.close().await?;
//! # Ok(())
//! # }
//! ```

pub mod report;
pub mod script;
pub mod session;

pub use report::{exec_once, run_script, Report, ReportError, StepReport};
pub use script::{ScriptError, SessionScript, Step};
pub use session::{exit, exit_code_for, ClientError, Session};
