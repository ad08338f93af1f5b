//! Command and result types, plus the server-side admission rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Environment keys the backend injects itself. Clients may never set them.
pub const RESERVED_ENV_KEYS: &[&str] = &[
    "HOME",
    "PATH",
    "USER",
    "LOGNAME",
    "TMPDIR",
    "GIT_DIR",
    "GIT_WORK_TREE",
    "GIT_INDEX_FILE",
    "GIT_OBJECT_DIRECTORY",
    "GIT_ALTERNATE_OBJECT_DIRECTORIES",
    "GIT_COMMON_DIR",
    "GIT_EXEC_PATH",
    "GIT_ASKPASS",
    "SSH_ASKPASS",
    "GIT_SSH",
    "GIT_SSH_COMMAND",
    "GIT_PROXY_COMMAND",
    "GIT_TERMINAL_PROMPT",
    "GIT_CONFIG",
    "GIT_CONFIG_GLOBAL",
    "GIT_CONFIG_SYSTEM",
    "GIT_CONFIG_NOSYSTEM",
    "GIT_CONFIG_COUNT",
    "GIT_CONFIG_PARAMETERS",
    "GIT_COMMITTER_NAME",
    "GIT_COMMITTER_EMAIL",
];

/// Prefixes reserved for the same reason as [`RESERVED_ENV_KEYS`].
pub const RESERVED_ENV_PREFIXES: &[&str] = &["GITFARM_", "GIT_CONFIG_KEY_", "GIT_CONFIG_VALUE_"];

/// One unit of remote execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    /// Client-chosen correlation key, unique within a session.
    pub alias: String,
    pub binary: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(
        rename = "stdin_b64",
        with = "crate::b64::opt",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub stdin: Option<Vec<u8>>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

impl Command {
    pub fn new(alias: impl Into<String>, binary: impl Into<String>) -> Self {
        Self {
            alias: alias.into(),
            binary: binary.into(),
            arguments: Vec::new(),
            stdin: None,
            environment: BTreeMap::new(),
        }
    }

    /// Shorthand for a `git` invocation.
    pub fn git<I, S>(alias: impl Into<String>, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(alias, "git").with_args(args)
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments.extend(args.into_iter().map(Into::into));
        self
    }

    pub fn with_stdin(mut self, stdin: impl Into<Vec<u8>>) -> Self {
        self.stdin = Some(stdin.into());
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.environment.insert(key.into(), value.into());
        self
    }
}

/// Captured outcome of one [`Command`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub alias: String,
    pub exit_code: i32,
    #[serde(rename = "stdout_b64", with = "crate::b64::bytes")]
    pub stdout: Vec<u8>,
    #[serde(rename = "stderr_b64", with = "crate::b64::bytes")]
    pub stderr: Vec<u8>,
    /// Set when stdout or stderr hit the output cap.
    #[serde(default)]
    pub truncated: bool,
}

impl CommandResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }

    pub fn stdout_lossy(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_lossy(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

/// Binaries a sandbox is permitted to spawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allowlist(BTreeSet<String>);

impl Allowlist {
    pub fn new<I, S>(binaries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(binaries.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, binary: &str) -> bool {
        self.0.contains(binary)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl Default for Allowlist {
    fn default() -> Self {
        Self::new(["git"])
    }
}

/// First admission rule a command broke.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("empty alias")]
    EmptyAlias,
    #[error("binary not allowed: `{0}`")]
    BinaryNotAllowed(String),
    #[error("illegal environment key: `{0}`")]
    IllegalEnvKey(String),
    #[error("reserved environment key: `{0}`")]
    ReservedEnvKey(String),
}

/// Checks a command against the admission rules, in a fixed order: alias,
/// binary, then environment keys.
pub fn validate_command(cmd: &Command, allowlist: &Allowlist) -> Result<(), Violation> {
    if cmd.alias.is_empty() {
        return Err(Violation::EmptyAlias);
    }
    if !allowlist.contains(&cmd.binary) {
        return Err(Violation::BinaryNotAllowed(cmd.binary.clone()));
    }
    for key in cmd.environment.keys() {
        if !is_legal_env_key(key) {
            return Err(Violation::IllegalEnvKey(key.clone()));
        }
        if is_reserved_env_key(key) {
            return Err(Violation::ReservedEnvKey(key.clone()));
        }
    }
    Ok(())
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_legal_env_key(key: &str) -> bool {
    let mut chars = key.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn is_reserved_env_key(key: &str) -> bool {
    RESERVED_ENV_KEYS.contains(&key) || RESERVED_ENV_PREFIXES.iter().any(|p| key.starts_with(p))
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.alias, self.binary)?;
        for arg in &self.arguments {
            write!(f, " {arg}")?;
        }
        Ok(())
    }
}
