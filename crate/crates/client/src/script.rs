//! Declarative multi-step session scripts.
//!
//! ```toml
//! repo_id = "go-mono"
//!
//! [[steps]]
//! alias = "mb"
//! arguments = ["merge-base", "origin/br-a", "origin/br-b"]
//!
//! [[steps]]
//! alias = "publish"
//! arguments = ["push", "origin", "${mb.stdout}:refs/bases/x"]
//! ```
//!
//! `${alias.stdout}` expands to that earlier step's stdout with one trailing
//! newline removed. It may appear in arguments, stdin and environment
//! values. `$${` produces a literal `${`. `binary` defaults to `git`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use gitfarm_protocol::Command;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionScript {
    pub repo_id: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub alias: String,
    #[serde(default = "default_binary")]
    pub binary: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub stdin: Option<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    /// A failing step is tolerated and its output may still be referenced.
    #[serde(default)]
    pub allow_fail: bool,
}

fn default_binary() -> String {
    "git".into()
}

impl Step {
    pub fn git<I, S>(alias: &str, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            alias: alias.into(),
            binary: default_binary(),
            arguments: args.into_iter().map(Into::into).collect(),
            stdin: None,
            environment: BTreeMap::new(),
            allow_fail: false,
        }
    }

    fn templates(&self) -> impl Iterator<Item = &str> {
        self.arguments
            .iter()
            .map(String::as_str)
            .chain(self.stdin.as_deref())
            .chain(self.environment.values().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("reading script: {0}")]
    Read(String),
    #[error("parsing script: {0}")]
    Parse(String),
    #[error("script has no steps")]
    Empty,
    #[error("repo_id must not be empty")]
    NoRepo,
    #[error("step {index} has an empty alias")]
    EmptyAlias { index: usize },
    #[error("duplicate alias `{0}`")]
    DuplicateAlias(String),
    #[error("step `{step}`: {reason}")]
    BadTemplate { step: String, reason: String },
    #[error("step `{step}` references `{target}`, which is not an earlier step")]
    UnknownReference { step: String, target: String },
    #[error("step `{step}` references `{target}`, whose stdout is not UTF-8")]
    NotUtf8 { step: String, target: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Lit(String),
    Stdout(String),
}

/// Splits a template into literal text and `${alias.stdout}` references.
pub fn parse_template(s: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        lit.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(after) = tail.strip_prefix("$${") {
            lit.push_str("${");
            rest = after;
        } else if let Some(after) = tail.strip_prefix("${") {
            let end = after
                .find('}')
                .ok_or_else(|| format!("unterminated `${{` in {s:?}"))?;
            let inner = &after[..end];
            let alias = inner
                .strip_suffix(".stdout")
                .filter(|a| !a.is_empty())
                .ok_or_else(|| {
                    format!("unsupported reference `${{{inner}}}`; expected `${{alias.stdout}}`")
                })?;
            if !lit.is_empty() {
                pieces.push(Piece::Lit(std::mem::take(&mut lit)));
            }
            pieces.push(Piece::Stdout(alias.to_owned()));
            rest = &after[end + 1..];
        } else {
            lit.push('$');
            rest = &tail[1..];
        }
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        pieces.push(Piece::Lit(lit));
    }
    Ok(pieces)
}

/// Referenced stdout with exactly one trailing newline removed.
pub fn substitution_value(stdout: &[u8]) -> &[u8] {
    stdout.strip_suffix(b"\n").unwrap_or(stdout)
}

impl SessionScript {
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScriptError::Read(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let script: Self = toml::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    /// Checks aliases and that every reference names an earlier step.
    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.repo_id.is_empty() {
            return Err(ScriptError::NoRepo);
        }
        if self.steps.is_empty() {
            return Err(ScriptError::Empty);
        }
        let mut seen = BTreeSet::new();
        for (index, step) in self.steps.iter().enumerate() {
            if step.alias.is_empty() {
                return Err(ScriptError::EmptyAlias { index });
            }
            for target in self.references(step)? {
                if !seen.contains(target.as_str()) {
                    return Err(ScriptError::UnknownReference {
                        step: step.alias.clone(),
                        target,
                    });
                }
            }
            if !seen.insert(step.alias.as_str()) {
                return Err(ScriptError::DuplicateAlias(step.alias.clone()));
            }
        }
        Ok(())
    }

    /// Aliases whose output `step` uses.
    pub fn references(&self, step: &Step) -> Result<BTreeSet<String>, ScriptError> {
        let mut out = BTreeSet::new();
        for t in step.templates() {
            let pieces = parse_template(t).map_err(|reason| ScriptError::BadTemplate {
                step: step.alias.clone(),
                reason,
            })?;
            out.extend(pieces.into_iter().filter_map(|p| match p {
                Piece::Stdout(a) => Some(a),
                Piece::Lit(_) => None,
            }));
        }
        Ok(out)
    }
}

/// Expands a step into a command using the captured stdout of earlier steps.
pub fn render(step: &Step, outputs: &HashMap<String, Vec<u8>>) -> Result<Command, ScriptError> {
    let expand = |t: &str| -> Result<Vec<u8>, ScriptError> {
        let pieces = parse_template(t).map_err(|reason| ScriptError::BadTemplate {
            step: step.alias.clone(),
            reason,
        })?;
        let mut out = Vec::new();
        for p in pieces {
            match p {
                Piece::Lit(s) => out.extend_from_slice(s.as_bytes()),
                Piece::Stdout(a) => {
                    let v = outputs
                        .get(&a)
                        .ok_or_else(|| ScriptError::UnknownReference {
                            step: step.alias.clone(),
                            target: a.clone(),
                        })?;
                    out.extend_from_slice(substitution_value(v));
                }
            }
        }
        Ok(out)
    };
    let text = |t: &str| -> Result<String, ScriptError> {
        String::from_utf8(expand(t)?).map_err(|_| ScriptError::NotUtf8 {
            step: step.alias.clone(),
            target: parse_template(t)
                .ok()
                .and_then(|ps| {
                    ps.into_iter().find_map(|p| match p {
                        Piece::Stdout(a) => Some(a),
                        Piece::Lit(_) => None,
                    })
                })
                .unwrap_or_default(),
        })
    };
    let mut cmd = Command::new(step.alias.clone(), step.binary.clone());
    for a in &step.arguments {
        cmd.arguments.push(text(a)?);
    }
    if let Some(s) = &step.stdin {
        cmd.stdin = Some(expand(s)?);
    }
    for (k, v) in &step.environment {
        cmd.environment.insert(k.clone(), text(v)?);
    }
    Ok(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_templates() {
        assert_eq!(
            parse_template("a${mb.stdout}:b$${x}$HOME").unwrap(),
            vec![
                Piece::Lit("a".into()),
                Piece::Stdout("mb".into()),
                Piece::Lit(":b${x}$HOME".into()),
            ]
        );
        assert!(parse_template("${mb.stdout").is_err());
        assert!(parse_template("${mb}").is_err());
        assert!(parse_template("${.stdout}").is_err());
    }

    #[test]
    fn validation_catches_bad_references() {
        let script = |steps| SessionScript {
            repo_id: "r".into(),
            steps,
        };
        let ok = script(vec![
            Step::git("mb", ["merge-base", "a", "b"]),
            Step::git("push", ["push", "origin", "${mb.stdout}:refs/bases/x"]),
        ]);
        assert_eq!(ok.validate(), Ok(()));
        let forward = script(vec![
            Step::git("push", ["push", "${mb.stdout}"]),
            Step::git("mb", ["merge-base", "a", "b"]),
        ]);
        assert!(matches!(
            forward.validate(),
            Err(ScriptError::UnknownReference { .. })
        ));
        let own = script(vec![Step::git("x", ["${x.stdout}"])]);
        assert!(matches!(
            own.validate(),
            Err(ScriptError::UnknownReference { .. })
        ));
        let dup = script(vec![Step::git("x", ["a"]), Step::git("x", ["b"])]);
        assert_eq!(dup.validate(), Err(ScriptError::DuplicateAlias("x".into())));
        assert_eq!(script(vec![]).validate(), Err(ScriptError::Empty));
    }

    #[test]
    fn parses_toml() {
        let s = SessionScript::from_toml(
            r#"
            repo_id = "go-mono"
            [[steps]]
            alias = "v"
            arguments = ["--version"]
            [[steps]]
            alias = "echo"
            binary = "sh"
            arguments = ["-c", "cat"]
            stdin = "${v.stdout}"
            allow_fail = true
            environment = { A = "${v.stdout}" }
            "#,
        )
        .unwrap();
        assert_eq!(s.steps[0].binary, "git");
        assert!(s.steps[1].allow_fail);
        assert!(SessionScript::from_toml("repo_id = \"x\"\nsteps = []\nextra = 1").is_err());
    }

    #[test]
    fn renders_with_trimmed_output() {
        let step = Step {
            stdin: Some("<${a.stdout}>".into()),
            environment: BTreeMap::from([("K".into(), "${a.stdout}".into())]),
            ..Step::git("b", ["${a.stdout}:refs/x"])
        };
        let outputs = HashMap::from([("a".to_string(), b"abc\n\n".to_vec())]);
        let cmd = render(&step, &outputs).unwrap();
        assert_eq!(cmd.arguments, vec!["abc\n:refs/x"]);
        assert_eq!(cmd.stdin.as_deref(), Some(&b"<abc\n>"[..]));
        assert_eq!(cmd.environment["K"], "abc\n");

        let binary = HashMap::from([("a".to_string(), vec![0xff, b'\n'])]);
        assert!(matches!(
            render(&step, &binary),
            Err(ScriptError::NotUtf8 { .. })
        ));
    }

    proptest! {
        // Rendering a single reference yields exactly the referenced bytes
        // minus at most one trailing newline.
        #[test]
        fn substitution_is_exact(body in "[a-z0-9 \n]{0,40}", newlines in 0usize..3) {
            let mut stdout = body.clone().into_bytes();
            stdout.extend(std::iter::repeat_n(b'\n', newlines));
            let step = Step { stdin: Some("${a.stdout}".into()), ..Step::git("b", Vec::<String>::new()) };
            let cmd = render(&step, &HashMap::from([("a".to_string(), stdout.clone())])).unwrap();
            let mut expected = stdout.clone();
            if expected.last() == Some(&b'\n') {
                expected.pop();
            }
            prop_assert_eq!(cmd.stdin.unwrap(), expected);
        }

        // Literal text without `$` passes through unchanged.
        #[test]
        fn literals_round_trip(s in "[^$]{0,40}") {
            let pieces = parse_template(&s).unwrap();
            let joined: String = pieces.into_iter().map(|p| match p {
                Piece::Lit(l) => l,
                Piece::Stdout(_) => unreachable!(),
            }).collect();
            prop_assert_eq!(joined, s);
        }
    }
}
