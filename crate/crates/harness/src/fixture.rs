//! Deterministic synthetic upstream repositories.
//!
//! Content, paths, messages and timestamps derive only from the
//! [`FixtureRepoSpec`], so equal specs yield equal commit hashes. Repositories are written
//! with `git fast-import`, which keeps a 50k-file tree to a few seconds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Every fixture commit is authored at `EPOCH + 60 s * n`.
const EPOCH: u64 = 1_700_000_000;
const IDENT: &str = "Fixture <fixture@gitfarm.invalid>";
const FILES_PER_DIR: usize = 16;
const OWNERS: &str = "OWNERS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub name: String,
    /// Index into the main-line commits where the branch starts.
    pub fork_at: usize,
    pub commits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRepoSpec {
    pub name: String,
    pub file_count: usize,
    pub directory_depth: usize,
    /// Commits on `main`, at least one.
    pub commit_count: usize,
    pub branch_specs: Vec<BranchSpec>,
    pub seed: u64,
}

impl FixtureRepoSpec {
    pub fn small(name: &str, seed: u64) -> Self {
        Self {
            name: name.into(),
            file_count: 200,
            directory_depth: 2,
            commit_count: 20,
            branch_specs: vec![
                BranchSpec {
                    name: "br-a".into(),
                    fork_at: 10,
                    commits: 3,
                },
                BranchSpec {
                    name: "br-b".into(),
                    fork_at: 10,
                    commits: 4,
                },
            ],
            seed,
        }
    }

    /// The large fixture: 50k files, 5k commits.
    pub fn large(name: &str, seed: u64) -> Self {
        Self {
            name: name.into(),
            file_count: 50_000,
            directory_depth: 3,
            commit_count: 5_000,
            branch_specs: vec![
                BranchSpec {
                    name: "br-a".into(),
                    fork_at: 4_000,
                    commits: 5,
                },
                BranchSpec {
                    name: "br-b".into(),
                    fork_at: 4_000,
                    commits: 5,
                },
            ],
            seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("git {args}: {stderr}")]
    Git { args: String, stderr: String },
}

/// A generated bare repository.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureRepoSpec,
    pub path: PathBuf,
    /// Main-line commits, oldest first.
    pub main: Vec<String>,
    /// Commits on each extra branch, oldest first.
    pub branches: BTreeMap<String, Vec<String>>,
}

/// Runs git with a fixed identity and clock, returning stdout.
pub fn git(dir: &Path, args: &[&str]) -> Result<Vec<u8>, FixtureError> {
    let out = Command::new("git")
        .current_dir(dir)
        .args(args)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_AUTHOR_NAME", "Fixture")
        .env("GIT_AUTHOR_EMAIL", "fixture@gitfarm.invalid")
        .env("GIT_COMMITTER_NAME", "Fixture")
        .env("GIT_COMMITTER_EMAIL", "fixture@gitfarm.invalid")
        .env("GIT_AUTHOR_DATE", format!("{EPOCH} +0000"))
        .env("GIT_COMMITTER_DATE", format!("{EPOCH} +0000"))
        .env("LC_ALL", "C")
        .output()?;
    if !out.status.success() {
        return Err(FixtureError::Git {
            args: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    Ok(out.stdout)
}

/// Runs git feeding `input` on stdin, returning stdout.
pub fn git_with_stdin(dir: &Path, args: &[&str], input: &[u8]) -> Result<Vec<u8>, FixtureError> {
    let mut child = Command::new("git")
        .current_dir(dir)
        .args(args)
        .env("LC_ALL", "C")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = input.to_vec();
    let writer = std::thread::spawn(move || stdin.write_all(&input));
    let out = child.wait_with_output()?;
    writer
        .join()
        .map_err(|_| FixtureError::Spec("stdin writer panicked".into()))??;
    if !out.status.success() {
        return Err(FixtureError::Git {
            args: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    Ok(out.stdout)
}

pub fn git_string(dir: &Path, args: &[&str]) -> Result<String, FixtureError> {
    Ok(String::from_utf8_lossy(&git(dir, args)?)
        .trim_end()
        .to_owned())
}

/// Directory for file `i`: leaf directory `i / FILES_PER_DIR` spelled in
/// base-16 digits across `depth` levels.
fn dir_of(i: usize, depth: usize) -> String {
    let mut leaf = i / FILES_PER_DIR;
    let mut parts = Vec::with_capacity(depth);
    for level in 0..depth {
        let digit = if level + 1 == depth { leaf } else { leaf % 16 };
        parts.push(format!("d{digit:x}"));
        leaf /= 16;
    }
    parts.reverse();
    parts.join("/")
}

fn file_path(i: usize, depth: usize) -> String {
    if depth == 0 {
        return format!("f{i:05}.txt");
    }
    format!("{}/f{i:05}.txt", dir_of(i, depth))
}

fn owners_path(dir: &str) -> String {
    if dir.is_empty() {
        OWNERS.to_owned()
    } else {
        format!("{dir}/{OWNERS}")
    }
}

fn random_line(rng: &mut ChaCha8Rng) -> String {
    const WORDS: &[&str] = &[
        "alpha", "bravo", "cache", "delta", "event", "fetch", "graph", "hash", "index", "join",
        "kernel", "lease", "merge", "node", "object", "pack", "queue", "ref", "sync", "tree",
    ];
    let n = rng.random_range(3..9);
    let mut s = String::new();
    for k in 0..n {
        if k > 0 {
            s.push(' ');
        }
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    s
}

struct Stream {
    out: Vec<u8>,
    next_mark: usize,
}

impl Stream {
    fn blob(&mut self, data: &[u8]) -> usize {
        let mark = self.next_mark;
        self.next_mark += 1;
        let _ = write!(self.out, "blob\nmark :{mark}\ndata {}\n", data.len());
        self.out.extend_from_slice(data);
        self.out.push(b'\n');
        mark
    }

    fn commit(
        &mut self,
        branch: &str,
        seq: u64,
        message: &str,
        parent: Option<usize>,
        changes: &[(String, usize)],
    ) -> usize {
        let mark = self.next_mark;
        self.next_mark += 1;
        let when = EPOCH + 60 * seq;
        let _ = write!(
            self.out,
            "commit refs/heads/{branch}\nmark :{mark}\nauthor {IDENT} {when} +0000\ncommitter {IDENT} {when} +0000\ndata {}\n{message}\n",
            message.len()
        );
        if let Some(p) = parent {
            let _ = writeln!(self.out, "from :{p}");
        }
        for (path, blob) in changes {
            let _ = writeln!(self.out, "M 100644 :{blob} {path}");
        }
        self.out.push(b'\n');
        mark
    }
}

impl Fixture {
    /// Writes `<parent>/<name>.git`, replacing anything already there.
    pub fn generate(spec: &FixtureRepoSpec, parent: &Path) -> Result<Self, FixtureError> {
        if spec.file_count == 0 || spec.commit_count == 0 {
            return Err(FixtureError::Spec(
                "need at least one file and one commit".into(),
            ));
        }
        if spec.name.is_empty() || spec.name.contains('/') {
            return Err(FixtureError::Spec(format!("bad name `{}`", spec.name)));
        }
        for b in &spec.branch_specs {
            if b.fork_at >= spec.commit_count || b.name == "main" {
                return Err(FixtureError::Spec(format!("bad branch `{}`", b.name)));
            }
        }
        let path = parent.join(format!("{}.git", spec.name));
        if path.exists() {
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(parent)?;
        git(
            parent,
            &[
                "init",
                "--quiet",
                "--bare",
                "-b",
                "main",
                path.to_str().unwrap_or_default(),
            ],
        )?;
        git(&path, &["config", "gc.auto", "0"])?;
        git(&path, &["config", "receive.denyNonFastForwards", "false"])?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut s = Stream {
            out: Vec::new(),
            next_mark: 1,
        };
        let mut contents: Vec<String> = Vec::with_capacity(spec.file_count);
        let mut initial = Vec::with_capacity(spec.file_count + spec.file_count / FILES_PER_DIR + 1);
        for i in 0..spec.file_count {
            let text = format!("{}\n", random_line(&mut rng));
            initial.push((file_path(i, spec.directory_depth), s.blob(text.as_bytes())));
            contents.push(text);
        }
        let mut dirs: Vec<String> = (0..spec.file_count)
            .map(|i| {
                if spec.directory_depth == 0 {
                    String::new()
                } else {
                    dir_of(i, spec.directory_depth)
                }
            })
            .collect();
        dirs.dedup();
        for dir in &dirs {
            let team = format!("team-{}\n", rng.random_range(0..64u32));
            initial.push((owners_path(dir), s.blob(team.as_bytes())));
        }

        let mut seq = 0u64;
        let mut main_marks = Vec::with_capacity(spec.commit_count);
        main_marks.push(s.commit("main", seq, "initial import", None, &initial));
        drop(initial);
        for n in 1..spec.commit_count {
            seq += 1;
            let changes = edit(&mut s, &mut rng, &mut contents, spec, &format!("main {n}"));
            let parent = *main_marks.last().expect("initial commit");
            main_marks.push(s.commit("main", seq, &format!("change {n}"), Some(parent), &changes));
        }
        let mut branch_marks = BTreeMap::new();
        for b in &spec.branch_specs {
            let mut contents = contents.clone();
            let mut marks: Vec<usize> = Vec::new();
            let mut parent = main_marks[b.fork_at];
            for n in 0..b.commits {
                seq += 1;
                let tag = format!("{} {n}", b.name);
                let changes = edit(&mut s, &mut rng, &mut contents, spec, &tag);
                parent = s.commit(&b.name, seq, &tag.to_string(), Some(parent), &changes);
                marks.push(parent);
            }
            if b.commits == 0 {
                let _ = writeln!(s.out, "reset refs/heads/{}\nfrom :{parent}\n", b.name);
            }
            branch_marks.insert(b.name.clone(), marks);
        }

        let marks_file = path.join("fixture-marks");
        let mut child = Command::new("git")
            .current_dir(&path)
            .args(["fast-import", "--quiet", "--force"])
            .arg(format!("--export-marks={}", marks_file.display()))
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()?;
        child.stdin.take().expect("piped stdin").write_all(&s.out)?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(FixtureError::Git {
                args: "fast-import".into(),
                stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            });
        }
        let marks: BTreeMap<usize, String> = std::fs::read_to_string(&marks_file)?
            .lines()
            .filter_map(|l| {
                let (m, sha) = l.split_once(' ')?;
                Some((m.trim_start_matches(':').parse().ok()?, sha.to_owned()))
            })
            .collect();
        std::fs::remove_file(&marks_file)?;
        let resolve = |m: &usize| marks[m].clone();
        Ok(Self {
            spec: spec.clone(),
            path,
            main: main_marks.iter().map(resolve).collect(),
            branches: branch_marks
                .into_iter()
                .map(|(k, v)| (k, v.iter().map(resolve).collect()))
                .collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Local path usable as a clone URL.
    pub fn url(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }

    /// Commit a branch forked from, by construction.
    pub fn fork_point(&self, branch: &str) -> Option<&str> {
        let b = self.spec.branch_specs.iter().find(|b| b.name == branch)?;
        Some(&self.main[b.fork_at])
    }

    pub fn git(&self, args: &[&str]) -> Result<Vec<u8>, FixtureError> {
        git(&self.path, args)
    }

    pub fn rev_parse(&self, rev: &str) -> Result<String, FixtureError> {
        git_string(&self.path, &["rev-parse", "--verify", "--quiet", rev])
    }

    pub fn merge_base(&self, a: &str, b: &str) -> Result<String, FixtureError> {
        git_string(&self.path, &["merge-base", a, b])
    }

    /// Paths of all ownership files at `main`.
    pub fn owners_files(&self) -> Result<Vec<String>, FixtureError> {
        Ok(
            git_string(&self.path, &["ls-tree", "-r", "--name-only", "main"])?
                .lines()
                .filter(|p| p.rsplit('/').next() == Some(OWNERS))
                .map(str::to_owned)
                .collect(),
        )
    }

    /// Adds a commit on `main` with `main`'s tree, as if someone had pushed.
    pub fn advance_main(&self, message: &str) -> Result<String, FixtureError> {
        let tip = self.rev_parse("refs/heads/main")?;
        let tree = self.rev_parse("refs/heads/main^{tree}")?;
        let commit = git_string(
            &self.path,
            &["commit-tree", &tree, "-p", &tip, "-m", message],
        )?;
        git(
            &self.path,
            &["update-ref", "refs/heads/main", &commit, &tip],
        )?;
        Ok(commit)
    }
}

fn edit(
    s: &mut Stream,
    rng: &mut ChaCha8Rng,
    contents: &mut [String],
    spec: &FixtureRepoSpec,
    tag: &str,
) -> Vec<(String, usize)> {
    let n = rng.random_range(1..4usize);
    let mut changes = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..contents.len());
        let _ = writeln!(contents[i], "{tag}: {}", random_line(rng));
        let mark = s.blob(contents[i].as_bytes());
        changes.push((file_path(i, spec.directory_depth), mark));
    }
    changes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureRepoSpec {
            file_count: 1000,
            commit_count: 200,
            ..FixtureRepoSpec::small("det", 7)
        };
        let a = Fixture::generate(&spec, &dir.path().join("a")).unwrap();
        let b = Fixture::generate(&spec, &dir.path().join("b")).unwrap();
        assert_eq!(a.main, b.main);
        assert_eq!(a.branches, b.branches);
        assert_eq!(a.main.len(), 200);
        let c =
            Fixture::generate(&FixtureRepoSpec { seed: 8, ..spec }, &dir.path().join("c")).unwrap();
        assert_ne!(a.main, c.main);
    }

    #[test]
    fn fork_point_is_merge_base() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureRepoSpec {
            branch_specs: vec![
                BranchSpec {
                    name: "x".into(),
                    fork_at: 3,
                    commits: 2,
                },
                BranchSpec {
                    name: "y".into(),
                    fork_at: 3,
                    commits: 1,
                },
                BranchSpec {
                    name: "z".into(),
                    fork_at: 7,
                    commits: 0,
                },
            ],
            ..FixtureRepoSpec::small("fork", 1)
        };
        let f = Fixture::generate(&spec, dir.path()).unwrap();
        assert_eq!(f.merge_base("x", "y").unwrap(), f.main[3]);
        assert_eq!(f.merge_base("x", "main").unwrap(), f.main[3]);
        assert_eq!(f.rev_parse("z").unwrap(), f.main[7]);
        assert_eq!(f.branches["x"].len(), 2);
        assert_eq!(f.rev_parse("x").unwrap(), f.branches["x"][1]);
    }

    #[test]
    fn minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureRepoSpec {
            name: "one".into(),
            file_count: 1,
            directory_depth: 0,
            commit_count: 1,
            branch_specs: vec![],
            seed: 0,
        };
        let f = Fixture::generate(&spec, dir.path()).unwrap();
        assert_eq!(f.main.len(), 1);
        let files = git_string(&f.path, &["ls-tree", "-r", "--name-only", "main"]).unwrap();
        assert_eq!(files, "OWNERS\nf00000.txt");
        git(&f.path, &["fsck", "--no-progress"]).unwrap();
    }

    #[test]
    fn layout_has_owners_per_directory() {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture::generate(&FixtureRepoSpec::small("own", 3), dir.path()).unwrap();
        let files = git_string(&f.path, &["ls-tree", "-r", "--name-only", "main"]).unwrap();
        let total = files.lines().count();
        let owners = f.owners_files().unwrap();
        assert_eq!(total, 200 + owners.len());
        assert_eq!(owners.len(), 200 / FILES_PER_DIR + 1);
        assert!(owners.iter().all(|p| p.matches('/').count() == 2));
    }

    #[test]
    fn advance_main_moves_tip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture::generate(&FixtureRepoSpec::small("adv", 3), dir.path()).unwrap();
        let c = f.advance_main("pushed").unwrap();
        assert_eq!(f.rev_parse("main").unwrap(), c);
        assert_eq!(f.rev_parse("main^").unwrap(), *f.main.last().unwrap());
    }
}
