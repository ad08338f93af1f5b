//! Session workloads modeled on three production uses: compliance audit
//! pushes, base-change chains and read-only ownership scans. Every output is
//! checked against the fixture with direct git before it counts.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gitfarm_client::{ClientError, Session};
use gitfarm_protocol::{Command, CommandResult};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::fixture::{Fixture, FixtureError};
use crate::report::{BenchReport, Recorder};

/// Where sessions go.
#[derive(Debug, Clone)]
pub struct Target {
    pub endpoint: String,
    pub token: String,
    pub repo_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadSpec {
    /// Session starts per second.
    pub rate: f64,
    pub duration: Duration,
    /// Upper bound on sessions in flight.
    pub parallelism: usize,
    pub seed: u64,
    /// Probability that a client vanishes mid-session.
    pub drop_probability: f64,
    /// Bound on every wait for a server message.
    pub read_timeout: Duration,
}

impl Default for LoadSpec {
    fn default() -> Self {
        Self {
            rate: 4.0,
            duration: Duration::from_secs(10),
            parallelism: 8,
            seed: 1,
            drop_probability: 0.0,
            read_timeout: Duration::from_secs(120),
        }
    }
}

impl LoadSpec {
    pub fn session_count(&self) -> u64 {
        (self.rate * self.duration.as_secs_f64()).round().max(1.0) as u64
    }

    fn params(&self) -> BTreeMap<String, serde_json::Value> {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_object().cloned())
            .map(|m| m.into_iter().collect())
            .unwrap_or_default()
    }
}

/// Error label for reports: the server's code, or a client-side category.
pub fn error_kind(e: &ClientError) -> String {
    match e {
        ClientError::Refused(s) | ClientError::Fatal(s) => s.code.as_str().to_owned(),
        ClientError::Connect { .. } => "CONNECT".into(),
        ClientError::Closed(_) => "CLOSED".into(),
        ClientError::Protocol(_) => "PROTOCOL".into(),
        ClientError::Codec(_) => "TRANSPORT".into(),
        ClientError::Timeout => "CLIENT_TIMEOUT".into(),
        ClientError::Script(_) => "SCRIPT".into(),
    }
}

/// Starts `spec.session_count()` sessions at `spec.rate` per second, never
/// more than `spec.parallelism` at once, and merges their recorders.
pub async fn open_loop<F, Fut>(spec: &LoadSpec, session: F) -> (Recorder, Duration)
where
    F: Fn(u64, ChaCha8Rng) -> Fut,
    Fut: Future<Output = Recorder> + Send + 'static,
{
    let gate = Arc::new(Semaphore::new(spec.parallelism.max(1)));
    let interval = Duration::from_secs_f64(1.0 / spec.rate.max(1e-3));
    let started = Instant::now();
    let mut tasks = tokio::task::JoinSet::new();
    for i in 0..spec.session_count() {
        tokio::time::sleep_until((started + interval.mul_f64(i as f64)).into()).await;
        let permit = gate
            .clone()
            .acquire_owned()
            .await
            .expect("semaphore never closes");
        let rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i));
        let fut = session(i, rng);
        tasks.spawn(async move {
            let rec = fut.await;
            drop(permit);
            rec
        });
    }
    let mut total = Recorder::default();
    while let Some(r) = tasks.join_next().await {
        match r {
            Ok(rec) => total.merge(rec),
            Err(e) => {
                total.sessions += 1;
                total.error(format!("PANIC: {e}"));
            }
        }
    }
    (total, started.elapsed())
}

/// Connects, timing the acquire phase. Failures are recorded.
pub async fn connect(
    target: &Target,
    read_timeout: Duration,
    rec: &mut Recorder,
) -> Option<Session> {
    rec.sessions += 1;
    let t0 = Instant::now();
    match Session::connect(&target.endpoint, &target.repo_id, &target.token).await {
        Ok(mut s) => {
            rec.sample("acquire", t0.elapsed());
            s.set_read_timeout(Some(read_timeout));
            Some(s)
        }
        Err(e) => {
            rec.error(error_kind(&e));
            None
        }
    }
}

/// Runs one command, timing it. Failures end the session.
pub async fn run(s: &mut Session, cmd: Command, rec: &mut Recorder) -> Result<CommandResult, ()> {
    let t0 = Instant::now();
    match s.run(cmd).await {
        Ok(r) => {
            rec.sample("command", t0.elapsed());
            Ok(r)
        }
        Err(e) => {
            rec.error(error_kind(&e));
            Err(())
        }
    }
}

/// Like `run`, but a non-zero exit is also a failure.
pub async fn run_ok(
    s: &mut Session,
    cmd: Command,
    rec: &mut Recorder,
) -> Result<CommandResult, ()> {
    let alias = cmd.alias.clone();
    let r = run(s, cmd, rec).await?;
    if r.exit_code != 0 {
        rec.error(format!("EXIT:{alias}"));
        rec.mismatch(format!(
            "{alias} exited {}: {}",
            r.exit_code,
            r.stderr_lossy().trim()
        ));
        return Err(());
    }
    Ok(r)
}

pub async fn finish(s: Session, rec: &mut Recorder) -> bool {
    match s.close().await {
        Ok(_) => true,
        Err(e) => {
            rec.error(error_kind(&e));
            false
        }
    }
}

fn trim(out: &[u8]) -> String {
    String::from_utf8_lossy(out).trim_end().to_owned()
}

async fn oracle<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, FixtureError> + Send + 'static,
) -> Result<T, FixtureError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(FixtureError::Spec(format!("oracle task failed: {e}"))))
}

/// Drops the connection after submitting a command, without closing.
async fn vanish(mut s: Session, rec: &mut Recorder) {
    let _ = s
        .submit(Command::git("abandoned", ["log", "--oneline", "-n", "50"]))
        .await;
    drop(s);
    rec.error("DROPPED_BY_CLIENT");
}

fn refspec(branch: &str) -> String {
    format!("+refs/heads/{branch}:refs/remotes/upstream/{branch}")
}

/// Two branches to compare: the first two extra branches, or `main` and
/// the first extra branch.
fn branch_pair(f: &Fixture) -> (String, String) {
    let b: Vec<&str> = f
        .spec
        .branch_specs
        .iter()
        .map(|b| b.name.as_str())
        .collect();
    match b.as_slice() {
        [] => ("main".into(), "main".into()),
        [one] => ("main".into(), (*one).into()),
        [a, bb, ..] => ((*a).into(), (*bb).into()),
    }
}

/// Fetch base and head from upstream and push them to per-session audit refs.
pub async fn compliance_audit(
    target: &Target,
    fixture: Arc<Fixture>,
    spec: &LoadSpec,
    tag: &str,
) -> BenchReport {
    let (base, head) = {
        let (a, b) = branch_pair(&fixture);
        ("main".to_owned(), if b == "main" { a } else { b })
    };
    let (rec, wall) = open_loop(spec, |i, mut rng| {
        let target = target.clone();
        let fixture = fixture.clone();
        let (base, head, tag) = (base.clone(), head.clone(), tag.to_owned());
        let (timeout, drop_p) = (spec.read_timeout, spec.drop_probability);
        async move {
            let mut rec = Recorder::default();
            let t0 = Instant::now();
            let Some(mut s) = connect(&target, timeout, &mut rec).await else {
                return rec;
            };
            if rng.random_bool(drop_p) {
                vanish(s, &mut rec).await;
                return rec;
            }
            let base_ref = format!("refs/audit/{tag}/{i}/base");
            let head_ref = format!("refs/audit/{tag}/{i}/head");
            let steps = [
                Command::git(
                    "fetch",
                    [
                        "fetch",
                        "--quiet",
                        "upstream",
                        &refspec(&base),
                        &refspec(&head),
                    ],
                ),
                Command::git(
                    "push",
                    [
                        "push".to_owned(),
                        "--quiet".to_owned(),
                        "upstream".to_owned(),
                        format!("refs/remotes/upstream/{base}:{base_ref}"),
                        format!("refs/remotes/upstream/{head}:{head_ref}"),
                    ],
                ),
            ];
            for cmd in steps {
                if run_ok(&mut s, cmd, &mut rec).await.is_err() {
                    return rec;
                }
            }
            if !finish(s, &mut rec).await {
                return rec;
            }
            rec.sample("end_to_end", t0.elapsed());
            let check = oracle(move || {
                Ok([
                    (fixture.rev_parse(&base_ref)?, fixture.rev_parse(&base)?),
                    (fixture.rev_parse(&head_ref)?, fixture.rev_parse(&head)?),
                ])
            })
            .await;
            match check {
                Ok(pairs) if pairs.iter().all(|(a, b)| a == b) => {
                    rec.verified += 1;
                    rec.succeeded += 1;
                }
                Ok(pairs) => rec.mismatch(format!("session {i}: audit refs {pairs:?}")),
                Err(e) => rec.mismatch(format!("session {i}: {e}")),
            }
            rec
        }
    })
    .await;
    BenchReport::build("compliance_audit", spec.params(), rec, wall)
}

/// The base-change chain: fetch, merge-base, rev-parse, push. The published
/// ref must equal the merge base computed directly on the fixture.
pub async fn base_change(
    target: &Target,
    fixture: Arc<Fixture>,
    spec: &LoadSpec,
    tag: &str,
) -> BenchReport {
    let (a, b) = branch_pair(&fixture);
    let (rec, wall) = open_loop(spec, |i, mut rng| {
        let target = target.clone();
        let fixture = fixture.clone();
        let (a, b, tag) = (a.clone(), b.clone(), tag.to_owned());
        let (timeout, drop_p) = (spec.read_timeout, spec.drop_probability);
        async move {
            let mut rec = Recorder::default();
            let t0 = Instant::now();
            let Some(mut s) = connect(&target, timeout, &mut rec).await else {
                return rec;
            };
            if rng.random_bool(drop_p) {
                vanish(s, &mut rec).await;
                return rec;
            }
            let dest = format!("refs/bases/{tag}/{i}");
            let Ok(published) = chain(&mut s, &a, &b, &dest, &mut rec).await else {
                return rec;
            };
            if !finish(s, &mut rec).await {
                return rec;
            }
            rec.sample("end_to_end", t0.elapsed());
            let published_ref = dest.clone();
            let check = oracle(move || {
                Ok((
                    fixture.merge_base(&a, &b)?,
                    fixture.rev_parse(&published_ref)?,
                ))
            })
            .await;
            match check {
                Ok((want, got)) if want == got && got == published => {
                    rec.verified += 1;
                    rec.succeeded += 1;
                }
                Ok((want, got)) => rec.mismatch(format!(
                    "session {i}: {dest} = {got}, chain saw {published}, merge-base {want}"
                )),
                Err(e) => rec.mismatch(format!("session {i}: {e}")),
            }
            rec
        }
    })
    .await;
    BenchReport::build("base_change", spec.params(), rec, wall)
}

/// Runs the four-command chain in an open session and returns the commit it
/// published to `dest` on upstream.
pub async fn chain(
    s: &mut Session,
    a: &str,
    b: &str,
    dest: &str,
    rec: &mut Recorder,
) -> Result<String, ()> {
    run_ok(
        s,
        Command::git(
            "fetch",
            ["fetch", "--quiet", "upstream", &refspec(a), &refspec(b)],
        ),
        rec,
    )
    .await?;
    let mb = run_ok(
        s,
        Command::git(
            "merge-base",
            [
                "merge-base".to_owned(),
                format!("refs/remotes/upstream/{a}"),
                format!("refs/remotes/upstream/{b}"),
            ],
        ),
        rec,
    )
    .await?;
    let mb = trim(&mb.stdout);
    let rev = run_ok(
        s,
        Command::git(
            "rev-parse",
            [
                "rev-parse".to_owned(),
                "--verify".to_owned(),
                format!("{mb}^{{commit}}"),
            ],
        ),
        rec,
    )
    .await?;
    let sha = trim(&rev.stdout);
    run_ok(
        s,
        Command::git(
            "push",
            [
                "push".to_owned(),
                "--quiet".to_owned(),
                "upstream".to_owned(),
                format!("{sha}:{dest}"),
            ],
        ),
        rec,
    )
    .await?;
    Ok(sha)
}

/// Lists the tree and reads a sample of ownership files, comparing both
/// byte-for-byte with the fixture at the same commit.
pub async fn readonly_scan(
    target: &Target,
    fixture: Arc<Fixture>,
    spec: &LoadSpec,
    sample: usize,
) -> BenchReport {
    let owners = Arc::new(fixture.owners_files().unwrap_or_default());
    let (rec, wall) = open_loop(spec, |i, mut rng| {
        let target = target.clone();
        let fixture = fixture.clone();
        let owners = owners.clone();
        let (timeout, drop_p) = (spec.read_timeout, spec.drop_probability);
        async move {
            let mut rec = Recorder::default();
            let t0 = Instant::now();
            let Some(mut s) = connect(&target, timeout, &mut rec).await else {
                return rec;
            };
            if rng.random_bool(drop_p) {
                vanish(s, &mut rec).await;
                return rec;
            }
            let Ok(head) = run_ok(
                &mut s,
                Command::git("head", ["rev-parse", "HEAD"]),
                &mut rec,
            )
            .await
            else {
                return rec;
            };
            let head = trim(&head.stdout);
            let Ok(listing) = run_ok(
                &mut s,
                Command::git("list", ["ls-tree", "-r", "--name-only", &head]),
                &mut rec,
            )
            .await
            else {
                return rec;
            };
            let mut batch = String::new();
            for _ in 0..sample.min(owners.len()) {
                batch.push_str(&format!(
                    "{head}:{}\n",
                    owners[rng.random_range(0..owners.len())]
                ));
            }
            let Ok(read) = run_ok(
                &mut s,
                Command::git("read", ["cat-file", "--batch"]).with_stdin(batch.clone()),
                &mut rec,
            )
            .await
            else {
                return rec;
            };
            if !finish(s, &mut rec).await {
                return rec;
            }
            rec.sample("end_to_end", t0.elapsed());
            let check = oracle(move || {
                let list = fixture.git(&["ls-tree", "-r", "--name-only", &head])?;
                let read = crate::fixture::git_with_stdin(
                    &fixture.path,
                    &["cat-file", "--batch"],
                    batch.as_bytes(),
                )?;
                Ok((list, read))
            })
            .await;
            match check {
                Ok((list, want)) if list == listing.stdout && want == read.stdout => {
                    rec.verified += 1;
                    rec.succeeded += 1;
                }
                Ok(_) => rec.mismatch(format!("session {i}: scan output differs from fixture")),
                Err(e) => rec.mismatch(format!("session {i}: {e}")),
            }
            rec
        }
    })
    .await;
    let mut params = spec.params();
    params.insert("sample".into(), sample.into());
    BenchReport::build("readonly_scan", params, rec, wall)
}

/// Acquire latency, one session at a time. With `pace`, each trial starts
/// only once the cluster is at rest, so a trial never competes with the
/// previous session's recycle.
pub async fn bench_acquire(
    cluster: &crate::cluster::Cluster,
    target: &Target,
    expected_head: &str,
    trials: u64,
    pace: bool,
) -> BenchReport {
    let mut rec = Recorder::default();
    let started = Instant::now();
    for i in 0..trials {
        if pace && !cluster.wait_quiescent(Duration::from_secs(300)).await {
            rec.error("NOT_QUIESCENT");
        }
        let t0 = Instant::now();
        let Some(mut s) = connect(target, Duration::from_secs(300), &mut rec).await else {
            continue;
        };
        let Ok(head) = run_ok(
            &mut s,
            Command::git("head", ["rev-parse", "HEAD"]),
            &mut rec,
        )
        .await
        else {
            continue;
        };
        if !finish(s, &mut rec).await {
            continue;
        }
        rec.sample("end_to_end", t0.elapsed());
        if trim(&head.stdout) == expected_head {
            rec.verified += 1;
            rec.succeeded += 1;
        } else {
            rec.mismatch(format!("trial {i}: HEAD {}", trim(&head.stdout)));
        }
    }
    let mode = format!("{:?}", cluster.spec().pool_mode).to_lowercase();
    let params = [
        ("trials".to_owned(), serde_json::Value::from(trials)),
        ("pool_size".to_owned(), cluster.spec().pool_size.into()),
        ("pool_mode".to_owned(), mode.clone().into()),
        ("paced".to_owned(), pace.into()),
    ]
    .into_iter()
    .collect();
    BenchReport::build(&format!("acquire_{mode}"), params, rec, started.elapsed())
}
