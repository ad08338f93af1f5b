use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::sync::Arc;

use gitfarm_backend::{BackendConfig, BackendHandle, Limits, PoolMode, RepositoryConfig};
use gitfarm_client::{exit, run_script, Session, SessionScript, Step};
use gitfarm_gateway::{ClientPolicy, GatewayConfig, GatewayHandle};
use gitfarm_protocol::{Allowlist, Command};
use gitfarm_statestore::{MemoryStore, StateStore, StoreConfig};

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Proc::new("git")
        .current_dir(dir)
        .args(args)
        .env("GIT_AUTHOR_NAME", "F")
        .env("GIT_AUTHOR_EMAIL", "f@example.com")
        .env("GIT_COMMITTER_NAME", "F")
        .env("GIT_COMMITTER_EMAIL", "f@example.com")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Stack {
    dir: tempfile::TempDir,
    bare: PathBuf,
    work: PathBuf,
    fork: String,
    _backend: BackendHandle,
    gateway: GatewayHandle,
}

impl Stack {
    fn endpoint(&self) -> String {
        self.gateway.addr().to_string()
    }
}

async fn stack(pool: u32) -> Stack {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let bare = dir.path().join("up.git");
    std::fs::create_dir_all(&work).unwrap();
    git(
        dir.path(),
        &["init", "-q", "--bare", "-b", "main", bare.to_str().unwrap()],
    );
    git(&work, &["init", "-q", "-b", "main"]);
    std::fs::write(work.join("OWNERS"), "alice\nbob\n").unwrap();
    git(&work, &["add", "."]);
    git(&work, &["commit", "-qm", "init"]);
    let fork = git(&work, &["rev-parse", "HEAD"]).trim().to_owned();
    for br in ["br-a", "br-b"] {
        git(&work, &["checkout", "-qb", br, &fork]);
        std::fs::write(work.join(br), br).unwrap();
        git(&work, &["add", "."]);
        git(&work, &["commit", "-qm", br]);
    }
    git(&work, &["checkout", "-q", "main"]);
    git(
        &work,
        &["push", "-q", bare.to_str().unwrap(), "main", "br-a", "br-b"],
    );

    let store: Arc<dyn StateStore> = Arc::new(MemoryStore::new(StoreConfig::default()));
    let backend = gitfarm_backend::start(
        BackendConfig {
            version: 1,
            node_id: "n1".into(),
            cluster_id: "shared".into(),
            listen: "127.0.0.1:0".parse().unwrap(),
            http_listen: None,
            advertise: None,
            statestore: "memory".into(),
            data_dir: dir.path().join("node"),
            gateway_secret: "k".into(),
            sandbox_pool_size: pool,
            allowlist: Allowlist::new(["git", "sh"]),
            exec_path: "/usr/local/bin:/usr/bin:/bin".into(),
            repos: vec![
                RepositoryConfig::new("go-mono", bare.to_str().unwrap(), pool),
                RepositoryConfig::new("ios-mono", bare.to_str().unwrap(), 1),
            ],
            pool_mode: PoolMode::Warm,
            limits: Limits::default(),
        },
        store.clone(),
    )
    .await
    .unwrap();
    let gateway = gitfarm_gateway::start(
        GatewayConfig {
            version: 1,
            listen: "127.0.0.1:0".parse().unwrap(),
            http_listen: None,
            statestore: "memory".into(),
            gateway_secret: "k".into(),
            clusters: ["shared".to_string()].into(),
            repos: ["go-mono".to_string(), "ios-mono".to_string()].into(),
            clients: vec![ClientPolicy {
                client_id: "audit-bot".into(),
                display_name: "Audit Bot".into(),
                token: "tok-audit".into(),
                cluster_id: "shared".into(),
                allowed_repos: ["go-mono".to_string()].into(),
            }],
            timeouts: Default::default(),
        },
        store,
    )
    .await
    .unwrap();
    Stack {
        dir,
        bare,
        work,
        fork,
        _backend: backend,
        gateway,
    }
}

/// Runs the `gitfarm` binary off the async runtime.
async fn cli(args: Vec<String>) -> std::process::Output {
    tokio::task::spawn_blocking(move || {
        Proc::new(env!("CARGO_BIN_EXE_gitfarm"))
            .args(&args)
            .env_remove("GITFARM_TOKEN")
            .env_remove("GITFARM_ENDPOINT")
            .output()
            .unwrap()
    })
    .await
    .unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn merge_base_chain_publishes_ref() {
    let s = stack(2).await;
    let script = SessionScript {
        repo_id: "go-mono".into(),
        steps: vec![
            Step::git("fetch", ["fetch", "--quiet", "upstream"]),
            Step::git("mb", ["merge-base", "upstream/br-a", "upstream/br-b"]),
            Step::git(
                "push",
                ["push", "--quiet", "upstream", "${mb.stdout}:refs/bases/X"],
            ),
        ],
    };
    let report = run_script(&script, &s.endpoint(), "tok-audit", None).await;
    assert_eq!(report.exit_code, 0, "{}", report.render_text());
    let aliases: Vec<_> = report.steps.iter().map(|r| r.alias.as_str()).collect();
    assert_eq!(aliases, ["fetch", "mb", "push"]);
    assert_eq!(
        report.steps[2].arguments[3],
        format!("{}:refs/bases/X", s.fork)
    );
    assert_eq!(git(&s.bare, &["rev-parse", "refs/bases/X"]).trim(), s.fork);
}

#[tokio::test(flavor = "multi_thread")]
async fn script_file_via_cli() {
    let s = stack(1).await;
    let file = s.dir.path().join("s.toml");
    std::fs::write(
        &file,
        "repo_id = \"go-mono\"\n[[steps]]\nalias = \"v\"\narguments = [\"--version\"]\n",
    )
    .unwrap();
    let out = cli(strings(&[
        "--endpoint",
        &s.endpoint(),
        "--token",
        "tok-audit",
        "--json",
        "script",
        "--file",
        file.to_str().unwrap(),
    ]))
    .await;
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["steps"].as_array().unwrap().len(), 1);
    assert!(v["steps"][0]["stdout"]
        .as_str()
        .unwrap()
        .starts_with("git version"));
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_reference_fails_before_connecting() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.toml");
    std::fs::write(
        &file,
        "repo_id = \"go-mono\"\n[[steps]]\nalias = \"p\"\narguments = [\"push\", \"${nope.stdout}\"]\n",
    )
    .unwrap();
    // Nothing listens on port 1; reaching it would exit 6, not 2.
    let out = cli(strings(&[
        "--endpoint",
        "127.0.0.1:1",
        "--token",
        "t",
        "script",
        "--file",
        file.to_str().unwrap(),
    ]))
    .await;
    assert_eq!(out.status.code(), Some(exit::VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[tokio::test(flavor = "multi_thread")]
async fn exec_prints_stdout_verbatim() {
    let s = stack(1).await;
    let out = cli(strings(&[
        "--endpoint",
        &s.endpoint(),
        "--token",
        "tok-audit",
        "exec",
        "--repo",
        "go-mono",
        "--",
        "show",
        "HEAD:OWNERS",
    ]))
    .await;
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(out.stdout, std::fs::read(s.work.join("OWNERS")).unwrap());

    let out = cli(strings(&[
        "--endpoint",
        &s.endpoint(),
        "--token",
        "tok-audit",
        "exec",
        "--repo",
        "go-mono",
        "--",
        "show",
        "HEAD:missing",
    ]))
    .await;
    assert_eq!(out.status.code(), Some(exit::COMMAND_FAILED));
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_map_to_exit_codes() {
    let s = stack(1).await;
    let ep = s.endpoint();
    let exec = |token: &str, repo: &str| {
        strings(&[
            "--endpoint",
            &ep,
            "--token",
            token,
            "exec",
            "--repo",
            repo,
            "--",
            "status",
        ])
    };
    assert_eq!(
        cli(exec("tok-bad", "go-mono")).await.status.code(),
        Some(exit::UNAUTHENTICATED)
    );
    assert_eq!(
        cli(exec("tok-audit", "ios-mono")).await.status.code(),
        Some(exit::DENIED)
    );
    assert_eq!(
        cli(exec("tok-audit", "nothing")).await.status.code(),
        Some(exit::DENIED)
    );

    let held = Session::connect(&ep, "go-mono", "tok-audit").await.unwrap();
    let out = cli(exec("tok-audit", "go-mono")).await;
    assert_eq!(out.status.code(), Some(exit::CAPACITY));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RESOURCE_EXHAUSTED"));
    held.close().await.unwrap();

    let out = cli(strings(&[
        "--endpoint",
        "127.0.0.1:1",
        "--token",
        "t",
        "exec",
        "--repo",
        "r",
        "--",
        "status",
    ]))
    .await;
    assert_eq!(out.status.code(), Some(exit::SESSION_FATAL));
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_step_blocks_dependents() {
    let s = stack(1).await;
    let mut tolerated = Step::git(
        "missing",
        ["rev-parse", "--verify", "-q", "refs/heads/nope"],
    );
    tolerated.allow_fail = true;
    let script = SessionScript {
        repo_id: "go-mono".into(),
        steps: vec![
            tolerated,
            Step::git(
                "echo",
                ["log", "-1", "--format=format:[${missing.stdout}]%n"],
            ),
            Step::git("bad", ["rev-parse", "--verify", "-q", "refs/heads/nope"]),
            Step::git("independent", ["rev-parse", "HEAD"]),
            Step::git("dependent", ["log", "${bad.stdout}"]),
            Step::git("never", ["status"]),
        ],
    };
    let report = run_script(&script, &s.endpoint(), "tok-audit", None).await;
    assert_eq!(report.exit_code, exit::COMMAND_FAILED);
    let ran: Vec<_> = report.steps.iter().map(|r| r.alias.as_str()).collect();
    assert_eq!(ran, ["missing", "echo", "bad", "independent"]);
    assert_eq!(report.steps[1].stdout, "[]\n", "{}", report.render_text());
    assert!(report.error.unwrap().message.contains("`bad`"));
}

#[tokio::test(flavor = "multi_thread")]
async fn sdk_pipelines_in_order() {
    let s = stack(1).await;
    let mut session = Session::connect(&s.endpoint(), "go-mono", "tok-audit")
        .await
        .unwrap();
    assert_eq!(session.node_id(), "n1");
    for i in 0..20 {
        session
            .submit(Command::new(format!("c{i}"), "sh").with_args(["-c", &format!("echo {i}")]))
            .await
            .unwrap();
    }
    let mut got = Vec::new();
    for _ in 0..10 {
        got.push(session.next_result().await.unwrap());
    }
    got.extend(session.close().await.unwrap());
    let aliases: Vec<_> = got.iter().map(|r| r.alias.clone()).collect();
    let expected: Vec<_> = (0..20).map(|i| format!("c{i}")).collect();
    assert_eq!(aliases, expected);
    for (i, r) in got.iter().enumerate() {
        assert_eq!(r.stdout_lossy(), format!("{i}\n"));
    }
}
