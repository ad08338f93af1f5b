use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use gitfarm_backend::PoolMode;
use gitfarm_harness::cluster::{self, Cluster, ClusterSpec, RepoSource};
use gitfarm_harness::{
    fuzz, workload, BranchSpec, FaultKind, Fixture, FixtureRepoSpec, GitDaemon, LoadSpec, Target,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    Acquire,
    ComplianceAudit,
    BaseChange,
    ReadonlyScan,
    Fault,
    Fuzz,
}

/// Runs a benchmark scenario against an in-process deployment.
#[derive(Debug, Parser)]
#[command(name = "gitfarm-bench", version)]
struct Args {
    scenario: Scenario,
    /// Session starts per second.
    #[arg(long, default_value_t = 2.0)]
    rate: f64,
    /// Seconds of load.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    parallelism: usize,
    #[arg(long, default_value_t = 0.0)]
    drop_probability: f64,
    #[arg(long, default_value_t = 5_000)]
    files: usize,
    #[arg(long, default_value_t = 500)]
    commits: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    pool_size: u32,
    /// Acquire trials.
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Materialize checkouts on demand instead of keeping a warm pool.
    #[arg(long)]
    cold: bool,
    /// Fault to inject for the `fault` scenario.
    #[arg(long, default_value = "KILL_BACKEND")]
    fault: FaultKind,
    /// Frames for the `fuzz` scenario.
    #[arg(long, default_value_t = 100_000)]
    frames: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let json = run(&args).await?;
    let text = serde_json::to_string_pretty(&json)?;
    match &args.out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

async fn run(args: &Args) -> anyhow::Result<serde_json::Value> {
    if let Scenario::Fuzz = args.scenario {
        return Ok(serde_json::json!({
            "scenario": "codec_fuzz",
            "frames": fuzz::fuzz_frames(args.frames, args.seed),
            "round_trips": fuzz::round_trips(args.frames / 10, args.seed),
        }));
    }
    let dir = gitfarm_harness::scratch_dir("gitfarm-bench-")?;
    let upstream_dir = dir.path().join("upstream");
    let fork = args.commits.saturating_sub(1) / 2;
    let spec = FixtureRepoSpec {
        name: "mono".into(),
        file_count: args.files,
        directory_depth: args.depth,
        commit_count: args.commits,
        branch_specs: vec![
            BranchSpec {
                name: "br-a".into(),
                fork_at: fork,
                commits: 3,
            },
            BranchSpec {
                name: "br-b".into(),
                fork_at: fork,
                commits: 4,
            },
        ],
        seed: args.seed,
    };
    eprintln!(
        "generating fixture ({} files, {} commits)",
        args.files, args.commits
    );
    let fixture = Arc::new(Fixture::generate(&spec, &upstream_dir)?);
    let daemon = GitDaemon::start(&upstream_dir)?;
    let repos = vec![RepoSource {
        repo_id: "mono".into(),
        url: daemon.url("mono"),
    }];
    let mut cluster = Cluster::start(
        ClusterSpec {
            nodes: args.nodes,
            pool_size: args.pool_size,
            sandboxes: args.pool_size,
            pool_mode: if args.cold {
                PoolMode::Cold
            } else {
                PoolMode::Warm
            },
            ..ClusterSpec::default()
        },
        &dir.path().join("nodes"),
        repos,
        Some(daemon),
    )
    .await?;
    let target = Target {
        endpoint: cluster.endpoint(),
        token: cluster::TOKEN.into(),
        repo_id: "mono".into(),
    };
    let load = LoadSpec {
        rate: args.rate,
        duration: Duration::from_secs_f64(args.duration),
        parallelism: args.parallelism,
        seed: args.seed,
        drop_probability: args.drop_probability,
        ..LoadSpec::default()
    };
    let tag = format!("bench-{}", std::process::id());
    let value = match args.scenario {
        Scenario::Acquire => {
            let head = fixture.rev_parse("main")?;
            serde_json::to_value(
                workload::bench_acquire(&cluster, &target, &head, args.trials, true).await,
            )?
        }
        Scenario::ComplianceAudit => {
            serde_json::to_value(workload::compliance_audit(&target, fixture, &load, &tag).await)?
        }
        Scenario::BaseChange => {
            serde_json::to_value(workload::base_change(&target, fixture, &load, &tag).await)?
        }
        Scenario::ReadonlyScan => {
            serde_json::to_value(workload::readonly_scan(&target, fixture, &load, 16).await)?
        }
        Scenario::Fault => serde_json::to_value(
            gitfarm_harness::inject_fault(&mut cluster, args.fault, &target).await,
        )?,
        Scenario::Fuzz => unreachable!("handled above"),
    };
    cluster.shutdown().await;
    Ok(value)
}
