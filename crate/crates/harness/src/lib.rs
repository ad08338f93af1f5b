//! Benchmark and fault-injection harness.
//!
//! Builds deterministic upstream repositories, serves them over `git://`,
//! runs an in-process gateway plus backend nodes against them, and drives
//! session workloads whose outputs are checked against direct git before
//! their latencies are reported.

pub mod cluster;
pub mod daemon;
pub mod faults;
pub mod fixture;
pub mod fuzz;
pub mod report;
pub mod stats;
pub mod workload;

pub use cluster::{Cluster, ClusterSpec, Conservation, FaultyStore, RepoSource};
pub use daemon::GitDaemon;
pub use faults::{inject_fault, FaultKind, FaultReport};
pub use fixture::{BranchSpec, Fixture, FixtureError, FixtureRepoSpec};
pub use report::{BenchReport, Recorder};
pub use stats::{percentile, Summary};
pub use workload::{LoadSpec, Target};

/// A scratch directory, on tmpfs when the host has one. Checkout
/// materialization is dominated by small-file creation, which a slow disk
/// can stretch by an order of magnitude.
pub fn scratch_dir(prefix: &str) -> std::io::Result<tempfile::TempDir> {
    let shm = std::path::Path::new("/dev/shm");
    let mut b = tempfile::Builder::new();
    b.prefix(prefix);
    if shm.is_dir() {
        if let Ok(d) = b.tempdir_in(shm) {
            return Ok(d);
        }
    }
    b.tempdir()
}
