//! Benchmark reports.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::stats::Summary;

/// Latency phases every report carries, in this order.
pub const PHASES: [&str; 3] = ["acquire", "command", "end_to_end"];

/// One worker's measurements. Workers record into their own buffer and the
/// buffers are merged when the run ends.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    pub samples: BTreeMap<&'static str, Vec<f64>>,
    pub errors: BTreeMap<String, u64>,
    pub sessions: u64,
    pub succeeded: u64,
    pub verified: u64,
    pub mismatches: Vec<String>,
}

impl Recorder {
    pub fn sample(&mut self, phase: &'static str, d: Duration) {
        self.samples
            .entry(phase)
            .or_default()
            .push(d.as_secs_f64() * 1000.0);
    }

    pub fn error(&mut self, kind: impl Into<String>) {
        *self.errors.entry(kind.into()).or_default() += 1;
    }

    pub fn mismatch(&mut self, what: impl Into<String>) {
        self.mismatches.push(what.into());
    }

    pub fn merge(&mut self, other: Recorder) {
        for (phase, s) in other.samples {
            self.samples.entry(phase).or_default().extend(s);
        }
        for (k, n) in other.errors {
            *self.errors.entry(k).or_default() += n;
        }
        self.sessions += other.sessions;
        self.succeeded += other.succeeded;
        self.verified += other.verified;
        self.mismatches.extend(other.mismatches);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub params: BTreeMap<String, serde_json::Value>,
    /// Summaries keyed by phase, computed from `samples_ms`.
    pub phases: BTreeMap<String, Summary>,
    pub samples_ms: BTreeMap<String, Vec<f64>>,
    pub sessions: u64,
    pub succeeded: u64,
    pub throughput_per_s: f64,
    pub errors: BTreeMap<String, u64>,
    /// Outputs checked against a direct git oracle.
    pub verified: u64,
    pub mismatches: Vec<String>,
    pub wall_time_s: f64,
}

impl BenchReport {
    pub fn build(
        scenario: &str,
        params: BTreeMap<String, serde_json::Value>,
        rec: Recorder,
        wall: Duration,
    ) -> Self {
        let mut samples_ms: BTreeMap<String, Vec<f64>> =
            PHASES.iter().map(|p| (p.to_string(), Vec::new())).collect();
        for (phase, s) in rec.samples {
            samples_ms.entry(phase.to_owned()).or_default().extend(s);
        }
        let phases = samples_ms
            .iter()
            .map(|(k, v)| (k.clone(), Summary::of(v)))
            .collect();
        let wall_time_s = wall.as_secs_f64();
        Self {
            scenario: scenario.to_owned(),
            params,
            phases,
            samples_ms,
            sessions: rec.sessions,
            succeeded: rec.succeeded,
            throughput_per_s: if wall_time_s > 0.0 {
                rec.succeeded as f64 / wall_time_s
            } else {
                0.0
            },
            errors: rec.errors,
            verified: rec.verified,
            mismatches: rec.mismatches,
            wall_time_s,
        }
    }

    pub fn phase(&self, name: &str) -> Summary {
        self.phases.get(name).cloned().unwrap_or_default()
    }

    pub fn error_count(&self) -> u64 {
        self.errors.values().sum()
    }

    /// Human-readable one-screen summary.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{}: {} sessions, {} ok, {:.2}/s over {:.1}s, verified {}, mismatches {}\n",
            self.scenario,
            self.sessions,
            self.succeeded,
            self.throughput_per_s,
            self.wall_time_s,
            self.verified,
            self.mismatches.len()
        );
        for (phase, s) in &self.phases {
            if s.count > 0 {
                out.push_str(&format!(
                    "  {phase:<11} n={:<6} p50={:.1}ms p95={:.1}ms max={:.1}ms\n",
                    s.count, s.p50_ms, s.p95_ms, s.max_ms
                ));
            }
        }
        for (kind, n) in &self.errors {
            out.push_str(&format!("  error {kind}: {n}\n"));
        }
        out
    }
}
