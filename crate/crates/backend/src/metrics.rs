//! Plain-text counters and histograms served on `/metrics`.

use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

/// Upper bucket bounds in milliseconds; an implicit `+Inf` bucket follows.
pub const LATENCY_BUCKETS_MS: &[u64] =
    &[1, 2, 5, 10, 25, 50, 100, 250, 500, 1000, 2500, 5000, 10000];

#[derive(Debug)]
pub struct Histogram {
    buckets: Vec<AtomicU64>,
    count: AtomicU64,
    sum_us: AtomicU64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            buckets: (0..=LATENCY_BUCKETS_MS.len())
                .map(|_| AtomicU64::new(0))
                .collect(),
            count: AtomicU64::new(0),
            sum_us: AtomicU64::new(0),
        }
    }
}

impl Histogram {
    pub fn observe(&self, d: Duration) {
        let ms = d.as_secs_f64() * 1000.0;
        let idx = LATENCY_BUCKETS_MS
            .iter()
            .position(|&b| ms <= b as f64)
            .unwrap_or(LATENCY_BUCKETS_MS.len());
        self.buckets[idx].fetch_add(1, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
        self.sum_us
            .fetch_add(d.as_micros() as u64, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    /// Cumulative counts per bucket, ending with the `+Inf` bucket.
    pub fn cumulative(&self) -> Vec<u64> {
        let mut total = 0;
        self.buckets
            .iter()
            .map(|b| {
                total += b.load(Ordering::Relaxed);
                total
            })
            .collect()
    }

    fn render(&self, name: &str, out: &mut String) {
        let cumulative = self.cumulative();
        for (bound, n) in LATENCY_BUCKETS_MS.iter().zip(&cumulative) {
            let _ = writeln!(out, "{name}_bucket{{le=\"{bound}\"}} {n}");
        }
        let _ = writeln!(
            out,
            "{name}_bucket{{le=\"+Inf\"}} {}",
            cumulative.last().copied().unwrap_or(0)
        );
        let _ = writeln!(out, "{name}_count {}", self.count());
        let _ = writeln!(
            out,
            "{name}_sum_ms {:.3}",
            self.sum_us.load(Ordering::Relaxed) as f64 / 1000.0
        );
    }
}

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Metrics {
            $(pub $name: AtomicU64,)*
            pub acquire_latency: Histogram,
        }

        impl Metrics {
            fn render_counters(&self, out: &mut String) {
                $(let _ = writeln!(out, "gitfarm_{} {}", stringify!($name), self.$name.load(Ordering::Relaxed));)*
            }

            /// Counter values by name, for tests and the harness.
            pub fn snapshot(&self) -> std::collections::BTreeMap<&'static str, u64> {
                [$((stringify!($name), self.$name.load(Ordering::Relaxed)),)*].into_iter().collect()
            }
        }
    };
}

counters!(
    sessions_started,
    sessions_closed,
    sessions_aborted,
    sessions_failed,
    sessions_rejected,
    commands_executed,
    commands_timed_out,
    spawn_failures,
    acquire_no_capacity,
    double_allocations,
    state_violations,
    refreshes,
    rebuilds,
    materialize_failures,
    scrubs,
    heartbeats_sent,
    heartbeat_failures,
    lease_releases,
);

impl Metrics {
    pub fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    /// Renders counters, the acquire histogram and caller-supplied gauges.
    pub fn render(&self, gauges: &[(String, f64)]) -> String {
        let mut out = String::new();
        self.render_counters(&mut out);
        self.acquire_latency
            .render("gitfarm_acquire_latency_ms", &mut out);
        for (name, value) in gauges {
            let _ = writeln!(out, "{name} {value}");
        }
        out
    }
}
