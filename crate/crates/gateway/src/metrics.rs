use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Metrics {
            $(pub $name: AtomicU64,)*
        }

        impl Metrics {
            pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
                [$((stringify!($name), self.$name.load(Ordering::Relaxed)),)*].into_iter().collect()
            }
        }
    };
}

counters!(
    sessions_routed,
    sessions_completed,
    rejected_unauthenticated,
    rejected_permission_denied,
    rejected_no_capacity,
    rejected_invalid,
    rejected_by_backend,
    connect_fallbacks,
    backend_lost,
    client_disconnects,
    store_errors,
    leases_released,
    release_failures,
);

impl Metrics {
    pub fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.snapshot() {
            let _ = writeln!(out, "gitfarm_gateway_{name} {v}");
        }
        out
    }
}
