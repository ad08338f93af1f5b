//! Randomized operation sequences against the in-process store: with a
//! truthful backend, registry free counts plus live leases always equal the
//! pool size.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use gitfarm_statestore::*;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Occupy(usize),
    Release(usize),
    /// Backend binds the first n in-flight leases it hasn't seen, then heartbeats.
    Heartbeat {
        node: usize,
        bind: usize,
    },
    Advance(u64),
    Expire,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..2usize).prop_map(Op::Occupy),
        3 => any::<usize>().prop_map(Op::Release),
        2 => (0..2usize, 0..4usize).prop_map(|(node, bind)| Op::Heartbeat { node, bind }),
        1 => (0..200u64).prop_map(Op::Advance),
        1 => Just(Op::Expire),
    ]
}

const NODES: [&str; 2] = ["n0", "n1"];
const REPOS: [&str; 2] = ["go", "java"];
const POOL: [(&str, u32); 2] = [("go", 3), ("java", 2)];
const SANDBOXES: u32 = 4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn conservation(ops in proptest::collection::vec(op(), 1..80)) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let clock = Arc::new(ManualClock::new(Timestamp(1_000_000)));
            let config = StoreConfig { staleness: Duration::from_secs(3600), lease_ttl: Duration::from_secs(60) };
            let store = MemoryStore::with_clock(config, clock.clone());
            let pools: BTreeMap<String, u32> = POOL.iter().map(|(r, n)| (r.to_string(), *n)).collect();
            for node in NODES {
                store.register_node(NodeRegistration {
                    node_id: node.into(),
                    cluster_id: "c".into(),
                    address: String::new(),
                    checkout_pools: pools.clone(),
                    sandbox_pool: SANDBOXES,
                }).await.unwrap();
            }
            // what each backend has actually bound
            let mut bound: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
            for node in NODES {
                heartbeat(&store, node, &bound, &pools, clock.now()).await;
            }
            let mut held: Vec<Lease> = Vec::new();

            for op in ops {
                match op {
                    Op::Occupy(r) => {
                        if let Ok(l) = store.select_and_occupy(REPOS[r], "c").await {
                            held.push(l);
                        }
                    }
                    Op::Release(i) if !held.is_empty() => {
                        let l = held.remove(i % held.len());
                        store.release(&l).await.unwrap();
                        if let Some(b) = bound.get_mut(l.node_id.as_str()) {
                            b.remove(&l.lease_id);
                        }
                    }
                    Op::Release(_) => {}
                    Op::Heartbeat { node, bind } => {
                        let name = NODES[node];
                        let unseen: Vec<_> = held.iter()
                            .filter(|l| l.node_id == name)
                            .filter(|l| !bound.get(name).is_some_and(|b| b.contains(&l.lease_id)))
                            .take(bind)
                            .map(|l| l.lease_id.clone())
                            .collect();
                        bound.entry(name).or_default().extend(unseen);
                        heartbeat(&store, name, &bound, &pools, clock.now()).await;
                    }
                    Op::Advance(secs) => clock.advance(Duration::from_secs(secs)),
                    Op::Expire => {
                        for l in store.expire_leases(clock.now()).await.unwrap() {
                            held.retain(|h| h.lease_id != l.lease_id);
                            if let Some(b) = bound.get_mut(l.node_id.as_str()) {
                                b.remove(&l.lease_id);
                            }
                        }
                    }
                }

                let live = store.live_leases().await.unwrap();
                assert_eq!(live.len(), held.len());
                for node in NODES {
                    let view = store.node(node).await.unwrap().unwrap();
                    for (repo, pool) in POOL {
                        let leased = live.iter().filter(|l| l.node_id == node && l.repo_id == repo).count() as u32;
                        assert_eq!(view.free_checkouts[repo] + leased, pool, "{node}/{repo}");
                    }
                    let leased = live.iter().filter(|l| l.node_id == node).count() as u32;
                    assert_eq!(view.free_sandboxes + leased, SANDBOXES, "{node} sandboxes");
                }
            }
        });
    }
}

async fn heartbeat(
    store: &MemoryStore,
    node: &str,
    bound: &BTreeMap<&str, BTreeSet<String>>,
    pools: &BTreeMap<String, u32>,
    now: Timestamp,
) {
    let active = bound.get(node).cloned().unwrap_or_default();
    let live = store.live_leases().await.unwrap();
    let free_checkouts = pools
        .iter()
        .map(|(repo, pool)| {
            let in_use = live
                .iter()
                .filter(|l| l.node_id == node && &l.repo_id == repo && active.contains(&l.lease_id))
                .count() as u32;
            (repo.clone(), pool - in_use)
        })
        .collect();
    let status = NodeStatus {
        node_id: node.into(),
        cluster_id: "c".into(),
        free_checkouts,
        free_sandboxes: SANDBOXES - active.len() as u32,
        heartbeat_time: now,
        active_leases: active,
    };
    store.update_status(status).await.unwrap();
}
