//! Shared fixtures for the criterion benches.

use chaoskit_core::sim::{Edge, RetryPolicy, ServiceSpec, Topology, TrafficModel};

fn service(name: &str, replicas: u32, service_time_us: u64) -> ServiceSpec {
    ServiceSpec {
        name: name.into(),
        replicas,
        service_time_us,
        concurrency: 8,
        queue_capacity: 128,
        timeout_us: 500_000,
        retry: RetryPolicy {
            max_retries: 1,
            backoff_us: 1_000,
        },
        failover: true,
        tags: Vec::new(),
    }
}

/// `api -> {auth, db}` with `rps` external requests per second.
pub fn three_tier(rps: u64) -> Topology {
    let edge = |a: &str, b: &str| Edge {
        caller: a.into(),
        callee: b.into(),
    };
    Topology {
        services: vec![service("api", 4, 2_000), service("auth", 2, 500), service("db", 2, 3_000)],
        edges: vec![edge("api", "auth"), edge("api", "db")],
        traffic: TrafficModel {
            ingress: "api".into(),
            requests_per_sec: rps,
            jitter_us: 200,
        },
    }
}
