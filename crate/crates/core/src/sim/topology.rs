use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A small service mesh, as stored in a `.topo.json` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub services: Vec<ServiceSpec>,
    /// Caller → callee pairs. For one caller, edge order is call order.
    #[serde(default)]
    pub edges: Vec<Edge>,
    pub traffic: TrafficModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub caller: String,
    pub callee: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTag {
    Db,
    Cache,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_us: u64,
}

/// One service. `timeout_us` and `retry` are the client policy every caller
/// uses toward this service; `failover` makes its load balancer skip down
/// instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub replicas: u32,
    pub service_time_us: u64,
    pub concurrency: u32,
    pub queue_capacity: u32,
    pub timeout_us: u64,
    pub retry: RetryPolicy,
    #[serde(default)]
    pub failover: bool,
    #[serde(default)]
    pub tags: Vec<ServiceTag>,
}

impl ServiceSpec {
    pub fn has_tag(&self, tag: ServiceTag) -> bool {
        self.tags.contains(&tag)
    }
}

/// Open-loop arrivals at a fixed interval plus uniform integer jitter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficModel {
    pub ingress: String,
    pub requests_per_sec: u64,
    #[serde(default)]
    pub jitter_us: u64,
}

impl TrafficModel {
    pub fn base_interval_us(&self) -> u64 {
        1_000_000 / self.requests_per_sec
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology has no services")]
    Empty,
    #[error("duplicate service `{0}`")]
    DuplicateService(String),
    #[error("service `{service}`: {reason}")]
    InvalidService { service: String, reason: String },
    #[error("edge {caller} -> {callee} references an unknown service")]
    DanglingEdge { caller: String, callee: String },
    #[error("dependency cycle through `{0}`")]
    Cycle(String),
    #[error("ingress service `{0}` does not exist")]
    UnknownIngress(String),
    #[error("traffic: {0}")]
    InvalidTraffic(String),
}

impl Topology {
    pub fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s.name == name)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Callees of `caller` in call order.
    pub fn callees<'a>(&'a self, caller: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |e| e.caller == caller)
            .map(|e| e.callee.as_str())
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.services.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut index = HashMap::new();
        for (i, s) in self.services.iter().enumerate() {
            if index.insert(s.name.as_str(), i).is_some() {
                return Err(TopologyError::DuplicateService(s.name.clone()));
            }
            let bad = |reason: &str| TopologyError::InvalidService {
                service: s.name.clone(),
                reason: reason.into(),
            };
            if s.name.is_empty() {
                return Err(bad("empty name"));
            }
            if s.replicas == 0 {
                return Err(bad("replicas must be positive"));
            }
            if s.service_time_us == 0 {
                return Err(bad("service_time_us must be positive"));
            }
            if s.concurrency == 0 {
                return Err(bad("concurrency must be positive"));
            }
            if s.timeout_us == 0 {
                return Err(bad("timeout_us must be positive"));
            }
        }
        for e in &self.edges {
            if !index.contains_key(e.caller.as_str()) || !index.contains_key(e.callee.as_str()) {
                return Err(TopologyError::DanglingEdge {
                    caller: e.caller.clone(),
                    callee: e.callee.clone(),
                });
            }
        }
        if !index.contains_key(self.traffic.ingress.as_str()) {
            return Err(TopologyError::UnknownIngress(self.traffic.ingress.clone()));
        }
        if self.traffic.requests_per_sec == 0 || self.traffic.requests_per_sec > 1_000_000 {
            return Err(TopologyError::InvalidTraffic(
                "requests_per_sec must be in [1, 1000000]".into(),
            ));
        }
        self.check_acyclic(&index)
    }

    fn check_acyclic(&self, index: &HashMap<&str, usize>) -> Result<(), TopologyError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let n = self.services.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[index[e.caller.as_str()]].push(index[e.callee.as_str()]);
        }
        let mut marks = vec![Mark::New; n];
        for root in 0..n {
            if marks[root] != Mark::New {
                continue;
            }
            // Iterative DFS: (node, next child position).
            let mut stack = vec![(root, 0usize)];
            marks[root] = Mark::Active;
            while let Some(&mut (node, ref mut pos)) = stack.last_mut() {
                if let Some(&next) = adj[node].get(*pos) {
                    *pos += 1;
                    match marks[next] {
                        Mark::Active => {
                            return Err(TopologyError::Cycle(self.services[next].name.clone()))
                        }
                        Mark::New => {
                            marks[next] = Mark::Active;
                            stack.push((next, 0));
                        }
                        Mark::Done => {}
                    }
                } else {
                    marks[node] = Mark::Done;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Non-fatal configuration smells.
    pub fn warnings(&self) -> Vec<String> {
        self.services
            .iter()
            .filter(|s| s.timeout_us <= s.service_time_us)
            .map(|s| {
                format!(
                    "service `{}`: timeout_us ({}) does not exceed service_time_us ({})",
                    s.name, s.timeout_us, s.service_time_us
                )
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn service(name: &str, replicas: u32, service_time_us: u64) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            replicas,
            service_time_us,
            concurrency: 4,
            queue_capacity: 64,
            timeout_us: 1_000_000,
            retry: RetryPolicy {
                max_retries: 0,
                backoff_us: 0,
            },
            failover: false,
            tags: Vec::new(),
        }
    }

    pub(crate) fn single(replicas: u32, service_time_us: u64, rps: u64) -> Topology {
        Topology {
            services: vec![service("api", replicas, service_time_us)],
            edges: Vec::new(),
            traffic: TrafficModel {
                ingress: "api".into(),
                requests_per_sec: rps,
                jitter_us: 0,
            },
        }
    }

    fn edge(a: &str, b: &str) -> Edge {
        Edge {
            caller: a.into(),
            callee: b.into(),
        }
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let mut t = single(1, 100, 10);
        t.edges.push(edge("api", "db"));
        assert!(matches!(t.validate(), Err(TopologyError::DanglingEdge { .. })));
    }

    #[test]
    fn cycle_is_rejected() {
        let mut t = single(1, 100, 10);
        t.services.push(service("a", 1, 10));
        t.services.push(service("b", 1, 10));
        t.edges = vec![edge("api", "a"), edge("a", "b"), edge("b", "a")];
        assert!(matches!(t.validate(), Err(TopologyError::Cycle(_))));
    }

    #[test]
    fn diamond_is_acyclic() {
        let mut t = single(1, 100, 10);
        t.services.push(service("a", 1, 10));
        t.services.push(service("b", 1, 10));
        t.services.push(service("db", 1, 10));
        t.edges = vec![
            edge("api", "a"),
            edge("api", "b"),
            edge("a", "db"),
            edge("b", "db"),
        ];
        assert_eq!(t.validate(), Ok(()));
        assert_eq!(t.callees("api").collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn zero_replicas_and_unknown_ingress() {
        let t = single(0, 100, 10);
        assert!(matches!(t.validate(), Err(TopologyError::InvalidService { .. })));
        let mut t = single(1, 100, 10);
        t.traffic.ingress = "web".into();
        assert!(matches!(t.validate(), Err(TopologyError::UnknownIngress(_))));
    }

    #[test]
    fn short_timeout_is_only_a_warning() {
        let mut t = single(1, 100, 10);
        t.services[0].timeout_us = 100;
        assert_eq!(t.validate(), Ok(()));
        assert_eq!(t.warnings().len(), 1);
    }
}
