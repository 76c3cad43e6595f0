use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use super::proxy::{LinkShaping, ProxyInstance};
use crate::injection::{
    affected_count, Driver, DriverCapabilities, InjectionError, InjectionHandle, InstanceId, ScopeGranularity,
};
use crate::model::{FaultAction, FaultKind, ScopeSelector};

/// Which part of a route's shaping a fault kind owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Knob {
    Latency,
    Bandwidth,
    Refuse,
    Kill,
}

fn knob(kind: FaultKind) -> Option<Knob> {
    match kind {
        FaultKind::NetworkLatency => Some(Knob::Latency),
        FaultKind::BandwidthThrottle => Some(Knob::Bandwidth),
        FaultKind::ServiceDependencyFailure | FaultKind::DnsFailure => Some(Knob::Refuse),
        FaultKind::DbConnectionTermination => Some(Knob::Kill),
        _ => None,
    }
}

fn set(knob: Knob, fault: &FaultAction, mut s: LinkShaping) -> LinkShaping {
    match (knob, fault) {
        (Knob::Latency, FaultAction::NetworkLatency { delay_us, jitter_us }) => {
            s.latency_us = *delay_us;
            s.jitter_us = *jitter_us;
        }
        (Knob::Bandwidth, FaultAction::BandwidthThrottle { bytes_per_sec }) => s.bytes_per_sec = *bytes_per_sec,
        (Knob::Refuse, _) => s.refuse_new = true,
        (Knob::Kill, _) => s.kill_active = true,
        _ => {}
    }
    s
}

/// Copy back the fields `knob` owns from the pre-injection snapshot.
fn restore(knob: Knob, snapshot: &LinkShaping, mut s: LinkShaping) -> LinkShaping {
    match knob {
        Knob::Latency => {
            s.latency_us = snapshot.latency_us;
            s.jitter_us = snapshot.jitter_us;
        }
        Knob::Bandwidth => s.bytes_per_sec = snapshot.bytes_per_sec,
        Knob::Refuse => s.refuse_new = snapshot.refuse_new,
        Knob::Kill => {}
    }
    s.kill_active = false;
    s
}

/// What any proxy driver can do, independent of its routes.
pub fn proxy_capabilities() -> DriverCapabilities {
    DriverCapabilities {
        reversible_kinds: [
            FaultKind::NetworkLatency,
            FaultKind::BandwidthThrottle,
            FaultKind::ServiceDependencyFailure,
            FaultKind::DnsFailure,
            FaultKind::DbConnectionTermination,
        ]
        .into_iter()
        .collect(),
        scope_granularity: ScopeGranularity::Instance,
        supports_heal_check: true,
    }
}

#[derive(Debug)]
struct Active {
    knob: Knob,
    snapshots: Vec<(String, LinkShaping)>,
}

/// Driver over a running proxy. Each route is one addressable instance of
/// `service`; a route can also be addressed as a service of its own.
#[derive(Debug)]
pub struct ProxyDriver {
    proxy: ProxyInstance,
    service: String,
    active: BTreeMap<u64, Active>,
    next_id: u64,
    started: Instant,
}

impl ProxyDriver {
    pub fn new(proxy: ProxyInstance, service: impl Into<String>) -> Self {
        ProxyDriver {
            proxy,
            service: service.into(),
            active: BTreeMap::new(),
            next_id: 1,
            started: Instant::now(),
        }
    }

    pub fn proxy(&self) -> &ProxyInstance {
        &self.proxy
    }

    pub fn proxy_mut(&mut self) -> &mut ProxyInstance {
        &mut self.proxy
    }

    pub fn into_proxy(mut self) -> ProxyInstance {
        let _ = self.revert_all();
        self.proxy
    }

    fn routes_of(&self, service: &str) -> Option<Vec<String>> {
        let names = self.proxy.route_names();
        if service == self.service {
            Some(names)
        } else if names.iter().any(|n| n == service) {
            Some(vec![service.to_string()])
        } else {
            None
        }
    }
}

impl Driver for ProxyDriver {
    fn name(&self) -> &'static str {
        "proxy"
    }

    fn capabilities(&self) -> DriverCapabilities {
        proxy_capabilities()
    }

    fn replicas(&self, service: &str) -> Option<u32> {
        self.routes_of(service).map(|r| r.len() as u32)
    }

    fn resolve_scope(&self, scope: &ScopeSelector) -> Result<Vec<InstanceId>, InjectionError> {
        let routes = self.routes_of(&scope.service).ok_or_else(|| InjectionError::ScopeResolution {
            service: scope.service.clone(),
            reason: "no such route or service".into(),
        })?;
        match (&scope.instances, scope.instance_fraction_bp) {
            (Some(ids), _) => {
                let mut out = Vec::new();
                for id in ids {
                    if !routes.contains(id) {
                        return Err(InjectionError::ScopeResolution {
                            service: scope.service.clone(),
                            reason: format!("unknown route {id}"),
                        });
                    }
                    let id = InstanceId(id.clone());
                    if !out.contains(&id) {
                        out.push(id);
                    }
                }
                Ok(out)
            }
            (None, Some(bp)) => Ok(routes
                .into_iter()
                .take(affected_count(self.routes_of(&scope.service).map_or(0, |r| r.len() as u32), bp) as usize)
                .map(InstanceId)
                .collect()),
            (None, None) => Ok(routes.into_iter().map(InstanceId).collect()),
        }
    }

    fn inject(&mut self, fault: &FaultAction, scope: &[InstanceId]) -> Result<InjectionHandle, InjectionError> {
        let kind = fault.kind();
        let knob = knob(kind).ok_or(InjectionError::UnsupportedFault(kind))?;
        let names: BTreeSet<String> = self.proxy.route_names().into_iter().collect();
        for id in scope {
            if !names.contains(id.as_str()) {
                return Err(InjectionError::ScopeResolution {
                    service: id.to_string(),
                    reason: "unknown route".into(),
                });
            }
            if knob != Knob::Kill
                && self
                    .active
                    .values()
                    .any(|a| a.knob == knob && a.snapshots.iter().any(|(r, _)| r == id.as_str()))
            {
                return Err(InjectionError::Conflict {
                    kind,
                    instance: id.clone(),
                });
            }
        }
        let mut snapshots = Vec::with_capacity(scope.len());
        for id in scope {
            let current = self.proxy.shaping(id.as_str()).map_err(io)?;
            let previous = self
                .proxy
                .apply_shaping(id.as_str(), set(knob, fault, current))
                .map_err(io)?;
            snapshots.push((id.to_string(), previous));
        }
        let handle_id = self.next_id;
        self.next_id += 1;
        self.active.insert(handle_id, Active { knob, snapshots });
        Ok(InjectionHandle {
            handle_id,
            fault: fault.clone(),
            scope: scope.to_vec(),
            applied_at_us: self.started.elapsed().as_micros() as u64,
        })
    }

    fn revert(&mut self, handle_id: u64) -> Result<(), InjectionError> {
        let active = self
            .active
            .remove(&handle_id)
            .ok_or(InjectionError::StaleHandle(handle_id))?;
        for (route, snapshot) in active.snapshots.iter().rev() {
            let current = self.proxy.shaping(route).map_err(io)?;
            self.proxy
                .apply_shaping(route, restore(active.knob, snapshot, current))
                .map_err(io)?;
        }
        Ok(())
    }

    fn active_handles(&self) -> Vec<u64> {
        self.active.keys().copied().collect()
    }

    fn heal_check(&mut self) -> bool {
        self.active.is_empty()
            && self
                .proxy
                .route_names()
                .iter()
                .all(|r| self.proxy.shaping(r).is_ok_and(|s| s == LinkShaping::neutral()))
    }
}

fn io(e: super::proxy::ProxyError) -> InjectionError {
    InjectionError::DriverIo {
        message: e.to_string(),
        remaining: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::inject;
    use crate::netproxy::proxy::start_proxy;
    use crate::netproxy::proxy::tests::{echo_server, route};

    fn driver(routes: &[&str]) -> ProxyDriver {
        let echo = echo_server();
        let p = start_proxy(routes.iter().map(|r| route(r, echo)).collect()).unwrap();
        ProxyDriver::new(p, "api")
    }

    #[test]
    fn capabilities_are_the_five_stream_faults() {
        let d = driver(&["a"]);
        let caps: Vec<FaultKind> = d.capabilities().reversible_kinds.into_iter().collect();
        let mut want = vec![
            FaultKind::NetworkLatency,
            FaultKind::BandwidthThrottle,
            FaultKind::ServiceDependencyFailure,
            FaultKind::DnsFailure,
            FaultKind::DbConnectionTermination,
        ];
        want.sort();
        assert_eq!(caps, want);
    }

    #[test]
    fn latency_revert_restores_snapshot() {
        let mut d = driver(&["a"]);
        let before = d.proxy().shaping("a").unwrap();
        let h = inject(
            &mut d,
            &FaultAction::NetworkLatency {
                delay_us: 50_000,
                jitter_us: 0,
            },
            &ScopeSelector::fraction("api", 10_000),
        )
        .unwrap();
        assert_eq!(d.proxy().shaping("a").unwrap().latency_us, 50_000);
        d.revert(h.handle_id).unwrap();
        assert_eq!(d.proxy().shaping("a").unwrap(), before);
        assert!(d.heal_check());
    }

    #[test]
    fn unmapped_kinds_are_unsupported() {
        let mut d = driver(&["a"]);
        let err = inject(
            &mut d,
            &FaultAction::PacketLoss { prob_bp: 100 },
            &ScopeSelector::fraction("api", 10_000),
        )
        .unwrap_err();
        assert_eq!(err, InjectionError::UnsupportedFault(FaultKind::PacketLoss));
    }

    #[test]
    fn revert_all_over_two_routes() {
        let mut d = driver(&["a", "b"]);
        let lat = FaultAction::NetworkLatency {
            delay_us: 1000,
            jitter_us: 0,
        };
        let bw = FaultAction::BandwidthThrottle { bytes_per_sec: 2048 };
        inject(&mut d, &lat, &ScopeSelector::fraction("a", 10_000)).unwrap();
        inject(&mut d, &bw, &ScopeSelector::fraction("b", 10_000)).unwrap();
        assert_eq!(d.revert_all().unwrap(), 2);
        for r in ["a", "b"] {
            assert_eq!(d.proxy().shaping(r).unwrap(), LinkShaping::neutral());
        }
    }

    #[test]
    fn fraction_scope_picks_routes_in_name_order() {
        let d = driver(&["c", "a", "b", "d"]);
        let ids = d.resolve_scope(&ScopeSelector::fraction("api", 5000)).unwrap();
        assert_eq!(ids, vec![InstanceId("a".into()), InstanceId("b".into())]);
    }

    #[test]
    fn same_knob_twice_conflicts() {
        let mut d = driver(&["a"]);
        let scope = ScopeSelector::fraction("api", 10_000);
        inject(&mut d, &FaultAction::DnsFailure {}, &scope).unwrap();
        let err = inject(
            &mut d,
            &FaultAction::ServiceDependencyFailure {
                dependency: "db".into(),
            },
            &scope,
        )
        .unwrap_err();
        assert!(matches!(err, InjectionError::Conflict { .. }));
    }
}
