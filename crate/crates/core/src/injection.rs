//! The driver contract that separates experiment logic from fault mechanics,
//! and the blast-radius stage planner.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Experiment, FaultAction, FaultKind, ScopeSelector, BP_SCALE};

/// Identifier of one target instance, `{service}-{index}` for replicated
/// services and the route name for proxy routes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl InstanceId {
    pub fn replica(service: &str, index: u32) -> Self {
        InstanceId(format!("{service}-{index}"))
    }

    /// Split `{service}-{index}` back into its parts.
    pub fn parse_replica(&self) -> Option<(&str, u32)> {
        let (service, index) = self.0.rsplit_once('-')?;
        Some((service, index.parse().ok()?))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeGranularity {
    Instance,
    Service,
    Link,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverCapabilities {
    pub reversible_kinds: BTreeSet<FaultKind>,
    pub scope_granularity: ScopeGranularity,
    pub supports_heal_check: bool,
}

impl DriverCapabilities {
    /// Every fault kind, instance granularity.
    pub fn all_kinds() -> Self {
        DriverCapabilities {
            reversible_kinds: FaultKind::ALL.into_iter().collect(),
            scope_granularity: ScopeGranularity::Instance,
            supports_heal_check: true,
        }
    }

    pub fn supports(&self, kind: FaultKind) -> bool {
        self.reversible_kinds.contains(&kind)
    }
}

/// An active injection, as returned by [`Driver::inject`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionHandle {
    pub handle_id: u64,
    pub fault: FaultAction,
    pub scope: Vec<InstanceId>,
    pub applied_at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InjectionError {
    #[error("fault kind {0} is not supported by this driver")]
    UnsupportedFault(FaultKind),
    #[error("cannot resolve scope on `{service}`: {reason}")]
    ScopeResolution { service: String, reason: String },
    #[error("{kind} is already active on {instance}")]
    Conflict { kind: FaultKind, instance: InstanceId },
    #[error("handle {0} is not active")]
    StaleHandle(u64),
    #[error("driver I/O failure: {message} (remaining handles: {remaining:?})")]
    DriverIo { message: String, remaining: Vec<u64> },
}

/// What every fault backend must provide.
pub trait Driver {
    fn name(&self) -> &'static str;

    fn capabilities(&self) -> DriverCapabilities;

    /// Number of addressable instances of `service`, if it exists.
    fn replicas(&self, service: &str) -> Option<u32>;

    /// Deterministic scope resolution: lowest-index instances first.
    fn resolve_scope(&self, scope: &ScopeSelector) -> Result<Vec<InstanceId>, InjectionError> {
        resolve_replica_scope(scope, self.replicas(&scope.service))
    }

    fn inject(
        &mut self,
        fault: &FaultAction,
        scope: &[InstanceId],
    ) -> Result<InjectionHandle, InjectionError>;

    fn revert(&mut self, handle_id: u64) -> Result<(), InjectionError>;

    /// Ids of injections that are still active, oldest first.
    fn active_handles(&self) -> Vec<u64>;

    fn heal_check(&mut self) -> bool;

    /// Revert everything, newest first. Verifies the postcondition through
    /// [`Driver::active_handles`].
    fn revert_all(&mut self) -> Result<usize, InjectionError> {
        let mut reverted = 0;
        let mut errors = Vec::new();
        for id in self.active_handles().into_iter().rev() {
            match self.revert(id) {
                Ok(()) => reverted += 1,
                Err(e) => errors.push(e.to_string()),
            }
        }
        let remaining = self.active_handles();
        if remaining.is_empty() {
            Ok(reverted)
        } else {
            Err(InjectionError::DriverIo {
                message: if errors.is_empty() {
                    "injections still active after revert".into()
                } else {
                    errors.join("; ")
                },
                remaining,
            })
        }
    }
}

/// ceil(replicas × fraction / 10000).
pub fn affected_count(replicas: u32, fraction_bp: u32) -> u32 {
    let scaled = u64::from(replicas) * u64::from(fraction_bp);
    scaled.div_ceil(u64::from(BP_SCALE)) as u32
}

pub fn resolve_replica_scope(
    scope: &ScopeSelector,
    replicas: Option<u32>,
) -> Result<Vec<InstanceId>, InjectionError> {
    let err = |reason: String| InjectionError::ScopeResolution {
        service: scope.service.clone(),
        reason,
    };
    let replicas = replicas.ok_or_else(|| err("unknown service".into()))?;
    match (&scope.instances, scope.instance_fraction_bp) {
        (Some(ids), _) => {
            let mut out = Vec::with_capacity(ids.len());
            for raw in ids {
                let id = InstanceId(raw.clone());
                match id.parse_replica() {
                    Some((svc, idx)) if svc == scope.service && idx < replicas => {}
                    _ => return Err(err(format!("unknown instance {raw}"))),
                }
                if !out.contains(&id) {
                    out.push(id);
                }
            }
            Ok(out)
        }
        (None, Some(bp)) => Ok((0..affected_count(replicas, bp))
            .map(|i| InstanceId::replica(&scope.service, i))
            .collect()),
        (None, None) => Ok((0..replicas)
            .map(|i| InstanceId::replica(&scope.service, i))
            .collect()),
    }
}

/// Capability-gated injection: resolve the scope and hand the fault to the driver.
pub fn inject(
    driver: &mut dyn Driver,
    fault: &FaultAction,
    scope: &ScopeSelector,
) -> Result<InjectionHandle, InjectionError> {
    let kind = fault.kind();
    if !driver.capabilities().supports(kind) {
        return Err(InjectionError::UnsupportedFault(kind));
    }
    let instances = driver.resolve_scope(scope)?;
    driver.inject(fault, &instances)
}

pub fn revert_all(driver: &mut dyn Driver) -> Result<usize, InjectionError> {
    driver.revert_all()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub index: usize,
    pub fault: FaultAction,
    pub scope: ScopeSelector,
    pub instances: Vec<InstanceId>,
    pub replicas: u32,
    pub duration_ms: u64,
}

impl PlannedStage {
    pub fn affected(&self) -> u32 {
        self.instances.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<PlannedStage>,
}

impl StagePlan {
    pub fn affected_counts(&self) -> Vec<u32> {
        self.stages.iter().map(PlannedStage::affected).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("NONDECREASING_SCOPE: stage {stage} on `{service}` affects {count} instances, fewer than the {previous} before it")]
    NondecreasingScope {
        stage: usize,
        service: String,
        previous: u32,
        count: u32,
    },
    #[error("stage {stage}: {source}")]
    Scope {
        stage: usize,
        #[source]
        source: InjectionError,
    },
}

/// Resolve every stage to concrete instances, enforcing the ramp.
pub fn plan_stages(exp: &Experiment, driver: &dyn Driver) -> Result<StagePlan, PlanError> {
    let mut stages = Vec::with_capacity(exp.stages.len());
    let mut last: HashMap<&str, u32> = HashMap::new();
    for (index, stage) in exp.stages.iter().enumerate() {
        let service = stage.scope.service.as_str();
        let instances = driver
            .resolve_scope(&stage.scope)
            .map_err(|source| PlanError::Scope {
                stage: index,
                source,
            })?;
        let count = instances.len() as u32;
        if let Some(previous) = last.insert(service, count) {
            if count < previous {
                return Err(PlanError::NondecreasingScope {
                    stage: index,
                    service: service.to_string(),
                    previous,
                    count,
                });
            }
        }
        stages.push(PlannedStage {
            index,
            fault: stage.fault.clone(),
            scope: stage.scope.clone(),
            instances,
            replicas: driver.replicas(service).unwrap_or(0),
            duration_ms: stage.duration_ms,
        });
    }
    Ok(StagePlan { stages })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Stage;
    use crate::parse::{parse_experiment, tests::MINIMAL};

    /// In-memory driver with a fixed replica table and optional revert failures.
    #[derive(Default)]
    pub(crate) struct FakeDriver {
        pub services: HashMap<String, u32>,
        pub active: Vec<(u64, FaultKind, Vec<InstanceId>)>,
        pub next_id: u64,
        pub fail_revert_of: Option<u64>,
    }

    impl FakeDriver {
        pub fn with_service(name: &str, replicas: u32) -> Self {
            let mut d = FakeDriver::default();
            d.services.insert(name.into(), replicas);
            d
        }
    }

    impl Driver for FakeDriver {
        fn name(&self) -> &'static str {
            "fake"
        }
        fn capabilities(&self) -> DriverCapabilities {
            let mut caps = DriverCapabilities::all_kinds();
            caps.reversible_kinds.remove(&FaultKind::StorageCorruption);
            caps
        }
        fn replicas(&self, service: &str) -> Option<u32> {
            self.services.get(service).copied()
        }
        fn inject(
            &mut self,
            fault: &FaultAction,
            scope: &[InstanceId],
        ) -> Result<InjectionHandle, InjectionError> {
            for (_, kind, ids) in &self.active {
                if *kind == fault.kind() {
                    if let Some(i) = scope.iter().find(|i| ids.contains(i)) {
                        return Err(InjectionError::Conflict {
                            kind: *kind,
                            instance: i.clone(),
                        });
                    }
                }
            }
            let id = self.next_id;
            self.next_id += 1;
            self.active.push((id, fault.kind(), scope.to_vec()));
            Ok(InjectionHandle {
                handle_id: id,
                fault: fault.clone(),
                scope: scope.to_vec(),
                applied_at_us: 0,
            })
        }
        fn revert(&mut self, handle_id: u64) -> Result<(), InjectionError> {
            if self.fail_revert_of == Some(handle_id) {
                return Err(InjectionError::DriverIo {
                    message: "control channel closed".into(),
                    remaining: vec![handle_id],
                });
            }
            let before = self.active.len();
            self.active.retain(|(id, _, _)| *id != handle_id);
            if self.active.len() == before {
                return Err(InjectionError::StaleHandle(handle_id));
            }
            Ok(())
        }
        fn active_handles(&self) -> Vec<u64> {
            self.active.iter().map(|(id, _, _)| *id).collect()
        }
        fn heal_check(&mut self) -> bool {
            self.active.is_empty()
        }
    }

    fn ramp(fractions: &[u32]) -> Experiment {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        let base = exp.stages[0].clone();
        exp.stages = fractions
            .iter()
            .map(|&bp| Stage {
                scope: ScopeSelector::fraction("api", bp),
                ..base.clone()
            })
            .collect();
        exp
    }

    #[test]
    fn ramp_resolves_ceiling_counts() {
        let driver = FakeDriver::with_service("api", 4);
        let plan = plan_stages(&ramp(&[2500, 5000, 10_000]), &driver).unwrap();
        assert_eq!(plan.affected_counts(), vec![1, 2, 4]);
        assert_eq!(
            plan.stages[1].instances,
            vec![InstanceId::replica("api", 0), InstanceId::replica("api", 1)]
        );
    }

    #[test]
    fn shrinking_ramp_is_a_plan_error() {
        let driver = FakeDriver::with_service("api", 4);
        assert!(matches!(
            plan_stages(&ramp(&[5000, 2500]), &driver),
            Err(PlanError::NondecreasingScope { stage: 1, .. })
        ));
    }

    #[test]
    fn tiny_fraction_still_hits_one_instance() {
        assert_eq!(affected_count(3, 1), 1);
        let driver = FakeDriver::with_service("api", 3);
        assert_eq!(plan_stages(&ramp(&[1]), &driver).unwrap().affected_counts(), vec![1]);
    }

    #[test]
    fn unknown_service_and_instance_fail_resolution() {
        let driver = FakeDriver::with_service("api", 2);
        assert!(driver
            .resolve_scope(&ScopeSelector::fraction("ghost", 100))
            .is_err());
        assert!(driver
            .resolve_scope(&ScopeSelector::explicit("api", vec!["api-2".into()]))
            .is_err());
        assert_eq!(
            driver
                .resolve_scope(&ScopeSelector::explicit("api", vec!["api-1".into()]))
                .unwrap(),
            vec![InstanceId::replica("api", 1)]
        );
    }

    #[test]
    fn capability_gate_and_conflicts() {
        let mut driver = FakeDriver::with_service("api", 2);
        let scope = ScopeSelector::fraction("api", 10_000);
        assert_eq!(
            inject(&mut driver, &FaultAction::StorageCorruption { prob_bp: 1 }, &scope),
            Err(InjectionError::UnsupportedFault(FaultKind::StorageCorruption))
        );
        let fault = FaultAction::NetworkLatency {
            delay_us: 10,
            jitter_us: 0,
        };
        inject(&mut driver, &fault, &scope).unwrap();
        assert!(matches!(
            inject(&mut driver, &fault, &scope),
            Err(InjectionError::Conflict { .. })
        ));
    }

    #[test]
    fn revert_all_is_idempotent() {
        let mut driver = FakeDriver::with_service("api", 3);
        assert_eq!(revert_all(&mut driver), Ok(0));
        for kind in [
            FaultAction::DnsFailure {},
            FaultAction::InstanceKill { down_for_ms: 1 },
            FaultAction::PacketLoss { prob_bp: 1 },
        ] {
            inject(&mut driver, &kind, &ScopeSelector::fraction("api", 1)).unwrap();
        }
        assert_eq!(revert_all(&mut driver), Ok(3));
        assert_eq!(revert_all(&mut driver), Ok(0));
    }

    #[test]
    fn failed_revert_reports_remaining_handles() {
        let mut driver = FakeDriver::with_service("api", 3);
        let scope = ScopeSelector::fraction("api", 1);
        inject(&mut driver, &FaultAction::DnsFailure {}, &scope).unwrap();
        let h = inject(&mut driver, &FaultAction::PacketLoss { prob_bp: 5 }, &scope).unwrap();
        driver.fail_revert_of = Some(h.handle_id);
        match revert_all(&mut driver) {
            Err(InjectionError::DriverIo { remaining, .. }) => {
                assert_eq!(remaining, vec![h.handle_id])
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
