use std::sync::{Arc, Mutex, MutexGuard};

use super::metrics::sample_metric;
use super::world::{FaultHandle, SimError, World};
use crate::hypothesis::{MetricSource, SourceError};
use crate::injection::{Driver, DriverCapabilities, InjectionError, InjectionHandle, InstanceId};
use crate::model::{FaultAction, MetricSelector};
use crate::sim::metrics::MetricSample;
use crate::sim::trace::Trace;

/// A world shared between the driver (which mutates it) and the metric
/// source (which advances and reads it).
pub type SharedWorld = Arc<Mutex<World>>;

pub fn share(world: World) -> SharedWorld {
    Arc::new(Mutex::new(world))
}

fn lock(world: &SharedWorld) -> MutexGuard<'_, World> {
    world.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Driver backed by the simulator. Supports every fault kind.
#[derive(Debug, Clone)]
pub struct SimDriver {
    world: SharedWorld,
}

impl SimDriver {
    pub fn new(world: SharedWorld) -> Self {
        SimDriver { world }
    }

    pub fn world(&self) -> &SharedWorld {
        &self.world
    }
}

impl From<SimError> for InjectionError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scope(what) => InjectionError::ScopeResolution {
                service: what,
                reason: "unknown instance".into(),
            },
            SimError::Conflict { kind, instance } => InjectionError::Conflict { kind, instance },
            SimError::StaleHandle(h) => InjectionError::StaleHandle(h),
        }
    }
}

impl Driver for SimDriver {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn capabilities(&self) -> DriverCapabilities {
        DriverCapabilities::all_kinds()
    }

    fn replicas(&self, service: &str) -> Option<u32> {
        lock(&self.world).replicas(service)
    }

    fn inject(
        &mut self,
        fault: &FaultAction,
        scope: &[InstanceId],
    ) -> Result<InjectionHandle, InjectionError> {
        let mut world = lock(&self.world);
        let handle = world.apply_fault(fault, scope)?;
        Ok(InjectionHandle {
            handle_id: handle.0,
            fault: fault.clone(),
            scope: scope.to_vec(),
            applied_at_us: world.now_us(),
        })
    }

    fn revert(&mut self, handle_id: u64) -> Result<(), InjectionError> {
        Ok(lock(&self.world).revert_fault(FaultHandle(handle_id))?)
    }

    fn active_handles(&self) -> Vec<u64> {
        lock(&self.world).active_faults().into_iter().map(|h| h.0).collect()
    }

    fn heal_check(&mut self) -> bool {
        let world = lock(&self.world);
        world.active_faults().is_empty() && world.up_instances() == world.instance_ids().len()
    }
}

/// Metric source reading trailing windows of the simulated trace.
#[derive(Debug, Clone)]
pub struct SimSource {
    world: SharedWorld,
}

impl SimSource {
    pub fn new(world: SharedWorld) -> Self {
        SimSource { world }
    }
}

impl MetricSource for SimSource {
    fn now_us(&self) -> u64 {
        lock(&self.world).now_us()
    }

    fn advance(&mut self, ms: u64) -> Result<(), SourceError> {
        lock(&self.world).run(ms);
        Ok(())
    }

    fn sample(&mut self, selector: &MetricSelector, t0_us: u64, t1_us: u64) -> Result<MetricSample, SourceError> {
        let world = lock(&self.world);
        if world.topology().service(&selector.service).is_none() {
            return Err(SourceError::UnknownService(selector.service.clone()));
        }
        Ok(sample_metric(world.trace(), selector, t0_us, t1_us))
    }

    fn trace(&self) -> Option<Trace> {
        Some(lock(&self.world).trace().clone())
    }
}
