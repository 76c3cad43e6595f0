//! The discrete-event engine.
//!
//! A request is a *call* to a service. Each call makes one or more *attempts*;
//! an attempt that reaches an instance becomes an *exec*, which spends the
//! service time and then calls the service's dependencies one after another.
//! Events run in `(time, insertion sequence)` order and every random draw
//! happens inside an event handler, so a seed fixes the whole run.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rng::SplitMix64;
use super::topology::{ServiceTag, Topology, TopologyError};
use super::trace::{EventKind, Trace, TraceEvent};
use crate::injection::InstanceId;
use crate::model::{FaultAction, FaultKind, BP_SCALE};

/// Fixed message size used by bandwidth throttling.
pub const MESSAGE_SIZE_BYTES: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown instance or service `{0}`")]
    Scope(String),
    #[error("{kind} is already active on {instance}")]
    Conflict { kind: FaultKind, instance: InstanceId },
    #[error("fault handle {0} is not active")]
    StaleHandle(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Timeout,
    Refused,
    Dns,
    QueueFull,
    NoInstance,
    Reset,
    Dependency,
    Http(u16),
    Corrupt,
    DbTerminated,
}

impl Failure {
    fn retryable(self) -> bool {
        match self {
            Failure::Http(code) => code >= 500,
            _ => true,
        }
    }

    fn label(self) -> String {
        match self {
            Failure::Timeout => "timeout".into(),
            Failure::Refused => "refused".into(),
            Failure::Dns => "dns".into(),
            Failure::QueueFull => "queue_full".into(),
            Failure::NoInstance => "no_instance".into(),
            Failure::Reset => "reset".into(),
            Failure::Dependency => "dependency".into(),
            Failure::Http(code) => format!("http_{code}"),
            Failure::Corrupt => "corrupt".into(),
            Failure::DbTerminated => "db_terminated".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival,
    StartAttempt(u64),
    Deliver(u64),
    Timeout(u64),
    WorkDone(u64),
    Crash { instance: usize, token: u64 },
    Restore { instance: usize, token: u64 },
}

#[derive(Debug)]
struct ServiceRt {
    first_instance: usize,
    replicas: u32,
    callees: Vec<usize>,
    rr: u32,
}

#[derive(Debug)]
struct InstanceRt {
    service: usize,
    index: u32,
    up: bool,
    busy: u32,
    queue: VecDeque<u64>,
    execs: Vec<u64>,
    crash_token: u64,
    restore_token: u64,
}

#[derive(Debug)]
struct Call {
    service: usize,
    parent_call: Option<u64>,
    parent_exec: Option<u64>,
    started_at: u64,
    attempts: u32,
    last_instance: Option<u32>,
}

#[derive(Debug)]
struct Attempt {
    call: u64,
    instance: usize,
}

#[derive(Debug)]
struct Exec {
    attempt: u64,
    call: u64,
    instance: usize,
    next_dep: usize,
    waiting_call: Option<u64>,
    injected_error: Option<u16>,
}

#[derive(Debug, Clone)]
struct ActiveFault {
    handle: FaultHandle,
    fault: FaultAction,
    instances: Vec<usize>,
}

/// Simulated service mesh.
#[derive(Debug)]
pub struct World {
    topology: Topology,
    services: Vec<ServiceRt>,
    instances: Vec<InstanceRt>,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    rng: SplitMix64,
    calls: HashMap<u64, Call>,
    attempts: HashMap<u64, Attempt>,
    execs: HashMap<u64, Exec>,
    next_call: u64,
    next_attempt: u64,
    next_exec: u64,
    faults: Vec<ActiveFault>,
    next_handle: u64,
    trace: Trace,
}

impl World {
    pub fn build(topology: Topology, seed: u64) -> Result<World, TopologyError> {
        topology.validate()?;
        let mut services = Vec::with_capacity(topology.services.len());
        let mut instances = Vec::new();
        for (si, spec) in topology.services.iter().enumerate() {
            let callees = topology
                .callees(&spec.name)
                .map(|c| topology.service_index(c).expect("validated edge"))
                .collect();
            services.push(ServiceRt {
                first_instance: instances.len(),
                replicas: spec.replicas,
                callees,
                rr: 0,
            });
            for index in 0..spec.replicas {
                instances.push(InstanceRt {
                    service: si,
                    index,
                    up: true,
                    busy: 0,
                    queue: VecDeque::new(),
                    execs: Vec::new(),
                    crash_token: 0,
                    restore_token: 0,
                });
            }
        }
        let mut world = World {
            topology,
            services,
            instances,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: SplitMix64::new(seed),
            calls: HashMap::new(),
            attempts: HashMap::new(),
            execs: HashMap::new(),
            next_call: 1,
            next_attempt: 1,
            next_exec: 1,
            faults: Vec::new(),
            next_handle: 1,
            trace: Trace::new(),
        };
        world.schedule(0, Ev::Arrival);
        Ok(world)
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Everything emitted since the world was built.
    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    pub fn replicas(&self, service: &str) -> Option<u32> {
        self.topology.service(service).map(|s| s.replicas)
    }

    pub fn instance_ids(&self) -> Vec<InstanceId> {
        self.instances
            .iter()
            .map(|i| InstanceId::replica(&self.topology.services[i.service].name, i.index))
            .collect()
    }

    pub fn is_up(&self, id: &InstanceId) -> Option<bool> {
        self.lookup(id).map(|i| self.instances[i].up)
    }

    pub fn up_instances(&self) -> usize {
        self.instances.iter().filter(|i| i.up).count()
    }

    /// External requests that have arrived and not yet finished.
    pub fn live_external_calls(&self) -> u64 {
        self.calls.values().filter(|c| c.parent_call.is_none()).count() as u64
    }

    pub fn active_faults(&self) -> Vec<FaultHandle> {
        self.faults.iter().map(|f| f.handle).collect()
    }

    /// Advance by `duration_ms`, processing every event strictly before the
    /// new time. Returns the events emitted during this call.
    pub fn run(&mut self, duration_ms: u64) -> Trace {
        let start = self.trace.len();
        let end = self.now.saturating_add(duration_ms.saturating_mul(1000));
        while let Some(&Reverse((t, _, ev))) = self.queue.peek() {
            if t >= end {
                break;
            }
            self.queue.pop();
            self.now = t;
            self.handle(ev);
        }
        self.now = end;
        Trace {
            events: self.trace.events[start..].to_vec(),
        }
    }

    pub fn apply_fault(
        &mut self,
        fault: &FaultAction,
        scope: &[InstanceId],
    ) -> Result<FaultHandle, SimError> {
        let mut targets = Vec::with_capacity(scope.len());
        for id in scope {
            let idx = self
                .lookup(id)
                .ok_or_else(|| SimError::Scope(id.to_string()))?;
            if !targets.contains(&idx) {
                targets.push(idx);
            }
        }
        if let FaultAction::ServiceDependencyFailure { dependency } = fault {
            if self.topology.service_index(dependency).is_none() {
                return Err(SimError::Scope(dependency.clone()));
            }
        }
        let kind = fault.kind();
        for active in self.faults.iter().filter(|f| f.fault.kind() == kind) {
            if let Some(&clash) = targets.iter().find(|t| active.instances.contains(t)) {
                return Err(SimError::Conflict {
                    kind,
                    instance: self.instance_id(clash),
                });
            }
        }

        let handle = FaultHandle(self.next_handle);
        self.next_handle += 1;
        self.faults.push(ActiveFault {
            handle,
            fault: fault.clone(),
            instances: targets.clone(),
        });
        for &inst in &targets {
            self.emit_instance(
                EventKind::FaultApplied,
                inst,
                format!("handle={} {}", handle.0, kind),
            );
        }

        match *fault {
            FaultAction::InstanceKill { down_for_ms } => {
                for &inst in &targets {
                    self.instances[inst].restore_token += 1;
                    let token = self.instances[inst].restore_token;
                    self.take_down(inst, "instance_kill");
                    self.schedule(
                        self.now + down_for_ms * 1000,
                        Ev::Restore {
                            instance: inst,
                            token,
                        },
                    );
                }
            }
            FaultAction::MemoryExhaustion { crash_after_ms } => {
                for &inst in &targets {
                    self.instances[inst].crash_token += 1;
                    let token = self.instances[inst].crash_token;
                    self.schedule(
                        self.now + crash_after_ms * 1000,
                        Ev::Crash {
                            instance: inst,
                            token,
                        },
                    );
                }
            }
            FaultAction::DbConnectionTermination {} => {
                for &inst in &targets {
                    if self.has_tag(inst, ServiceTag::Db) {
                        self.cut_connections(inst, Failure::DbTerminated);
                    }
                }
            }
            _ => {}
        }
        Ok(handle)
    }

    pub fn revert_fault(&mut self, handle: FaultHandle) -> Result<(), SimError> {
        let pos = self
            .faults
            .iter()
            .position(|f| f.handle == handle)
            .ok_or(SimError::StaleHandle(handle.0))?;
        let active = self.faults.remove(pos);
        let kind = active.fault.kind();
        for &inst in &active.instances {
            self.emit_instance(
                EventKind::FaultReverted,
                inst,
                format!("handle={} {}", handle.0, kind),
            );
        }
        for &inst in &active.instances {
            match kind {
                FaultKind::InstanceKill => {
                    self.instances[inst].restore_token += 1;
                    self.bring_up(inst);
                }
                FaultKind::MemoryExhaustion => {
                    self.instances[inst].crash_token += 1;
                    self.bring_up(inst);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Revert every active fault, newest first.
    pub fn revert_all(&mut self) -> usize {
        let handles: Vec<FaultHandle> = self.faults.iter().rev().map(|f| f.handle).collect();
        for &h in &handles {
            self.revert_fault(h).expect("handle is active");
        }
        handles.len()
    }

    fn lookup(&self, id: &InstanceId) -> Option<usize> {
        let (service, index) = id.parse_replica()?;
        let si = self.topology.service_index(service)?;
        let svc = &self.services[si];
        (index < svc.replicas).then(|| svc.first_instance + index as usize)
    }

    fn instance_id(&self, inst: usize) -> InstanceId {
        let i = &self.instances[inst];
        InstanceId::replica(&self.topology.services[i.service].name, i.index)
    }

    fn has_tag(&self, inst: usize, tag: ServiceTag) -> bool {
        self.topology.services[self.instances[inst].service].has_tag(tag)
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, ev)));
    }

    fn roll(&mut self, bp: u32) -> bool {
        match bp {
            0 => false,
            p if p >= BP_SCALE => true,
            p => self.rng.chance_bp(p),
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival => self.on_arrival(),
            Ev::StartAttempt(call) => self.start_attempt(call),
            Ev::Deliver(attempt) => self.on_deliver(attempt),
            Ev::Timeout(attempt) => {
                if self.attempts.contains_key(&attempt) {
                    self.fail_attempt(attempt, Failure::Timeout);
                }
            }
            Ev::WorkDone(exec) => self.on_work_done(exec),
            Ev::Crash { instance, token } => {
                if self.instances[instance].crash_token == token {
                    self.take_down(instance, "memory_exhaustion");
                }
            }
            Ev::Restore { instance, token } => {
                if self.instances[instance].restore_token == token {
                    self.bring_up(instance);
                }
            }
        }
    }

    fn on_arrival(&mut self) {
        let ingress = self
            .topology
            .service_index(&self.topology.traffic.ingress)
            .expect("validated ingress");
        let call = self.new_call(ingress, None);
        self.begin_call(call);
        let traffic = &self.topology.traffic;
        let mut gap = traffic.base_interval_us();
        let jitter = traffic.jitter_us;
        if jitter > 0 {
            gap += self.rng.up_to(jitter);
        }
        self.schedule(self.now + gap, Ev::Arrival);
    }

    fn new_call(&mut self, service: usize, parent_exec: Option<u64>) -> u64 {
        let id = self.next_call;
        self.next_call += 1;
        let parent_call = parent_exec.and_then(|e| self.execs.get(&e)).map(|e| e.call);
        self.calls.insert(
            id,
            Call {
                service,
                parent_call,
                parent_exec,
                started_at: self.now,
                attempts: 0,
                last_instance: None,
            },
        );
        id
    }

    fn begin_call(&mut self, call: u64) {
        self.emit_call(EventKind::Arrival, call, None, None, String::new());
        self.start_attempt(call);
    }

    fn pick_instance(&mut self, service: usize) -> Option<usize> {
        let failover = self.topology.services[service].failover;
        let svc = &self.services[service];
        let (first, n, rr) = (svc.first_instance, svc.replicas, svc.rr);
        if failover {
            for k in 0..n {
                let i = (rr + k) % n;
                if self.instances[first + i as usize].up {
                    self.services[service].rr = (i + 1) % n;
                    return Some(first + i as usize);
                }
            }
            self.services[service].rr = (rr + 1) % n;
            None
        } else {
            self.services[service].rr = (rr + 1) % n;
            Some(first + rr as usize)
        }
    }

    fn start_attempt(&mut self, call_id: u64) {
        let Some(call) = self.calls.get_mut(&call_id) else {
            return;
        };
        call.attempts += 1;
        let service = call.service;
        let target = self.pick_instance(service);
        let attempt = self.next_attempt;
        self.next_attempt += 1;
        let Some(inst) = target else {
            self.attempts.insert(
                attempt,
                Attempt {
                    call: call_id,
                    instance: usize::MAX,
                },
            );
            self.fail_attempt(attempt, Failure::NoInstance);
            return;
        };
        self.attempts.insert(
            attempt,
            Attempt {
                call: call_id,
                instance: inst,
            },
        );
        if let Some(call) = self.calls.get_mut(&call_id) {
            call.last_instance = Some(self.instances[inst].index);
        }

        if self.fault_on(inst, FaultKind::DnsFailure).is_some() {
            self.fail_attempt(attempt, Failure::Dns);
            return;
        }
        if !self.instances[inst].up {
            self.fail_attempt(attempt, Failure::Refused);
            return;
        }
        let loss = match self.fault_on(inst, FaultKind::PacketLoss) {
            Some(&FaultAction::PacketLoss { prob_bp }) => prob_bp,
            _ => 0,
        };
        let lost = self.roll(loss);
        let delay = self.link_delay(inst);
        let timeout = self.topology.services[service].timeout_us;
        self.schedule(self.now + timeout, Ev::Timeout(attempt));
        if !lost {
            self.schedule(self.now + delay, Ev::Deliver(attempt));
        }
    }

    fn link_delay(&mut self, inst: usize) -> u64 {
        let mut delay = 0;
        if let Some(&FaultAction::NetworkLatency {
            delay_us,
            jitter_us,
        }) = self.fault_on(inst, FaultKind::NetworkLatency)
        {
            delay += delay_us;
            if jitter_us > 0 {
                delay += self.rng.up_to(jitter_us);
            }
        }
        if let Some(&FaultAction::BandwidthThrottle { bytes_per_sec }) =
            self.fault_on(inst, FaultKind::BandwidthThrottle)
        {
            delay += MESSAGE_SIZE_BYTES * 1_000_000 / bytes_per_sec;
        }
        delay
    }

    fn service_time(&self, inst: usize) -> u64 {
        let spec = &self.topology.services[self.instances[inst].service];
        let mut t = spec.service_time_us;
        if let Some(&FaultAction::CpuStress {
            service_time_factor_pct,
        }) = self.fault_on(inst, FaultKind::CpuStress)
        {
            t = t * u64::from(service_time_factor_pct) / 100;
        }
        if spec.has_tag(ServiceTag::Storage) {
            if let Some(&FaultAction::DiskIoSaturation { io_factor_pct }) =
                self.fault_on(inst, FaultKind::DiskIoSaturation)
            {
                t = t * u64::from(io_factor_pct) / 100;
            }
        }
        if spec.has_tag(ServiceTag::Cache) {
            if let Some(&FaultAction::CacheInvalidation { miss_factor_pct }) =
                self.fault_on(inst, FaultKind::CacheInvalidation)
            {
                t = t * u64::from(miss_factor_pct) / 100;
            }
        }
        t
    }

    fn fault_on(&self, inst: usize, kind: FaultKind) -> Option<&FaultAction> {
        self.faults
            .iter()
            .find(|f| f.fault.kind() == kind && f.instances.contains(&inst))
            .map(|f| &f.fault)
    }

    fn on_deliver(&mut self, attempt: u64) {
        let Some(a) = self.attempts.get(&attempt) else {
            return;
        };
        let inst = a.instance;
        let spec = &self.topology.services[self.instances[inst].service];
        let (concurrency, capacity) = (spec.concurrency, spec.queue_capacity as usize);
        let state = &mut self.instances[inst];
        if !state.up {
            self.fail_attempt(attempt, Failure::Refused);
        } else if state.busy < concurrency {
            self.start_exec(attempt, inst);
        } else if state.queue.len() < capacity {
            state.queue.push_back(attempt);
        } else {
            self.fail_attempt(attempt, Failure::QueueFull);
        }
    }

    fn start_exec(&mut self, attempt: u64, inst: usize) {
        let call = self.attempts[&attempt].call;
        let id = self.next_exec;
        self.next_exec += 1;
        self.instances[inst].busy += 1;
        self.instances[inst].execs.push(id);
        self.execs.insert(
            id,
            Exec {
                attempt,
                call,
                instance: inst,
                next_dep: 0,
                waiting_call: None,
                injected_error: None,
            },
        );
        let index = self.instances[inst].index;
        self.emit_call(EventKind::Dispatch, call, Some(index), None, String::new());

        if let Some(&FaultAction::ApiErrorInjection {
            prob_bp,
            error_code,
        }) = self.fault_on(inst, FaultKind::ApiErrorInjection)
        {
            if self.roll(prob_bp) {
                self.execs.get_mut(&id).expect("just inserted").injected_error = Some(error_code);
                self.schedule(self.now, Ev::WorkDone(id));
                return;
            }
        }
        let t = self.service_time(inst);
        self.schedule(self.now + t, Ev::WorkDone(id));
    }

    fn on_work_done(&mut self, exec: u64) {
        let Some(e) = self.execs.get(&exec) else {
            return;
        };
        match e.injected_error {
            Some(code) => self.finish_exec(exec, Err(Failure::Http(code))),
            None => self.continue_exec(exec),
        }
    }

    fn continue_exec(&mut self, exec: u64) {
        let Some(e) = self.execs.get_mut(&exec) else {
            return;
        };
        let inst = e.instance;
        let service = self.instances[inst].service;
        let next = e.next_dep;
        if let Some(&callee) = self.services[service].callees.get(next) {
            e.next_dep += 1;
            let dependency_down = match self.fault_on(inst, FaultKind::ServiceDependencyFailure) {
                Some(FaultAction::ServiceDependencyFailure { dependency }) => {
                    *dependency == self.topology.services[callee].name
                }
                _ => false,
            };
            if dependency_down {
                self.finish_exec(exec, Err(Failure::Dependency));
                return;
            }
            let child = self.new_call(callee, Some(exec));
            self.execs.get_mut(&exec).expect("live exec").waiting_call = Some(child);
            self.begin_call(child);
        } else {
            let corruption = if self.has_tag(inst, ServiceTag::Storage) {
                match self.fault_on(inst, FaultKind::StorageCorruption) {
                    Some(&FaultAction::StorageCorruption { prob_bp }) => prob_bp,
                    _ => 0,
                }
            } else {
                0
            };
            if self.roll(corruption) {
                self.finish_exec(exec, Err(Failure::Corrupt));
            } else {
                self.finish_exec(exec, Ok(()));
            }
        }
    }

    fn finish_exec(&mut self, exec: u64, outcome: Result<(), Failure>) {
        let Some(e) = self.execs.remove(&exec) else {
            return;
        };
        let inst = e.instance;
        let state = &mut self.instances[inst];
        state.busy -= 1;
        state.execs.retain(|&x| x != exec);
        match outcome {
            Ok(()) => self.succeed_attempt(e.attempt),
            Err(f) => self.fail_attempt(e.attempt, f),
        }
        self.drain_queue(inst);
    }

    fn drain_queue(&mut self, inst: usize) {
        let concurrency =
            self.topology.services[self.instances[inst].service].concurrency;
        loop {
            let state = &mut self.instances[inst];
            if !state.up || state.busy >= concurrency {
                return;
            }
            let Some(attempt) = state.queue.pop_front() else {
                return;
            };
            // Skip work whose caller already gave up.
            if self.attempts.contains_key(&attempt) {
                self.start_exec(attempt, inst);
            }
        }
    }

    fn succeed_attempt(&mut self, attempt: u64) {
        if let Some(a) = self.attempts.remove(&attempt) {
            self.finish_call(a.call, Ok(()));
        }
    }

    fn fail_attempt(&mut self, attempt: u64, failure: Failure) {
        let Some(a) = self.attempts.remove(&attempt) else {
            return;
        };
        let Some(call) = self.calls.get(&a.call) else {
            return;
        };
        let retry = &self.topology.services[call.service].retry;
        if failure.retryable() && call.attempts <= retry.max_retries {
            let at = self.now + retry.backoff_us;
            self.schedule(at, Ev::StartAttempt(a.call));
        } else {
            self.finish_call(a.call, Err(failure));
        }
    }

    fn finish_call(&mut self, call_id: u64, outcome: Result<(), Failure>) {
        let Some(call) = self.calls.get(&call_id) else {
            return;
        };
        let latency = self.now - call.started_at;
        let instance = call.last_instance;
        match outcome {
            Ok(()) => self.emit_call(
                EventKind::Complete,
                call_id,
                instance,
                Some(latency),
                String::new(),
            ),
            Err(Failure::QueueFull) => self.emit_call(
                EventKind::Drop,
                call_id,
                instance,
                None,
                Failure::QueueFull.label(),
            ),
            Err(f) => self.emit_call(EventKind::Fail, call_id, instance, None, f.label()),
        }
        let call = self.calls.remove(&call_id).expect("checked above");
        let Some(parent) = call.parent_exec else {
            return;
        };
        let waiting = self
            .execs
            .get(&parent)
            .is_some_and(|e| e.waiting_call == Some(call_id));
        if !waiting {
            return;
        }
        match outcome {
            Ok(()) => {
                self.execs.get_mut(&parent).expect("checked").waiting_call = None;
                self.continue_exec(parent);
            }
            Err(_) => self.finish_exec(parent, Err(Failure::Dependency)),
        }
    }

    /// Fail everything running or queued on `inst` and free its slots.
    fn cut_connections(&mut self, inst: usize, failure: Failure) {
        let state = &mut self.instances[inst];
        let running = std::mem::take(&mut state.execs);
        let queued: Vec<u64> = state.queue.drain(..).collect();
        state.busy = 0;
        let attempts: Vec<u64> = running
            .iter()
            .filter_map(|id| self.execs.remove(id))
            .map(|e| e.attempt)
            .collect();
        for a in attempts.into_iter().chain(queued) {
            self.fail_attempt(a, failure);
        }
    }

    fn take_down(&mut self, inst: usize, why: &str) {
        if !self.instances[inst].up {
            return;
        }
        self.instances[inst].up = false;
        self.emit_instance(EventKind::InstanceDown, inst, why.to_string());
        self.cut_connections(inst, Failure::Reset);
    }

    fn bring_up(&mut self, inst: usize) {
        if self.instances[inst].up {
            return;
        }
        self.instances[inst].up = true;
        self.emit_instance(EventKind::InstanceUp, inst, String::new());
    }

    fn emit_call(
        &mut self,
        kind: EventKind,
        call_id: u64,
        instance: Option<u32>,
        latency_us: Option<u64>,
        detail: String,
    ) {
        let call = &self.calls[&call_id];
        let event = TraceEvent {
            t_us: self.now,
            kind,
            request_id: call_id,
            parent_id: call.parent_call,
            service: self.topology.services[call.service].name.clone(),
            instance,
            latency_us,
            detail,
        };
        self.trace.push(event);
    }

    fn emit_instance(&mut self, kind: EventKind, inst: usize, detail: String) {
        let i = &self.instances[inst];
        let event = TraceEvent {
            t_us: self.now,
            kind,
            request_id: 0,
            parent_id: None,
            service: self.topology.services[i.service].name.clone(),
            instance: Some(i.index),
            latency_us: None,
            detail,
        };
        self.trace.push(event);
    }
}
