//! Experiment lifecycle: validate, baseline, staged inject/observe/revert,
//! recovery check. Every transition is audited and every exit path reverts.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audit::{AuditAction, AuditChain};
use crate::hypothesis::{
    evaluate, evaluate_now, measure_baseline, read_probes, watch, EvaluationVerdict, HypothesisError,
    MetricSource, ProbeReading, SteadyStateSnapshot, WatchOutcome,
};
use crate::injection::{plan_stages, Driver, InstanceId, PlanError, StagePlan};
use crate::model::{
    Experiment, FaultKind, Finding, FindingCode, MetricKind, MetricSelector, Severity, ValidationReport, BP_SCALE,
};
use crate::resilience::{
    availability, detect_incidents, evaluate_slos, summarize, HealthRule, Incident, IncidentSummary, SloTarget,
    SloVerdict, WatcherRecord,
};
use crate::sim::metrics::sample_metric;
use crate::sim::topology::Topology;
use crate::validate::{validate_experiment, ValidationPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", content = "stage", rename_all = "snake_case")]
pub enum LifecycleState {
    Validating,
    MeasuringBaseline,
    Injecting(usize),
    Observing(usize),
    Reverting,
    VerifyingRecovery,
    Completed,
    Aborted,
    Failed,
}

impl LifecycleState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            LifecycleState::Completed | LifecycleState::Aborted | LifecycleState::Failed
        )
    }

    /// The transition graph. Any live state may fall through to `Reverting`.
    pub fn can_go_to(self, next: LifecycleState) -> bool {
        use LifecycleState::*;
        if !self.is_terminal() && next == Reverting && self != Reverting {
            return true;
        }
        match (self, next) {
            (Validating, MeasuringBaseline) => true,
            (MeasuringBaseline, Injecting(0)) => true,
            (Injecting(a), Observing(b)) => a == b,
            (Observing(a), Injecting(b)) => b == a + 1,
            (Reverting, VerifyingRecovery | Aborted | Failed) => true,
            (VerifyingRecovery, Completed | Aborted | Failed) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    HypothesisHeld,
    HypothesisViolated,
    Aborted,
    ConfigInvalid,
    DriverFailed,
}

impl RunStatus {
    pub const ALL: [RunStatus; 5] = [
        RunStatus::HypothesisHeld,
        RunStatus::HypothesisViolated,
        RunStatus::Aborted,
        RunStatus::ConfigInvalid,
        RunStatus::DriverFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::HypothesisHeld => "hypothesis_held",
            RunStatus::HypothesisViolated => "hypothesis_violated",
            RunStatus::Aborted => "aborted",
            RunStatus::ConfigInvalid => "config_invalid",
            RunStatus::DriverFailed => "driver_failed",
        }
    }

    /// Accepts both `hypothesis_held` and `HypothesisHeld`.
    pub fn parse(s: &str) -> Option<RunStatus> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        RunStatus::ALL
            .into_iter()
            .find(|st| st.as_str().replace('_', "") == norm)
    }

    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::HypothesisHeld => 0,
            RunStatus::HypothesisViolated => 1,
            RunStatus::Aborted => 2,
            RunStatus::ConfigInvalid => 3,
            RunStatus::DriverFailed => 4,
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub evaluation: usize,
    pub t_us: u64,
    pub source_induced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub fault: FaultKind,
    pub instances: Vec<InstanceId>,
    pub scope_bp: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle_id: Option<u64>,
    pub injected_at_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverted_at_us: Option<u64>,
    pub verdicts: Vec<EvaluationVerdict>,
    /// Probe values over trailing windows at the end of the stage.
    pub readings: Vec<ProbeReading>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<ViolationRecord>,
}

impl StageRecord {
    pub fn failed_verdicts(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.passed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub verified: bool,
    pub verdicts: Vec<EvaluationVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResilienceReport {
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub incidents: Vec<Incident>,
    pub summary: IncidentSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability_bp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate_bp: Option<i64>,
    pub slo_verdicts: Vec<SloVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment_id: String,
    pub driver: String,
    pub status: RunStatus,
    pub final_state: LifecycleState,
    pub transitions: Vec<LifecycleState>,
    pub findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<SteadyStateSnapshot>,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<RecoveryRecord>,
    pub resilience: ResilienceReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alarms: Vec<String>,
    pub started_at_us: u64,
    pub ended_at_us: u64,
    pub audit_head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_digest: Option<String>,
    /// The experiment document as run, for replay.
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
}

impl ExperimentResult {
    pub fn violations(&self) -> usize {
        self.stages.iter().filter(|s| s.violation.is_some()).count()
    }

    pub fn incident_count(&self) -> u64 {
        self.resilience.summary.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Interrupt,
    Panic,
}

pub type StateHook = Box<dyn FnMut(LifecycleState) -> HookAction + Send>;

pub struct RunOptions {
    pub actor: String,
    /// Wall-clock start (unix microseconds) stamped on the result.
    pub started_at_us: u64,
    pub policy: ValidationPolicy,
    /// Called on entry to every state; lets tests interrupt or crash the run.
    pub hook: Option<StateHook>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            actor: "orchestrator".into(),
            started_at_us: 0,
            policy: ValidationPolicy::default(),
            hook: None,
        }
    }
}

/// Reverts everything still active when dropped, even while unwinding.
struct Cleanup<'a> {
    driver: &'a mut dyn Driver,
}

impl Drop for Cleanup<'_> {
    fn drop(&mut self) {
        if !self.driver.active_handles().is_empty() {
            let _ = self.driver.revert_all();
        }
    }
}

enum Halt {
    Interrupted,
    AuditFailed(String),
}

enum Phase {
    Stages { aborted: bool },
    Invalid,
    DriverFailed(String),
}

struct Runner<'a, 'b> {
    exp: &'a Experiment,
    guard: Cleanup<'b>,
    source: &'a mut dyn MetricSource,
    audit: &'a mut AuditChain,
    hook: Option<StateHook>,
    actor: String,
    state: Option<LifecycleState>,
    transitions: Vec<LifecycleState>,
    findings: Vec<Finding>,
    baseline: Option<SteadyStateSnapshot>,
    stages: Vec<StageRecord>,
    watcher: Vec<WatcherRecord>,
    alarms: Vec<String>,
    inject_start_us: Option<u64>,
}

impl Runner<'_, '_> {
    fn log(&mut self, action: AuditAction, payload: serde_json::Value) -> Result<(), Halt> {
        let ts = self.source.now_us();
        self.audit
            .append(&self.actor, action, ts, &payload)
            .map(|_| ())
            .map_err(|e| Halt::AuditFailed(e.to_string()))
    }

    fn enter(&mut self, next: LifecycleState) -> Result<(), Halt> {
        if let Some(cur) = self.state {
            debug_assert!(cur.can_go_to(next), "illegal transition {cur:?} -> {next:?}");
        }
        let from = self.state;
        self.state = Some(next);
        self.transitions.push(next);
        self.log(AuditAction::StateTransition, json!({ "from": from, "to": next }))?;
        let action = self.hook.as_mut().map_or(HookAction::Continue, |h| h(next));
        match action {
            HookAction::Continue => Ok(()),
            HookAction::Interrupt if next.is_terminal() => Ok(()),
            HookAction::Interrupt => Err(Halt::Interrupted),
            HookAction::Panic => panic!("test hook panic in {next:?}"),
        }
    }

    fn stages_phase(&mut self, policy: &ValidationPolicy) -> Result<Phase, Halt> {
        let exp = self.exp;
        self.enter(LifecycleState::Validating)?;
        let report = validate_experiment(exp, &self.guard.driver.capabilities(), policy);
        self.log(
            AuditAction::Validated,
            json!({ "passed": report.passed, "findings": report.findings }),
        )?;
        self.findings = report.findings.clone();
        if !report.passed {
            return Ok(Phase::Invalid);
        }
        let plan = match plan_stages(exp, &*self.guard.driver) {
            Ok(plan) => plan,
            Err(PlanError::NondecreasingScope { .. }) => {
                self.findings.push(Finding {
                    code: FindingCode::NondecreasingScope,
                    severity: Severity::Error,
                    message: "stage scopes must not shrink".into(),
                });
                return Ok(Phase::Invalid);
            }
            Err(e) => return Ok(Phase::DriverFailed(e.to_string())),
        };

        self.enter(LifecycleState::MeasuringBaseline)?;
        let hyp = &exp.hypothesis;
        let now = self.source.now_us();
        let need_us = hyp.baseline_window_ms * 1000;
        if now < need_us {
            let warm_ms = (need_us - now).div_ceil(1000);
            if let Err(e) = self.source.advance(warm_ms) {
                return Ok(Phase::DriverFailed(e.to_string()));
            }
        }
        let snapshot = match measure_baseline(&hyp.probes, self.source, hyp.baseline_window_ms) {
            Ok(s) => s,
            Err(HypothesisError::Source(e)) => return Ok(Phase::DriverFailed(e.to_string())),
            Err(e) => return Ok(Phase::DriverFailed(e.to_string())),
        };
        let verdict = evaluate(hyp, &snapshot.readings, snapshot.taken_at_us);
        self.log(
            AuditAction::Baseline,
            json!({ "snapshot": snapshot, "passed": verdict.passed }),
        )?;
        self.baseline = Some(snapshot);
        if !verdict.passed {
            self.findings.push(Finding {
                code: FindingCode::BaselineNotSteady,
                severity: Severity::Error,
                message: format!(
                    "steady state violated before injection ({} deviation(s))",
                    verdict.deviations.len()
                ),
            });
            return Ok(Phase::Invalid);
        }

        self.run_stages(&plan)
    }

    fn run_stages(&mut self, plan: &StagePlan) -> Result<Phase, Halt> {
        let exp = self.exp;
        for planned in &plan.stages {
            let i = planned.index;
            self.enter(LifecycleState::Injecting(i))?;
            let now = self.source.now_us();
            self.inject_start_us.get_or_insert(now);
            let handle = match self.guard.driver.inject(&planned.fault, &planned.instances) {
                Ok(h) => h,
                Err(e) => {
                    self.log(AuditAction::Alarm, json!({ "stage": i, "error": e.to_string() }))?;
                    return Ok(Phase::DriverFailed(e.to_string()));
                }
            };
            let scope_bp = if planned.replicas == 0 {
                0
            } else {
                (u64::from(planned.affected()) * u64::from(BP_SCALE)).div_ceil(u64::from(planned.replicas)) as u32
            };
            self.log(
                AuditAction::Inject,
                json!({
                    "stage": i,
                    "handle_id": handle.handle_id,
                    "fault": planned.fault,
                    "instances": planned.instances,
                }),
            )?;
            self.stages.push(StageRecord {
                stage: i,
                fault: planned.fault.kind(),
                instances: planned.instances.clone(),
                scope_bp,
                handle_id: Some(handle.handle_id),
                injected_at_us: now,
                reverted_at_us: None,
                verdicts: Vec::new(),
                readings: Vec::new(),
                violation: None,
            });

            self.enter(LifecycleState::Observing(i))?;
            let outcome = watch(&exp.hypothesis, self.source, &exp.abort, planned.duration_ms);
            for v in outcome.verdicts() {
                self.watcher.push(WatcherRecord {
                    t_us: v.t_us,
                    passed: v.passed,
                });
                self.log(
                    AuditAction::CheckRun,
                    json!({ "phase": "observe", "stage": i, "t_us": v.t_us, "passed": v.passed }),
                )?;
            }
            let readings = read_probes(&exp.hypothesis, self.source)
                .into_iter()
                .filter_map(Result::ok)
                .collect();
            let record = self.stages.last_mut().expect("pushed above");
            record.verdicts = outcome.verdicts().to_vec();
            record.readings = readings;
            if let WatchOutcome::Violation {
                evaluation,
                t_us,
                source_induced,
                ..
            } = outcome
            {
                let violation = ViolationRecord {
                    evaluation,
                    t_us,
                    source_induced,
                };
                record.violation = Some(violation);
                self.log(AuditAction::Abort, json!({ "stage": i, "violation": violation }))?;
                return Ok(Phase::Stages { aborted: true });
            }

            match self.guard.driver.revert(handle.handle_id) {
                Ok(()) => {
                    let t = self.source.now_us();
                    self.stages.last_mut().expect("pushed above").reverted_at_us = Some(t);
                    self.log(AuditAction::Revert, json!({ "stage": i, "handle_id": handle.handle_id }))?;
                }
                Err(e) => {
                    self.log(AuditAction::Alarm, json!({ "stage": i, "error": e.to_string() }))?;
                    return Ok(Phase::DriverFailed(e.to_string()));
                }
            }
        }
        Ok(Phase::Stages { aborted: false })
    }

    /// Revert everything still active and audit it. Returns false when the
    /// driver could not restore its state.
    fn revert_everything(&mut self, reason: &str) -> Result<bool, Halt> {
        let active = self.guard.driver.active_handles();
        match self.guard.driver.revert_all() {
            Ok(n) => {
                let t = self.source.now_us();
                for s in &mut self.stages {
                    if s.reverted_at_us.is_none() && s.handle_id.is_some_and(|h| active.contains(&h)) {
                        s.reverted_at_us = Some(t);
                    }
                }
                self.log(
                    AuditAction::RevertAll,
                    json!({ "reason": reason, "reverted": n, "handles": active }),
                )?;
                Ok(true)
            }
            Err(e) => {
                let msg = e.to_string();
                self.alarms.push(msg.clone());
                self.log(AuditAction::Alarm, json!({ "reason": reason, "error": msg }))?;
                Ok(false)
            }
        }
    }

    fn verify_recovery(&mut self) -> Result<RecoveryRecord, Halt> {
        let exp = self.exp;
        let hyp = &exp.hypothesis;
        let interval = hyp.evaluation_interval_ms.max(1);
        let needed = exp.rollback.recovery_checks;
        let budget = exp.rollback.recovery_timeout_ms / interval;
        let mut record = RecoveryRecord::default();
        if needed == 0 {
            record.verified = true;
            return Ok(record);
        }
        let mut consecutive = 0;
        for _ in 0..budget {
            let verdict = match self.source.advance(interval) {
                Ok(()) => evaluate_now(hyp, self.source),
                Err(e) => EvaluationVerdict {
                    t_us: self.source.now_us(),
                    passed: false,
                    deviations: vec![crate::hypothesis::Deviation {
                        probe: 0,
                        value: 0,
                        bound: None,
                        magnitude: 0,
                        source_error: Some(e.to_string()),
                    }],
                },
            };
            self.watcher.push(WatcherRecord {
                t_us: verdict.t_us,
                passed: verdict.passed,
            });
            self.log(
                AuditAction::CheckRun,
                json!({ "phase": "recovery", "t_us": verdict.t_us, "passed": verdict.passed }),
            )?;
            consecutive = if verdict.passed { consecutive + 1 } else { 0 };
            record.verdicts.push(verdict);
            if consecutive >= needed {
                record.verified = true;
                break;
            }
        }
        Ok(record)
    }

    fn resilience(&self) -> ResilienceReport {
        let Some(trace) = self.source.trace() else {
            return ResilienceReport::default();
        };
        let exp = self.exp;
        let t1 = self.source.now_us();
        let t0 = self.inject_start_us.unwrap_or(t1);
        let mut rule = HealthRule::default_for(&exp.target.service);
        for p in exp.hypothesis.probes.iter().filter(|p| p.service == exp.target.service) {
            match (p.metric, p.tolerance.max) {
                (MetricKind::ErrorRateBp, Some(max)) => rule.max_error_rate_bp = Some(max.max(0) as u32),
                (MetricKind::LatencyP95Us, Some(max)) => rule.max_latency_p95_us = Some(max.max(0) as u64),
                _ => {}
            }
        }
        let incidents = detect_incidents(&trace, &rule, &self.watcher, t0, t1);
        let error = sample_metric(
            &trace,
            &MetricSelector {
                service: exp.target.service.clone(),
                kind: MetricKind::ErrorRateBp,
            },
            t0,
            t1,
        );
        let slos: Vec<SloTarget> = exp
            .hypothesis
            .probes
            .iter()
            .map(|p| SloTarget {
                service: p.service.clone(),
                metric: p.metric,
                objective: p.tolerance,
                window_ms: (t1 - t0) / 1000,
            })
            .collect();
        ResilienceReport {
            window_start_us: t0,
            window_end_us: t1,
            summary: summarize(&incidents),
            incidents,
            availability_bp: availability(&trace, &rule, t0, t1),
            error_rate_bp: (!error.empty).then_some(error.value),
            slo_verdicts: evaluate_slos(&trace, &slos, t1),
        }
    }
}

/// Execute an experiment end to end. Failures are encoded in the returned
/// status; nothing is thrown.
pub fn run_experiment(
    exp: &Experiment,
    driver: &mut dyn Driver,
    source: &mut dyn MetricSource,
    audit: &mut AuditChain,
    options: RunOptions,
) -> ExperimentResult {
    let driver_name = driver.name().to_string();
    let t_start = source.now_us();
    let RunOptions {
        actor,
        started_at_us,
        policy,
        hook,
    } = options;
    let mut r = Runner {
        exp,
        guard: Cleanup { driver },
        source,
        audit,
        hook,
        actor,
        state: None,
        transitions: Vec::new(),
        findings: Vec::new(),
        baseline: None,
        stages: Vec::new(),
        watcher: Vec::new(),
        alarms: Vec::new(),
        inject_start_us: None,
    };

    let phase = r.stages_phase(&policy);
    let (status, final_state, recovery) = match phase {
        Err(Halt::AuditFailed(msg)) => {
            r.alarms.push(format!("audit append failed: {msg}"));
            let _ = r.guard.driver.revert_all();
            (RunStatus::DriverFailed, LifecycleState::Failed, None)
        }
        Err(Halt::Interrupted) => finish_interrupted(&mut r),
        Ok(Phase::Invalid) => finish_failed(&mut r, RunStatus::ConfigInvalid, "config_invalid"),
        Ok(Phase::DriverFailed(msg)) => {
            r.alarms.push(msg);
            finish_failed(&mut r, RunStatus::DriverFailed, "driver_failed")
        }
        Ok(Phase::Stages { aborted }) => finish_stages(&mut r, aborted),
    };
    if r.state != Some(final_state) {
        // the audit sink is gone or a hook fired; the state is still recorded
        r.transitions.push(final_state);
    }

    let resilience = r.resilience();
    let trace_digest = r.source.trace().map(|t| t.digest());
    let t_end = r.source.now_us();
    ExperimentResult {
        experiment_id: exp.id.clone(),
        driver: driver_name,
        status,
        final_state,
        transitions: r.transitions,
        findings: r.findings,
        baseline: r.baseline,
        stages: r.stages,
        recovery,
        resilience,
        alarms: r.alarms,
        started_at_us,
        ended_at_us: started_at_us + (t_end - t_start),
        audit_head: r.audit.head().to_hex(),
        trace_digest,
        experiment: exp.clone(),
        topology: None,
    }
}

type Finish = (RunStatus, LifecycleState, Option<RecoveryRecord>);

fn finish_failed(r: &mut Runner<'_, '_>, status: RunStatus, reason: &str) -> Finish {
    let outcome = (|| -> Result<RunStatus, Halt> {
        r.enter(LifecycleState::Reverting).or_else(ignore_interrupt)?;
        let clean = r.revert_everything(reason)?;
        let status = if clean { status } else { RunStatus::DriverFailed };
        r.enter(LifecycleState::Failed)?;
        Ok(status)
    })();
    match outcome {
        Ok(s) => (s, LifecycleState::Failed, None),
        Err(_) => {
            let _ = r.guard.driver.revert_all();
            (RunStatus::DriverFailed, LifecycleState::Failed, None)
        }
    }
}

fn ignore_interrupt(h: Halt) -> Result<(), Halt> {
    match h {
        Halt::Interrupted => Ok(()),
        other => Err(other),
    }
}

fn finish_interrupted(r: &mut Runner<'_, '_>) -> Finish {
    let outcome = (|| -> Result<bool, Halt> {
        if r.state != Some(LifecycleState::Reverting) {
            r.enter(LifecycleState::Reverting).or_else(ignore_interrupt)?;
        }
        let clean = r.revert_everything("interrupted")?;
        r.enter(if clean {
            LifecycleState::Aborted
        } else {
            LifecycleState::Failed
        })?;
        Ok(clean)
    })();
    match outcome {
        Ok(true) => (RunStatus::Aborted, LifecycleState::Aborted, None),
        _ => {
            let _ = r.guard.driver.revert_all();
            (RunStatus::DriverFailed, LifecycleState::Failed, None)
        }
    }
}

fn finish_stages(r: &mut Runner<'_, '_>, aborted: bool) -> Finish {
    let mut interrupted = false;
    let outcome = (|| -> Result<Finish, Halt> {
        if let Err(h) = r.enter(LifecycleState::Reverting) {
            ignore_interrupt(h)?;
            interrupted = true;
        }
        let reason = if aborted { "abort" } else { "completed" };
        if !r.revert_everything(reason)? || !r.guard.driver.heal_check() {
            r.alarms.push("driver did not return to a clean state".into());
            r.log(AuditAction::Alarm, json!({ "reason": "heal_check" }))?;
            r.enter(LifecycleState::Failed)?;
            return Ok((RunStatus::DriverFailed, LifecycleState::Failed, None));
        }
        if interrupted {
            r.enter(LifecycleState::Aborted)?;
            return Ok((RunStatus::Aborted, LifecycleState::Aborted, None));
        }
        if let Err(h) = r.enter(LifecycleState::VerifyingRecovery) {
            ignore_interrupt(h)?;
            r.enter(LifecycleState::Aborted)?;
            return Ok((RunStatus::Aborted, LifecycleState::Aborted, None));
        }
        let recovery = r.verify_recovery()?;
        let any_fail = r.stages.iter().any(|s| s.failed_verdicts() > 0);
        let (status, state) = match (aborted, recovery.verified) {
            (true, true) => (RunStatus::Aborted, LifecycleState::Aborted),
            (_, false) => (RunStatus::HypothesisViolated, LifecycleState::Completed),
            (false, true) if any_fail => (RunStatus::HypothesisViolated, LifecycleState::Completed),
            (false, true) => (RunStatus::HypothesisHeld, LifecycleState::Completed),
        };
        r.enter(state)?;
        Ok((status, state, Some(recovery)))
    })();
    match outcome {
        Ok(f) => f,
        Err(Halt::Interrupted) => finish_interrupted(r),
        Err(Halt::AuditFailed(msg)) => {
            r.alarms.push(format!("audit append failed: {msg}"));
            let _ = r.guard.driver.revert_all();
            (RunStatus::DriverFailed, LifecycleState::Failed, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DryRun {
    pub report: ValidationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<StagePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_error: Option<String>,
}

/// Validate and plan without touching the target.
pub fn dry_run(
    exp: &Experiment,
    driver: &dyn Driver,
    policy: &ValidationPolicy,
    audit: &mut AuditChain,
    ts_us: u64,
) -> Result<DryRun, crate::audit::AuditError> {
    let mut report = validate_experiment(exp, &driver.capabilities(), policy);
    let (plan, plan_error) = match plan_stages(exp, driver) {
        Ok(plan) => (Some(plan), None),
        Err(e) => {
            if matches!(e, PlanError::NondecreasingScope { .. }) && !report.has(FindingCode::NondecreasingScope) {
                let mut findings = report.findings;
                findings.push(Finding {
                    code: FindingCode::NondecreasingScope,
                    severity: Severity::Error,
                    message: e.to_string(),
                });
                report = ValidationReport::from_findings(findings);
            }
            (None, Some(e.to_string()))
        }
    };
    let out = DryRun {
        report,
        plan,
        plan_error,
    };
    audit.append("orchestrator", AuditAction::DryRun, ts_us, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::verify;
    use crate::injection::tests::FakeDriver;
    use crate::model::{FaultAction, Tolerance};
    use crate::parse::{parse_experiment, tests::MINIMAL};
    use crate::sim::topology::tests::single;
    use crate::sim::{share, SimDriver, SimSource, World};

    fn fixture(max_latency_us: i64, stages: usize) -> (Experiment, SimDriver, SimSource) {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        exp.hypothesis.probes[0].tolerance = Tolerance::at_most(max_latency_us);
        let stage = exp.stages[0].clone();
        exp.stages = (0..stages)
            .map(|i| {
                let mut s = stage.clone();
                s.scope.instance_fraction_bp = Some(2500 * (i as u32 + 1));
                s
            })
            .collect();
        exp.compliance.max_scope_bp = 10_000;
        let world = share(World::build(single(4, 1000, 100), exp.seed).unwrap());
        (exp, SimDriver::new(world.clone()), SimSource::new(world))
    }

    fn run(exp: &Experiment, d: &mut SimDriver, s: &mut SimSource, audit: &mut AuditChain) -> ExperimentResult {
        run_experiment(exp, d, s, audit, RunOptions::default())
    }

    fn actions(audit: &AuditChain, action: AuditAction) -> Vec<&serde_json::Value> {
        audit
            .entries()
            .filter(|(r, _)| r.action == action)
            .map(|(_, p)| p)
            .collect()
    }

    #[test]
    fn tolerated_fault_holds() {
        let (exp, mut d, mut s) = fixture(200_000, 2);
        let mut audit = AuditChain::in_memory();
        let r = run(&exp, &mut d, &mut s, &mut audit);
        assert_eq!(r.status, RunStatus::HypothesisHeld, "{r:#?}");
        assert_eq!(r.final_state, LifecycleState::Completed);
        assert!(d.active_handles().is_empty());
        assert!(r.stages.iter().all(|st| st.verdicts.iter().all(|v| v.passed)));
        assert!(r.recovery.as_ref().unwrap().verified);
        assert!(verify(&audit.to_jsonl()).is_ok());
        assert_eq!(r.audit_head, audit.head().to_hex());
        assert!(r.transitions.windows(2).all(|w| w[0].can_go_to(w[1])), "{:?}", r.transitions);
    }

    #[test]
    fn intolerable_fault_aborts_at_stage_zero() {
        let (exp, mut d, mut s) = fixture(50_000, 3);
        let mut audit = AuditChain::in_memory();
        let r = run(&exp, &mut d, &mut s, &mut audit);
        assert_eq!(r.status, RunStatus::Aborted);
        assert_eq!(r.stages.len(), 1);
        let v = r.stages[0].violation.unwrap();
        assert_eq!(v.evaluation, 1);
        let injects = actions(&audit, AuditAction::Inject);
        assert_eq!(injects.len(), 1);
        assert_eq!(injects[0]["stage"], 0);
        assert!(d.active_handles().is_empty());
        assert_eq!(actions(&audit, AuditAction::Abort).len(), 1);
    }

    #[test]
    fn tolerated_but_flapping_is_violated_without_abort() {
        let (mut exp, mut d, mut s) = fixture(50_000, 1);
        exp.abort.max_consecutive_violations = 100;
        let mut audit = AuditChain::in_memory();
        let r = run(&exp, &mut d, &mut s, &mut audit);
        assert_eq!(r.status, RunStatus::HypothesisViolated);
        assert!(d.active_handles().is_empty());
    }

    #[test]
    fn unsupported_fault_is_config_invalid_without_injects() {
        let (mut exp, _, _) = fixture(200_000, 1);
        exp.stages[0].fault = FaultAction::StorageCorruption { prob_bp: 100 };
        let mut driver = FakeDriver::with_service("api", 4);
        let world = share(World::build(single(4, 1000, 100), 1).unwrap());
        let mut source = SimSource::new(world);
        let mut audit = AuditChain::in_memory();
        let r = run_experiment(&exp, &mut driver, &mut source, &mut audit, RunOptions::default());
        assert_eq!(r.status, RunStatus::ConfigInvalid);
        assert_eq!(r.final_state, LifecycleState::Failed);
        assert!(actions(&audit, AuditAction::Inject).is_empty());
    }

    #[test]
    fn unsteady_baseline_refuses_to_inject() {
        let (exp, mut d, mut s) = fixture(10, 1);
        let mut audit = AuditChain::in_memory();
        let r = run(&exp, &mut d, &mut s, &mut audit);
        assert_eq!(r.status, RunStatus::ConfigInvalid);
        assert!(r.findings.iter().any(|f| f.code == FindingCode::BaselineNotSteady));
        assert!(actions(&audit, AuditAction::Inject).is_empty());
    }

    #[test]
    fn unknown_scope_service_is_a_driver_failure() {
        let (mut exp, mut d, mut s) = fixture(200_000, 1);
        exp.stages[0].scope.service = "ghost".into();
        let r = run(&exp, &mut d, &mut s, &mut AuditChain::in_memory());
        assert_eq!(r.status, RunStatus::DriverFailed);
    }

    #[test]
    fn interrupts_at_every_state_leave_nothing_active() {
        let points = [
            LifecycleState::Validating,
            LifecycleState::MeasuringBaseline,
            LifecycleState::Injecting(0),
            LifecycleState::Observing(0),
            LifecycleState::Injecting(1),
            LifecycleState::Observing(1),
            LifecycleState::Reverting,
            LifecycleState::VerifyingRecovery,
        ];
        for point in points {
            let (exp, mut d, mut s) = fixture(200_000, 2);
            let mut audit = AuditChain::in_memory();
            let options = RunOptions {
                hook: Some(Box::new(move |st| {
                    if st == point {
                        HookAction::Interrupt
                    } else {
                        HookAction::Continue
                    }
                })),
                ..RunOptions::default()
            };
            let r = run_experiment(&exp, &mut d, &mut s, &mut audit, options);
            assert_eq!(r.status, RunStatus::Aborted, "{point:?}");
            assert!(d.active_handles().is_empty(), "{point:?}");
            assert!(r.transitions.windows(2).all(|w| w[0].can_go_to(w[1])), "{:?}", r.transitions);
        }
    }

    #[test]
    fn panics_still_revert() {
        let (exp, mut d, mut s) = fixture(200_000, 2);
        let world = d.world().clone();
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let options = RunOptions {
                hook: Some(Box::new(|st| {
                    if st == LifecycleState::Observing(1) {
                        HookAction::Panic
                    } else {
                        HookAction::Continue
                    }
                })),
                ..RunOptions::default()
            };
            run_experiment(&exp, &mut d, &mut s, &mut AuditChain::in_memory(), options)
        }));
        assert!(caught.is_err());
        assert!(world.lock().unwrap_or_else(|p| p.into_inner()).active_faults().is_empty());
    }

    #[test]
    fn audit_failure_stops_injection() {
        struct Broken;
        impl std::io::Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("read-only"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let (exp, mut d, mut s) = fixture(200_000, 2);
        let mut audit = AuditChain::with_writer(Box::new(Broken));
        let r = run(&exp, &mut d, &mut s, &mut audit);
        assert_eq!(r.status, RunStatus::DriverFailed);
        assert!(r.stages.is_empty());
        assert!(d.active_handles().is_empty());
    }

    #[test]
    fn stage_reverts_precede_next_injects() {
        let (exp, mut d, mut s) = fixture(200_000, 3);
        let mut audit = AuditChain::in_memory();
        run(&exp, &mut d, &mut s, &mut audit);
        let seq: Vec<AuditAction> = audit
            .records()
            .iter()
            .map(|r| r.action)
            .filter(|a| matches!(a, AuditAction::Inject | AuditAction::Revert))
            .collect();
        assert_eq!(
            seq,
            [AuditAction::Inject, AuditAction::Revert].repeat(3)
        );
    }

    #[test]
    fn dry_run_is_pure() {
        let (exp, d, _) = fixture(200_000, 2);
        let mut audit = AuditChain::in_memory();
        let before = d.world().lock().unwrap().trace().clone();
        let a = dry_run(&exp, &d, &ValidationPolicy::default(), &mut audit, 0).unwrap();
        let b = dry_run(&exp, &d, &ValidationPolicy::default(), &mut audit, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.report.passed);
        assert_eq!(a.plan.unwrap().stages.len(), 2);
        assert_eq!(&before, d.world().lock().unwrap().trace());
        assert!(d.active_handles().is_empty());
        assert_eq!(audit.records()[0].action, AuditAction::DryRun);
    }

    #[test]
    fn status_names_round_trip() {
        for st in RunStatus::ALL {
            assert_eq!(RunStatus::parse(st.as_str()), Some(st));
        }
        assert_eq!(RunStatus::parse("Aborted"), Some(RunStatus::Aborted));
        assert_eq!(RunStatus::parse("HypothesisHeld"), Some(RunStatus::HypothesisHeld));
    }
}
