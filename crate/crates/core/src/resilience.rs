//! Resilience metrics: incidents, MTTR/MTTD, availability and SLO verdicts.
//!
//! MTTR runs from failure onset (first unhealthy tick) to recovery (start of
//! the first healthy run of `debounce_ticks` ticks). MTTD runs from onset to
//! the first failing watcher evaluation.

use serde::{Deserialize, Serialize};

use crate::model::{MetricKind, MetricSelector, Tolerance, BP_SCALE};
use crate::sim::metrics::sample_metric;
use crate::sim::trace::Trace;

/// Per-tick health predicate. A tick without finished calls is healthy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthRule {
    pub service: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_error_rate_bp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_p95_us: Option<u64>,
    pub tick_ms: u64,
    pub debounce_ticks: u32,
}

impl HealthRule {
    pub const DEFAULT_TICK_MS: u64 = 100;
    pub const DEFAULT_DEBOUNCE: u32 = 3;
    pub const DEFAULT_MAX_ERROR_RATE_BP: u32 = 100;

    /// 100 ms ticks, healthy while at most 1% of calls fail, 3-tick debounce.
    pub fn default_for(service: &str) -> Self {
        HealthRule {
            service: service.to_string(),
            max_error_rate_bp: Some(Self::DEFAULT_MAX_ERROR_RATE_BP),
            max_latency_p95_us: None,
            tick_ms: Self::DEFAULT_TICK_MS,
            debounce_ticks: Self::DEFAULT_DEBOUNCE,
        }
    }

    fn tick_us(&self) -> u64 {
        self.tick_ms.max(1) * 1000
    }

    fn healthy_at(&self, trace: &Trace, t0: u64, t1: u64) -> bool {
        let selector = |kind| MetricSelector {
            service: self.service.clone(),
            kind,
        };
        if let Some(max) = self.max_error_rate_bp {
            let s = sample_metric(trace, &selector(MetricKind::ErrorRateBp), t0, t1);
            if !s.empty && s.value > i64::from(max) {
                return false;
            }
        }
        if let Some(max) = self.max_latency_p95_us {
            let s = sample_metric(trace, &selector(MetricKind::LatencyP95Us), t0, t1);
            if !s.empty && s.value > max as i64 {
                return false;
            }
        }
        true
    }
}

/// Health of every whole tick in `[t0_us, t1_us)`.
pub fn health_ticks(trace: &Trace, rule: &HealthRule, t0_us: u64, t1_us: u64) -> Vec<bool> {
    let tick = rule.tick_us();
    let n = t1_us.saturating_sub(t0_us) / tick;
    (0..n)
        .map(|i| {
            let a = t0_us + i * tick;
            rule.healthy_at(trace, a, a + tick)
        })
        .collect()
}

/// One failing watcher evaluation or passing one, as recorded by the orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatcherRecord {
    pub t_us: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub t_fail_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_detect_us: Option<u64>,
    /// Absent while the incident is still open at the end of the window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_recover_us: Option<u64>,
}

/// Maximal unhealthy spans over tick indices: `(first unhealthy tick, first
/// tick of the closing healthy run)`. A span still open at the end has no
/// closing tick.
pub fn incident_spans(healthy: &[bool], debounce: u32) -> Vec<(usize, Option<usize>)> {
    let debounce = debounce.max(1) as usize;
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let mut run_start = 0;
    let mut run_len = 0;
    for (i, &ok) in healthy.iter().enumerate() {
        match (ok, open) {
            (false, None) => {
                open = Some(i);
                run_len = 0;
            }
            (false, Some(_)) => run_len = 0,
            (true, Some(start)) => {
                if run_len == 0 {
                    run_start = i;
                }
                run_len += 1;
                if run_len >= debounce {
                    spans.push((start, Some(run_start)));
                    open = None;
                    run_len = 0;
                }
            }
            (true, None) => {}
        }
    }
    if let Some(start) = open {
        spans.push((start, None));
    }
    spans
}

/// Incidents in `[t0_us, t1_us)` with detection times joined from the watcher.
pub fn detect_incidents(
    trace: &Trace,
    rule: &HealthRule,
    watcher: &[WatcherRecord],
    t0_us: u64,
    t1_us: u64,
) -> Vec<Incident> {
    let healthy = health_ticks(trace, rule, t0_us, t1_us);
    incidents_from_health(&healthy, rule, watcher, t0_us)
}

pub fn incidents_from_health(
    healthy: &[bool],
    rule: &HealthRule,
    watcher: &[WatcherRecord],
    t0_us: u64,
) -> Vec<Incident> {
    let tick = rule.tick_us();
    incident_spans(healthy, rule.debounce_ticks)
        .into_iter()
        .map(|(fail, recover)| {
            let t_fail_us = t0_us + fail as u64 * tick;
            let t_recover_us = recover.map(|r| t0_us + r as u64 * tick);
            let t_detect_us = watcher
                .iter()
                .filter(|w| !w.passed && w.t_us >= t_fail_us)
                .filter(|w| t_recover_us.is_none_or(|r| w.t_us < r))
                .map(|w| w.t_us)
                .min();
            Incident {
                t_fail_us,
                t_detect_us,
                t_recover_us,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IncidentSummary {
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mttr_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mttd_us: Option<u64>,
}

/// Truncated means over recovered (MTTR) and detected (MTTD) incidents.
pub fn summarize(incidents: &[Incident]) -> IncidentSummary {
    let mean = |xs: Vec<u64>| {
        (!xs.is_empty()).then(|| xs.iter().sum::<u64>() / xs.len() as u64)
    };
    IncidentSummary {
        count: incidents.len() as u64,
        mttr_us: mean(
            incidents
                .iter()
                .filter_map(|i| i.t_recover_us.map(|r| r - i.t_fail_us))
                .collect(),
        ),
        mttd_us: mean(
            incidents
                .iter()
                .filter_map(|i| i.t_detect_us.map(|d| d - i.t_fail_us))
                .collect(),
        ),
    }
}

pub fn availability_from_health(healthy: &[bool]) -> Option<u32> {
    if healthy.is_empty() {
        return None;
    }
    let good = healthy.iter().filter(|&&h| h).count() as u64;
    Some((u64::from(BP_SCALE) * good / healthy.len() as u64) as u32)
}

/// `10000 × healthy ticks / ticks`, or `None` when the window holds no whole tick.
pub fn availability(trace: &Trace, rule: &HealthRule, t0_us: u64, t1_us: u64) -> Option<u32> {
    availability_from_health(&health_ticks(trace, rule, t0_us, t1_us))
}

/// The complement of availability, so the two always sum to 10000.
pub fn unavailability(availability_bp: u32) -> u32 {
    BP_SCALE - availability_bp
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SloTarget {
    pub service: String,
    pub metric: MetricKind,
    pub objective: Tolerance,
    pub window_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SloVerdict {
    pub target: SloTarget,
    pub measured: i64,
    pub empty: bool,
    pub passed: bool,
}

/// Evaluate each target over the window of its length ending at `at_us`.
/// Bounds are inclusive; an empty window passes.
pub fn evaluate_slos(trace: &Trace, targets: &[SloTarget], at_us: u64) -> Vec<SloVerdict> {
    targets
        .iter()
        .map(|t| {
            let t0 = at_us.saturating_sub(t.window_ms * 1000);
            let selector = MetricSelector {
                service: t.service.clone(),
                kind: t.metric,
            };
            let sample = sample_metric(trace, &selector, t0, at_us);
            SloVerdict {
                target: t.clone(),
                measured: sample.value,
                empty: sample.empty,
                passed: sample.empty || t.objective.contains(sample.value),
            }
        })
        .collect()
}
