//! Steady-state baseline, tolerance evaluation and deviation watching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AbortPolicy, Bound, MetricKind, MetricSelector, Probe, SteadyStateHypothesis};
use crate::sim::metrics::MetricSample;
use crate::sim::trace::Trace;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    #[error("no metrics for service `{0}`")]
    UnknownService(String),
    #[error("metric source unavailable: {0}")]
    Unavailable(String),
}

/// Where probe values come from. The source also owns the passage of time:
/// the simulator runs forward, a live source sleeps while sampling traffic.
pub trait MetricSource {
    fn now_us(&self) -> u64;

    fn advance(&mut self, ms: u64) -> Result<(), SourceError>;

    fn sample(
        &mut self,
        selector: &MetricSelector,
        t0_us: u64,
        t1_us: u64,
    ) -> Result<MetricSample, SourceError>;

    /// Everything observed so far, when the source keeps an event log.
    fn trace(&self) -> Option<Trace> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HypothesisError {
    #[error("baseline needs {needed_us} us of data, source has {available_us} us")]
    InsufficientData { needed_us: u64, available_us: u64 },
    #[error(transparent)]
    Source(#[from] SourceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReading {
    pub probe: usize,
    pub value: i64,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteadyStateSnapshot {
    pub taken_at_us: u64,
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub readings: Vec<ProbeReading>,
}

/// Read every probe over the `baseline_window_ms` ending now.
pub fn measure_baseline(
    probes: &[Probe],
    source: &mut dyn MetricSource,
    baseline_window_ms: u64,
) -> Result<SteadyStateSnapshot, HypothesisError> {
    let now = source.now_us();
    let needed = baseline_window_ms * 1000;
    if now < needed {
        return Err(HypothesisError::InsufficientData {
            needed_us: needed,
            available_us: now,
        });
    }
    let t0 = now - needed;
    let readings = probes
        .iter()
        .enumerate()
        .map(|(probe, p)| {
            let s = source.sample(&p.selector(), t0, now)?;
            Ok(ProbeReading {
                probe,
                value: s.value,
                empty: s.empty,
            })
        })
        .collect::<Result<_, SourceError>>()?;
    Ok(SteadyStateSnapshot {
        taken_at_us: now,
        window_start_us: t0,
        window_end_us: now,
        readings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviation {
    pub probe: usize,
    pub value: i64,
    /// Bound that was crossed; absent when the reading itself was unavailable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<Bound>,
    pub magnitude: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationVerdict {
    pub t_us: u64,
    pub passed: bool,
    pub deviations: Vec<Deviation>,
}

impl EvaluationVerdict {
    pub fn source_failure(&self) -> bool {
        self.deviations.iter().any(|d| d.source_error.is_some())
    }
}

/// Check readings against tolerances. Empty readings pass, except a
/// throughput probe with a minimum bound, which sees 0.
pub fn evaluate(hypothesis: &SteadyStateHypothesis, readings: &[ProbeReading], t_us: u64) -> EvaluationVerdict {
    let mut deviations = Vec::new();
    for r in readings {
        let Some(probe) = hypothesis.probes.get(r.probe) else {
            continue;
        };
        let checked = !r.empty
            || (probe.metric == MetricKind::ThroughputRpm && probe.tolerance.min.is_some());
        if !checked {
            continue;
        }
        if let Some(bound) = probe.tolerance.violated_bound(r.value) {
            deviations.push(Deviation {
                probe: r.probe,
                value: r.value,
                bound: Some(bound),
                magnitude: (r.value - bound.value()).abs(),
                source_error: None,
            });
        }
    }
    EvaluationVerdict {
        t_us,
        passed: deviations.is_empty(),
        deviations,
    }
}

/// Read each probe over its own trailing window ending now.
pub fn read_probes(
    hypothesis: &SteadyStateHypothesis,
    source: &mut dyn MetricSource,
) -> Vec<Result<ProbeReading, SourceError>> {
    let now = source.now_us();
    hypothesis
        .probes
        .iter()
        .enumerate()
        .map(|(probe, p)| {
            let t0 = now.saturating_sub(p.window_ms * 1000);
            source.sample(&p.selector(), t0, now).map(|s| ProbeReading {
                probe,
                value: s.value,
                empty: s.empty,
            })
        })
        .collect()
}

/// Sample and evaluate once at the current instant. Unreadable probes count
/// as deviations.
pub fn evaluate_now(hypothesis: &SteadyStateHypothesis, source: &mut dyn MetricSource) -> EvaluationVerdict {
    let now = source.now_us();
    let mut readings = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in read_probes(hypothesis, source).into_iter().enumerate() {
        match r {
            Ok(reading) => readings.push(reading),
            Err(e) => failed.push(Deviation {
                probe: i,
                value: 0,
                bound: None,
                magnitude: 0,
                source_error: Some(e.to_string()),
            }),
        }
    }
    let mut verdict = evaluate(hypothesis, &readings, now);
    if !failed.is_empty() {
        verdict.deviations.extend(failed);
        verdict.deviations.sort_by_key(|d| d.probe);
        verdict.passed = false;
    }
    verdict
}

fn unavailable_verdict(hypothesis: &SteadyStateHypothesis, t_us: u64, err: &SourceError) -> EvaluationVerdict {
    EvaluationVerdict {
        t_us,
        passed: false,
        deviations: (0..hypothesis.probes.len())
            .map(|probe| Deviation {
                probe,
                value: 0,
                bound: None,
                magnitude: 0,
                source_error: Some(err.to_string()),
            })
            .collect(),
    }
}

/// 1-based index of the first evaluation at which `threshold` consecutive
/// failures have accumulated.
pub fn first_violation(passes: &[bool], threshold: u32) -> Option<usize> {
    let mut run = 0u32;
    for (i, &ok) in passes.iter().enumerate() {
        run = if ok { 0 } else { run + 1 };
        if run >= threshold.max(1) {
            return Some(i + 1);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum WatchOutcome {
    Violation {
        /// 1-based evaluation index.
        evaluation: usize,
        t_us: u64,
        source_induced: bool,
        verdicts: Vec<EvaluationVerdict>,
    },
    Clean { verdicts: Vec<EvaluationVerdict> },
}

impl WatchOutcome {
    pub fn verdicts(&self) -> &[EvaluationVerdict] {
        match self {
            WatchOutcome::Violation { verdicts, .. } | WatchOutcome::Clean { verdicts } => verdicts,
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, WatchOutcome::Violation { .. })
    }
}

/// Observe for `duration_ms`, evaluating every `evaluation_interval_ms` over
/// trailing probe windows. Stops at the first point where the abort policy's
/// consecutive-violation limit is reached.
pub fn watch(
    hypothesis: &SteadyStateHypothesis,
    source: &mut dyn MetricSource,
    abort: &AbortPolicy,
    duration_ms: u64,
) -> WatchOutcome {
    let interval = hypothesis.evaluation_interval_ms.max(1);
    let evaluations = duration_ms / interval;
    let mut verdicts = Vec::with_capacity(evaluations as usize);
    let mut consecutive = 0;
    for k in 1..=evaluations as usize {
        let verdict = match source.advance(interval) {
            Ok(()) => evaluate_now(hypothesis, source),
            Err(e) => unavailable_verdict(hypothesis, source.now_us(), &e),
        };
        consecutive = if verdict.passed { 0 } else { consecutive + 1 };
        let t_us = verdict.t_us;
        let source_induced = verdict.source_failure();
        verdicts.push(verdict);
        if consecutive >= abort.max_consecutive_violations.max(1) {
            return WatchOutcome::Violation {
                evaluation: k,
                t_us,
                source_induced,
                verdicts,
            };
        }
    }
    let rest = duration_ms % interval;
    if rest > 0 {
        let _ = source.advance(rest);
    }
    WatchOutcome::Clean { verdicts }
}
