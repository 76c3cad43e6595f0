//! Probe metrics over a trace window.

use serde::{Deserialize, Serialize};

use super::trace::{EventKind, Trace};
use crate::model::{MetricKind, MetricSelector, BP_SCALE};
use crate::resilience::{self, HealthRule};

/// A metric reading. `empty` marks a window without any finished calls, in
/// which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSample {
    pub value: i64,
    pub empty: bool,
}

impl MetricSample {
    pub fn value(value: i64) -> Self {
        MetricSample { value, empty: false }
    }

    pub fn empty() -> Self {
        MetricSample {
            value: 0,
            empty: true,
        }
    }
}

/// Nearest-rank percentile (`pct` in 1..=100) of an ascending slice.
pub fn nearest_rank(sorted: &[u64], pct: u64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    Some(sorted[(rank - 1) as usize])
}

/// Evaluate `selector` over calls to its service finishing in `[t0_us, t1_us)`.
pub fn sample_metric(trace: &Trace, selector: &MetricSelector, t0_us: u64, t1_us: u64) -> MetricSample {
    if selector.kind == MetricKind::AvailabilityBp {
        let rule = HealthRule::default_for(&selector.service);
        return match resilience::availability(trace, &rule, t0_us, t1_us) {
            Some(bp) => MetricSample::value(i64::from(bp)),
            None => MetricSample::empty(),
        };
    }

    let mut latencies = Vec::new();
    let mut failures: u64 = 0;
    for e in trace.window(t0_us, t1_us) {
        if e.service != selector.service {
            continue;
        }
        match e.kind {
            EventKind::Complete => latencies.push(e.latency_us.unwrap_or(0)),
            EventKind::Fail => failures += 1,
            _ => {}
        }
    }
    let completions = latencies.len() as u64;
    if completions + failures == 0 {
        return MetricSample::empty();
    }

    let value = match selector.kind {
        MetricKind::LatencyMeanUs => {
            if completions == 0 {
                return MetricSample::empty();
            }
            (latencies.iter().sum::<u64>() / completions) as i64
        }
        MetricKind::LatencyP95Us => {
            latencies.sort_unstable();
            match nearest_rank(&latencies, 95) {
                Some(v) => v as i64,
                None => return MetricSample::empty(),
            }
        }
        MetricKind::ErrorRateBp => {
            (u64::from(BP_SCALE) * failures / (completions + failures)) as i64
        }
        MetricKind::ThroughputRpm => {
            let span = t1_us.saturating_sub(t0_us).max(1);
            (completions * 60_000_000 / span) as i64
        }
        MetricKind::AvailabilityBp => unreachable!("handled above"),
    };
    MetricSample::value(value)
}
