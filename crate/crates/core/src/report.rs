//! Human and machine readable run reports.

use serde::{Deserialize, Serialize};

use crate::hypothesis::ProbeReading;
use crate::model::{FaultKind, MetricKind};
use crate::orchestrator::{ExperimentResult, RunStatus, ViolationRecord};
use crate::parse::canonical_json;
use crate::resilience::SloVerdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "md" | "markdown" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeValue {
    pub probe: usize,
    pub service: String,
    pub metric: MetricKind,
    pub value: i64,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub fault: FaultKind,
    pub scope_bp: u32,
    pub evaluations: usize,
    pub failed: usize,
    pub values: Vec<ProbeValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<ViolationRecord>,
}

/// The report-facing subset of a result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportView {
    pub experiment_id: String,
    pub status: RunStatus,
    pub driver: String,
    pub baseline: Vec<ProbeValue>,
    pub stages: Vec<StageRow>,
    pub recovery_verified: bool,
    pub incident_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mttr_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mttd_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability_bp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate_bp: Option<i64>,
    pub slo_verdicts: Vec<SloVerdict>,
    pub alarms: Vec<String>,
    pub audit_head: String,
}

fn values(result: &ExperimentResult, readings: &[ProbeReading]) -> Vec<ProbeValue> {
    readings
        .iter()
        .filter_map(|r| {
            let p = result.experiment.hypothesis.probes.get(r.probe)?;
            Some(ProbeValue {
                probe: r.probe,
                service: p.service.clone(),
                metric: p.metric,
                value: r.value,
                empty: r.empty,
            })
        })
        .collect()
}

impl ReportView {
    pub fn of(result: &ExperimentResult) -> Self {
        let r = &result.resilience;
        ReportView {
            experiment_id: result.experiment_id.clone(),
            status: result.status,
            driver: result.driver.clone(),
            baseline: result
                .baseline
                .as_ref()
                .map(|b| values(result, &b.readings))
                .unwrap_or_default(),
            stages: result
                .stages
                .iter()
                .map(|s| StageRow {
                    stage: s.stage,
                    fault: s.fault,
                    scope_bp: s.scope_bp,
                    evaluations: s.verdicts.len(),
                    failed: s.failed_verdicts(),
                    values: values(result, &s.readings),
                    violation: s.violation,
                })
                .collect(),
            recovery_verified: result.recovery.as_ref().is_some_and(|r| r.verified),
            incident_count: r.summary.count,
            mttr_us: r.summary.mttr_us,
            mttd_us: r.summary.mttd_us,
            availability_bp: r.availability_bp,
            error_rate_bp: r.error_rate_bp,
            slo_verdicts: r.slo_verdicts.clone(),
            alarms: result.alarms.clone(),
            audit_head: result.audit_head.clone(),
        }
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>, unit: &str) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v}{unit}"))
}

fn value_list(values: &[ProbeValue]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    values
        .iter()
        .map(|v| {
            if v.empty {
                format!("{}.{}=empty", v.service, v.metric.as_str())
            } else {
                format!("{}.{}={}", v.service, v.metric.as_str(), v.value)
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render_markdown(view: &ReportView) -> String {
    let mut md = String::new();
    md.push_str(&format!("# Experiment `{}`\n\n", view.experiment_id));
    md.push_str(&format!("- Status: **{}**\n", view.status));
    md.push_str(&format!("- Driver: {}\n", view.driver));
    md.push_str(&format!("- Recovery verified: {}\n", view.recovery_verified));
    md.push_str(&format!("- Audit head: `{}`\n\n", view.audit_head));

    md.push_str(&format!("Baseline: {}\n\n", value_list(&view.baseline)));

    md.push_str("## Stages\n\n| Stage | Fault | Scope (bp) | Evaluations | Failed | Probe values | Verdict |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for s in &view.stages {
        let verdict = match (&s.violation, s.failed) {
            (Some(v), _) => format!("VIOLATION at evaluation {} (t={} us)", v.evaluation, v.t_us),
            (None, 0) => "pass".into(),
            (None, n) => format!("{n} failing evaluation(s)"),
        };
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            s.stage,
            s.fault.as_str(),
            s.scope_bp,
            s.evaluations,
            s.failed,
            value_list(&s.values),
            verdict
        ));
    }

    md.push_str("\n## Resilience\n\n");
    md.push_str(&format!("- Incidents: {}\n", view.incident_count));
    md.push_str(&format!("- MTTR: {}\n", opt(view.mttr_us, " us")));
    md.push_str(&format!("- MTTD: {}\n", opt(view.mttd_us, " us")));
    md.push_str(&format!("- Availability: {}\n", opt(view.availability_bp, " bp")));
    md.push_str(&format!("- Error rate: {}\n", opt(view.error_rate_bp, " bp")));

    if !view.slo_verdicts.is_empty() {
        md.push_str("\n## SLOs\n\n| Service | Metric | Measured | Result |\n|---|---|---|---|\n");
        for v in &view.slo_verdicts {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                v.target.service,
                v.target.metric.as_str(),
                if v.empty { "empty".to_string() } else { v.measured.to_string() },
                if v.passed { "pass" } else { "fail" }
            ));
        }
    }
    if !view.alarms.is_empty() {
        md.push_str("\n## Alarms\n\n");
        for a in &view.alarms {
            md.push_str(&format!("- {a}\n"));
        }
    }
    md
}

pub fn render_report(result: &ExperimentResult, format: ReportFormat) -> String {
    let view = ReportView::of(result);
    match format {
        ReportFormat::Json => String::from_utf8(canonical_json(&view)).expect("JSON is UTF-8"),
        ReportFormat::Markdown => render_markdown(&view),
    }
}
