//! Pre-execution gate: reversible, safe, transparent, minimal impact.

use std::collections::HashMap;

use crate::injection::DriverCapabilities;
use crate::model::{Experiment, Finding, FindingCode, Severity, ValidationReport};

/// First-stage scope above this many basis points draws a warning.
pub const WIDE_FIRST_STAGE_BP: u32 = 1000;

/// Run-level facts the gate needs besides the experiment itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationPolicy {
    pub audit_sink_configured: bool,
    pub wide_first_stage_acknowledged: bool,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy {
            audit_sink_configured: true,
            wide_first_stage_acknowledged: false,
        }
    }
}

fn finding(code: FindingCode, severity: Severity, message: String) -> Finding {
    Finding {
        code,
        severity,
        message,
    }
}

pub fn validate_experiment(
    exp: &Experiment,
    caps: &DriverCapabilities,
    policy: &ValidationPolicy,
) -> ValidationReport {
    let mut findings = Vec::new();

    for (i, stage) in exp.stages.iter().enumerate() {
        let kind = stage.fault.kind();
        if !caps.reversible_kinds.contains(&kind) {
            findings.push(finding(
                FindingCode::UnsupportedFault,
                Severity::Error,
                format!("stage {i}: driver cannot inject and revert {kind}"),
            ));
        }
    }

    let max_scope = exp.compliance.max_scope_bp;
    let mut last_fraction: HashMap<&str, u32> = HashMap::new();
    for (i, stage) in exp.stages.iter().enumerate() {
        let Some(bp) = stage.scope.instance_fraction_bp else {
            continue;
        };
        if bp > max_scope {
            findings.push(finding(
                FindingCode::ScopeExceedsPolicy,
                Severity::Error,
                format!("stage {i}: scope {bp} bp exceeds policy limit {max_scope} bp"),
            ));
        }
        if let Some(prev) = last_fraction.insert(stage.scope.service.as_str(), bp) {
            if bp < prev {
                findings.push(finding(
                    FindingCode::NondecreasingScope,
                    Severity::Error,
                    format!(
                        "stage {i}: scope on {} shrinks from {prev} bp to {bp} bp",
                        stage.scope.service
                    ),
                ));
            }
        }
    }

    if !policy.audit_sink_configured {
        findings.push(finding(
            FindingCode::AuditSinkMissing,
            Severity::Error,
            "no audit sink is configured for this run".into(),
        ));
    }

    if let Some(first) = exp.stages.first().and_then(|s| s.scope.instance_fraction_bp) {
        if first > WIDE_FIRST_STAGE_BP && !policy.wide_first_stage_acknowledged {
            findings.push(finding(
                FindingCode::WideFirstStage,
                Severity::Warning,
                format!("first stage affects {first} bp; ramps should start at or below {WIDE_FIRST_STAGE_BP} bp"),
            ));
        }
    }

    ValidationReport::from_findings(findings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaultAction, FaultKind, ScopeSelector, Stage};
    use crate::parse::{parse_experiment, tests::MINIMAL};

    fn sim_caps() -> DriverCapabilities {
        DriverCapabilities::all_kinds()
    }

    #[test]
    fn conforming_experiment_passes_with_no_findings() {
        let exp = parse_experiment(MINIMAL).unwrap();
        let report = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        assert!(report.passed);
        assert!(report.findings.is_empty());
    }

    #[test]
    fn unsupported_fault_is_an_error() {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        exp.stages[0].fault = FaultAction::StorageCorruption { prob_bp: 100 };
        let mut caps = sim_caps();
        caps.reversible_kinds.remove(&FaultKind::StorageCorruption);
        let report = validate_experiment(&exp, &caps, &ValidationPolicy::default());
        assert!(!report.passed);
        assert!(report.has(FindingCode::UnsupportedFault));
    }

    #[test]
    fn wide_first_stage_is_a_warning_unless_acknowledged() {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        exp.stages[0].scope.instance_fraction_bp = Some(10_000);
        let report = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        assert!(report.passed);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].code, FindingCode::WideFirstStage);
        assert_eq!(report.findings[0].severity, Severity::Warning);

        let ack = ValidationPolicy {
            wide_first_stage_acknowledged: true,
            ..ValidationPolicy::default()
        };
        assert!(validate_experiment(&exp, &sim_caps(), &ack).findings.is_empty());
    }

    #[test]
    fn shrinking_scope_is_rejected() {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        exp.stages[0].scope.instance_fraction_bp = Some(2500);
        let mut second = exp.stages[0].clone();
        second.scope = ScopeSelector::fraction("api", 500);
        exp.stages.push(second);
        let report = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        assert!(!report.passed);
        assert!(report.has(FindingCode::NondecreasingScope));
    }

    #[test]
    fn scope_over_policy_and_missing_audit_sink() {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        exp.compliance.max_scope_bp = 500;
        let policy = ValidationPolicy {
            audit_sink_configured: false,
            ..ValidationPolicy::default()
        };
        let report = validate_experiment(&exp, &sim_caps(), &policy);
        assert!(report.has(FindingCode::ScopeExceedsPolicy));
        assert!(report.has(FindingCode::AuditSinkMissing));
        assert_eq!(report.errors().count(), 2);
    }

    #[test]
    fn interleaved_services_are_tracked_separately() {
        let mut exp = parse_experiment(MINIMAL).unwrap();
        let base = exp.stages[0].clone();
        exp.stages = vec![
            Stage {
                scope: ScopeSelector::fraction("api", 500),
                ..base.clone()
            },
            Stage {
                scope: ScopeSelector::fraction("db", 100),
                ..base.clone()
            },
            Stage {
                scope: ScopeSelector::fraction("api", 1000),
                ..base
            },
        ];
        let report = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn validation_is_pure() {
        let exp = parse_experiment(MINIMAL).unwrap();
        let a = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        let b = validate_experiment(&exp, &sim_caps(), &ValidationPolicy::default());
        assert_eq!(a, b);
    }
}
