//! Experiment document parsing and canonical JSON encoding.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Experiment, FaultAction, ScopeSelector, BP_SCALE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{path}`: {reason}")]
    Schema { path: String, reason: String },
    #[error("range error at `{path}`: {reason}")]
    Range { path: String, reason: String },
}

impl ParseError {
    pub fn path(&self) -> Option<&str> {
        match self {
            ParseError::Syntax { .. } => None,
            ParseError::Schema { path, .. } | ParseError::Range { path, .. } => Some(path),
        }
    }
}

/// Parse a JSON document into `T`, reporting the failing field path.
pub fn parse_document<T: DeserializeOwned>(document: &str) -> Result<T, ParseError> {
    let value: serde_json::Value =
        serde_json::from_str(document).map_err(|e| ParseError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ParseError::Schema {
            path: if path == "." { String::new() } else { path },
            reason: e.into_inner().to_string(),
        }
    })
}

/// Parse a `.chaos.json` experiment document and check its invariants.
pub fn parse_experiment(document: &str) -> Result<Experiment, ParseError> {
    let exp: Experiment = parse_document(document)?;
    check_experiment(&exp)?;
    Ok(exp)
}

/// Canonical bytes of any serializable value: compact UTF-8 JSON with object
/// keys sorted by code point.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // serde_json::Value objects are BTreeMap-backed, so keys come out sorted.
    let value = serde_json::to_value(value).expect("domain types serialize to JSON");
    serde_json::to_vec(&value).expect("JSON values always encode")
}

pub fn canonicalize(exp: &Experiment) -> Vec<u8> {
    canonical_json(exp)
}

fn range(path: impl Into<String>, reason: impl Into<String>) -> ParseError {
    ParseError::Range {
        path: path.into(),
        reason: reason.into(),
    }
}

fn positive(value: u64, path: &str) -> Result<(), ParseError> {
    if value == 0 {
        return Err(range(path, "must be positive"));
    }
    Ok(())
}

/// Structural invariants that do not depend on a driver or policy.
pub fn check_experiment(exp: &Experiment) -> Result<(), ParseError> {
    if exp.id.is_empty()
        || !exp
            .id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
    {
        return Err(range("id", "must match [a-z0-9-]+"));
    }

    check_scope_fields(
        &exp.target.service,
        exp.target.instance_fraction_bp,
        exp.target.instances.as_deref(),
        "target",
        true,
    )?;
    if let Some(routes) = &exp.target.routes {
        for (i, r) in routes.iter().enumerate() {
            if r.name.is_empty() {
                return Err(range(format!("target.routes[{i}].name"), "must be nonempty"));
            }
            if r.listen == r.upstream {
                return Err(range(
                    format!("target.routes[{i}].upstream"),
                    "must differ from listen address",
                ));
            }
        }
    }

    let h = &exp.hypothesis;
    if h.probes.is_empty() {
        return Err(range("hypothesis.probes", "at least one probe is required"));
    }
    positive(h.baseline_window_ms, "hypothesis.baseline_window_ms")?;
    positive(h.evaluation_interval_ms, "hypothesis.evaluation_interval_ms")?;
    if h.evaluation_interval_ms > h.baseline_window_ms {
        return Err(range(
            "hypothesis.evaluation_interval_ms",
            "must not exceed baseline_window_ms",
        ));
    }
    for (i, p) in h.probes.iter().enumerate() {
        positive(p.window_ms, &format!("hypothesis.probes[{i}].window_ms"))?;
        let t = p.tolerance;
        if t.min.is_none() && t.max.is_none() {
            return Err(range(
                format!("hypothesis.probes[{i}].tolerance"),
                "at least one bound is required",
            ));
        }
        if let (Some(min), Some(max)) = (t.min, t.max) {
            if min > max {
                return Err(range(
                    format!("hypothesis.probes[{i}].tolerance"),
                    "min must not exceed max",
                ));
            }
        }
    }

    if exp.stages.is_empty() {
        return Err(range("stages", "at least one stage is required"));
    }
    for (i, stage) in exp.stages.iter().enumerate() {
        let base = format!("stages[{i}]");
        positive(stage.duration_ms, &format!("{base}.duration_ms"))?;
        if stage.duration_ms < h.evaluation_interval_ms {
            return Err(range(
                format!("{base}.duration_ms"),
                "must cover at least one evaluation interval",
            ));
        }
        check_scope(&stage.scope, &format!("{base}.scope"))?;
        check_fault(&stage.fault, &format!("{base}.fault"))?;
    }

    if exp.rollback.recovery_checks == 0 {
        return Err(range("rollback.recovery_checks", "must be positive"));
    }
    positive(exp.rollback.recovery_timeout_ms, "rollback.recovery_timeout_ms")?;
    if exp.abort.max_consecutive_violations == 0 {
        return Err(range("abort.max_consecutive_violations", "must be positive"));
    }
    let max_scope = exp.compliance.max_scope_bp;
    if !(1..=BP_SCALE).contains(&max_scope) {
        return Err(range("compliance.max_scope_bp", "must be in [1, 10000]"));
    }
    Ok(())
}

pub fn check_scope(scope: &ScopeSelector, path: &str) -> Result<(), ParseError> {
    check_scope_fields(
        &scope.service,
        scope.instance_fraction_bp,
        scope.instances.as_deref(),
        path,
        false,
    )
}

fn check_scope_fields(
    service: &str,
    fraction: Option<u32>,
    instances: Option<&[String]>,
    path: &str,
    allow_unbounded: bool,
) -> Result<(), ParseError> {
    if service.is_empty() {
        return Err(range(format!("{path}.service"), "must be nonempty"));
    }
    match (fraction, instances) {
        (Some(_), Some(_)) => Err(range(
            path,
            "instance_fraction_bp and instances are mutually exclusive",
        )),
        (Some(bp), None) if !(1..=BP_SCALE).contains(&bp) => Err(range(
            format!("{path}.instance_fraction_bp"),
            "must be in [1, 10000]",
        )),
        (None, Some([])) => Err(range(format!("{path}.instances"), "must be nonempty")),
        (None, None) if !allow_unbounded => Err(range(
            path,
            "one of instance_fraction_bp or instances is required",
        )),
        _ => Ok(()),
    }
}

fn check_fault(fault: &FaultAction, path: &str) -> Result<(), ParseError> {
    let prob = |bp: u32| {
        if bp > BP_SCALE {
            Err(range(format!("{path}.prob_bp"), "must be in [0, 10000]"))
        } else {
            Ok(())
        }
    };
    let factor = |pct: u32, field: &str| {
        if pct < 100 {
            Err(range(format!("{path}.{field}"), "must be at least 100"))
        } else {
            Ok(())
        }
    };
    match fault {
        FaultAction::PacketLoss { prob_bp } | FaultAction::StorageCorruption { prob_bp } => {
            prob(*prob_bp)
        }
        FaultAction::ApiErrorInjection {
            prob_bp,
            error_code,
        } => {
            prob(*prob_bp)?;
            if !(400..=599).contains(error_code) {
                return Err(range(
                    format!("{path}.error_code"),
                    "must be a 4xx or 5xx status",
                ));
            }
            Ok(())
        }
        FaultAction::BandwidthThrottle { bytes_per_sec } => {
            if *bytes_per_sec == 0 {
                return Err(range(format!("{path}.bytes_per_sec"), "must be positive"));
            }
            Ok(())
        }
        FaultAction::CpuStress {
            service_time_factor_pct,
        } => factor(*service_time_factor_pct, "service_time_factor_pct"),
        FaultAction::DiskIoSaturation { io_factor_pct } => factor(*io_factor_pct, "io_factor_pct"),
        FaultAction::CacheInvalidation { miss_factor_pct } => {
            factor(*miss_factor_pct, "miss_factor_pct")
        }
        FaultAction::ServiceDependencyFailure { dependency } => {
            if dependency.is_empty() {
                return Err(range(format!("{path}.dependency"), "must be nonempty"));
            }
            Ok(())
        }
        FaultAction::NetworkLatency { .. }
        | FaultAction::DnsFailure {}
        | FaultAction::MemoryExhaustion { .. }
        | FaultAction::DbConnectionTermination {}
        | FaultAction::InstanceKill { .. } => Ok(()),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "id": "latency-smoke",
        "name": "latency smoke test",
        "target": {"service": "api"},
        "hypothesis": {
            "probes": [{"service": "api", "metric": "latency_p95_us", "window_ms": 1000,
                        "tolerance": {"max": 200000}}],
            "baseline_window_ms": 2000,
            "evaluation_interval_ms": 500
        },
        "stages": [{"fault": {"kind": "network_latency", "delay_us": 100000, "jitter_us": 0},
                    "scope": {"service": "api", "instance_fraction_bp": 1000},
                    "duration_ms": 2000}],
        "rollback": {"recovery_checks": 2, "recovery_timeout_ms": 5000},
        "abort": {"max_consecutive_violations": 1},
        "compliance": {"data_class": "synthetic", "max_scope_bp": 10000},
        "seed": 42
    }"#;

    fn with_stage_fault(fault: &str) -> String {
        MINIMAL.replace(
            r#"{"kind": "network_latency", "delay_us": 100000, "jitter_us": 0}"#,
            fault,
        )
    }

    #[test]
    fn minimal_document_parses_field_for_field() {
        let exp = parse_experiment(MINIMAL).unwrap();
        assert_eq!(exp.id, "latency-smoke");
        assert_eq!(exp.hypothesis.probes.len(), 1);
        assert_eq!(exp.hypothesis.probes[0].tolerance.max, Some(200_000));
        assert_eq!(
            exp.stages[0].fault,
            FaultAction::NetworkLatency {
                delay_us: 100_000,
                jitter_us: 0
            }
        );
        assert_eq!(exp.stages[0].scope.instance_fraction_bp, Some(1000));
        assert_eq!(exp.seed, 42);
    }

    #[test]
    fn probability_above_scale_is_a_range_error() {
        let doc = with_stage_fault(r#"{"kind": "packet_loss", "prob_bp": 10001}"#);
        let err = parse_experiment(&doc).unwrap_err();
        assert!(matches!(err, ParseError::Range { .. }), "{err:?}");
        assert_eq!(err.path(), Some("stages[0].fault.prob_bp"));
    }

    #[test]
    fn decreasing_scopes_still_parse() {
        let doc = MINIMAL.replace(
            r#""scope": {"service": "api", "instance_fraction_bp": 1000},
                    "duration_ms": 2000}]"#,
            r#""scope": {"service": "api", "instance_fraction_bp": 2500}, "duration_ms": 2000},
                       {"fault": {"kind": "cpu_stress", "service_time_factor_pct": 200},
                        "scope": {"service": "api", "instance_fraction_bp": 500}, "duration_ms": 2000}]"#,
        );
        let exp = parse_experiment(&doc).unwrap();
        assert_eq!(exp.stages.len(), 2);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let doc = MINIMAL.replacen('{', r#"{"extra": 1, "#, 1);
        assert!(matches!(
            parse_experiment(&doc),
            Err(ParseError::Schema { .. })
        ));
    }

    #[test]
    fn unknown_fault_field_is_rejected() {
        let doc = with_stage_fault(r#"{"kind": "dns_failure", "bogus": 3}"#);
        assert!(matches!(
            parse_experiment(&doc),
            Err(ParseError::Schema { .. })
        ));
    }

    #[test]
    fn missing_field_reports_path() {
        let doc = MINIMAL.replace(r#""duration_ms": 2000"#, r#""duration": 2000"#);
        match parse_experiment(&doc).unwrap_err() {
            ParseError::Schema { path, .. } => assert!(path.starts_with("stages"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_syntax_error() {
        assert!(matches!(
            parse_experiment("{\"id\": "),
            Err(ParseError::Syntax { .. })
        ));
    }

    #[test]
    fn range_rules() {
        let cases = [
            (MINIMAL.replace("latency-smoke", "Latency"), "id"),
            (
                MINIMAL.replace(r#""evaluation_interval_ms": 500"#, r#""evaluation_interval_ms": 5000"#),
                "hypothesis.evaluation_interval_ms",
            ),
            (
                MINIMAL.replace(r#"{"max": 200000}"#, "{}"),
                "hypothesis.probes[0].tolerance",
            ),
            (
                MINIMAL.replace(r#"{"max": 200000}"#, r#"{"min": 5, "max": 4}"#),
                "hypothesis.probes[0].tolerance",
            ),
            (
                MINIMAL.replace(r#""duration_ms": 2000"#, r#""duration_ms": 100"#),
                "stages[0].duration_ms",
            ),
            (
                MINIMAL.replace(r#""instance_fraction_bp": 1000}"#, r#""instance_fraction_bp": 0}"#),
                "stages[0].scope.instance_fraction_bp",
            ),
            (
                MINIMAL.replace(
                    r#""instance_fraction_bp": 1000}"#,
                    r#""instance_fraction_bp": 1000, "instances": ["api-0"]}"#,
                ),
                "stages[0].scope",
            ),
            (
                with_stage_fault(r#"{"kind": "cpu_stress", "service_time_factor_pct": 50}"#),
                "stages[0].fault.service_time_factor_pct",
            ),
            (
                with_stage_fault(r#"{"kind": "api_error_injection", "prob_bp": 10, "error_code": 200}"#),
                "stages[0].fault.error_code",
            ),
            (
                MINIMAL.replace(r#""max_scope_bp": 10000"#, r#""max_scope_bp": 0"#),
                "compliance.max_scope_bp",
            ),
        ];
        for (doc, path) in cases {
            let err = parse_experiment(&doc).unwrap_err();
            assert!(matches!(err, ParseError::Range { .. }), "{path}: {err:?}");
            assert_eq!(err.path(), Some(path));
        }
    }

    #[test]
    fn abort_policy_defaults_to_one() {
        let doc = MINIMAL.replace(r#""abort": {"max_consecutive_violations": 1}"#, r#""abort": {}"#);
        assert_eq!(
            parse_experiment(&doc).unwrap().abort.max_consecutive_violations,
            1
        );
    }

    #[test]
    fn key_order_does_not_change_canonical_bytes() {
        let a = parse_experiment(MINIMAL).unwrap();
        let reordered = MINIMAL.replace(
            r#""rollback": {"recovery_checks": 2, "recovery_timeout_ms": 5000}"#,
            r#""rollback": {"recovery_timeout_ms": 5000, "recovery_checks": 2}"#,
        );
        let b = parse_experiment(&reordered).unwrap();
        assert_eq!(canonicalize(&a), canonicalize(&b));
        let text = String::from_utf8(canonicalize(&a)).unwrap();
        assert!(!text.contains(' ') || text.contains("latency smoke test"));
        assert!(text.starts_with(r#"{"abort":"#));
    }

    #[test]
    fn name_changes_canonical_bytes() {
        let a = parse_experiment(MINIMAL).unwrap();
        let mut b = a.clone();
        b.name.push('!');
        assert_ne!(canonicalize(&a), canonicalize(&b));
    }
}
