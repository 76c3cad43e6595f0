//! Experiment-facing domain types.
//!
//! Every quantity is an integer in base units: microseconds (`_us`),
//! milliseconds (`_ms`), basis points (`_bp`, 1/10000) or percent factors
//! (`_pct`, where 100 means "unchanged").

use std::fmt;

use serde::{Deserialize, Serialize};

/// Upper bound for any basis-point quantity.
pub const BP_SCALE: u32 = 10_000;

/// A declarative chaos experiment, as stored in a `.chaos.json` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub id: String,
    pub name: String,
    pub target: Target,
    pub hypothesis: SteadyStateHypothesis,
    pub stages: Vec<Stage>,
    pub rollback: RollbackPolicy,
    pub abort: AbortPolicy,
    pub compliance: ComplianceMetadata,
    pub seed: u64,
}

impl Experiment {
    /// Distinct fault kinds used across all stages, in stage order.
    pub fn fault_kinds(&self) -> Vec<FaultKind> {
        let mut kinds = Vec::new();
        for stage in &self.stages {
            let kind = stage.fault.kind();
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        kinds
    }

    /// Services touched by the experiment (target, stage scopes and probes), sorted.
    pub fn services(&self) -> Vec<String> {
        let mut names: Vec<String> = std::iter::once(self.target.service.clone())
            .chain(self.stages.iter().map(|s| s.scope.service.clone()))
            .chain(self.hypothesis.probes.iter().map(|p| p.service.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

/// The system under test. When the experiment runs through the TCP proxy the
/// route table travels here too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub service: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_fraction_bp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<Vec<RouteConfig>>,
}

impl Target {
    pub fn scope(&self) -> ScopeSelector {
        ScopeSelector {
            service: self.service.clone(),
            instance_fraction_bp: self.instance_fraction_bp,
            instances: self.instances.clone(),
        }
    }
}

/// Route entry for the TCP proxy driver (`listen` and `upstream` are `host:port`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub name: String,
    pub listen: String,
    pub upstream: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyStateHypothesis {
    pub probes: Vec<Probe>,
    pub baseline_window_ms: u64,
    pub evaluation_interval_ms: u64,
}

/// A single measurable steady-state condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub service: String,
    pub metric: MetricKind,
    pub window_ms: u64,
    pub tolerance: Tolerance,
}

impl Probe {
    pub fn selector(&self) -> MetricSelector {
        MetricSelector {
            service: self.service.clone(),
            kind: self.metric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LatencyP95Us,
    LatencyMeanUs,
    ErrorRateBp,
    ThroughputRpm,
    AvailabilityBp,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::LatencyP95Us,
        MetricKind::LatencyMeanUs,
        MetricKind::ErrorRateBp,
        MetricKind::ThroughputRpm,
        MetricKind::AvailabilityBp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::LatencyP95Us => "latency_p95_us",
            MetricKind::LatencyMeanUs => "latency_mean_us",
            MetricKind::ErrorRateBp => "error_rate_bp",
            MetricKind::ThroughputRpm => "throughput_rpm",
            MetricKind::AvailabilityBp => "availability_bp",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricSelector {
    pub service: String,
    pub kind: MetricKind,
}

/// Inclusive bounds on a metric value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<i64>,
}

impl Tolerance {
    pub fn at_most(max: i64) -> Self {
        Tolerance {
            min: None,
            max: Some(max),
        }
    }

    pub fn at_least(min: i64) -> Self {
        Tolerance {
            min: Some(min),
            max: None,
        }
    }

    /// The bound `value` violates, if any. Min is checked first.
    pub fn violated_bound(&self, value: i64) -> Option<Bound> {
        match (self.min, self.max) {
            (Some(min), _) if value < min => Some(Bound::Min(min)),
            (_, Some(max)) if value > max => Some(Bound::Max(max)),
            _ => None,
        }
    }

    pub fn contains(&self, value: i64) -> bool {
        self.violated_bound(value).is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Min(i64),
    Max(i64),
}

impl Bound {
    pub fn value(self) -> i64 {
        match self {
            Bound::Min(v) | Bound::Max(v) => v,
        }
    }
}

/// The fault taxonomy: network, resource and application level faults plus
/// instance termination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultAction {
    /// Adds `delay_us` plus uniform `[0, jitter_us]` to each inbound message.
    NetworkLatency {
        delay_us: u64,
        #[serde(default)]
        jitter_us: u64,
    },
    /// Drops each inbound message with probability `prob_bp`.
    PacketLoss { prob_bp: u32 },
    /// Serialization delay of a fixed-size message at `bytes_per_sec`.
    BandwidthThrottle { bytes_per_sec: u64 },
    /// Name resolution fails for new calls.
    DnsFailure {},
    /// Scales service time by `service_time_factor_pct / 100`.
    CpuStress { service_time_factor_pct: u32 },
    /// Instance crashes `crash_after_ms` after the fault is applied.
    MemoryExhaustion { crash_after_ms: u64 },
    /// Scales service time of storage-tagged services.
    DiskIoSaturation { io_factor_pct: u32 },
    /// Storage responses are corrupt with probability `prob_bp`.
    StorageCorruption { prob_bp: u32 },
    /// Calls from the scoped instances to `dependency` fail instantly.
    ServiceDependencyFailure { dependency: String },
    /// Scoped instances answer with `error_code` with probability `prob_bp`.
    ApiErrorInjection { prob_bp: u32, error_code: u16 },
    /// In-flight calls to db-tagged services are cut at apply time.
    DbConnectionTermination {},
    /// Scales service time of cache-tagged services.
    CacheInvalidation { miss_factor_pct: u32 },
    /// Instance is down for `down_for_ms`.
    InstanceKill { down_for_ms: u64 },
}

impl FaultAction {
    pub fn kind(&self) -> FaultKind {
        match self {
            FaultAction::NetworkLatency { .. } => FaultKind::NetworkLatency,
            FaultAction::PacketLoss { .. } => FaultKind::PacketLoss,
            FaultAction::BandwidthThrottle { .. } => FaultKind::BandwidthThrottle,
            FaultAction::DnsFailure {} => FaultKind::DnsFailure,
            FaultAction::CpuStress { .. } => FaultKind::CpuStress,
            FaultAction::MemoryExhaustion { .. } => FaultKind::MemoryExhaustion,
            FaultAction::DiskIoSaturation { .. } => FaultKind::DiskIoSaturation,
            FaultAction::StorageCorruption { .. } => FaultKind::StorageCorruption,
            FaultAction::ServiceDependencyFailure { .. } => FaultKind::ServiceDependencyFailure,
            FaultAction::ApiErrorInjection { .. } => FaultKind::ApiErrorInjection,
            FaultAction::DbConnectionTermination {} => FaultKind::DbConnectionTermination,
            FaultAction::CacheInvalidation { .. } => FaultKind::CacheInvalidation,
            FaultAction::InstanceKill { .. } => FaultKind::InstanceKill,
        }
    }
}

/// Payload-free discriminant of [`FaultAction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    NetworkLatency,
    PacketLoss,
    BandwidthThrottle,
    DnsFailure,
    CpuStress,
    MemoryExhaustion,
    DiskIoSaturation,
    StorageCorruption,
    ServiceDependencyFailure,
    ApiErrorInjection,
    DbConnectionTermination,
    CacheInvalidation,
    InstanceKill,
}

impl FaultKind {
    pub const ALL: [FaultKind; 13] = [
        FaultKind::NetworkLatency,
        FaultKind::PacketLoss,
        FaultKind::BandwidthThrottle,
        FaultKind::DnsFailure,
        FaultKind::CpuStress,
        FaultKind::MemoryExhaustion,
        FaultKind::DiskIoSaturation,
        FaultKind::StorageCorruption,
        FaultKind::ServiceDependencyFailure,
        FaultKind::ApiErrorInjection,
        FaultKind::DbConnectionTermination,
        FaultKind::CacheInvalidation,
        FaultKind::InstanceKill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::NetworkLatency => "network_latency",
            FaultKind::PacketLoss => "packet_loss",
            FaultKind::BandwidthThrottle => "bandwidth_throttle",
            FaultKind::DnsFailure => "dns_failure",
            FaultKind::CpuStress => "cpu_stress",
            FaultKind::MemoryExhaustion => "memory_exhaustion",
            FaultKind::DiskIoSaturation => "disk_io_saturation",
            FaultKind::StorageCorruption => "storage_corruption",
            FaultKind::ServiceDependencyFailure => "service_dependency_failure",
            FaultKind::ApiErrorInjection => "api_error_injection",
            FaultKind::DbConnectionTermination => "db_connection_termination",
            FaultKind::CacheInvalidation => "cache_invalidation",
            FaultKind::InstanceKill => "instance_kill",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One step of the blast-radius ramp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub fault: FaultAction,
    pub scope: ScopeSelector,
    pub duration_ms: u64,
}

/// Which instances of a service a fault may touch: either a fraction of the
/// replicas or an explicit list of instance ids (`{service}-{index}`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeSelector {
    pub service: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_fraction_bp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<String>>,
}

impl ScopeSelector {
    pub fn fraction(service: impl Into<String>, fraction_bp: u32) -> Self {
        ScopeSelector {
            service: service.into(),
            instance_fraction_bp: Some(fraction_bp),
            instances: None,
        }
    }

    pub fn explicit(service: impl Into<String>, instances: Vec<String>) -> Self {
        ScopeSelector {
            service: service.into(),
            instance_fraction_bp: None,
            instances: Some(instances),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackPolicy {
    pub recovery_checks: u32,
    pub recovery_timeout_ms: u64,
}

fn default_max_consecutive_violations() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortPolicy {
    #[serde(default = "default_max_consecutive_violations")]
    pub max_consecutive_violations: u32,
}

impl Default for AbortPolicy {
    fn default() -> Self {
        AbortPolicy {
            max_consecutive_violations: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataClass {
    Synthetic,
    Masked,
    Production,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approval_role: Option<String>,
    pub data_class: DataClass,
    pub max_scope_bp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    UnsupportedFault,
    ScopeExceedsPolicy,
    NondecreasingScope,
    AuditSinkMissing,
    WideFirstStage,
    BaselineNotSteady,
}

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::UnsupportedFault => "UNSUPPORTED_FAULT",
            FindingCode::ScopeExceedsPolicy => "SCOPE_EXCEEDS_POLICY",
            FindingCode::NondecreasingScope => "NONDECREASING_SCOPE",
            FindingCode::AuditSinkMissing => "AUDIT_SINK_MISSING",
            FindingCode::WideFirstStage => "WIDE_FIRST_STAGE",
            FindingCode::BaselineNotSteady => "BASELINE_NOT_STEADY",
        }
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn from_findings(findings: Vec<Finding>) -> Self {
        let passed = findings.iter().all(|f| f.severity != Severity::Error);
        ValidationReport { passed, findings }
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }
}
