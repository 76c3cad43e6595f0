//! Hash-chained audit log and compliance checks.
//!
//! Each record hash is SHA-256 over
//! `seq (u64 BE) ‖ ts_us (u64 BE) ‖ actor ‖ 0x00 ‖ action ‖ 0x00 ‖ details_hash ‖ prev_hash`.
//! The first record links to 32 zero bytes.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DataClass, Experiment};
use crate::orchestrator::ExperimentResult;
use crate::parse::canonical_json;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Hash32(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Strict parse: exactly 64 lowercase hex digits.
    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Hash32(out))
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 lowercase hex digits"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Validated,
    DryRun,
    Baseline,
    Inject,
    Revert,
    RevertAll,
    Abort,
    StateTransition,
    Alarm,
    CheckRun,
    ReportEmitted,
}

impl AuditAction {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditAction::Validated => "validated",
            AuditAction::DryRun => "dry_run",
            AuditAction::Baseline => "baseline",
            AuditAction::Inject => "inject",
            AuditAction::Revert => "revert",
            AuditAction::RevertAll => "revert_all",
            AuditAction::Abort => "abort",
            AuditAction::StateTransition => "state_transition",
            AuditAction::Alarm => "alarm",
            AuditAction::CheckRun => "check_run",
            AuditAction::ReportEmitted => "report_emitted",
        }
    }
}

/// One sealed line of the chain. Field order is the file's key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub ts_us: u64,
    pub actor: String,
    pub action: AuditAction,
    pub details_hash: Hash32,
    pub prev_hash: Hash32,
    pub hash: Hash32,
}

impl AuditRecord {
    pub fn compute_hash(
        seq: u64,
        ts_us: u64,
        actor: &str,
        action: AuditAction,
        details_hash: &Hash32,
        prev_hash: &Hash32,
    ) -> Hash32 {
        let mut h = Sha256::new();
        h.update(seq.to_be_bytes());
        h.update(ts_us.to_be_bytes());
        h.update(actor.as_bytes());
        h.update([0u8]);
        h.update(action.as_str().as_bytes());
        h.update([0u8]);
        h.update(details_hash.0);
        h.update(prev_hash.0);
        Hash32(h.finalize().into())
    }

    pub fn expected_hash(&self) -> Hash32 {
        Self::compute_hash(
            self.seq,
            self.ts_us,
            &self.actor,
            self.action,
            &self.details_hash,
            &self.prev_hash,
        )
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit records always serialize")
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit append failed: {0}")]
    Io(#[from] io::Error),
}

/// Append-only chain. Payloads stay in memory next to their records; the
/// optional sink receives each sealed line and is flushed before `append`
/// returns.
pub struct AuditChain {
    records: Vec<AuditRecord>,
    payloads: Vec<Value>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for AuditChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditChain")
            .field("records", &self.records.len())
            .field("durable", &self.sink.is_some())
            .finish()
    }
}

impl Default for AuditChain {
    fn default() -> Self {
        AuditChain::in_memory()
    }
}

impl AuditChain {
    pub fn in_memory() -> Self {
        AuditChain {
            records: Vec::new(),
            payloads: Vec::new(),
            sink: None,
        }
    }

    pub fn with_writer(sink: Box<dyn Write + Send>) -> Self {
        AuditChain {
            sink: Some(sink),
            ..AuditChain::in_memory()
        }
    }

    /// New chain backed by a file, which must not exist yet.
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(AuditChain::with_writer(Box::new(file)))
    }

    pub fn append(
        &mut self,
        actor: &str,
        action: AuditAction,
        ts_us: u64,
        payload: &impl Serialize,
    ) -> Result<&AuditRecord, AuditError> {
        let payload = serde_json::to_value(payload).map_err(io::Error::other)?;
        let details_hash = Hash32::of(&canonical_json(&payload));
        let seq = self.records.len() as u64;
        let prev_hash = self.head();
        let hash = AuditRecord::compute_hash(seq, ts_us, actor, action, &details_hash, &prev_hash);
        let record = AuditRecord {
            seq,
            ts_us,
            actor: actor.to_string(),
            action,
            details_hash,
            prev_hash,
            hash,
        };
        if let Some(sink) = self.sink.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        self.records.push(record);
        self.payloads.push(payload);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn payloads(&self) -> &[Value] {
        &self.payloads
    }

    pub fn entries(&self) -> impl Iterator<Item = (&AuditRecord, &Value)> {
        self.records.iter().zip(&self.payloads)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hash of the newest record, or the genesis value for an empty chain.
    pub fn head(&self) -> Hash32 {
        self.records.last().map_or(Hash32::ZERO, |r| r.hash)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * 300);
        for r in &self.records {
            out.extend_from_slice(r.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerifyOutcome {
    Ok { records: u64, head: Hash32 },
    Tampered { first_bad_seq: u64 },
}

impl VerifyOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerifyOutcome::Ok { .. })
    }
}

/// Check a serialized chain. A line must be the exact canonical form of a
/// record with the expected seq, linkage and hash; the first line that is
/// not is reported (as the seq it should have carried).
pub fn verify(bytes: &[u8]) -> VerifyOutcome {
    let mut prev = Hash32::ZERO;
    let mut seq = 0u64;
    let mut rest = bytes;
    while !rest.is_empty() {
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return VerifyOutcome::Tampered { first_bad_seq: seq };
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        let record = std::str::from_utf8(line)
            .ok()
            .and_then(|s| serde_json::from_str::<AuditRecord>(s).ok());
        let good = record.is_some_and(|r| {
            r.seq == seq
                && r.prev_hash == prev
                && r.expected_hash() == r.hash
                && r.to_line().as_bytes() == line
                && {
                    prev = r.hash;
                    true
                }
        });
        if !good {
            return VerifyOutcome::Tampered { first_bad_seq: seq };
        }
        seq += 1;
    }
    VerifyOutcome::Ok {
        records: seq,
        head: prev,
    }
}

pub fn verify_file(path: &Path) -> io::Result<VerifyOutcome> {
    Ok(verify(&std::fs::read(path)?))
}

/// Everything a compliance check may look at.
pub struct ComplianceContext<'a> {
    pub experiment: &'a Experiment,
    pub result: &'a ExperimentResult,
    pub chain: &'a [u8],
    pub store_encrypted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    pub evidence: String,
}

impl CheckResult {
    pub fn pass(evidence: impl Into<String>) -> Self {
        CheckResult {
            passed: true,
            evidence: evidence.into(),
        }
    }

    pub fn fail(evidence: impl Into<String>) -> Self {
        CheckResult {
            passed: false,
            evidence: evidence.into(),
        }
    }
}

type Evaluator = Box<dyn Fn(&ComplianceContext<'_>) -> CheckResult + Send + Sync>;

pub struct ComplianceCheck {
    pub id: String,
    pub description: String,
    pub resolution: String,
    evaluator: Evaluator,
}

impl fmt::Debug for ComplianceCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplianceCheck").field("id", &self.id).finish()
    }
}

impl ComplianceCheck {
    pub fn new(
        id: &str,
        description: &str,
        resolution: &str,
        evaluator: impl Fn(&ComplianceContext<'_>) -> CheckResult + Send + Sync + 'static,
    ) -> Self {
        ComplianceCheck {
            id: id.into(),
            description: description.into(),
            resolution: resolution.into(),
            evaluator: Box::new(evaluator),
        }
    }
}

pub fn builtin_checks() -> Vec<ComplianceCheck> {
    vec![
        ComplianceCheck::new(
            "CHAIN_INTACT",
            "audit chain verifies end to end",
            "restore the audit log from a trusted copy and investigate the first bad record",
            |ctx| match verify(ctx.chain) {
                VerifyOutcome::Ok { records, head } => {
                    CheckResult::pass(format!("{records} records, head {head}"))
                }
                VerifyOutcome::Tampered { first_bad_seq } => {
                    CheckResult::fail(format!("first_bad_seq={first_bad_seq}"))
                }
            },
        ),
        ComplianceCheck::new(
            "SCOPE_WITHIN_POLICY",
            "every stage scope is within compliance.max_scope_bp",
            "reduce the stage scopes or obtain a wider policy limit",
            |ctx| {
                let max = ctx.experiment.compliance.max_scope_bp;
                let over: Vec<String> = ctx
                    .experiment
                    .stages
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| {
                        let bp = ctx
                            .result
                            .stages
                            .iter()
                            .find(|r| r.stage == i)
                            .map(|r| r.scope_bp)
                            .or(s.scope.instance_fraction_bp)?;
                        (bp > max).then(|| format!("stage {i}: {bp} bp"))
                    })
                    .collect();
                if over.is_empty() {
                    CheckResult::pass(format!("all stages <= {max} bp"))
                } else {
                    CheckResult::fail(format!("limit {max} bp exceeded by {}", over.join(", ")))
                }
            },
        ),
        ComplianceCheck::new(
            "APPROVAL_PRESENT",
            "non-synthetic data requires a named approver and role",
            "record approved_by and approval_role in the experiment before rerunning",
            |ctx| {
                let c = &ctx.experiment.compliance;
                if c.data_class == DataClass::Synthetic {
                    return CheckResult::pass("synthetic data is exempt");
                }
                let filled = |v: &Option<String>| v.as_deref().is_some_and(|s| !s.trim().is_empty());
                match (filled(&c.approved_by), filled(&c.approval_role)) {
                    (true, true) => CheckResult::pass(format!(
                        "approved by {} ({})",
                        c.approved_by.as_deref().unwrap_or_default(),
                        c.approval_role.as_deref().unwrap_or_default()
                    )),
                    (by, role) => CheckResult::fail(format!(
                        "{:?} data: approved_by {}, approval_role {}",
                        c.data_class,
                        if by { "present" } else { "missing" },
                        if role { "present" } else { "missing" }
                    )),
                }
            },
        ),
        ComplianceCheck::new(
            "STORE_ENCRYPTED",
            "result store reports encryption at rest",
            "move results to a store with encryption at rest enabled",
            |ctx| {
                if ctx.store_encrypted {
                    CheckResult::pass("store encryption_at_rest=true")
                } else {
                    CheckResult::fail("store encryption_at_rest=false")
                }
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub id: String,
    pub description: String,
    pub passed: bool,
    pub evidence: String,
}

/// Run every check. A panicking check is recorded as a failure.
pub fn run_checks(checks: &[ComplianceCheck], ctx: &ComplianceContext<'_>) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let r = panic::catch_unwind(AssertUnwindSafe(|| (c.evaluator)(ctx))).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                CheckResult::fail(format!("check crashed: {msg}"))
            });
            CheckOutcome {
                id: c.id.clone(),
                description: c.description.clone(),
                passed: r.passed,
                evidence: r.evidence,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceIssue {
    pub check: String,
    pub evidence: String,
    pub resolution: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub experiment_id: String,
    pub generated_at_us: u64,
    pub chain_head: Hash32,
    pub checks: Vec<CheckOutcome>,
    pub issues: Vec<ComplianceIssue>,
}

pub fn compliance_report(
    experiment: &Experiment,
    checks: &[ComplianceCheck],
    outcomes: &[CheckOutcome],
    chain_head: Hash32,
    generated_at_us: u64,
) -> ComplianceReport {
    let issues = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| ComplianceIssue {
            check: o.id.clone(),
            evidence: o.evidence.clone(),
            resolution: checks
                .iter()
                .find(|c| c.id == o.id)
                .map(|c| c.resolution.clone())
                .unwrap_or_default(),
        })
        .collect();
    ComplianceReport {
        experiment_id: experiment.id.clone(),
        generated_at_us,
        chain_head,
        checks: outcomes.to_vec(),
        issues,
    }
}

impl ComplianceReport {
    pub fn to_json(&self) -> String {
        String::from_utf8(canonical_json(self)).expect("JSON is UTF-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut md = format!(
            "# Compliance report: {}\n\nChain head: `{}`\n\n| Check | Result | Evidence |\n|---|---|---|\n",
            self.experiment_id, self.chain_head
        );
        for c in &self.checks {
            md.push_str(&format!(
                "| {} | {} | {} |\n",
                c.id,
                if c.passed { "pass" } else { "FAIL" },
                c.evidence.replace('|', "\\|")
            ));
        }
        if self.issues.is_empty() {
            md.push_str("\nNo issues.\n");
        } else {
            md.push_str("\n## Issues\n\n");
            for i in &self.issues {
                md.push_str(&format!("- {}: {} (resolution: {})\n", i.check, i.evidence, i.resolution));
            }
        }
        md
    }
}

/// Write a chain to `path` in one go (used when persisting a finished run).
pub fn write_chain(chain: &AuditChain, path: &Path) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&chain.to_jsonl())?;
    f.sync_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn chain(n: usize) -> AuditChain {
        let mut c = AuditChain::in_memory();
        for i in 0..n {
            c.append("orchestrator", AuditAction::StateTransition, i as u64 * 10, &json!({"i": i}))
                .unwrap();
        }
        c
    }

    #[test]
    fn genesis_and_linkage() {
        let c = chain(2);
        assert_eq!(c.records()[0].seq, 0);
        assert_eq!(c.records()[0].prev_hash, Hash32::ZERO);
        assert_eq!(c.records()[1].prev_hash, c.records()[0].hash);
    }

    #[test]
    fn same_payload_different_seq_differs() {
        let mut c = AuditChain::in_memory();
        c.append("a", AuditAction::Inject, 0, &json!({})).unwrap();
        c.append("a", AuditAction::Inject, 0, &json!({})).unwrap();
        assert_ne!(c.records()[0].hash, c.records()[1].hash);
    }

    #[test]
    fn hash_matches_hand_built_layout() {
        let c = chain(1);
        let r = &c.records()[0];
        let mut pre = Vec::new();
        pre.extend_from_slice(&0u64.to_be_bytes());
        pre.extend_from_slice(&0u64.to_be_bytes());
        pre.extend_from_slice(b"orchestrator\0state_transition\0");
        pre.extend_from_slice(&Sha256::digest(br#"{"i":0}"#));
        pre.extend_from_slice(&[0u8; 32]);
        assert_eq!(r.hash.0, <[u8; 32]>::from(Sha256::digest(&pre)));
    }

    #[test]
    fn key_order_is_fixed() {
        let line = chain(1).records()[0].to_line();
        let keys = ["seq", "ts_us", "actor", "action", "details_hash", "prev_hash", "hash"];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
    }

    #[test]
    fn untampered_chain_verifies() {
        let c = chain(10);
        assert_eq!(
            verify(&c.to_jsonl()),
            VerifyOutcome::Ok {
                records: 10,
                head: c.head()
            }
        );
        assert!(verify(b"").is_ok());
    }

    #[test]
    fn actor_flip_in_record_three() {
        let mut bytes = chain(10).to_jsonl();
        let starts: Vec<usize> = std::iter::once(0)
            .chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1))
            .collect();
        let line3 = starts[3];
        let off = line3 + bytes[line3..].windows(5).position(|w| w == b"orche").unwrap();
        bytes[off] = b'O';
        assert_eq!(verify(&bytes), VerifyOutcome::Tampered { first_bad_seq: 3 });
    }

    #[test]
    fn deleted_record_is_a_gap() {
        let text = String::from_utf8(chain(10).to_jsonl()).unwrap();
        let kept: String = text
            .lines()
            .enumerate()
            .filter(|(i, _)| *i != 5)
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        assert_eq!(verify(kept.as_bytes()), VerifyOutcome::Tampered { first_bad_seq: 5 });
    }

    #[test]
    fn durable_sink_receives_each_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.jsonl");
        let mut c = AuditChain::create(&path).unwrap();
        c.append("a", AuditAction::Validated, 1, &json!({"ok": true})).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), c.to_jsonl());
        assert!(AuditChain::create(&path).is_err());
    }

    struct Broken;
    impl Write for Broken {
        fn write(&mut self, _: &[u8]) -> io::Result<usize> {
            Err(io::Error::other("disk full"))
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn failed_append_leaves_chain_unchanged() {
        let mut c = AuditChain::with_writer(Box::new(Broken));
        assert!(c.append("a", AuditAction::Inject, 0, &json!({})).is_err());
        assert!(c.is_empty());
    }
}
