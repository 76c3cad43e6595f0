//! Backlog prioritization and a two-axis maturity rubric.
//!
//! The rubric is this project's own, non-normative reading of a
//! sophistication/adoption maturity model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{ExperimentResult, RunStatus};
use crate::parse::canonical_json;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacklogEntry {
    pub id: String,
    pub component: String,
    pub impact: u8,
    pub likelihood: u8,
    #[serde(default)]
    pub notes: String,
}

impl BacklogEntry {
    pub fn score(&self) -> u32 {
        u32::from(self.impact) * u32::from(self.likelihood)
    }
}

#[derive(Debug, Error)]
pub enum BacklogError {
    #[error("backlog is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("entry `{id}`: {field} must be in 1..=5, got {value}")]
    Range { id: String, field: &'static str, value: u8 },
}

/// Accepts either a bare array of entries or `{"entries": [...]}`.
pub fn parse_backlog(text: &str) -> Result<Vec<BacklogEntry>, BacklogError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(Vec<BacklogEntry>),
        Wrapped { entries: Vec<BacklogEntry> },
    }
    let entries = match serde_json::from_str(text)? {
        Doc::Bare(e) | Doc::Wrapped { entries: e } => e,
    };
    for e in &entries {
        for (field, value) in [("impact", e.impact), ("likelihood", e.likelihood)] {
            if !(1..=5).contains(&value) {
                return Err(BacklogError::Range {
                    id: e.id.clone(),
                    field,
                    value,
                });
            }
        }
    }
    Ok(entries)
}

/// Highest impact × likelihood first; ties by id.
pub fn prioritize_backlog(mut entries: Vec<BacklogEntry>) -> Vec<BacklogEntry> {
    entries.sort_by(|a, b| b.score().cmp(&a.score()).then_with(|| a.id.cmp(&b.id)));
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Discovery,
    Implementation,
    Sophistication,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaturityAssessment {
    pub sophistication_level: u8,
    pub adoption_level: u8,
    pub phase: Phase,
    pub evidence: Vec<String>,
}

/// What the rubric needs to know about one stored run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHistoryEntry {
    pub experiment_id: String,
    pub driver: String,
    pub status: RunStatus,
    pub services: Vec<String>,
    pub stage_scopes: Vec<u32>,
    pub has_hypothesis: bool,
    pub rollback_recorded: bool,
    /// Identifies the topology or route set the run was aimed at.
    pub environment: String,
}

impl RunHistoryEntry {
    pub fn from_result(r: &ExperimentResult) -> Self {
        let environment = match (&r.topology, &r.experiment.target.routes) {
            (Some(t), _) => format!("topology:{}", &hex::encode(sha2_digest(&canonical_json(t)))[..16]),
            (None, Some(routes)) => format!("routes:{}", &hex::encode(sha2_digest(&canonical_json(routes)))[..16]),
            (None, None) => format!("driver:{}", r.driver),
        };
        RunHistoryEntry {
            experiment_id: r.experiment_id.clone(),
            driver: r.driver.clone(),
            status: r.status,
            services: r.experiment.services(),
            stage_scopes: r.stages.iter().map(|s| s.scope_bp).collect(),
            has_hypothesis: !r.experiment.hypothesis.probes.is_empty(),
            rollback_recorded: !r.stages.is_empty()
                && r.stages.iter().all(|s| s.reverted_at_us.is_some())
                && r.recovery.is_some(),
            environment,
        }
    }

    /// The run went through injection to a verdict.
    pub fn completed(&self) -> bool {
        matches!(
            self.status,
            RunStatus::HypothesisHeld | RunStatus::HypothesisViolated | RunStatus::Aborted
        )
    }

    /// At least two stages, never shrinking, and actually growing.
    pub fn ramped(&self) -> bool {
        self.stage_scopes.len() >= 2
            && self.stage_scopes.windows(2).all(|w| w[0] <= w[1])
            && self.stage_scopes.first() < self.stage_scopes.last()
    }
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

pub fn assess_maturity(history: &[RunHistoryEntry]) -> MaturityAssessment {
    let mut evidence = Vec::new();
    let completed: Vec<&RunHistoryEntry> = history.iter().filter(|r| r.completed()).collect();

    let mut soph = 1;
    if !completed.is_empty() {
        evidence.push(format!("{} completed run(s)", completed.len()));
        if completed.iter().any(|r| r.has_hypothesis && r.rollback_recorded) {
            soph = 2;
            evidence.push("hypothesis and automated rollback recorded".into());
            if completed.iter().any(|r| r.ramped()) {
                soph = 3;
                evidence.push("multi-stage ramped blast radius".into());
                let drivers: BTreeSet<&str> = completed.iter().map(|r| r.driver.as_str()).collect();
                if drivers.len() >= 2 {
                    soph = 4;
                    evidence.push(format!("drivers: {}", drivers.into_iter().collect::<Vec<_>>().join(", ")));
                }
            }
        }
    }

    let services: BTreeSet<&str> = history
        .iter()
        .flat_map(|r| r.services.iter().map(String::as_str))
        .collect();
    let environments: BTreeSet<&str> = history.iter().map(|r| r.environment.as_str()).collect();
    let mut per_experiment: BTreeMap<&str, usize> = BTreeMap::new();
    for r in history {
        *per_experiment.entry(r.experiment_id.as_str()).or_default() += 1;
    }
    let recurring = per_experiment.values().copied().max().unwrap_or(0);

    let mut adoption = 1;
    if !services.is_empty() {
        evidence.push(format!("{} target service(s)", services.len()));
    }
    if services.len() >= 3 {
        adoption = 2;
        if environments.len() >= 2 {
            adoption = 3;
            evidence.push(format!("{} distinct environments", environments.len()));
            if services.len() >= 5 && recurring >= 3 {
                adoption = 4;
                evidence.push(format!("recurring experiment ({recurring} runs)"));
            }
        }
    }

    let phase = if adoption >= 3 {
        Phase::Expansion
    } else if soph >= 3 {
        Phase::Sophistication
    } else if !completed.is_empty() {
        Phase::Implementation
    } else {
        Phase::Discovery
    };
    MaturityAssessment {
        sophistication_level: soph,
        adoption_level: adoption,
        phase,
        evidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, impact: u8, likelihood: u8) -> BacklogEntry {
        BacklogEntry {
            id: id.into(),
            component: "c".into(),
            impact,
            likelihood,
            notes: String::new(),
        }
    }

    fn run(exp: &str, services: &[&str], scopes: &[u32], driver: &str, env: &str) -> RunHistoryEntry {
        RunHistoryEntry {
            experiment_id: exp.into(),
            driver: driver.into(),
            status: RunStatus::HypothesisHeld,
            services: services.iter().map(|s| s.to_string()).collect(),
            stage_scopes: scopes.to_vec(),
            has_hypothesis: true,
            rollback_recorded: true,
            environment: env.into(),
        }
    }

    #[test]
    fn backlog_orders_by_score_then_id() {
        let out = prioritize_backlog(vec![entry("B", 3, 2), entry("A", 5, 5)]);
        assert_eq!(out[0].id, "A");
        let out = prioritize_backlog(vec![entry("z", 2, 3), entry("a", 3, 2)]);
        assert_eq!(out[0].id, "a");
        assert!(prioritize_backlog(Vec::new()).is_empty());
    }

    #[test]
    fn backlog_ranges_are_checked() {
        assert!(parse_backlog(r#"[{"id":"a","component":"db","impact":6,"likelihood":1}]"#).is_err());
        let ok = parse_backlog(r#"{"entries":[{"id":"a","component":"db","impact":5,"likelihood":1}]}"#).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn empty_history_is_discovery() {
        let a = assess_maturity(&[]);
        assert_eq!((a.sophistication_level, a.adoption_level, a.phase), (1, 1, Phase::Discovery));
    }

    #[test]
    fn single_stage_run_is_implementation() {
        let a = assess_maturity(&[run("e", &["api"], &[1000], "sim", "t1")]);
        assert_eq!(a.sophistication_level, 2);
        assert_eq!(a.phase, Phase::Implementation);
    }

    #[test]
    fn ramped_runs_on_three_services_is_sophistication() {
        let h: Vec<RunHistoryEntry> = ["a", "b", "c"]
            .iter()
            .map(|s| run(&format!("e-{s}"), &[s], &[1000, 2500, 5000], "sim", "t1"))
            .collect();
        let a = assess_maturity(&h);
        assert_eq!(a.sophistication_level, 3);
        assert_eq!(a.phase, Phase::Sophistication);
    }

    #[test]
    fn full_marks() {
        let mut h = Vec::new();
        for i in 0..3 {
            h.push(run("e", &["a", "b", "c", "d", "e"], &[1000, 2000], "sim", &format!("t{i}")));
        }
        h.push(run("p", &["a"], &[1000], "proxy", "routes"));
        let a = assess_maturity(&h);
        assert_eq!((a.sophistication_level, a.adoption_level, a.phase), (4, 4, Phase::Expansion));
    }

    fn arb_run() -> impl Strategy<Value = RunHistoryEntry> {
        (
            0..4usize,
            proptest::collection::vec(0..6usize, 1..4),
            proptest::collection::vec(1..10_000u32, 0..4),
            any::<bool>(),
            0..3usize,
            0..5usize,
        )
            .prop_map(|(e, svcs, scopes, proxy, env, status)| RunHistoryEntry {
                experiment_id: format!("e{e}"),
                driver: if proxy { "proxy" } else { "sim" }.into(),
                status: RunStatus::ALL[status],
                services: svcs.iter().map(|s| format!("s{s}")).collect(),
                stage_scopes: scopes,
                has_hypothesis: true,
                rollback_recorded: proxy || env > 0,
                environment: format!("env{env}"),
            })
    }

    proptest! {
        #[test]
        fn levels_never_drop_when_runs_are_added(
            base in proptest::collection::vec(arb_run(), 0..8),
            more in proptest::collection::vec(arb_run(), 1..4),
        ) {
            let before = assess_maturity(&base);
            let mut all = base.clone();
            all.extend(more);
            let after = assess_maturity(&all);
            prop_assert!(after.sophistication_level >= before.sophistication_level);
            prop_assert!(after.adoption_level >= before.adoption_level);
            prop_assert!(after.phase >= before.phase);
        }

        #[test]
        fn prioritize_is_a_sorted_permutation(
            raw in proptest::collection::vec((0..20u8, 1..=5u8, 1..=5u8), 0..20)
        ) {
            let entries: Vec<BacklogEntry> = raw.iter().map(|(i, a, b)| entry(&format!("id{i}"), *a, *b)).collect();
            let out = prioritize_backlog(entries.clone());
            let mut x = entries.clone();
            let mut y = out.clone();
            x.sort_by_key(|e| (e.id.clone(), e.score()));
            y.sort_by_key(|e| (e.id.clone(), e.score()));
            prop_assert_eq!(x, y);
            prop_assert!(out.windows(2).all(|w| (w[0].score(), &w[1].id) >= (w[1].score(), &w[0].id)));
        }
    }
}
