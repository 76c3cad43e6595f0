//! Built-in scenario catalog with parameter substitution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::Experiment;
use crate::parse::{parse_experiment, ParseError};

const BUILTIN: [&str; 8] = [
    include_str!("../catalog/api-errors.json"),
    include_str!("../catalog/bandwidth-throttle.json"),
    include_str!("../catalog/cpu-stress.json"),
    include_str!("../catalog/dependency-failure.json"),
    include_str!("../catalog/instance-kill.json"),
    include_str!("../catalog/memory-exhaustion.json"),
    include_str!("../catalog/network-latency.json"),
    include_str!("../catalog/packet-loss.json"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamKind {
    Integer {
        unit: String,
        min: u64,
        max: u64,
        default: u64,
    },
    String {
        default: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub title: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
    /// Experiment document with `"${name}"` placeholders.
    pub template: Value,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("parameter `{name}`: {reason}")]
    ParamRangeError { name: String, reason: String },
    #[error("scenario `{scenario}` has no parameter `{name}`")]
    UnknownParam { scenario: String, name: String },
    #[error("template placeholder `{0}` has no value")]
    Unresolved(String),
    #[error("instantiated experiment is invalid: {0}")]
    Invalid(#[from] ParseError),
}

/// Every built-in scenario, sorted by id.
pub fn list_scenarios() -> Vec<Scenario> {
    let mut all: Vec<Scenario> = BUILTIN
        .iter()
        .map(|doc| serde_json::from_str(doc).expect("built-in scenarios are valid"))
        .collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    all
}

pub fn scenario(id: &str) -> Result<Scenario, CatalogError> {
    list_scenarios()
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CatalogError::UnknownScenario(id.into()))
}

fn resolve(spec: &ParamSpec, given: Option<&String>) -> Result<Value, CatalogError> {
    let range_err = |reason: String| CatalogError::ParamRangeError {
        name: spec.name.clone(),
        reason,
    };
    match (&spec.kind, given) {
        (ParamKind::String { default }, None) => Ok(Value::String(default.clone())),
        (ParamKind::String { .. }, Some(v)) if v.is_empty() => Err(range_err("must not be empty".into())),
        (ParamKind::String { .. }, Some(v)) => Ok(Value::String(v.clone())),
        (ParamKind::Integer { default, .. }, None) => Ok(Value::from(*default)),
        (ParamKind::Integer { min, max, unit, .. }, Some(v)) => {
            let n: u64 = v
                .trim()
                .parse()
                .map_err(|_| range_err(format!("`{v}` is not a nonnegative integer")))?;
            if n < *min || n > *max {
                return Err(range_err(format!("{n} outside [{min}, {max}] {unit}")));
            }
            Ok(Value::from(n))
        }
    }
}

fn substitute(value: &mut Value, params: &BTreeMap<String, Value>) -> Result<(), CatalogError> {
    match value {
        Value::String(s) => {
            if let Some(name) = s.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
                *value = params
                    .get(name)
                    .cloned()
                    .ok_or_else(|| CatalogError::Unresolved(name.into()))?;
            } else if s.contains("${") {
                let mut out = s.clone();
                for (k, v) in params {
                    let text = match v {
                        Value::String(t) => t.clone(),
                        other => other.to_string(),
                    };
                    out = out.replace(&format!("${{{k}}}"), &text);
                }
                if let Some(start) = out.find("${") {
                    return Err(CatalogError::Unresolved(out[start..].to_string()));
                }
                *s = out;
            }
            Ok(())
        }
        Value::Array(items) => items.iter_mut().try_for_each(|v| substitute(v, params)),
        Value::Object(map) => map.values_mut().try_for_each(|v| substitute(v, params)),
        _ => Ok(()),
    }
}

impl Scenario {
    pub fn defaults(&self) -> BTreeMap<String, Value> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), resolve(p, None).expect("defaults are in range")))
            .collect()
    }

    pub fn instantiate(&self, params: &BTreeMap<String, String>) -> Result<Experiment, CatalogError> {
        for name in params.keys() {
            if !self.params.iter().any(|p| &p.name == name) {
                return Err(CatalogError::UnknownParam {
                    scenario: self.id.clone(),
                    name: name.clone(),
                });
            }
        }
        let values = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), resolve(p, params.get(&p.name))?)))
            .collect::<Result<BTreeMap<_, _>, CatalogError>>()?;
        let mut doc = self.template.clone();
        substitute(&mut doc, &values)?;
        Ok(parse_experiment(&doc.to_string())?)
    }
}

pub fn instantiate(id: &str, params: &BTreeMap<String, String>) -> Result<Experiment, CatalogError> {
    scenario(id)?.instantiate(params)
}
