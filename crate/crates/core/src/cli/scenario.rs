//! Scenario files: JSON documents describing a system, an adversary script
//! and how to run it.
//!
//! The schema is generated from these types (`lld schema`). Parsing rejects
//! unknown fields; [`Scenario::validate`] then checks value ranges and
//! cross-field constraints.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{AppStatus, InterceptEvent};
use crate::sim::{ActorId, AdversaryAction, RandomFaults};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub parameters: Parameters,
    pub system: System,
    /// Adversary actions, each applied at its tick.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversary: Vec<ScriptedAction>,
    /// Randomized network faults on top of the script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<RandomFaults>,
    pub mode: Mode,
    #[serde(default)]
    pub expect: Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    pub epsilon: u64,
    pub period: u64,
    pub lease_length: u64,
    /// Cost of one counter write in ticks (standing for milliseconds).
    /// Bookkeeping only.
    pub counter_write_latency: u64,
    pub cluster_size: usize,
}

impl Default for Parameters {
    fn default() -> Self {
        Parameters {
            epsilon: 1,
            period: 5,
            lease_length: 5,
            counter_write_latency: 40,
            cluster_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum System {
    /// Application instances behind the runtime shim, lease servers and
    /// the replicated store.
    Lease {
        #[serde(default = "one")]
        servers: usize,
        apps: Vec<AppDecl>,
    },
    /// Candidates competing on one counter device.
    Election {
        #[serde(default)]
        cid: u64,
        /// Spawn tick of each candidate.
        #[serde(default)]
        candidates: Vec<u64>,
        #[serde(default)]
        read_latency: u64,
        #[serde(default = "one_u64")]
        write_latency: u64,
    },
    /// A client writing to the replicated store.
    Store {
        #[serde(default = "four")]
        keys: u64,
        #[serde(default = "one_u64")]
        write_every: u64,
        #[serde(default = "one_u64")]
        restart_delay: u64,
    },
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn four() -> u64 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AppDecl {
    pub name: String,
    pub lease_id: u64,
    #[serde(default)]
    pub start_tick: u64,
    /// Externalize on every tick divisible by this (ignored with a
    /// workload script).
    #[serde(default = "one_u64")]
    pub externalize_every: u64,
    /// Events relative to the instance's boot tick, replacing the default
    /// externalize-every-tick workload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<Vec<WorkloadEvent>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEvent {
    pub offset: u64,
    pub event: InterceptEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScriptedAction {
    pub tick: u64,
    pub action: AdversaryAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    Simulate {
        #[serde(default)]
        seed: u64,
        limit: u64,
    },
    Explore(ExploreSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ExploreTarget {
    /// Local leader election over one counter.
    Election,
    /// Cloned lease servers committing conflicting grants.
    LeaseClones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExploreSpec {
    #[serde(default = "election_target")]
    pub target: ExploreTarget,
    #[serde(default = "two")]
    pub max_instances: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Adversary pauses per path; absent means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pause_budget: Option<u8>,
    /// Rule override such as `wait=P+2eps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_states: Option<usize>,
    /// Conflicting requests queued at each cloned server.
    #[serde(default = "one")]
    pub requests_per_server: usize,
}

fn election_target() -> ExploreTarget {
    ExploreTarget::Election
}

fn two() -> usize {
    2
}

fn default_depth() -> usize {
    100_000
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedOutcome {
    /// Every invariant holds (or the exploration is safe).
    #[default]
    Pass,
    /// Some invariant fails (or the exploration finds a counterexample).
    Violation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    #[serde(default)]
    pub outcome: ExpectedOutcome,
    /// Observations that must appear.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observations: Vec<ObservationExpect>,
    /// Observation names that must not appear.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<InstanceExpect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObservationExpect {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail_contains: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InstanceExpect {
    pub instance: ActorId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<AppStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub externalizations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_externalizations: Option<u64>,
}

/// A rule override applied to the explored model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Handover wait in ticks.
    Wait(u64),
}

impl Mutation {
    /// Parses `wait=N` or `wait=P+Keps` (also `P`, `P+eps`).
    pub fn parse(text: &str, epsilon: u64, period: u64) -> Result<Mutation, String> {
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| format!("expected `key=value`, got `{text}`"))?;
        if key.trim() != "wait" {
            return Err(format!("unknown mutation target `{}`", key.trim()));
        }
        let value: String = value.chars().filter(|c| !c.is_whitespace()).collect();
        if let Ok(n) = value.parse::<u64>() {
            return Ok(Mutation::Wait(n));
        }
        let rest = value
            .strip_prefix('P')
            .ok_or_else(|| format!("expected a number or `P+Keps`, got `{value}`"))?;
        if rest.is_empty() {
            return Ok(Mutation::Wait(period));
        }
        let k = rest
            .strip_prefix('+')
            .and_then(|r| r.strip_suffix("eps"))
            .ok_or_else(|| format!("expected `P+Keps`, got `{value}`"))?;
        let k: u64 = if k.is_empty() {
            1
        } else {
            k.parse().map_err(|_| format!("bad multiplier `{k}`"))?
        };
        Ok(Mutation::Wait(period + k * epsilon))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| {
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            let full = e.to_string();
            ScenarioError::Parse {
                line: e.line(),
                column: e.column(),
                message: full.strip_suffix(&suffix).unwrap_or(&full).to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::parse(&text)
    }

    pub fn mutation(&self) -> Result<Option<Mutation>, ScenarioError> {
        let Mode::Explore(spec) = &self.mode else {
            return Ok(None);
        };
        spec.mutation
            .as_deref()
            .map(|m| Mutation::parse(m, self.parameters.epsilon, self.parameters.period))
            .transpose()
            .map_err(|e| invalid("mode.explore.mutation", e))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let p = &self.parameters;
        for (field, v) in [
            ("epsilon", p.epsilon),
            ("period", p.period),
            ("lease_length", p.lease_length),
        ] {
            if v == 0 {
                return Err(invalid(format!("parameters.{field}"), "must be positive"));
            }
        }
        if p.cluster_size == 0 {
            return Err(invalid("parameters.cluster_size", "must be positive"));
        }
        match &self.system {
            System::Lease { servers, apps } => {
                if *servers == 0 {
                    return Err(invalid("system.servers", "must be positive"));
                }
                if apps.is_empty() {
                    return Err(invalid("system.apps", "must declare at least one app"));
                }
                for (i, a) in apps.iter().enumerate() {
                    if a.externalize_every == 0 {
                        return Err(invalid(
                            format!("system.apps[{i}].externalize_every"),
                            "must be positive",
                        ));
                    }
                }
            }
            System::Election { candidates, .. } => {
                if candidates.is_empty() && matches!(self.mode, Mode::Simulate { .. }) {
                    return Err(invalid("system.candidates", "must declare at least one candidate"));
                }
            }
            System::Store { keys, write_every, .. } => {
                if *keys == 0 {
                    return Err(invalid("system.keys", "must be positive"));
                }
                if *write_every == 0 {
                    return Err(invalid("system.write_every", "must be positive"));
                }
            }
        }
        if let Some(f) = &self.faults {
            for (field, v) in [
                ("delay_probability", f.delay_probability),
                ("drop_probability", f.drop_probability),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(format!("faults.{field}"), "must lie in [0, 1]"));
                }
            }
        }
        match &self.mode {
            Mode::Simulate { limit, .. } => {
                if *limit == 0 {
                    return Err(invalid("mode.simulate.limit", "must be positive"));
                }
            }
            Mode::Explore(spec) => {
                if spec.depth == 0 {
                    return Err(invalid("mode.explore.depth", "must be positive"));
                }
                if spec.max_instances == 0 {
                    return Err(invalid("mode.explore.max_instances", "must be positive"));
                }
                match (spec.target, &self.system) {
                    (ExploreTarget::Election, System::Election { .. }) => {}
                    (ExploreTarget::LeaseClones, System::Lease { .. }) => {
                        if spec.requests_per_server == 0 {
                            return Err(invalid("mode.explore.requests_per_server", "must be positive"));
                        }
                    }
                    _ => return Err(invalid("mode.explore.target", "does not match the system kind")),
                }
                self.mutation()?;
            }
        }
        Ok(())
    }
}

/// JSON schema of the scenario format.
pub fn schema() -> String {
    let schema = schemars::schema_for!(Scenario);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}
