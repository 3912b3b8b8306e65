//! Run reports: JSON for machines, a table for people.

use std::fmt::Write as _;

use serde::Serialize;

use crate::sim::Observation;
use crate::worlds::lease::InstanceSummary;
use crate::worlds::InvariantResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Violation,
    /// A search bound was hit before a verdict was reached.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub counter_writes: u64,
    pub counter_write_latency: u64,
    pub modeled_latency_total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExplorationReport {
    pub target: String,
    pub verdict: String,
    pub states_explored: u64,
    pub transitions: u64,
    pub max_depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wait: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub counterexample: Vec<String>,
    /// Replaying the counterexample on the simulator reproduced the
    /// violation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay_confirms: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceInfo {
    pub events: usize,
    pub digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub system: String,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
    pub outcome: Outcome,
    pub expected: Outcome,
    pub met_expectation: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub expectation_failures: Vec<String>,
    pub invariants: Vec<InvariantResult>,
    pub observations: Vec<Observation>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<InstanceSummary>,
    pub cost: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exploration: Option<ExplorationReport>,
    pub trace: TraceInfo,
}

fn label(o: Outcome) -> &'static str {
    match o {
        Outcome::Pass => "pass",
        Outcome::Violation => "violation",
        Outcome::Inconclusive => "inconclusive",
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let status = if self.met_expectation { "OK" } else { "FAILED" };
        let _ = writeln!(
            out,
            "{status}  {} ({} {}): {} (expected {})",
            self.scenario,
            self.system,
            self.mode,
            label(self.outcome),
            label(self.expected)
        );
        let _ = writeln!(out, "  {:<32} {:<6} first violation", "invariant", "holds");
        for inv in &self.invariants {
            let tick = inv
                .first_violation_tick
                .map_or("-".to_string(), |t| format!("tick {t}"));
            let _ = writeln!(
                out,
                "  {:<32} {:<6} {tick}",
                inv.name,
                if inv.holds { "yes" } else { "NO" }
            );
        }
        if !self.instances.is_empty() {
            let _ = writeln!(
                out,
                "  {:<12} {:<10} {:<12} externalizations",
                "instance", "app", "status"
            );
            for i in &self.instances {
                let status = i.status.map_or("-".to_string(), |s| format!("{s:?}").to_lowercase());
                let _ = writeln!(
                    out,
                    "  {:<12} {:<10} {:<12} {}",
                    i.instance, i.app, status, i.externalizations
                );
            }
        }
        if let Some(x) = &self.exploration {
            let _ = writeln!(
                out,
                "  exploration {}: {} states, {} transitions, depth {}",
                x.verdict, x.states_explored, x.transitions, x.max_depth
            );
            if !x.counterexample.is_empty() {
                let _ = writeln!(out, "  counterexample: {} steps", x.counterexample.len());
            }
        }
        let _ = writeln!(
            out,
            "  counter writes: {} x {} = {} ticks",
            self.cost.counter_writes, self.cost.counter_write_latency, self.cost.modeled_latency_total
        );
        for f in &self.expectation_failures {
            let _ = writeln!(out, "  expectation failed: {f}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusEntry {
    pub file: String,
    pub scenario: String,
    pub outcome: Option<Outcome>,
    pub expected: Option<Outcome>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusReport {
    pub entries: Vec<CorpusEntry>,
}

impl CorpusReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<32} {:<13} {:<13} result", "scenario", "outcome", "expected");
        for e in &self.entries {
            let o = e.outcome.map_or("error", label);
            let x = e.expected.map_or("-", label);
            let r = if e.passed { "ok" } else { "FAILED" };
            let _ = writeln!(out, "{:<32} {o:<13} {x:<13} {r}", e.scenario);
            if let Some(err) = &e.error {
                let _ = writeln!(out, "  {}: {err}", e.file);
            }
        }
        let passed = self.entries.iter().filter(|e| e.passed).count();
        let _ = writeln!(out, "{passed}/{} scenarios met their expectation", self.entries.len());
        out
    }
}
