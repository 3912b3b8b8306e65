//! Simulation worlds wiring the protocol components to the engine.

pub mod election;
pub mod lease;
pub mod store;

use serde::Serialize;

use crate::counter::linearizability::check_counter;
use crate::counter::CounterDevice;

/// Outcome of one invariant over a finished run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub holds: bool,
    pub first_violation_tick: Option<u64>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl InvariantResult {
    pub fn ok(name: impl Into<String>) -> Self {
        InvariantResult {
            name: name.into(),
            holds: true,
            first_violation_tick: None,
            detail: String::new(),
        }
    }

    pub fn failed(name: impl Into<String>, tick: u64, detail: impl Into<String>) -> Self {
        InvariantResult {
            name: name.into(),
            holds: false,
            first_violation_tick: Some(tick),
            detail: detail.into(),
        }
    }

    pub fn from_first(name: &str, first: Option<(u64, String)>) -> Self {
        match first {
            Some((tick, detail)) => InvariantResult::failed(name, tick, detail),
            None => InvariantResult::ok(name),
        }
    }
}

/// Monotonicity and linearizability over a set of counter devices.
pub fn counter_invariants<'a>(devices: impl IntoIterator<Item = &'a CounterDevice>) -> Vec<InvariantResult> {
    let mut monotonic = None;
    let mut linearizable = None;
    for d in devices {
        let history = d.history();
        if monotonic.is_none() && !d.is_monotonic() {
            let tick = history.last().map_or(0, |h| h.response);
            monotonic = Some((tick, format!("counter {} went backwards", d.cid().0)));
        }
        if linearizable.is_none() {
            if let Err(e) = check_counter(history) {
                let mut responses: Vec<u64> = history.iter().map(|h| h.response).collect();
                responses.sort_unstable();
                let tick = responses.get(e.longest_prefix).copied().unwrap_or(0);
                linearizable = Some((tick, format!("counter {} history is not linearizable", d.cid().0)));
            }
        }
    }
    vec![
        InvariantResult::from_first("counter_monotonic", monotonic),
        InvariantResult::from_first("counter_linearizable", linearizable),
    ]
}
