//! Bounded exhaustive state-space exploration.
//!
//! Breadth-first search over a [`Model`] with 128-bit state-hash
//! deduplication. Because the search is breadth-first, the first violation
//! found has a minimal-depth counterexample.

pub mod election;
pub mod lease;

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::sim::Digest;

pub use election::{ElectionAction, ElectionConfig, ElectionModel, ElectionState, ScriptEvent};
pub use lease::{LeaseCloneConfig, LeaseCloneModel, LeaseCloneState};

/// A transition system with a safety predicate.
pub trait Model {
    type State: Clone + Eq + Hash;
    type Action: Clone;

    fn initial(&self) -> Vec<Self::State>;

    /// Appends every `(action, next)` pair enabled in `state`.
    fn successors(&self, state: &Self::State, out: &mut Vec<(Self::Action, Self::State)>);

    /// Describes the violated property, if any.
    fn violation(&self, state: &Self::State) -> Option<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Limits {
    /// Longest path, in transitions, that is expanded.
    pub depth_bound: usize,
    /// Distinct states after which the search gives up.
    pub max_states: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            depth_bound: 1_000_000,
            max_states: 50_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome<A> {
    Safe,
    Violation {
        reason: String,
        path: Vec<A>,
    },
    /// A bound cut the search short before any violation was found.
    BoundExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict<A> {
    pub outcome: Outcome<A>,
    pub states_explored: u64,
    pub transitions: u64,
    pub max_depth: usize,
}

impl<A> Verdict<A> {
    pub fn is_safe(&self) -> bool {
        matches!(self.outcome, Outcome::Safe)
    }

    pub fn counterexample(&self) -> Option<&[A]> {
        match &self.outcome {
            Outcome::Violation { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.outcome {
            Outcome::Safe => "safe",
            Outcome::Violation { .. } => "violation",
            Outcome::BoundExhausted => "bound_exhausted",
        }
    }
}

fn path_to<A: Clone>(nodes: &[(u32, Option<A>)], mut idx: u32) -> Vec<A> {
    let mut path = Vec::new();
    while let (parent, Some(action)) = &nodes[idx as usize] {
        path.push(action.clone());
        idx = *parent;
    }
    path.reverse();
    path
}

/// Explores every state reachable within `limits`.
pub fn explore<M: Model>(model: &M, limits: Limits) -> Verdict<M::Action> {
    let mut seen: HashSet<u128> = HashSet::new();
    // Parent pointer and incoming action per discovered state.
    let mut nodes: Vec<(u32, Option<M::Action>)> = Vec::new();
    let mut frontier: Vec<(M::State, u32)> = Vec::new();
    let mut transitions = 0u64;
    let mut max_depth = 0;
    let mut truncated = false;

    for s in model.initial() {
        if seen.insert(Digest::of(&s).0) {
            let idx = nodes.len() as u32;
            nodes.push((idx, None));
            if let Some(reason) = model.violation(&s) {
                return Verdict {
                    outcome: Outcome::Violation {
                        reason,
                        path: Vec::new(),
                    },
                    states_explored: seen.len() as u64,
                    transitions,
                    max_depth,
                };
            }
            frontier.push((s, idx));
        }
    }

    let mut succ = Vec::new();
    let mut depth = 0;
    while !frontier.is_empty() {
        if depth >= limits.depth_bound {
            truncated = true;
            break;
        }
        let mut next = Vec::new();
        for (state, idx) in frontier.drain(..) {
            succ.clear();
            model.successors(&state, &mut succ);
            for (action, s) in succ.drain(..) {
                transitions += 1;
                if !seen.insert(Digest::of(&s).0) {
                    continue;
                }
                let child = nodes.len() as u32;
                nodes.push((idx, Some(action)));
                max_depth = depth + 1;
                if let Some(reason) = model.violation(&s) {
                    return Verdict {
                        outcome: Outcome::Violation {
                            reason,
                            path: path_to(&nodes, child),
                        },
                        states_explored: seen.len() as u64,
                        transitions,
                        max_depth,
                    };
                }
                if seen.len() >= limits.max_states {
                    truncated = true;
                    continue;
                }
                next.push((s, child));
            }
        }
        if truncated {
            break;
        }
        frontier = next;
        depth += 1;
    }

    Verdict {
        outcome: if truncated {
            Outcome::BoundExhausted
        } else {
            Outcome::Safe
        },
        states_explored: seen.len() as u64,
        transitions,
        max_depth,
    }
}

/// Every state whose shortest path from an initial state has at most
/// `depth` transitions, with that distance.
pub fn reachable_states<M: Model>(model: &M, depth: usize) -> HashMap<M::State, usize> {
    let mut dist: HashMap<M::State, usize> = HashMap::new();
    let mut frontier = Vec::new();
    for s in model.initial() {
        if !dist.contains_key(&s) {
            dist.insert(s.clone(), 0);
            frontier.push(s);
        }
    }
    let mut succ = Vec::new();
    for d in 1..=depth {
        let mut next = Vec::new();
        for s in &frontier {
            succ.clear();
            model.successors(s, &mut succ);
            for (_, n) in succ.drain(..) {
                if !dist.contains_key(&n) {
                    dist.insert(n.clone(), d);
                    next.push(n);
                }
            }
        }
        frontier = next;
    }
    dist
}

/// Applies `path` from the model's first initial state, failing on an
/// action that is not enabled. Returns every visited state.
pub fn replay<M: Model>(model: &M, path: &[M::Action]) -> Option<Vec<M::State>>
where
    M::Action: PartialEq,
{
    let mut state = model.initial().into_iter().next()?;
    let mut visited = vec![state.clone()];
    let mut succ = Vec::new();
    for action in path {
        succ.clear();
        model.successors(&state, &mut succ);
        state = succ.drain(..).find(|(a, _)| a == action)?.1;
        visited.push(state.clone());
    }
    Some(visited)
}
