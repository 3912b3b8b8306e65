//! Local leader election as a finite transition system.
//!
//! Up to `max_instances` candidates share one counter device. Time advances
//! in ticks; within a tick every live candidate either takes one atomic step
//! (reading its clock, if needed, and performing at most one device
//! operation) or is paused by the adversary. Candidates spawn in slot order
//! at any tick, which is a symmetry reduction: instance ids are only ever
//! compared for equality.
//!
//! States are kept time-invariant: the current tick is pinned at [`BASE`]
//! and every stored time is shifted down by one on each tick, then clamped
//! at the point below which it can no longer influence a comparison. The
//! state space is therefore finite and exploration needs no time horizon.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::clock::{admissible_readings, LastReading};
use crate::counter::{CounterId, CounterValue, IncrementOutcome, InstanceId};
use crate::election::{start_candidate, CandidateState, DeviceReply, DeviceRequest, ElectionParams, Phase};
use crate::sim::{ActorId, ActorKind, Digest, VirtualTime};
use crate::sim::{ScheduleTrace, TraceRecord};

/// Tick at which normalized states sit.
pub const BASE: u64 = 1 << 20;

pub const MODEL_CID: CounterId = CounterId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionConfig {
    pub epsilon: u64,
    pub period: u64,
    /// Handover wait; `period + 4 * epsilon` unless mutated.
    pub wait: u64,
    pub max_instances: usize,
    /// Total adversary pauses; `None` for unlimited.
    pub pause_budget: Option<u8>,
}

impl ElectionConfig {
    pub fn new(epsilon: u64, period: u64, max_instances: usize) -> Self {
        ElectionConfig {
            epsilon,
            period,
            wait: period + 4 * epsilon,
            max_instances,
            pause_budget: None,
        }
    }

    pub fn with_wait(mut self, wait: u64) -> Self {
        self.wait = wait;
        self
    }

    pub fn with_pause_budget(mut self, budget: Option<u8>) -> Self {
        self.pause_budget = budget;
        self
    }

    pub fn params(&self) -> ElectionParams {
        ElectionParams::new(self.epsilon, self.period).with_wait(self.wait)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[allow(clippy::large_enum_variant)]
pub enum Slot {
    Idle,
    Live {
        cand: CandidateState,
        clock: LastReading,
        stepped: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ElectionState {
    pub device: CounterValue,
    pub slots: Vec<Slot>,
    pub pauses_left: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectionAction {
    Spawn {
        slot: usize,
    },
    /// `reading` is the clock value minus the current tick.
    Step {
        slot: usize,
        reading: Option<i64>,
    },
    Pause {
        slot: usize,
    },
    Advance,
}

impl fmt::Display for ElectionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElectionAction::Spawn { slot } => write!(f, "spawn c{slot}"),
            ElectionAction::Step { slot, reading: Some(r) } => write!(f, "step c{slot} tt{r:+}"),
            ElectionAction::Step { slot, reading: None } => write!(f, "step c{slot}"),
            ElectionAction::Pause { slot } => write!(f, "pause c{slot}"),
            ElectionAction::Advance => f.write_str("advance"),
        }
    }
}

/// One event of a counterexample, in absolute ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub tick: u64,
    pub slot: usize,
    pub kind: ScriptKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Spawn,
    Step { reading: Option<u64> },
    Pause,
}

pub fn instance_of(slot: usize) -> InstanceId {
    InstanceId(slot as u64 + 1)
}

pub fn actor_of(slot: usize) -> ActorId {
    ActorId::new(ActorKind::AppInstance, slot as u64)
}

fn resolve(device: &mut CounterValue, req: DeviceRequest) -> DeviceReply {
    match req {
        DeviceRequest::Read => DeviceReply::Value(*device),
        DeviceRequest::ConditionalIncrement { expected, proposed } => {
            if *device == expected {
                *device = proposed;
                DeviceReply::Outcome(IncrementOutcome::Ok)
            } else {
                DeviceReply::Outcome(IncrementOutcome::Stale(*device))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElectionModel {
    pub config: ElectionConfig,
    params: ElectionParams,
}

impl ElectionModel {
    pub fn new(config: ElectionConfig) -> Self {
        ElectionModel {
            config,
            params: config.params(),
        }
    }

    fn now() -> VirtualTime {
        VirtualTime(BASE)
    }

    /// Drops fields a candidate in its phase can no longer read.
    fn canonical(&self, slot: usize, cand: &mut CandidateState, clock: &mut LastReading) {
        if cand.phase == Phase::Terminated {
            *cand = start_candidate(instance_of(slot), MODEL_CID);
            cand.phase = Phase::Terminated;
            *clock = None;
            return;
        }
        cand.claimed = None;
        if cand.phase != Phase::Writing {
            cand.observed = None;
        }
        if cand.phase != Phase::Waiting {
            cand.write_tt = None;
        }
    }

    /// Shifts one tick forward and clamps stale times.
    fn advance(&self, state: &mut ElectionState) {
        let eps = self.config.epsilon;
        for (i, slot) in state.slots.iter_mut().enumerate() {
            if let Slot::Live { cand, clock, stepped } = slot {
                *stepped = false;
                cand.worked_at = None;
                if let Some(w) = cand.write_tt.as_mut() {
                    *w = (*w - 1).max(BASE - eps - self.config.wait);
                }
                if let Some(c) = cand.last_check_tt.as_mut() {
                    *c = (*c - 1).max(BASE - eps - self.config.period);
                }
                if let Some((v, at)) = clock.as_mut() {
                    *v = (*v - 1).max(BASE - eps);
                    *at = BASE - 1;
                }
                self.canonical(i, cand, clock);
            }
        }
    }

    pub fn check_state(state: &ElectionState) -> bool {
        let working = state
            .slots
            .iter()
            .filter(|s| matches!(s, Slot::Live { cand, .. } if cand.is_doing_work(Self::now())))
            .count();
        working <= 1
    }

    /// Converts a path into absolute-time script events, with tick
    /// `start` for the first tick of the path.
    pub fn script(path: &[ElectionAction], start: u64) -> Vec<ScriptEvent> {
        let mut tick = start;
        let mut out = Vec::new();
        for a in path {
            match *a {
                ElectionAction::Advance => tick += 1,
                ElectionAction::Spawn { slot } => out.push(ScriptEvent {
                    tick,
                    slot,
                    kind: ScriptKind::Spawn,
                }),
                ElectionAction::Pause { slot } => out.push(ScriptEvent {
                    tick,
                    slot,
                    kind: ScriptKind::Pause,
                }),
                ElectionAction::Step { slot, reading } => out.push(ScriptEvent {
                    tick,
                    slot,
                    kind: ScriptKind::Step {
                        reading: reading.map(|r| (tick as i64 + r) as u64),
                    },
                }),
            }
        }
        out
    }

    /// Renders a path as a schedule trace whose digests are the model
    /// states after each action.
    pub fn trace(&self, path: &[ElectionAction], start: u64) -> Option<ScheduleTrace> {
        let states = super::replay(self, path)?;
        let mut trace = ScheduleTrace::default();
        let mut tick = start;
        for (a, s) in path.iter().zip(states.iter().skip(1)) {
            let actor = match *a {
                ElectionAction::Spawn { slot } | ElectionAction::Step { slot, .. } | ElectionAction::Pause { slot } => {
                    actor_of(slot)
                }
                ElectionAction::Advance => ActorId::CLOCK,
            };
            trace.push(TraceRecord {
                tick,
                actor,
                event: a.to_string(),
                digest: Digest::of(s),
            });
            if *a == ElectionAction::Advance {
                tick += 1;
            }
        }
        Some(trace)
    }
}

impl Model for ElectionModel {
    type State = ElectionState;
    type Action = ElectionAction;

    fn initial(&self) -> Vec<ElectionState> {
        vec![ElectionState {
            device: CounterValue::INITIAL,
            slots: vec![Slot::Idle; self.config.max_instances],
            pauses_left: self.config.pause_budget,
        }]
    }

    fn successors(&self, state: &ElectionState, out: &mut Vec<(ElectionAction, ElectionState)>) {
        let now = Self::now();
        let mut all_stepped = true;
        for (i, slot) in state.slots.iter().enumerate() {
            match slot {
                Slot::Idle => {
                    if i == 0 || !matches!(state.slots[i - 1], Slot::Idle) {
                        let mut next = state.clone();
                        next.slots[i] = Slot::Live {
                            cand: start_candidate(instance_of(i), MODEL_CID),
                            clock: None,
                            stepped: false,
                        };
                        out.push((ElectionAction::Spawn { slot: i }, next));
                    }
                }
                Slot::Live { cand, clock, stepped } => {
                    if *stepped || cand.is_terminated() {
                        continue;
                    }
                    all_stepped = false;
                    let readings: Vec<Option<u64>> = if cand.wants_clock() {
                        admissible_readings(*clock, BASE, self.config.epsilon)
                            .into_iter()
                            .map(Some)
                            .collect()
                    } else {
                        vec![None]
                    };
                    for tt in readings {
                        let mut next = state.clone();
                        let Slot::Live { cand, clock, stepped } = &mut next.slots[i] else {
                            unreachable!()
                        };
                        if let Some(v) = tt {
                            *clock = Some((v, BASE));
                        }
                        if let Some(req) = cand.on_tick(now, tt, &self.params) {
                            let reply = resolve(&mut next.device, req);
                            cand.on_reply(now, reply);
                        }
                        *stepped = true;
                        self.canonical(i, cand, clock);
                        out.push((
                            ElectionAction::Step {
                                slot: i,
                                reading: tt.map(|v| v as i64 - BASE as i64),
                            },
                            next,
                        ));
                    }
                    if state.pauses_left != Some(0) {
                        let mut next = state.clone();
                        next.pauses_left = next.pauses_left.map(|p| p - 1);
                        if let Slot::Live { stepped, .. } = &mut next.slots[i] {
                            *stepped = true;
                        }
                        out.push((ElectionAction::Pause { slot: i }, next));
                    }
                }
            }
        }
        if all_stepped {
            let mut next = state.clone();
            self.advance(&mut next);
            out.push((ElectionAction::Advance, next));
        }
    }

    fn violation(&self, state: &ElectionState) -> Option<String> {
        if !Self::check_state(state) {
            let who: Vec<String> = state
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Slot::Live { cand, .. } if cand.is_doing_work(Self::now())))
                .map(|(i, _)| format!("c{i}"))
                .collect();
            return Some(format!("two leaders working: {}", who.join(", ")));
        }
        for (i, s) in state.slots.iter().enumerate() {
            if let Slot::Live { cand, .. } = s {
                if cand.increments > 1 {
                    return Some(format!("c{i} wrote the counter {} times", cand.increments));
                }
            }
        }
        None
    }
}
