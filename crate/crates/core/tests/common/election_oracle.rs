//! Brute-force enumeration of the election state space in absolute time.
//!
//! Nothing is shifted or clamped here: the tick grows along every path and
//! every stored time is kept as read. [`project`] maps an absolute state to
//! the explorer's normalized form so the two state sets can be compared.

use std::collections::{HashMap, HashSet};

use lld_core::counter::{CounterId, CounterValue, IncrementOutcome, InstanceId};
use lld_core::election::{start_candidate, CandidateState, DeviceReply, DeviceRequest, ElectionParams, Phase};
use lld_core::explorer::election::{Slot, BASE};
use lld_core::explorer::{ElectionConfig, ElectionState};
use lld_core::sim::VirtualTime;

/// Absolute tick of the first state. Any value above the largest clamp
/// offset works.
pub const START: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AbsCandidate {
    pub cand: CandidateState,
    /// Last trusted reading and the tick it was taken at.
    pub last: Option<(u64, u64)>,
    pub stepped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AbsState {
    pub now: u64,
    pub device: CounterValue,
    pub slots: Vec<Option<AbsCandidate>>,
    pub pauses_left: Option<u8>,
}

fn cid() -> CounterId {
    CounterId(0)
}

fn instance(slot: usize) -> InstanceId {
    InstanceId(slot as u64 + 1)
}

fn readings(last: Option<(u64, u64)>, now: u64, eps: u64) -> Vec<u64> {
    if let Some((v, at)) = last {
        if at == now {
            return vec![v];
        }
    }
    let floor = last.map_or(0, |(v, _)| v);
    let mut out: Vec<u64> = (now - eps..=now + eps).map(|r| r.max(floor)).collect();
    out.dedup();
    out
}

fn apply(device: &mut CounterValue, req: DeviceRequest) -> DeviceReply {
    match req {
        DeviceRequest::Read => DeviceReply::Value(*device),
        DeviceRequest::ConditionalIncrement { expected, proposed } if *device == expected => {
            *device = proposed;
            DeviceReply::Outcome(IncrementOutcome::Ok)
        }
        DeviceRequest::ConditionalIncrement { .. } => DeviceReply::Outcome(IncrementOutcome::Stale(*device)),
    }
}

pub fn initial(config: &ElectionConfig) -> AbsState {
    AbsState {
        now: START,
        device: CounterValue::INITIAL,
        slots: vec![None; config.max_instances],
        pauses_left: config.pause_budget,
    }
}

pub fn successors(config: &ElectionConfig, s: &AbsState) -> Vec<AbsState> {
    let params = ElectionParams::new(config.epsilon, config.period).with_wait(config.wait);
    let now = VirtualTime(s.now);
    let mut out = Vec::new();
    let mut everyone_stepped = true;
    for i in 0..s.slots.len() {
        match &s.slots[i] {
            None => {
                if i == 0 || s.slots[i - 1].is_some() {
                    let mut n = s.clone();
                    n.slots[i] = Some(AbsCandidate {
                        cand: start_candidate(instance(i), cid()),
                        last: None,
                        stepped: false,
                    });
                    out.push(n);
                }
            }
            Some(c) if c.stepped || c.cand.phase == Phase::Terminated => {}
            Some(c) => {
                everyone_stepped = false;
                let options: Vec<Option<u64>> = if c.cand.wants_clock() {
                    readings(c.last, s.now, config.epsilon).into_iter().map(Some).collect()
                } else {
                    vec![None]
                };
                for tt in options {
                    let mut n = s.clone();
                    let slot = n.slots[i].as_mut().expect("live");
                    if let Some(v) = tt {
                        slot.last = Some((v, s.now));
                    }
                    if let Some(req) = slot.cand.on_tick(now, tt, &params) {
                        let reply = apply(&mut n.device, req);
                        slot.cand.on_reply(now, reply);
                    }
                    slot.stepped = true;
                    out.push(n);
                }
                if s.pauses_left != Some(0) {
                    let mut n = s.clone();
                    n.pauses_left = n.pauses_left.map(|p| p - 1);
                    n.slots[i].as_mut().expect("live").stepped = true;
                    out.push(n);
                }
            }
        }
    }
    if everyone_stepped {
        let mut n = s.clone();
        n.now += 1;
        for c in n.slots.iter_mut().flatten() {
            c.stepped = false;
        }
        out.push(n);
    }
    out
}

/// The normalized image of an absolute state.
pub fn project(config: &ElectionConfig, s: &AbsState) -> ElectionState {
    let eps = config.epsilon;
    let shift = |t: u64| t + BASE - s.now;
    let slots = s
        .slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            None => Slot::Idle,
            Some(c) if c.cand.phase == Phase::Terminated => {
                let mut cand = start_candidate(instance(i), cid());
                cand.phase = Phase::Terminated;
                Slot::Live {
                    cand,
                    clock: None,
                    stepped: c.stepped,
                }
            }
            Some(c) => {
                let mut cand = c.cand.clone();
                cand.claimed = None;
                if cand.phase != Phase::Writing {
                    cand.observed = None;
                }
                cand.write_tt = match cand.phase {
                    Phase::Waiting => cand.write_tt.map(|w| shift(w).max(BASE - eps - config.wait)),
                    _ => None,
                };
                cand.last_check_tt = cand.last_check_tt.map(|t| shift(t).max(BASE - eps - config.period));
                cand.worked_at = cand.worked_at.filter(|w| w.0 == s.now).map(|_| VirtualTime(BASE));
                let clock = c.last.map(|(v, at)| {
                    let at = if at == s.now { BASE } else { BASE - 1 };
                    (shift(v).max(BASE - eps), at)
                });
                Slot::Live {
                    cand,
                    clock,
                    stepped: c.stepped,
                }
            }
        })
        .collect();
    ElectionState {
        device: s.device,
        slots,
        pauses_left: s.pauses_left,
    }
}

/// Projections of every absolute state reachable in at most `depth`
/// transitions, by depth-first search memoized on the remaining depth.
pub fn enumerate(config: &ElectionConfig, depth: usize) -> HashSet<ElectionState> {
    let mut best: HashMap<AbsState, usize> = HashMap::new();
    let mut found = HashSet::new();
    let mut stack = vec![(initial(config), depth)];
    while let Some((s, left)) = stack.pop() {
        if best.get(&s).is_some_and(|&b| b >= left) {
            continue;
        }
        best.insert(s.clone(), left);
        found.insert(project(config, &s));
        if left > 0 {
            for n in successors(config, &s) {
                stack.push((n, left - 1));
            }
        }
    }
    found
}

/// Two or more candidates working in the same absolute state.
pub fn has_two_workers(s: &AbsState) -> bool {
    s.slots
        .iter()
        .flatten()
        .filter(|c| c.cand.is_doing_work(VirtualTime(s.now)))
        .count()
        > 1
}
