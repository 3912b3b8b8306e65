//! Local leader election on the simulation engine.
//!
//! Candidates share one counter device. In randomized mode every candidate
//! ticks once per engine tick with a random clock error and talks to the
//! device with the configured latency. In scripted mode each step, clock
//! reading and pause comes from a script (typically an explorer
//! counterexample) and device operations are atomic.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::clock::{Epsilon, TrustedClock};
use crate::counter::linearizability::check_counter;
use crate::counter::{CounterDevice, CounterId, CounterOp, InstanceId};
use crate::election::{execute, single_worker, start_candidate, CandidateState, DeviceReply, ElectionParams, Phase};
use crate::explorer::election::{actor_of, instance_of, ScriptEvent, ScriptKind};
use crate::sim::{
    ActorId, ActorKind, AdversaryAction, Digest, Kernel, MessageKind, Payload, SimError, VirtualTime, World,
};
use crate::worlds::{counter_invariants, InvariantResult};

pub const DEVICE: ActorId = ActorId::new(ActorKind::CounterDevice, 0);
pub const ELECTION_CID: CounterId = CounterId(0);
const TICK: u64 = u64::MAX;
const SPAWN: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElectionMsg {
    Reply(DeviceReply),
}

impl MessageKind for ElectionMsg {
    fn kind(&self) -> &'static str {
        "counter_reply"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElectionMode {
    /// Candidate `i` spawns at tick `spawn_at[i]`.
    Randomized {
        spawn_at: Vec<u64>,
    },
    Scripted(Vec<ScriptEvent>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionWorldConfig {
    pub cid: CounterId,
    pub epsilon: u64,
    pub params: ElectionParams,
    pub read_latency: u64,
    pub write_latency: u64,
    pub mode: ElectionMode,
}

impl ElectionWorldConfig {
    pub fn randomized(params: ElectionParams, spawn_at: Vec<u64>) -> Self {
        ElectionWorldConfig {
            cid: ELECTION_CID,
            epsilon: params.epsilon,
            params,
            read_latency: 0,
            write_latency: 1,
            mode: ElectionMode::Randomized { spawn_at },
        }
    }

    pub fn scripted(params: ElectionParams, script: Vec<ScriptEvent>) -> Self {
        ElectionWorldConfig {
            cid: ELECTION_CID,
            epsilon: params.epsilon,
            params,
            read_latency: 0,
            write_latency: 0,
            mode: ElectionMode::Scripted(script),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ElectionSummary {
    pub candidates: usize,
    pub leaders: Vec<u64>,
    pub terminated: usize,
    pub first_violation_tick: Option<u64>,
    pub max_writes_per_candidate: u32,
    pub device_writes: u64,
    pub device_monotonic: bool,
    pub linearizable: bool,
}

#[derive(Debug)]
pub struct ElectionWorld {
    pub config: ElectionWorldConfig,
    clock: TrustedClock,
    pub device: CounterDevice,
    pub candidates: Vec<Option<CandidateState>>,
    last_tick: Vec<Option<u64>>,
    script: Vec<ScriptEvent>,
    first_violation: Option<u64>,
}

impl ElectionWorld {
    pub fn new(config: ElectionWorldConfig) -> Self {
        let device = CounterDevice::new(config.cid).with_latency(config.read_latency, config.write_latency);
        let script = match &config.mode {
            ElectionMode::Scripted(s) => s.clone(),
            ElectionMode::Randomized { .. } => Vec::new(),
        };
        ElectionWorld {
            clock: TrustedClock::new(Epsilon(config.epsilon)),
            config,
            device,
            candidates: Vec::new(),
            last_tick: Vec::new(),
            script,
            first_violation: None,
        }
    }

    fn ensure_slot(&mut self, slot: usize) {
        if self.candidates.len() <= slot {
            self.candidates.resize(slot + 1, None);
            self.last_tick.resize(slot + 1, None);
        }
    }

    fn spawn(&mut self, kernel: &mut Kernel<ElectionMsg>, slot: usize) {
        self.ensure_slot(slot);
        self.candidates[slot] = Some(start_candidate(instance_of(slot), self.config.cid));
        self.clock.register(actor_of(slot));
        if matches!(self.config.mode, ElectionMode::Randomized { .. }) {
            kernel.set_timer(actor_of(slot), 0, TICK);
        }
    }

    /// No two candidates work in the current tick.
    pub fn check_state(&self, now: VirtualTime) -> bool {
        let live: Vec<CandidateState> = self.candidates.iter().flatten().cloned().collect();
        single_worker(&live, now)
    }

    pub fn first_violation(&self) -> Option<u64> {
        self.first_violation
    }

    pub fn summary(&self) -> ElectionSummary {
        let live: Vec<&CandidateState> = self.candidates.iter().flatten().collect();
        ElectionSummary {
            candidates: live.len(),
            leaders: live
                .iter()
                .filter(|c| c.phase == Phase::Leading)
                .map(|c| c.instance.0)
                .collect(),
            terminated: live.iter().filter(|c| c.is_terminated()).count(),
            first_violation_tick: self.first_violation,
            max_writes_per_candidate: live.iter().map(|c| c.increments).max().unwrap_or(0),
            device_writes: self.device.writes(),
            device_monotonic: self.device.is_monotonic(),
            linearizable: check_counter(self.device.history()).is_ok(),
        }
    }

    pub fn invariants(&self) -> Vec<InvariantResult> {
        let mut out = vec![InvariantResult::from_first(
            "single_worker",
            self.first_violation
                .map(|t| (t, "two candidates working in the same tick".to_string())),
        )];
        let mut writes: BTreeMap<u64, u32> = BTreeMap::new();
        let mut twice = None;
        for ev in self.device.history() {
            if ev.op != CounterOp::Read {
                let n = writes.entry(ev.client).or_default();
                *n += 1;
                if *n > 1 && twice.is_none() {
                    twice = Some((ev.invoke, format!("instance {:x} wrote the counter twice", ev.client)));
                }
            }
        }
        out.push(InvariantResult::from_first("single_write_per_candidate", twice));
        out.extend(counter_invariants([&self.device]));
        out
    }

    fn tick(&mut self, kernel: &mut Kernel<ElectionMsg>, slot: usize) -> String {
        let now = kernel.now();
        if self.last_tick[slot] == Some(now.0) {
            return "duplicate tick".into();
        }
        self.last_tick[slot] = Some(now.0);
        let actor = actor_of(slot);
        let Some(cand) = self.candidates[slot].as_mut() else {
            return "no candidate".into();
        };
        if cand.is_terminated() {
            return "terminated".into();
        }
        let tt = cand.wants_clock().then(|| {
            self.clock
                .read_random(actor, now, kernel.rng())
                .expect("registered reader")
                .value
        });
        let mut desc = match tt {
            Some(v) => format!("tick tt={v}"),
            None => "tick".into(),
        };
        if let Some(req) = cand.on_tick(now, tt, &self.config.params) {
            let reply = execute(&mut self.device, cand.instance.0, now, req);
            let latency = match req {
                crate::election::DeviceRequest::Read => self.config.read_latency,
                _ => self.config.write_latency,
            };
            desc.push_str(&format!(" {req:?}"));
            if latency == 0 {
                cand.on_reply(now, reply);
            } else {
                kernel.send(DEVICE, actor, ElectionMsg::Reply(reply), latency);
            }
        }
        desc.push_str(&format!(" -> {:?}", cand.phase));
        kernel.set_timer(actor, 1, TICK);
        desc
    }

    fn phase_of(&self, slot: usize) -> Option<Phase> {
        self.candidates.get(slot).and_then(Option::as_ref).map(|c| c.phase)
    }

    fn dispatch(&mut self, kernel: &mut Kernel<ElectionMsg>, slot: usize, payload: Payload<ElectionMsg>) -> String {
        match payload {
            Payload::Timer(SPAWN) => {
                self.spawn(kernel, slot);
                format!("spawn c{slot}")
            }
            Payload::Timer(TICK) => self.tick(kernel, slot),
            Payload::Timer(i) => self.scripted(kernel, i as usize),
            Payload::Deliver {
                msg: ElectionMsg::Reply(reply),
                ..
            } => {
                let now = kernel.now();
                match self.candidates.get_mut(slot).and_then(Option::as_mut) {
                    Some(c) => {
                        c.on_reply(now, reply);
                        format!("reply {reply:?} -> {:?}", c.phase)
                    }
                    None => "reply to nobody".into(),
                }
            }
            Payload::Adversary(_) => unreachable!("engine handles adversary events"),
        }
    }

    fn scripted(&mut self, kernel: &mut Kernel<ElectionMsg>, idx: usize) -> String {
        let now = kernel.now();
        let ev = self.script[idx];
        match ev.kind {
            ScriptKind::Spawn => {
                self.spawn(kernel, ev.slot);
                format!("spawn c{}", ev.slot)
            }
            ScriptKind::Pause => format!("pause c{}", ev.slot),
            ScriptKind::Step { reading } => {
                let actor = actor_of(ev.slot);
                let tt = reading.map(|v| {
                    self.clock
                        .read_exact(actor, now, v)
                        .expect("script readings are admissible")
                        .value
                });
                let cand = self.candidates[ev.slot].as_mut().expect("spawned before stepping");
                cand.step_atomic(now, tt, &mut self.device, &self.config.params);
                format!("step c{} tt={tt:?} -> {:?}", ev.slot, cand.phase)
            }
        }
    }
}

impl World for ElectionWorld {
    type Msg = ElectionMsg;

    fn init(&mut self, kernel: &mut Kernel<ElectionMsg>) {
        match &self.config.mode {
            ElectionMode::Randomized { spawn_at } => {
                for (slot, at) in spawn_at.clone().into_iter().enumerate() {
                    self.ensure_slot(slot);
                    kernel
                        .schedule(VirtualTime(at), actor_of(slot), Payload::Timer(SPAWN))
                        .expect("spawn ticks are not in the past");
                }
            }
            ElectionMode::Scripted(script) => {
                for (i, ev) in script.clone().into_iter().enumerate() {
                    self.ensure_slot(ev.slot);
                    kernel
                        .schedule(VirtualTime(ev.tick), actor_of(ev.slot), Payload::Timer(i as u64))
                        .expect("script ticks are not in the past");
                }
            }
        }
    }

    fn handle(&mut self, kernel: &mut Kernel<ElectionMsg>, target: ActorId, payload: Payload<ElectionMsg>) -> String {
        let slot = target.uid as usize;
        let before = self.phase_of(slot);
        let desc = self.dispatch(kernel, slot, payload);
        let after = self.phase_of(slot);
        if before != after {
            match after {
                Some(Phase::Leading) => kernel.observe("leader_elected", format!("c{slot}")),
                Some(Phase::Terminated) => kernel.observe("candidate_terminated", format!("c{slot}")),
                _ => {}
            }
        }
        desc
    }

    fn on_adversary(&mut self, kernel: &mut Kernel<ElectionMsg>, action: &AdversaryAction) -> Result<String, SimError> {
        match action {
            AdversaryAction::CloneInstance { .. } => {
                let slot = self.candidates.len();
                self.spawn(kernel, slot);
                Ok(format!("candidate c{slot} started"))
            }
            AdversaryAction::Isolate { actor, until } if *actor == DEVICE => {
                self.device.isolate_until(*until);
                Ok(String::new())
            }
            AdversaryAction::Isolate { .. } => Ok(String::new()),
            other => Err(SimError::Rejected(format!(
                "{} has no effect on an election",
                other.label()
            ))),
        }
    }

    fn on_terminate(&mut self, _kernel: &mut Kernel<ElectionMsg>, actor: ActorId) {
        if actor.kind == ActorKind::AppInstance {
            if let Some(Some(c)) = self.candidates.get_mut(actor.uid as usize) {
                c.phase = Phase::Terminated;
            }
        }
    }

    fn check(&mut self, kernel: &mut Kernel<ElectionMsg>) {
        let now = kernel.now();
        if self.first_violation.is_none() && !self.check_state(now) {
            self.first_violation = Some(now.0);
            kernel.observe("two_leaders_working", format!("tick {}", now.0));
        }
    }

    fn digest(&self) -> Digest {
        Digest::of(&(&self.candidates, self.device.peek()))
    }
}

/// Instance id of candidate `slot`, as used by both modes.
pub fn candidate_instance(slot: usize) -> InstanceId {
    instance_of(slot)
}
