//! Deterministic discrete-event engine.
//!
//! The engine owns virtual time, a priority queue of events ordered by
//! `(at, seq)`, a single seeded random generator, the adversary's fault state
//! and the [`World`] holding every actor. Worlds react to events through a
//! [`Kernel`] handle that lets them send messages, arm timers and record
//! observations without touching the queue directly.

mod adversary;
mod trace;

pub use adversary::{AdversaryAction, MessageSelector, RandomFaults};
pub use trace::{ScheduleTrace, TraceError, TraceRecord};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

use adversary::AdversaryState;

/// Logical time. One tick is one protocol time unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn after(self, ticks: u64) -> VirtualTime {
        VirtualTime(self.0.saturating_add(ticks))
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    AppInstance,
    LeaseServer,
    StoreReplica,
    CounterDevice,
    ClockSource,
    Adversary,
}

impl ActorKind {
    fn prefix(self) -> &'static str {
        match self {
            ActorKind::AppInstance => "app",
            ActorKind::LeaseServer => "lease",
            ActorKind::StoreReplica => "replica",
            ActorKind::CounterDevice => "counter",
            ActorKind::ClockSource => "clock",
            ActorKind::Adversary => "adversary",
        }
    }

    fn from_prefix(s: &str) -> Option<ActorKind> {
        Some(match s {
            "app" => ActorKind::AppInstance,
            "lease" => ActorKind::LeaseServer,
            "replica" => ActorKind::StoreReplica,
            "counter" => ActorKind::CounterDevice,
            "clock" => ActorKind::ClockSource,
            "adversary" => ActorKind::Adversary,
            _ => return None,
        })
    }
}

/// Actor identity, rendered as `kind#uid` (for example `app#2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId {
    pub kind: ActorKind,
    pub uid: u64,
}

impl ActorId {
    pub const ADVERSARY: ActorId = ActorId {
        kind: ActorKind::Adversary,
        uid: 0,
    };

    pub const CLOCK: ActorId = ActorId {
        kind: ActorKind::ClockSource,
        uid: 0,
    };

    pub const fn new(kind: ActorKind, uid: u64) -> Self {
        ActorId { kind, uid }
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kind.prefix(), self.uid)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed actor id `{0}` (expected kind#uid)")]
pub struct ParseActorError(pub String);

impl FromStr for ActorId {
    type Err = ParseActorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, uid) = s.split_once('#').ok_or_else(|| ParseActorError(s.into()))?;
        let kind = ActorKind::from_prefix(kind).ok_or_else(|| ParseActorError(s.into()))?;
        let uid = uid.parse().map_err(|_| ParseActorError(s.into()))?;
        Ok(ActorId { kind, uid })
    }
}

impl Serialize for ActorId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActorId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl schemars::JsonSchema for ActorId {
    fn schema_name() -> String {
        "ActorId".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        use schemars::schema::{InstanceType, SchemaObject, StringValidation};
        SchemaObject {
            instance_type: Some(InstanceType::String.into()),
            string: Some(Box::new(StringValidation {
                pattern: Some("^(app|lease|replica|counter|clock|adversary)#[0-9]+$".into()),
                ..Default::default()
            })),
            ..Default::default()
        }
        .into()
    }
}

/// 128-bit state digest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub u128);

impl Digest {
    pub fn of<T: Hash + ?Sized>(value: &T) -> Digest {
        let mut h = Xxh3::new();
        value.hash(&mut h);
        Digest(h.digest128())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for Digest {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(Digest)
    }
}

/// Identifier of a message sent through the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId(pub u64);

/// Implemented by world message types so adversary selectors can match them.
pub trait MessageKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<M> {
    Deliver { id: MessageId, from: ActorId, msg: M },
    Timer(u64),
    Adversary(AdversaryAction),
}

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub at: VirtualTime,
    pub seq: u64,
    pub target: ActorId,
    pub payload: P,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // Reversed so that `BinaryHeap` pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at tick {at} but engine time is already {now}")]
    SchedulingInPast { at: VirtualTime, now: VirtualTime },
    #[error("forbidden adversary action: {0}")]
    ForbiddenAction(String),
    #[error("unknown actor {0}")]
    UnknownActor(ActorId),
    #[error("world rejected adversary action: {0}")]
    Rejected(String),
}

/// Queue of pending events with deterministic `(at, seq)` ordering.
#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    next_seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn push(&mut self, at: VirtualTime, target: ActorId, payload: P) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            at,
            seq,
            target,
            payload,
        });
        seq
    }

    pub fn peek_time(&self) -> Option<VirtualTime> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// A named observation raised by a world (rollback detected, instance
/// terminated, ...). Reports use these to match scenario expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub tick: u64,
    pub name: String,
    pub detail: String,
}

#[derive(Debug, Clone)]
struct SentMessage<M> {
    from: ActorId,
    to: ActorId,
    msg: M,
}

/// Everything in the engine except the world. Worlds receive `&mut Kernel`.
pub struct Kernel<M> {
    now: VirtualTime,
    queue: EventQueue<Payload<M>>,
    rng: ChaCha8Rng,
    adversary: AdversaryState,
    sent: Vec<SentMessage<M>>,
    next_uid: BTreeMap<ActorKind, u64>,
    known: BTreeSet<ActorId>,
    terminated: BTreeSet<ActorId>,
    observations: Vec<Observation>,
    faults: Option<RandomFaults>,
    dropped: u64,
}

impl<M: Clone + MessageKind> Kernel<M> {
    fn new(seed: u64) -> Self {
        Kernel {
            now: VirtualTime::ZERO,
            queue: EventQueue::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            adversary: AdversaryState::default(),
            sent: Vec::new(),
            next_uid: BTreeMap::new(),
            known: BTreeSet::new(),
            terminated: BTreeSet::new(),
            observations: Vec::new(),
            faults: None,
            dropped: 0,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Allocates a fresh actor id of the given kind. Uids are dense per kind.
    pub fn spawn_actor(&mut self, kind: ActorKind) -> ActorId {
        let uid = self.next_uid.entry(kind).or_insert(0);
        let id = ActorId::new(kind, *uid);
        *uid += 1;
        self.known.insert(id);
        id
    }

    pub fn knows(&self, actor: ActorId) -> bool {
        self.known.contains(&actor)
    }

    pub fn schedule(&mut self, at: VirtualTime, target: ActorId, payload: Payload<M>) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        self.queue.push(at, target, payload);
        Ok(())
    }

    pub fn set_timer(&mut self, target: ActorId, after: u64, tag: u64) {
        let at = self.now.after(after);
        self.queue.push(at, target, Payload::Timer(tag));
    }

    /// Sends `msg` with the given base latency, subject to adversary faults.
    /// Returns `None` when the message was dropped at send time.
    pub fn send(&mut self, from: ActorId, to: ActorId, msg: M, latency: u64) -> Option<MessageId> {
        let id = MessageId(self.sent.len() as u64);
        self.sent.push(SentMessage {
            from,
            to,
            msg: msg.clone(),
        });
        let now = self.now;
        if self.adversary.is_isolated(from, now) || self.adversary.is_isolated(to, now) {
            self.dropped += 1;
            return None;
        }
        let to = self.adversary.redirect(from, to, now);
        let mut extra = 0;
        match self.adversary.take_rule(from, to, msg.kind()) {
            Some(adversary::RuleEffect::Drop) => {
                self.dropped += 1;
                return None;
            }
            Some(adversary::RuleEffect::Delay(t)) => extra += t,
            None => {}
        }
        if let Some(f) = self.faults {
            if f.drop_probability > 0.0 && self.rng.gen_bool(f.drop_probability) {
                self.dropped += 1;
                return None;
            }
            if f.max_delay > 0 && self.rng.gen_bool(f.delay_probability) {
                extra += self.rng.gen_range(1..=f.max_delay);
            }
        }
        self.queue
            .push(now.after(latency + extra), to, Payload::Deliver { id, from, msg });
        Some(id)
    }

    pub fn terminate(&mut self, actor: ActorId) {
        self.terminated.insert(actor);
    }

    /// Lets a terminated actor run again (a restarted process on the same
    /// node).
    pub fn revive(&mut self, actor: ActorId) {
        self.terminated.remove(&actor);
    }

    pub fn is_terminated(&self, actor: ActorId) -> bool {
        self.terminated.contains(&actor)
    }

    pub fn is_isolated(&self, actor: ActorId) -> bool {
        self.adversary.is_isolated(actor, self.now)
    }

    pub fn isolated_until(&self, actor: ActorId) -> Option<VirtualTime> {
        self.adversary.isolated_until(actor, self.now)
    }

    pub fn observe(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.observations.push(Observation {
            tick: self.now.0,
            name: name.into(),
            detail: detail.into(),
        });
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn messages_sent(&self) -> usize {
        self.sent.len()
    }

    pub fn messages_dropped(&self) -> u64 {
        self.dropped
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }
}

/// Actor state plus protocol logic, driven by the engine.
pub trait World {
    type Msg: Clone + fmt::Debug + MessageKind;

    /// Schedules the world's initial events. Called once before the first run.
    fn init(&mut self, kernel: &mut Kernel<Self::Msg>);

    /// Handles one event and returns a short description for the trace.
    fn handle(&mut self, kernel: &mut Kernel<Self::Msg>, target: ActorId, payload: Payload<Self::Msg>) -> String;

    /// Applies a world-specific adversary action (cloning, storage
    /// snapshots, ...). Generic network actions never reach this hook.
    fn on_adversary(&mut self, kernel: &mut Kernel<Self::Msg>, action: &AdversaryAction) -> Result<String, SimError>;

    /// Called when the adversary terminates `actor`.
    fn on_terminate(&mut self, _kernel: &mut Kernel<Self::Msg>, _actor: ActorId) {}

    /// Invariant checks evaluated after every processed event.
    fn check(&mut self, _kernel: &mut Kernel<Self::Msg>) {}

    fn digest(&self) -> Digest;
}

pub struct Engine<W: World> {
    kernel: Kernel<W::Msg>,
    world: W,
    trace: ScheduleTrace,
    record_digests: bool,
    initialized: bool,
}

impl<W: World> Engine<W> {
    pub fn new(world: W, seed: u64) -> Self {
        Engine {
            kernel: Kernel::new(seed),
            world,
            trace: ScheduleTrace::default(),
            record_digests: true,
            initialized: false,
        }
    }

    /// Disables per-event state digests. Bulk randomized runs use this; the
    /// trace still records every event with a zero digest.
    pub fn without_digests(mut self) -> Self {
        self.record_digests = false;
        self
    }

    pub fn with_faults(mut self, faults: RandomFaults) -> Self {
        self.kernel.faults = Some(faults);
        self
    }

    pub fn now(&self) -> VirtualTime {
        self.kernel.now
    }

    pub fn world(&self) -> &W {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut W {
        &mut self.world
    }

    pub fn kernel(&self) -> &Kernel<W::Msg> {
        &self.kernel
    }

    pub fn trace(&self) -> &ScheduleTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (W, Kernel<W::Msg>, ScheduleTrace) {
        (self.world, self.kernel, self.trace)
    }

    fn ensure_init(&mut self) {
        if !self.initialized {
            self.initialized = true;
            self.world.init(&mut self.kernel);
        }
    }

    pub fn schedule(&mut self, event: SimEvent<Payload<W::Msg>>) -> Result<(), SimError> {
        self.ensure_init();
        self.kernel.schedule(event.at, event.target, event.payload)
    }

    /// Validates and schedules an adversary action at tick `at`.
    pub fn inject(&mut self, at: VirtualTime, action: AdversaryAction) -> Result<(), SimError> {
        self.ensure_init();
        action.validate()?;
        self.kernel.schedule(at, ActorId::ADVERSARY, Payload::Adversary(action))
    }

    /// Processes every event with `at <= limit` and returns the trace so far.
    pub fn run_until(&mut self, limit: VirtualTime) -> &ScheduleTrace {
        self.ensure_init();
        while let Some(at) = self.kernel.queue.peek_time() {
            if at > limit {
                break;
            }
            let ev = self.kernel.queue.pop().expect("peeked");
            self.kernel.now = ev.at;
            self.dispatch(ev);
        }
        if self.kernel.now < limit {
            self.kernel.now = limit;
        }
        &self.trace
    }

    fn dispatch(&mut self, ev: SimEvent<Payload<W::Msg>>) {
        let now = self.kernel.now;
        let target = ev.target;
        let desc = match ev.payload {
            Payload::Adversary(action) => self.apply_adversary(action),
            payload => {
                if self.kernel.terminated.contains(&target) {
                    return;
                }
                if let Some(until) = self.kernel.adversary.paused_until(target, now) {
                    self.kernel.queue.push(until, target, payload);
                    return;
                }
                if let Payload::Deliver { from, .. } = &payload {
                    if self.kernel.adversary.is_isolated(target, now) || self.kernel.adversary.is_isolated(*from, now) {
                        self.kernel.dropped += 1;
                        return;
                    }
                }
                self.world.handle(&mut self.kernel, target, payload)
            }
        };
        self.world.check(&mut self.kernel);
        let digest = if self.record_digests {
            self.world.digest()
        } else {
            Digest::default()
        };
        self.trace.push(TraceRecord {
            tick: now.0,
            actor: target,
            event: desc,
            digest,
        });
    }

    fn apply_adversary(&mut self, action: AdversaryAction) -> String {
        let now = self.kernel.now;
        let label = action.label();
        let result = match &action {
            AdversaryAction::Delay { selector, ticks } => {
                self.kernel
                    .adversary
                    .add_rule(selector.clone(), adversary::RuleEffect::Delay(*ticks));
                Ok(String::new())
            }
            AdversaryAction::Drop { selector } => {
                self.kernel
                    .adversary
                    .add_rule(selector.clone(), adversary::RuleEffect::Drop);
                Ok(String::new())
            }
            AdversaryAction::Replay { selector } => {
                let found = self
                    .kernel
                    .sent
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, m)| selector.matches(m.from, m.to, m.msg.kind()))
                    .map(|(i, m)| (MessageId(i as u64), m.clone()));
                match found {
                    Some((id, m)) => {
                        self.kernel.queue.push(
                            now.after(1),
                            m.to,
                            Payload::Deliver {
                                id,
                                from: m.from,
                                msg: m.msg,
                            },
                        );
                        Ok(format!("message {}", id.0))
                    }
                    None => Ok("nothing to replay".into()),
                }
            }
            AdversaryAction::Isolate { actor, until } => {
                self.kernel.adversary.isolate(*actor, VirtualTime(*until));
                self.world.on_adversary(&mut self.kernel, &action)
            }
            AdversaryAction::Pause { actor, ticks } => {
                self.kernel.adversary.pause(*actor, now.after(*ticks));
                Ok(String::new())
            }
            AdversaryAction::Redirect { from, to, until } => {
                self.kernel.adversary.redirect_until(*from, *to, VirtualTime(*until));
                Ok(String::new())
            }
            AdversaryAction::Terminate { actor } => {
                self.kernel.terminated.insert(*actor);
                self.world.on_terminate(&mut self.kernel, *actor);
                Ok(String::new())
            }
            AdversaryAction::DecrementCounter { .. } | AdversaryAction::Forge { .. } => {
                Err(SimError::ForbiddenAction(label.clone()))
            }
            AdversaryAction::CloneInstance { .. }
            | AdversaryAction::SnapshotStorage { .. }
            | AdversaryAction::RestoreStorage { .. } => self.world.on_adversary(&mut self.kernel, &action),
        };
        match result {
            Ok(extra) if extra.is_empty() => format!("adversary {label}"),
            Ok(extra) => format!("adversary {label}: {extra}"),
            Err(e) => {
                self.kernel.observe("adversary_rejected", e.to_string());
                format!("adversary {label} rejected: {e}")
            }
        }
    }
}

/// Hashes any `Hash` value into a digest; convenience for worlds.
pub fn digest_of<T: Hash>(value: &T) -> Digest {
    Digest::of(value)
}

/// Stable 64-bit hash used for deterministic identifiers.
pub fn stable_hash64<T: Hash>(value: &T) -> u64 {
    let mut h = Xxh3::new();
    value.hash(&mut h);
    h.finish()
}
