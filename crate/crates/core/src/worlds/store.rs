//! Replicated store on the simulation engine.
//!
//! A client writes every few ticks; the adversary isolates replicas,
//! snapshots and restores their sealed files and kills their processes.
//! A killed replica restarts only after winning the local election on its
//! node, then opens its sealed file against the node's version counter.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::clock::{Epsilon, TrustedClock};
use crate::counter::{CounterDevice, InstanceId};
use crate::election::{start_candidate, CandidateState, ElectionParams, Phase};
use crate::lease::{Lease, LeaseId};
use crate::sim::{
    ActorId, ActorKind, AdversaryAction, Digest, Kernel, MessageKind, Payload, SimError, VirtualTime, World,
};
use crate::store::{election_cid, Condition, OpenStatus, QuorumConfig, ReplicatedStore, StoreError, WriteOutcome};
use crate::worlds::{counter_invariants, InvariantResult};

pub const CLIENT: ActorId = ActorId::new(ActorKind::AppInstance, 0);
const TICK: u64 = 0;
const RESTART: u64 = 1;

pub fn replica_actor(id: u64) -> ActorId {
    ActorId::new(ActorKind::StoreReplica, id)
}

/// A replica process coming back up: local election first, then open.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Restart {
    pub node: u64,
    pub candidate: CandidateState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RestartProgress {
    Electing,
    /// Lost the local election to another process on the node.
    Abandoned,
    Recovered(OpenStatus),
    Refused(StoreError),
}

impl Restart {
    pub fn new(node: u64, instance: InstanceId) -> Self {
        Restart {
            node,
            candidate: start_candidate(instance, election_cid(node)),
        }
    }

    /// Runs one election step at `now` and, once leading, recovers.
    pub fn step(
        &mut self,
        store: &mut ReplicatedStore,
        clock: &mut TrustedClock,
        params: &ElectionParams,
        now: VirtualTime,
        rng: &mut impl Rng,
    ) -> RestartProgress {
        let actor = replica_actor(self.node);
        clock.register(actor);
        let tt = self
            .candidate
            .wants_clock()
            .then(|| clock.read_random(actor, now, rng).expect("registered reader").value);
        let device = store
            .election_device_mut(self.node)
            .expect("restart targets an existing node");
        self.candidate.step_atomic(now, tt, device, params);
        match self.candidate.phase {
            Phase::Leading => match store.recover_replica(self.node, &self.candidate, now) {
                Ok(status) => RestartProgress::Recovered(status),
                Err(e) => RestartProgress::Refused(e),
            },
            Phase::Terminated => RestartProgress::Abandoned,
            _ => RestartProgress::Electing,
        }
    }
}

/// Version and election counters of every node.
pub fn store_devices(store: &ReplicatedStore) -> impl Iterator<Item = &CounterDevice> {
    (0..store.members() as u64).flat_map(|id| {
        [store.version_device(id), store.election_device(id)]
            .into_iter()
            .flatten()
    })
}

/// Records a restart outcome as observations; true once it is settled.
pub fn observe_restart<M: Clone + MessageKind>(kernel: &mut Kernel<M>, node: u64, progress: &RestartProgress) -> bool {
    match progress {
        RestartProgress::Electing => false,
        RestartProgress::Abandoned => {
            kernel.observe("restart_abandoned", format!("replica {node}"));
            true
        }
        RestartProgress::Recovered(status) => {
            if *status == OpenStatus::TornWrite {
                kernel.observe("torn_write_recovered", format!("replica {node}"));
            }
            kernel.observe("replica_recovered", format!("replica {node}"));
            true
        }
        RestartProgress::Refused(e) => {
            let name = match e {
                StoreError::RollbackDetected { .. } => "rollback_detected",
                StoreError::IntegrityViolation(_) => "integrity_violation",
                _ => "replica_refused",
            };
            kernel.observe(name, format!("replica {node}: {e}"));
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreWorldConfig {
    pub replicas: usize,
    /// The client cycles over this many keys.
    pub keys: u64,
    pub write_every: u64,
    /// Ticks between a kill and the replacement process starting.
    pub restart_delay: u64,
    pub epsilon: u64,
    pub period: u64,
    pub key_material: Vec<u8>,
    pub seed: u64,
}

impl Default for StoreWorldConfig {
    fn default() -> Self {
        StoreWorldConfig {
            replicas: 3,
            keys: 4,
            write_every: 1,
            restart_delay: 1,
            epsilon: 1,
            period: 5,
            key_material: b"lld-store".to_vec(),
            seed: 0,
        }
    }
}

/// Store worlds exchange no messages; everything is a timer or an attack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoMsg {}

impl MessageKind for NoMsg {
    fn kind(&self) -> &'static str {
        match *self {}
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreSummary {
    pub attempted_writes: u64,
    pub committed_writes: u64,
    pub unavailable_writes: u64,
    pub commit_index: u64,
    pub rollbacks_detected: u64,
    pub torn_writes_recovered: u64,
    pub refusing_replicas: Vec<u64>,
    pub prefix_consistent: bool,
    pub version_bookkeeping: bool,
}

/// A storage restore as the adversary applied it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RestoreRecord {
    pub tick: u64,
    pub replica: u64,
    /// Writes the replica applied between the snapshot and the restore.
    pub writes_since_snapshot: u64,
}

#[derive(Debug)]
pub struct StoreWorld {
    pub config: StoreWorldConfig,
    pub store: ReplicatedStore,
    clock: TrustedClock,
    params: ElectionParams,
    /// Every write appended to the store log, in log order.
    appended: Vec<(LeaseId, Lease)>,
    restarts: BTreeMap<u64, Restart>,
    /// Snapshot ids as the adversary numbers them, mapped to store ids.
    snapshots: Vec<u64>,
    unavailable: u64,
    unavailable_since: Option<u64>,
    rollbacks: u64,
    prefix_broken: Option<u64>,
    pub restores: Vec<RestoreRecord>,
}

impl StoreWorld {
    pub fn new(config: StoreWorldConfig) -> Self {
        let store = ReplicatedStore::new(
            QuorumConfig::of_size(config.replicas),
            &config.key_material,
            config.seed,
        );
        StoreWorld {
            clock: TrustedClock::new(Epsilon(config.epsilon)),
            params: ElectionParams::new(config.epsilon, config.period),
            store,
            config,
            appended: Vec::new(),
            restarts: BTreeMap::new(),
            snapshots: Vec::new(),
            unavailable: 0,
            unavailable_since: None,
            rollbacks: 0,
            prefix_broken: None,
            restores: Vec::new(),
        }
    }

    fn sync_reachability(&mut self, kernel: &Kernel<NoMsg>) {
        for id in 0..self.config.replicas as u64 {
            self.store.set_reachable(id, !kernel.is_isolated(replica_actor(id)));
        }
    }

    fn write(&mut self, kernel: &mut Kernel<NoMsg>) -> String {
        let now = kernel.now();
        self.sync_reachability(kernel);
        let key = LeaseId(now.0 / self.config.write_every % self.config.keys);
        let value = Lease {
            lease_id: key,
            owner: Some(InstanceId(now.0)),
            expiry: now.0,
        };
        let failures_before = self.unavailable;
        let desc = match self
            .store
            .begin_write(key, value.clone(), Condition::Unconditional, now)
        {
            Ok(Ok(pending)) => {
                self.appended.push((key, value));
                match self.store.complete_write(pending, now) {
                    Ok(WriteOutcome::Committed { index }) => format!("write {key} committed at {index}"),
                    Ok(WriteOutcome::Conflict { .. }) => unreachable!("unconditional writes never conflict"),
                    Err(e) => {
                        self.unavailable += 1;
                        format!("write {key} pending: {e}")
                    }
                }
            }
            Ok(Err(_)) => unreachable!("unconditional writes never conflict"),
            Err(e) => {
                self.unavailable += 1;
                format!("write {key} failed: {e}")
            }
        };
        let available = self.unavailable == failures_before;
        if available == self.unavailable_since.is_some() {
            match self.unavailable_since.take() {
                Some(since) => kernel.observe("store_available", format!("unavailable since tick {since}")),
                None => {
                    self.unavailable_since = Some(now.0);
                    kernel.observe("store_unavailable", format!("write to {key} failed"));
                }
            }
        }
        kernel.set_timer(CLIENT, self.config.write_every, TICK);
        desc
    }

    fn restart_step(&mut self, kernel: &mut Kernel<NoMsg>, node: u64) -> String {
        let now = kernel.now();
        let Some(mut restart) = self.restarts.remove(&node) else {
            return "no restart pending".into();
        };
        let progress = restart.step(&mut self.store, &mut self.clock, &self.params, now, kernel.rng());
        let phase = restart.candidate.phase;
        if observe_restart(kernel, node, &progress) {
            if matches!(progress, RestartProgress::Refused(StoreError::RollbackDetected { .. })) {
                self.rollbacks += 1;
            }
            format!("restart {progress:?}")
        } else {
            self.restarts.insert(node, restart);
            kernel.set_timer(replica_actor(node), 1, RESTART);
            format!("restart electing ({phase:?})")
        }
    }

    fn fold(&self, upto: u64) -> BTreeMap<LeaseId, Lease> {
        self.appended[..upto as usize].iter().cloned().collect()
    }

    /// Committed table and every running replica agree with the log prefix
    /// they claim to have applied.
    pub fn prefix_consistent(&self) -> bool {
        if *self.store.committed() != self.fold(self.store.commit_index()) {
            return false;
        }
        (0..self.config.replicas as u64).all(|id| match self.store.replica_state(id) {
            Some(s) => s.commit_index <= self.appended.len() as u64 && s.table == self.fold(s.commit_index),
            None => true,
        })
    }

    pub fn invariants(&self) -> Vec<InvariantResult> {
        let mut out = vec![
            InvariantResult::from_first(
                "committed_prefix",
                self.prefix_broken
                    .map(|t| (t, "replica table diverged from the log".to_string())),
            ),
            if self.store.version_bookkeeping_holds() {
                InvariantResult::ok("version_bookkeeping")
            } else {
                InvariantResult::failed("version_bookkeeping", 0, "version counter differs from applied writes")
            },
        ];
        out.extend(counter_invariants(store_devices(&self.store)));
        out
    }

    pub fn summary(&self) -> StoreSummary {
        StoreSummary {
            attempted_writes: self.appended.len() as u64 + self.unavailable,
            committed_writes: self.store.stats().committed_writes,
            unavailable_writes: self.unavailable,
            commit_index: self.store.commit_index(),
            rollbacks_detected: self.rollbacks,
            torn_writes_recovered: self.store.stats().torn_writes_recovered,
            refusing_replicas: (0..self.config.replicas as u64)
                .filter(|&id| self.store.is_refusing(id))
                .collect(),
            prefix_consistent: self.prefix_broken.is_none(),
            version_bookkeeping: self.store.version_bookkeeping_holds(),
        }
    }
}

impl World for StoreWorld {
    type Msg = NoMsg;

    fn init(&mut self, kernel: &mut Kernel<NoMsg>) {
        kernel.set_timer(CLIENT, 1, TICK);
    }

    fn handle(&mut self, kernel: &mut Kernel<NoMsg>, target: ActorId, payload: Payload<NoMsg>) -> String {
        match (target.kind, payload) {
            (ActorKind::AppInstance, Payload::Timer(_)) => self.write(kernel),
            (ActorKind::StoreReplica, Payload::Timer(_)) => self.restart_step(kernel, target.uid),
            (_, Payload::Deliver { msg, .. }) => match msg {},
            _ => "ignored".into(),
        }
    }

    fn on_adversary(&mut self, kernel: &mut Kernel<NoMsg>, action: &AdversaryAction) -> Result<String, SimError> {
        let map = |e: StoreError| SimError::Rejected(e.to_string());
        match action {
            AdversaryAction::Isolate { .. } => Ok(String::new()),
            AdversaryAction::SnapshotStorage { replica } => {
                let id = self.store.snapshot_disk(*replica).map_err(map)?;
                self.snapshots.push(id);
                Ok(format!("snapshot {}", self.snapshots.len() - 1))
            }
            AdversaryAction::RestoreStorage { replica, snapshot } => {
                let id = *self
                    .snapshots
                    .get(*snapshot as usize)
                    .ok_or_else(|| SimError::Rejected(format!("no snapshot {snapshot}")))?;
                let current = self.store.version_device(*replica).map(|d| d.peek().count);
                let restored = self.store.snapshot_version(id);
                self.store.restore_disk(*replica, id).map_err(map)?;
                let writes_since_snapshot = current.zip(restored).map_or(0, |(c, r)| c.saturating_sub(r));
                self.restores.push(RestoreRecord {
                    tick: kernel.now().0,
                    replica: *replica,
                    writes_since_snapshot,
                });
                Ok(format!("{writes_since_snapshot} writes undone"))
            }
            other => Err(SimError::Rejected(format!(
                "{} has no effect on a store",
                other.label()
            ))),
        }
    }

    fn on_terminate(&mut self, kernel: &mut Kernel<NoMsg>, actor: ActorId) {
        if actor.kind != ActorKind::StoreReplica {
            return;
        }
        let node = actor.uid;
        self.store.crash(node);
        kernel.revive(actor);
        let instance = InstanceId(kernel.rng().gen());
        self.restarts.insert(node, Restart::new(node, instance));
        kernel.set_timer(actor, self.config.restart_delay, RESTART);
    }

    fn check(&mut self, kernel: &mut Kernel<NoMsg>) {
        if self.prefix_broken.is_none() && !self.prefix_consistent() {
            self.prefix_broken = Some(kernel.now().0);
            kernel.observe("prefix_diverged", format!("commit index {}", self.store.commit_index()));
        }
    }

    fn digest(&self) -> Digest {
        Digest::of(&(self.store.commit_index(), self.store.committed(), &self.appended))
    }
}
