//! Quorum-replicated lease table with sealed, rollback-protected replicas.
//!
//! Replication is a single ordered log driven by the store leader: an entry
//! is appended, every reachable replica applies it (persisting a sealed copy
//! of its table and bumping its version counter before acknowledging), and
//! the entry commits once a strict majority has acknowledged. Reads only see
//! the committed prefix.
//!
//! Each replica node has two counter devices: the election counter its
//! processes compete on, and the version counter embedded in every seal.

mod sealed;

pub use sealed::{open, seal, OpenStatus, SealedState, SealingKey, FORMAT_VERSION, HEADER_LEN, MAGIC, TAG_LEN};

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::{CounterDevice, CounterId};
use crate::election::{CandidateState, Phase};
use crate::lease::{Lease, LeaseId};
use crate::sim::VirtualTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("store unavailable: {reachable} of {members} replicas reachable, need {majority}")]
    Unavailable {
        reachable: usize,
        members: usize,
        majority: usize,
    },
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("rollback detected: sealed state at version {sealed}, device at {device}")]
    RollbackDetected { sealed: u64, device: u64 },
    #[error("replica {0} has not won its local election")]
    ElectionLost(u64),
    #[error("replica {0} already has a running process")]
    ReplicaRunning(u64),
    #[error("no replica {0}")]
    NoSuchReplica(u64),
    #[error("a write is already in flight")]
    WriteInFlight,
}

/// Persistent state of one replica: its table as of `commit_index` log
/// entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReplicaState {
    pub replica: u64,
    pub counter: CounterId,
    pub commit_index: u64,
    pub table: BTreeMap<LeaseId, Lease>,
}

impl ReplicaState {
    pub fn new(replica: u64, counter: CounterId) -> Self {
        ReplicaState {
            replica,
            counter,
            commit_index: 0,
            table: BTreeMap::new(),
        }
    }
}

/// Fixed membership; the majority is a strict majority of the members.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumConfig {
    pub replicas: Vec<u64>,
}

impl QuorumConfig {
    pub fn of_size(n: usize) -> Self {
        QuorumConfig {
            replicas: (0..n as u64).collect(),
        }
    }

    pub fn majority(&self) -> usize {
        self.replicas.len() / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Condition {
    /// Key must not exist.
    Absent,
    /// Key must hold exactly this record.
    Matches(Lease),
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum WriteOutcome {
    Committed { index: u64 },
    Conflict { current: Option<Lease> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PendingWrite {
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct LogEntry {
    key: LeaseId,
    value: Lease,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Node {
    key: SealingKey,
    process: Option<ReplicaState>,
    disk: Vec<u8>,
    version: CounterDevice,
    election: CounterDevice,
    reachable: bool,
    refusing: bool,
    applied_writes: u64,
    crash_next_apply: bool,
}

impl Node {
    fn serving(&self) -> bool {
        self.process.is_some() && self.reachable && !self.refusing
    }

    fn applied(&self) -> u64 {
        self.process.as_ref().map_or(0, |p| p.commit_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct StoreStats {
    pub committed_writes: u64,
    pub conflicts: u64,
    pub unavailable: u64,
    pub counter_writes: u64,
    pub torn_writes_recovered: u64,
    /// Smallest acknowledgement count among committed writes.
    pub min_commit_acks: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ReplicatedStore {
    config: QuorumConfig,
    nodes: Vec<Node>,
    log: Vec<LogEntry>,
    commit_index: u64,
    committed: BTreeMap<LeaseId, Lease>,
    snapshots: Vec<(u64, Vec<u8>)>,
    rng: ChaCha8Rng,
    stats: StoreStats,
}

pub fn election_cid(node: u64) -> CounterId {
    CounterId(2 * node)
}

pub fn version_cid(node: u64) -> CounterId {
    CounterId(2 * node + 1)
}

impl ReplicatedStore {
    /// Provisions a cluster with every replica running and sealed at
    /// version 0.
    pub fn new(config: QuorumConfig, key_material: &[u8], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = config
            .replicas
            .iter()
            .map(|&id| {
                let key = SealingKey::derive(key_material, id);
                let state = ReplicaState::new(id, version_cid(id));
                let mut nonce = [0u8; 12];
                rng.fill_bytes(&mut nonce);
                let disk = seal(&state, 0, &key, nonce).to_bytes();
                Node {
                    key,
                    process: Some(state),
                    disk,
                    version: CounterDevice::new(version_cid(id)),
                    election: CounterDevice::new(election_cid(id)),
                    reachable: true,
                    refusing: false,
                    applied_writes: 0,
                    crash_next_apply: false,
                }
            })
            .collect();
        ReplicatedStore {
            config,
            nodes,
            log: Vec::new(),
            commit_index: 0,
            committed: BTreeMap::new(),
            snapshots: Vec::new(),
            rng,
            stats: StoreStats::default(),
        }
    }

    /// Same as [`Self::new`] but with device latencies for cost accounting.
    pub fn with_device_latency(mut self, read: u64, write: u64) -> Self {
        for n in &mut self.nodes {
            n.version = n.version.clone().with_latency(read, write);
            n.election = n.election.clone().with_latency(read, write);
        }
        self
    }

    pub fn config(&self) -> &QuorumConfig {
        &self.config
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn members(&self) -> usize {
        self.nodes.len()
    }

    fn node(&self, id: u64) -> Result<&Node, StoreError> {
        self.nodes.get(id as usize).ok_or(StoreError::NoSuchReplica(id))
    }

    fn node_mut(&mut self, id: u64) -> Result<&mut Node, StoreError> {
        self.nodes.get_mut(id as usize).ok_or(StoreError::NoSuchReplica(id))
    }

    pub fn set_reachable(&mut self, id: u64, reachable: bool) {
        if let Some(n) = self.nodes.get_mut(id as usize) {
            n.reachable = reachable;
        }
    }

    pub fn is_running(&self, id: u64) -> bool {
        self.node(id).is_ok_and(|n| n.process.is_some())
    }

    pub fn is_refusing(&self, id: u64) -> bool {
        self.node(id).is_ok_and(|n| n.refusing)
    }

    pub fn replica_state(&self, id: u64) -> Option<&ReplicaState> {
        self.node(id).ok().and_then(|n| n.process.as_ref())
    }

    pub fn version_device(&self, id: u64) -> Option<&CounterDevice> {
        self.node(id).ok().map(|n| &n.version)
    }

    pub fn election_device(&self, id: u64) -> Option<&CounterDevice> {
        self.node(id).ok().map(|n| &n.election)
    }

    pub fn election_device_mut(&mut self, id: u64) -> Option<&mut CounterDevice> {
        self.nodes.get_mut(id as usize).map(|n| &mut n.election)
    }

    pub fn applied_writes(&self, id: u64) -> u64 {
        self.node(id).map_or(0, |n| n.applied_writes)
    }

    pub fn disk(&self, id: u64) -> Option<&[u8]> {
        self.node(id).ok().map(|n| n.disk.as_slice())
    }

    fn serving_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.serving()).count()
    }

    fn require_quorum(&mut self) -> Result<(), StoreError> {
        let reachable = self.serving_count();
        let majority = self.config.majority();
        if reachable < majority {
            self.stats.unavailable += 1;
            return Err(StoreError::Unavailable {
                reachable,
                members: self.nodes.len(),
                majority,
            });
        }
        Ok(())
    }

    /// Applies log entries up to `target` on node `idx`: seal the new state
    /// at version+1, then bump the version counter, then acknowledge.
    fn catch_up(&mut self, idx: usize, target: u64, at: VirtualTime) -> bool {
        let ReplicatedStore {
            nodes, log, rng, stats, ..
        } = self;
        let node = &mut nodes[idx];
        while node.applied() < target {
            let Some(state) = node.process.as_mut() else {
                return false;
            };
            let entry = &log[state.commit_index as usize];
            state.table.insert(entry.key, entry.value.clone());
            state.commit_index += 1;
            let next_version = node.version.peek().count + 1;
            let mut nonce = [0u8; 12];
            rng.fill_bytes(&mut nonce);
            node.disk = seal(state, next_version, &node.key, nonce).to_bytes();
            if node.crash_next_apply {
                node.crash_next_apply = false;
                node.process = None;
                return false;
            }
            node.version
                .increment(idx as u64, at)
                .expect("version counter is local to the replica");
            node.applied_writes += 1;
            stats.counter_writes += 1;
        }
        true
    }

    /// Pushes the log to every serving replica and advances the commit index
    /// if a majority has applied it.
    fn replicate(&mut self, at: VirtualTime) -> usize {
        let target = self.log.len() as u64;
        let mut acks = 0;
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].serving() && self.catch_up(idx, target, at) {
                acks += 1;
            }
        }
        if acks >= self.config.majority() && target > self.commit_index {
            for entry in &self.log[self.commit_index as usize..] {
                self.committed.insert(entry.key, entry.value.clone());
            }
            self.commit_index = target;
            self.stats.committed_writes += 1;
            self.stats.min_commit_acks = Some(self.stats.min_commit_acks.map_or(acks, |m| m.min(acks)));
        }
        acks
    }

    fn check(&self, key: LeaseId, cond: &Condition) -> Option<Option<Lease>> {
        let current = self.committed.get(&key);
        let holds = match cond {
            Condition::Absent => current.is_none(),
            Condition::Matches(expected) => current == Some(expected),
            Condition::Unconditional => true,
        };
        (!holds).then(|| current.cloned())
    }

    /// Appends a conditional write without replicating it.
    pub fn begin_write(
        &mut self,
        key: LeaseId,
        value: Lease,
        cond: Condition,
        at: VirtualTime,
    ) -> Result<Result<PendingWrite, WriteOutcome>, StoreError> {
        self.require_quorum()?;
        if (self.log.len() as u64) > self.commit_index {
            self.replicate(at);
            if (self.log.len() as u64) > self.commit_index {
                return Err(StoreError::WriteInFlight);
            }
        }
        if let Some(current) = self.check(key, &cond) {
            self.stats.conflicts += 1;
            return Ok(Err(WriteOutcome::Conflict { current }));
        }
        self.log.push(LogEntry { key, value });
        Ok(Ok(PendingWrite {
            index: self.log.len() as u64,
        }))
    }

    /// Replicates a pending write and reports whether it committed.
    pub fn complete_write(&mut self, pending: PendingWrite, at: VirtualTime) -> Result<WriteOutcome, StoreError> {
        self.require_quorum()?;
        self.replicate(at);
        if self.commit_index >= pending.index {
            Ok(WriteOutcome::Committed { index: pending.index })
        } else {
            self.stats.unavailable += 1;
            Err(StoreError::Unavailable {
                reachable: self.serving_count(),
                members: self.nodes.len(),
                majority: self.config.majority(),
            })
        }
    }

    pub fn replicated_write(
        &mut self,
        key: LeaseId,
        value: Lease,
        cond: Condition,
        at: VirtualTime,
    ) -> Result<WriteOutcome, StoreError> {
        match self.begin_write(key, value, cond, at)? {
            Ok(pending) => self.complete_write(pending, at),
            Err(conflict) => Ok(conflict),
        }
    }

    /// Latest committed value of `key`.
    pub fn replicated_read(&mut self, key: LeaseId) -> Result<Option<Lease>, StoreError> {
        self.require_quorum()?;
        Ok(self.committed.get(&key).cloned())
    }

    /// Full committed table (requires a quorum, like a read).
    pub fn read_all(&mut self) -> Result<BTreeMap<LeaseId, Lease>, StoreError> {
        self.require_quorum()?;
        Ok(self.committed.clone())
    }

    /// Committed table without a quorum check, for inspection.
    pub fn committed(&self) -> &BTreeMap<LeaseId, Lease> {
        &self.committed
    }

    /// Stops a replica process; its sealed file stays on disk.
    pub fn crash(&mut self, id: u64) {
        if let Ok(n) = self.node_mut(id) {
            n.process = None;
        }
    }

    /// The next apply on `id` persists its seal and then crashes before the
    /// version counter is bumped.
    pub fn crash_during_next_apply(&mut self, id: u64) {
        if let Ok(n) = self.node_mut(id) {
            n.crash_next_apply = true;
        }
    }

    /// Seals the running process state at the current version. Used after a
    /// fresh process takes over to refresh the file.
    pub fn seal_replica(&mut self, id: u64) -> Result<SealedState, StoreError> {
        let ReplicatedStore { nodes, rng, .. } = self;
        let node = nodes.get_mut(id as usize).ok_or(StoreError::NoSuchReplica(id))?;
        let state = node.process.as_ref().ok_or(StoreError::ReplicaRunning(id))?;
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let sealed = seal(state, node.version.peek().count, &node.key, nonce);
        node.disk = sealed.to_bytes();
        Ok(sealed)
    }

    /// Opens the node's sealed file against its version counter.
    pub fn open_disk(&self, id: u64) -> Result<(ReplicaState, OpenStatus), StoreError> {
        let node = self.node(id)?;
        let sealed = SealedState::from_bytes(&node.disk)?;
        open(&sealed, node.version.peek().count, &node.key)
    }

    /// Restarts a replica process after it won the local election on the
    /// node's election counter. A failed open leaves the node refusing
    /// service.
    pub fn recover_replica(
        &mut self,
        id: u64,
        election: &CandidateState,
        at: VirtualTime,
    ) -> Result<OpenStatus, StoreError> {
        let node = self.node(id)?;
        if election.cid != node.election.cid() || election.phase != Phase::Leading {
            return Err(StoreError::ElectionLost(id));
        }
        if node.process.is_some() {
            return Err(StoreError::ReplicaRunning(id));
        }
        let opened = self.open_disk(id);
        let node = self.node_mut(id)?;
        match opened {
            Ok((state, status)) => {
                if status == OpenStatus::TornWrite {
                    node.version
                        .increment(id, at)
                        .expect("version counter is local to the replica");
                    node.applied_writes += 1;
                    self.stats.counter_writes += 1;
                    self.stats.torn_writes_recovered += 1;
                }
                let node = self.node_mut(id)?;
                node.process = Some(state);
                node.refusing = false;
                Ok(status)
            }
            Err(e) => {
                node.refusing = true;
                Err(e)
            }
        }
    }

    pub fn snapshot_disk(&mut self, id: u64) -> Result<u64, StoreError> {
        let bytes = self.node(id)?.disk.clone();
        self.snapshots.push((id, bytes));
        Ok(self.snapshots.len() as u64 - 1)
    }

    pub fn restore_disk(&mut self, id: u64, snapshot: u64) -> Result<(), StoreError> {
        let (_, bytes) = self
            .snapshots
            .get(snapshot as usize)
            .cloned()
            .ok_or(StoreError::NoSuchReplica(id))?;
        self.node_mut(id)?.disk = bytes;
        Ok(())
    }

    pub fn overwrite_disk(&mut self, id: u64, bytes: Vec<u8>) -> Result<(), StoreError> {
        self.node_mut(id)?.disk = bytes;
        Ok(())
    }

    /// Version count embedded in a snapshot taken earlier.
    pub fn snapshot_version(&self, snapshot: u64) -> Option<u64> {
        self.snapshots
            .get(snapshot as usize)
            .and_then(|(_, b)| SealedState::from_bytes(b).ok())
            .map(|s| s.embedded_count)
    }

    /// Every replica's version count equals the writes it applied.
    pub fn version_bookkeeping_holds(&self) -> bool {
        self.nodes.iter().all(|n| n.version.peek().count == n.applied_writes)
    }
}
