//! Cloned lease servers racing on one lease.
//!
//! Every server starts from the same cache and works through its own queue
//! of requests; each step hands one request to one live server. At a
//! terminal state exactly one server may remain.

use std::hash::{Hash, Hasher};

use super::Model;
use crate::counter::InstanceId;
use crate::lease::{Lease, LeaseId, LeaseParams, LeaseRequest, LeaseServer};
use crate::sim::VirtualTime;
use crate::store::{QuorumConfig, ReplicatedStore};

pub const CLONE_LEASE: LeaseId = LeaseId(1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaseCloneConfig {
    pub params: LeaseParams,
    /// Per server: `(requester, stamp)`; the server's clock reads the stamp.
    pub queues: Vec<Vec<(InstanceId, u64)>>,
}

impl LeaseCloneConfig {
    /// `servers` clones, each serving `per_server` requests from its own
    /// client, so every server's first commit conflicts with the others.
    pub fn conflicting(servers: usize, per_server: usize) -> Self {
        LeaseCloneConfig {
            params: LeaseParams::default(),
            queues: (0..servers)
                .map(|s| {
                    (0..per_server)
                        .map(|k| (InstanceId(100 + s as u64), 1 + 2 * k as u64))
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeaseCloneState {
    pub store: ReplicatedStore,
    pub servers: Vec<LeaseServer>,
    pub next: Vec<usize>,
}

impl LeaseCloneState {
    fn key(
        &self,
    ) -> (
        &std::collections::BTreeMap<LeaseId, Lease>,
        u64,
        &[LeaseServer],
        &[usize],
    ) {
        (
            self.store.committed(),
            self.store.commit_index(),
            &self.servers,
            &self.next,
        )
    }

    pub fn survivors(&self) -> usize {
        self.servers.iter().filter(|s| !s.is_terminated()).count()
    }
}

impl PartialEq for LeaseCloneState {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for LeaseCloneState {}

impl Hash for LeaseCloneState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

#[derive(Debug, Clone)]
pub struct LeaseCloneModel {
    pub config: LeaseCloneConfig,
}

impl LeaseCloneModel {
    pub fn new(config: LeaseCloneConfig) -> Self {
        LeaseCloneModel { config }
    }

    fn terminal(&self, s: &LeaseCloneState) -> bool {
        s.servers
            .iter()
            .enumerate()
            .all(|(i, srv)| srv.is_terminated() || s.next[i] >= self.config.queues[i].len())
    }
}

impl Model for LeaseCloneModel {
    type State = LeaseCloneState;
    /// Index of the server that handles its next request.
    type Action = usize;

    fn initial(&self) -> Vec<LeaseCloneState> {
        let mut store = ReplicatedStore::new(QuorumConfig::of_size(3), b"lease-clone", 0);
        let mut origin = LeaseServer::new(InstanceId(1), self.config.params);
        origin
            .create_lease(&mut store, CLONE_LEASE, VirtualTime(0))
            .expect("fresh store accepts the lease");
        let servers = (0..self.config.queues.len())
            .map(|i| origin.clone_as(InstanceId(1 + i as u64)))
            .collect();
        vec![LeaseCloneState {
            store,
            servers,
            next: vec![0; self.config.queues.len()],
        }]
    }

    fn successors(&self, s: &LeaseCloneState, out: &mut Vec<(usize, LeaseCloneState)>) {
        for (i, queue) in self.config.queues.iter().enumerate() {
            if s.servers[i].is_terminated() || s.next[i] >= queue.len() {
                continue;
            }
            let (requester, stamp) = queue[s.next[i]];
            let mut n = s.clone();
            n.next[i] += 1;
            let req = LeaseRequest {
                lease_id: CLONE_LEASE,
                requester,
                stamp,
            };
            // Conflicts terminate the server; other errors cannot occur with
            // every replica reachable.
            let _ = n.servers[i].grant_or_renew(&mut n.store, &req, stamp, VirtualTime(stamp));
            out.push((i, n));
        }
    }

    fn violation(&self, s: &LeaseCloneState) -> Option<String> {
        if self.terminal(s) && s.survivors() != 1 {
            return Some(format!("{} lease servers survive", s.survivors()));
        }
        None
    }
}
