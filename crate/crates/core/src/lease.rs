//! Lease service: grants and renews application leases against a cached copy
//! of the replicated store, committing every change with a conditional write.
//!
//! A lease held by one instance may pass to another only once the server's
//! trusted clock reaches `LT + 2*eps + P`. A server whose conditional commit
//! loses against a concurrent writer (typically a clone of itself) terminates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::InstanceId;
use crate::sim::VirtualTime;
use crate::store::{Condition, ReplicatedStore, StoreError, WriteOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaseId(pub u64);

impl fmt::Display for LeaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lid:{:x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: LeaseId,
    pub owner: Option<InstanceId>,
    /// Trusted time at which the lease lapses.
    pub expiry: u64,
}

impl Lease {
    pub fn vacant(lease_id: LeaseId) -> Self {
        Lease {
            lease_id,
            owner: None,
            expiry: 0,
        }
    }

    /// Holder as seen at trusted time `tt`; expired leases have none.
    pub fn holder_at(&self, tt: u64) -> Option<InstanceId> {
        self.owner.filter(|_| self.expiry > tt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub lease_id: LeaseId,
    pub requester: InstanceId,
    /// Requester's trusted reading when it sent the request.
    pub stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaseParams {
    pub epsilon: u64,
    pub period: u64,
    pub lease_length: u64,
}

impl LeaseParams {
    /// Trusted-time gap between an expiry and a grant to someone else.
    pub fn regrant_delay(&self) -> u64 {
        2 * self.epsilon + self.period
    }
}

impl Default for LeaseParams {
    fn default() -> Self {
        LeaseParams {
            epsilon: 1,
            period: 5,
            lease_length: 5,
        }
    }
}

/// The grant predicate. Returns the record to commit, or `None` to reject.
pub fn decide(current: &Lease, req: &LeaseRequest, server_tt: u64, params: &LeaseParams) -> Option<Lease> {
    let fresh = req.stamp + params.lease_length;
    let expiry = match current.owner {
        Some(owner) if owner == req.requester => current.expiry.max(fresh),
        None => fresh,
        Some(_) if server_tt >= current.expiry + params.regrant_delay() => fresh,
        Some(_) => return None,
    };
    Some(Lease {
        lease_id: req.lease_id,
        owner: Some(req.requester),
        expiry,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LeaseError {
    #[error("lease {0} already exists")]
    AlreadyExists(LeaseId),
    #[error("lease {0} does not exist")]
    UnknownLease(LeaseId),
    #[error("conditional commit lost to a concurrent writer; server terminated")]
    StoreConflict,
    #[error("store unavailable")]
    StoreUnavailable,
    #[error("lease server has terminated")]
    Terminated,
}

fn map_store(e: StoreError) -> LeaseError {
    match e {
        StoreError::Unavailable { .. } | StoreError::WriteInFlight => LeaseError::StoreUnavailable,
        other => panic!("unexpected store error at lease server: {other}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantOutcome {
    Granted { expiry: u64 },
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ServerCache {
    pub entries: BTreeMap<LeaseId, Lease>,
    pub store_epoch: u64,
}

/// A committed grant, kept for invariant checks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrantRecord {
    pub tick: u64,
    pub server_tt: u64,
    pub previous: Lease,
    pub granted: Lease,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LeaseServer {
    pub instance: InstanceId,
    pub params: LeaseParams,
    pub cache: ServerCache,
    terminated: bool,
    grants: Vec<GrantRecord>,
}

impl LeaseServer {
    pub fn new(instance: InstanceId, params: LeaseParams) -> Self {
        LeaseServer {
            instance,
            params,
            cache: ServerCache::default(),
            terminated: false,
            grants: Vec::new(),
        }
    }

    /// A clone carries the same cache but a fresh identity and no history.
    pub fn clone_as(&self, instance: InstanceId) -> Self {
        LeaseServer {
            instance,
            params: self.params,
            cache: self.cache.clone(),
            terminated: self.terminated,
            grants: Vec::new(),
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn grants(&self) -> &[GrantRecord] {
        &self.grants
    }

    fn alive(&self) -> Result<(), LeaseError> {
        if self.terminated {
            Err(LeaseError::Terminated)
        } else {
            Ok(())
        }
    }

    pub fn create_lease(
        &mut self,
        store: &mut ReplicatedStore,
        lid: LeaseId,
        at: VirtualTime,
    ) -> Result<Lease, LeaseError> {
        self.alive()?;
        let lease = Lease::vacant(lid);
        match store
            .replicated_write(lid, lease.clone(), Condition::Absent, at)
            .map_err(map_store)?
        {
            WriteOutcome::Committed { .. } => {
                self.cache.entries.insert(lid, lease.clone());
                Ok(lease)
            }
            WriteOutcome::Conflict { .. } => Err(LeaseError::AlreadyExists(lid)),
        }
    }

    pub fn reload_cache(&mut self, store: &mut ReplicatedStore) -> Result<&ServerCache, LeaseError> {
        self.alive()?;
        let entries = store.read_all().map_err(map_store)?;
        self.cache.entries = entries;
        self.cache.store_epoch += 1;
        Ok(&self.cache)
    }

    /// Writes `entry` iff the store still holds exactly `expected`, the record
    /// this server decided against. Losing terminates the server.
    pub fn conditional_commit(
        &mut self,
        store: &mut ReplicatedStore,
        entry: Lease,
        expected: &Lease,
        at: VirtualTime,
    ) -> Result<(), LeaseError> {
        self.alive()?;
        let lid = entry.lease_id;
        match store
            .replicated_write(lid, entry.clone(), Condition::Matches(expected.clone()), at)
            .map_err(map_store)?
        {
            WriteOutcome::Committed { .. } => {
                self.cache.entries.insert(lid, entry);
                Ok(())
            }
            WriteOutcome::Conflict { .. } => {
                self.terminated = true;
                Err(LeaseError::StoreConflict)
            }
        }
    }

    /// Decides against the cache; a rejection is re-checked against a fresh
    /// reload so stale caches only ever cause conflicts, not wrong rejections.
    pub fn grant_or_renew(
        &mut self,
        store: &mut ReplicatedStore,
        req: &LeaseRequest,
        server_tt: u64,
        at: VirtualTime,
    ) -> Result<GrantOutcome, LeaseError> {
        self.alive()?;
        if !self.cache.entries.contains_key(&req.lease_id) {
            self.reload_cache(store)?;
        }
        let mut current = self
            .cache
            .entries
            .get(&req.lease_id)
            .cloned()
            .ok_or(LeaseError::UnknownLease(req.lease_id))?;
        let mut decision = decide(&current, req, server_tt, &self.params);
        if decision.is_none() {
            self.reload_cache(store)?;
            current = self
                .cache
                .entries
                .get(&req.lease_id)
                .cloned()
                .ok_or(LeaseError::UnknownLease(req.lease_id))?;
            decision = decide(&current, req, server_tt, &self.params);
        }
        let Some(granted) = decision else {
            return Ok(GrantOutcome::Rejected);
        };
        if granted == current {
            return Ok(GrantOutcome::Granted { expiry: granted.expiry });
        }
        self.conditional_commit(store, granted.clone(), &current, at)?;
        self.grants.push(GrantRecord {
            tick: at.0,
            server_tt,
            previous: current,
            granted: granted.clone(),
        });
        Ok(GrantOutcome::Granted { expiry: granted.expiry })
    }
}

/// True iff every ownership change respects the regrant delay.
pub fn regrant_delay_respected(grants: &[GrantRecord], params: &LeaseParams) -> bool {
    first_early_regrant(grants, params).is_none()
}

/// The first ownership change that came before the regrant delay elapsed.
pub fn first_early_regrant<'a>(grants: &'a [GrantRecord], params: &LeaseParams) -> Option<&'a GrantRecord> {
    grants.iter().find(|g| match g.previous.owner {
        Some(prev) if Some(prev) != g.granted.owner => g.server_tt < g.previous.expiry + params.regrant_delay(),
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::QuorumConfig;

    const A: InstanceId = InstanceId(0xa);
    const B: InstanceId = InstanceId(0xb);
    const C: InstanceId = InstanceId(0xc);
    const LID: LeaseId = LeaseId(1);

    fn t(x: u64) -> VirtualTime {
        VirtualTime(x)
    }

    fn setup() -> (ReplicatedStore, LeaseServer) {
        let mut store = ReplicatedStore::new(QuorumConfig::of_size(3), b"k", 0);
        let mut server = LeaseServer::new(InstanceId(1), LeaseParams::default());
        server.create_lease(&mut store, LID, t(0)).unwrap();
        (store, server)
    }

    fn req(who: InstanceId, stamp: u64) -> LeaseRequest {
        LeaseRequest {
            lease_id: LID,
            requester: who,
            stamp,
        }
    }

    #[test]
    fn fresh_lease_is_vacant_and_unique() {
        let (mut store, mut server) = setup();
        assert_eq!(store.replicated_read(LID).unwrap(), Some(Lease::vacant(LID)));
        assert_eq!(
            server.create_lease(&mut store, LID, t(1)),
            Err(LeaseError::AlreadyExists(LID))
        );
    }

    #[test]
    fn create_needs_quorum() {
        let mut store = ReplicatedStore::new(QuorumConfig::of_size(3), b"k", 0);
        store.set_reachable(1, false);
        store.set_reachable(2, false);
        let mut server = LeaseServer::new(InstanceId(1), LeaseParams::default());
        assert_eq!(
            server.create_lease(&mut store, LID, t(0)),
            Err(LeaseError::StoreUnavailable)
        );
    }

    #[test]
    fn owner_renewal_extends_from_request_stamp() {
        let (mut store, mut server) = setup();
        assert_eq!(
            server.grant_or_renew(&mut store, &req(A, 1), 1, t(1)),
            Ok(GrantOutcome::Granted { expiry: 6 })
        );
        assert_eq!(
            server.grant_or_renew(&mut store, &req(A, 4), 5, t(4)),
            Ok(GrantOutcome::Granted { expiry: 9 })
        );
        // A replayed older request never shortens the lease.
        assert_eq!(
            server.grant_or_renew(&mut store, &req(A, 1), 6, t(6)),
            Ok(GrantOutcome::Granted { expiry: 9 })
        );
    }

    #[test]
    fn newcomer_rejected_while_owner_active() {
        let (mut store, mut server) = setup();
        server.grant_or_renew(&mut store, &req(A, 1), 1, t(1)).unwrap();
        assert_eq!(
            server.grant_or_renew(&mut store, &req(B, 2), 2, t(2)),
            Ok(GrantOutcome::Rejected)
        );
    }

    #[test]
    fn regrant_exactly_at_expiry_plus_two_eps_plus_period() {
        // Oracle: LT = 20, eps = 1, P = 5 -> first admissible server time 27.
        let params = LeaseParams::default();
        let lt = 20;
        let regrant_at = lt + 2 * params.epsilon + params.period;
        assert_eq!(regrant_at, 27);
        let current = Lease {
            lease_id: LID,
            owner: Some(A),
            expiry: lt,
        };
        assert_eq!(decide(&current, &req(B, 25), regrant_at - 1, &params), None);
        assert_eq!(
            decide(&current, &req(B, 26), regrant_at, &params).map(|l| l.owner),
            Some(Some(B))
        );
    }

    #[test]
    fn expired_owner_renews_before_regrant() {
        let current = Lease {
            lease_id: LID,
            owner: Some(A),
            expiry: 20,
        };
        let g = decide(&current, &req(A, 22), 23, &LeaseParams::default()).unwrap();
        assert_eq!(g.expiry, 27);
    }

    #[test]
    fn cloned_server_with_stale_cache_conflicts_and_terminates() {
        let (mut store, mut s1) = setup();
        let mut s2 = s1.clone_as(InstanceId(2));
        // Clone 2 hands the vacant lease to C first.
        assert!(matches!(
            s2.grant_or_renew(&mut store, &req(C, 1), 1, t(1)),
            Ok(GrantOutcome::Granted { .. })
        ));
        // Server 1 still caches the vacant record and tries to give it to A.
        assert_eq!(
            s1.grant_or_renew(&mut store, &req(A, 1), 1, t(1)),
            Err(LeaseError::StoreConflict)
        );
        assert!(s1.is_terminated());
        assert_eq!(store.replicated_read(LID).unwrap().unwrap().owner, Some(C));
        assert_eq!(
            s1.grant_or_renew(&mut store, &req(A, 2), 2, t(2)),
            Err(LeaseError::Terminated)
        );
    }

    #[test]
    fn clones_on_disjoint_leases_both_commit_in_either_order() {
        for flip in [false, true] {
            let (mut store, mut s1) = setup();
            s1.create_lease(&mut store, LeaseId(2), t(0)).unwrap();
            let mut s2 = s1.clone_as(InstanceId(2));
            let r1 = req(A, 1);
            let r2 = LeaseRequest {
                lease_id: LeaseId(2),
                requester: B,
                stamp: 1,
            };
            let (x, y) = if flip {
                let y = s2.grant_or_renew(&mut store, &r2, 1, t(1));
                (s1.grant_or_renew(&mut store, &r1, 1, t(1)), y)
            } else {
                let x = s1.grant_or_renew(&mut store, &r1, 1, t(1));
                (x, s2.grant_or_renew(&mut store, &r2, 1, t(1)))
            };
            assert!(matches!(x, Ok(GrantOutcome::Granted { .. })));
            assert!(matches!(y, Ok(GrantOutcome::Granted { .. })));
        }
    }

    #[test]
    fn stale_expiry_in_clone_cache_cannot_override_renewal() {
        // Both clones cache (A, 6). Server 1 renews A to 14. Clone 2, deciding
        // on the stale expiry, would regrant to B; the full-record condition
        // makes that commit conflict.
        let (mut store, mut s1) = setup();
        s1.grant_or_renew(&mut store, &req(A, 1), 1, t(1)).unwrap();
        let mut s2 = s1.clone_as(InstanceId(2));
        s1.grant_or_renew(&mut store, &req(A, 9), 9, t(9)).unwrap();
        assert_eq!(
            s2.grant_or_renew(&mut store, &req(B, 13), 13, t(13)),
            Err(LeaseError::StoreConflict)
        );
        assert_eq!(store.replicated_read(LID).unwrap().unwrap().owner, Some(A));
    }

    #[test]
    fn reload_exposes_peer_commit() {
        let (mut store, mut s1) = setup();
        let mut s2 = s1.clone_as(InstanceId(2));
        s2.grant_or_renew(&mut store, &req(C, 1), 1, t(1)).unwrap();
        let epoch = s1.cache.store_epoch;
        let cache = s1.reload_cache(&mut store).unwrap();
        assert_eq!(cache.entries[&LID].owner, Some(C));
        assert_eq!(cache.store_epoch, epoch + 1);
    }

    #[test]
    fn reload_below_quorum_leaves_cache_unchanged() {
        let (mut store, mut s1) = setup();
        let before = s1.cache.clone();
        store.set_reachable(0, false);
        store.set_reachable(1, false);
        assert_eq!(s1.reload_cache(&mut store).err(), Some(LeaseError::StoreUnavailable));
        assert_eq!(s1.cache, before);
    }

    #[test]
    fn grant_log_respects_regrant_delay() {
        let (mut store, mut s) = setup();
        s.grant_or_renew(&mut store, &req(A, 1), 1, t(1)).unwrap();
        assert_eq!(
            s.grant_or_renew(&mut store, &req(B, 12), 12, t(12)),
            Ok(GrantOutcome::Rejected)
        );
        assert!(matches!(
            s.grant_or_renew(&mut store, &req(B, 13), 13, t(13)),
            Ok(GrantOutcome::Granted { expiry: 18 })
        ));
        assert!(regrant_delay_respected(s.grants(), &s.params));
    }
}
