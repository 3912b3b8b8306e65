//! Application instances, lease servers and the replicated store on the
//! simulation engine.
//!
//! Every application instance runs behind the runtime shim: it ticks once
//! per engine tick, externalizes on a fixed cadence, and asks a lease server
//! for renewals over the network. Servers decide against their cache and
//! commit through the store. The adversary may clone instances and servers,
//! delay, drop or redirect messages, and attack store replicas.
//!
//! After every event the world checks that at most one instance per lease
//! can hold a locally valid lease, and that every externalization happens
//! while the committed lease record names the externalizing instance.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::clock::{Epsilon, TrustedClock};
use crate::counter::InstanceId;
use crate::election::ElectionParams;
use crate::lease::{
    first_early_regrant, regrant_delay_respected, GrantOutcome, LeaseError, LeaseId, LeaseParams, LeaseRequest,
    LeaseServer,
};
use crate::runtime::{AppInstance, AppStatus, InterceptEvent, InterceptResult, LeaseResponse, Outbound, ShimConfig};
use crate::sim::{
    ActorId, ActorKind, AdversaryAction, Digest, Kernel, MessageKind, Payload, SimError, VirtualTime, World,
};
use crate::store::{QuorumConfig, ReplicatedStore, StoreError};
use crate::worlds::store::{observe_restart, replica_actor, store_devices, Restart, RestartProgress};
use crate::worlds::{counter_invariants, InvariantResult};

const BOOT: u64 = 0;
const TICK: u64 = 1;
const RESTART: u64 = 2;

pub const SINGLE_HOLDER: &str = "single_holder";
pub const EXTERNALIZE_WITH_LEASE: &str = "externalize_with_lease";
pub const NO_EXTERNALIZATION_AFTER_LOSS: &str = "no_externalization_after_loss";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub tick: u64,
    pub invariant: &'static str,
    pub detail: String,
}

/// Adversary clone target naming the lease service rather than an app.
pub const SERVER_APP: &str = "lease_server";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeaseMsg {
    Request { request_no: u64, request: LeaseRequest },
    Response { request_no: u64, response: LeaseResponse },
}

impl MessageKind for LeaseMsg {
    fn kind(&self) -> &'static str {
        match self {
            LeaseMsg::Request { .. } => "lease_request",
            LeaseMsg::Response { .. } => "lease_response",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppSpec {
    pub name: String,
    pub lease_id: LeaseId,
    pub start_tick: u64,
    /// Externalize on every tick divisible by this.
    pub externalize_every: u64,
    /// Scripted events by offset from the boot tick; replaces the cadence.
    pub workload: Option<Vec<(u64, InterceptEvent)>>,
}

impl AppSpec {
    pub fn new(name: impl Into<String>, lease_id: u64) -> Self {
        AppSpec {
            name: name.into(),
            lease_id: LeaseId(lease_id),
            start_tick: 0,
            externalize_every: 1,
            workload: None,
        }
    }

    pub fn starting_at(mut self, tick: u64) -> Self {
        self.start_tick = tick;
        self
    }

    pub fn with_workload(mut self, events: Vec<(u64, InterceptEvent)>) -> Self {
        self.workload = Some(events);
        self
    }

    fn events_at(&self, offset: u64, now: u64) -> Vec<InterceptEvent> {
        match &self.workload {
            Some(w) => w.iter().filter(|(o, _)| *o == offset).map(|(_, e)| *e).collect(),
            None if now.is_multiple_of(self.externalize_every.max(1)) => vec![InterceptEvent::ExternalizingSyscall],
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaseWorldConfig {
    pub params: LeaseParams,
    pub shim: ShimConfig,
    pub replicas: usize,
    pub servers: usize,
    pub apps: Vec<AppSpec>,
    /// One-way network latency between instances and servers.
    pub latency: u64,
    pub restart_delay: u64,
    pub key_material: Vec<u8>,
    pub seed: u64,
}

impl LeaseWorldConfig {
    pub fn new(apps: Vec<AppSpec>) -> Self {
        LeaseWorldConfig {
            params: LeaseParams::default(),
            shim: ShimConfig::default(),
            replicas: 3,
            servers: 1,
            apps,
            latency: 1,
            restart_delay: 1,
            key_material: b"lld-lease".to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    pub spec: usize,
    pub actor: ActorId,
    pub shim: Option<AppInstance>,
    pub externalizations: u64,
    last_externalized: Option<u64>,
    booted_at: u64,
    /// Server that answered last; rotated when a request goes unanswered.
    server: usize,
    awaiting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceSummary {
    pub app: String,
    pub instance: String,
    pub status: Option<AppStatus>,
    pub externalizations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeaseSummary {
    pub instances: Vec<InstanceSummary>,
    pub servers: usize,
    pub terminated_servers: usize,
    pub grants: usize,
    pub regrant_delay_respected: bool,
    pub violations: Vec<String>,
    pub max_concurrent_holders: usize,
    pub rollbacks_detected: u64,
}

#[derive(Debug)]
pub struct LeaseWorld {
    pub config: LeaseWorldConfig,
    pub store: ReplicatedStore,
    clock: TrustedClock,
    pub instances: Vec<Instance>,
    pub servers: Vec<LeaseServer>,
    restarts: BTreeMap<u64, Restart>,
    snapshots: Vec<u64>,
    violations: Vec<Violation>,
    max_holders: usize,
    rollbacks: u64,
}

fn server_actor(idx: usize) -> ActorId {
    ActorId::new(ActorKind::LeaseServer, idx as u64)
}

impl LeaseWorld {
    pub fn new(config: LeaseWorldConfig) -> Self {
        let mut store = ReplicatedStore::new(
            QuorumConfig::of_size(config.replicas),
            &config.key_material,
            config.seed,
        );
        let mut servers: Vec<LeaseServer> = (0..config.servers)
            .map(|i| LeaseServer::new(InstanceId(0x5e00 + i as u64), config.params))
            .collect();
        let mut leases: Vec<LeaseId> = config.apps.iter().map(|a| a.lease_id).collect();
        leases.sort();
        leases.dedup();
        if let Some(first) = servers.first_mut() {
            for lid in leases {
                first
                    .create_lease(&mut store, lid, VirtualTime::ZERO)
                    .expect("fresh store accepts lease creation");
            }
        }
        for s in &mut servers {
            s.reload_cache(&mut store).expect("fresh store is available");
        }
        let instances = config
            .apps
            .iter()
            .enumerate()
            .map(|(i, _)| Instance {
                spec: i,
                actor: ActorId::new(ActorKind::AppInstance, i as u64),
                shim: None,
                externalizations: 0,
                last_externalized: None,
                booted_at: 0,
                server: i % config.servers,
                awaiting: false,
            })
            .collect();
        LeaseWorld {
            clock: TrustedClock::new(Epsilon(config.params.epsilon)),
            config,
            store,
            instances,
            servers,
            restarts: BTreeMap::new(),
            snapshots: Vec::new(),
            violations: Vec::new(),
            max_holders: 0,
            rollbacks: 0,
        }
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    fn violate(&mut self, kernel: &mut Kernel<LeaseMsg>, invariant: &'static str, detail: String) {
        let tick = kernel.now().0;
        if self
            .violations
            .iter()
            .any(|v| v.tick == tick && v.invariant == invariant)
        {
            return;
        }
        kernel.observe(invariant, detail.clone());
        self.violations.push(Violation {
            tick,
            invariant,
            detail,
        });
    }

    pub fn invariants(&self) -> Vec<InvariantResult> {
        let first = |name: &str| {
            self.violations
                .iter()
                .find(|v| v.invariant == name)
                .map(|v| (v.tick, v.detail.clone()))
        };
        let grants: Vec<_> = self.servers.iter().flat_map(|s| s.grants().iter().cloned()).collect();
        let early = first_early_regrant(&grants, &self.config.params).map(|g| {
            (
                g.tick,
                format!(
                    "regranted at server time {} after expiry {}",
                    g.server_tt, g.previous.expiry
                ),
            )
        });
        let mut out = vec![
            InvariantResult::from_first(SINGLE_HOLDER, first(SINGLE_HOLDER)),
            InvariantResult::from_first(EXTERNALIZE_WITH_LEASE, first(EXTERNALIZE_WITH_LEASE)),
            InvariantResult::from_first(NO_EXTERNALIZATION_AFTER_LOSS, first(NO_EXTERNALIZATION_AFTER_LOSS)),
            InvariantResult::from_first("regrant_delay", early),
        ];
        if !self.store.version_bookkeeping_holds() {
            out.push(InvariantResult::failed(
                "version_bookkeeping",
                0,
                "version counter differs from applied writes",
            ));
        } else {
            out.push(InvariantResult::ok("version_bookkeeping"));
        }
        out.extend(counter_invariants(store_devices(&self.store)));
        out
    }

    fn read(&mut self, kernel: &mut Kernel<LeaseMsg>, actor: ActorId) -> u64 {
        let now = kernel.now();
        self.clock.register(actor);
        self.clock
            .read_random(actor, now, kernel.rng())
            .expect("registered reader")
            .value
    }

    fn send(&mut self, kernel: &mut Kernel<LeaseMsg>, idx: usize, out: Option<Outbound>) {
        let Some(out) = out else { return };
        let n = self.servers.len();
        let inst = &mut self.instances[idx];
        if inst.awaiting {
            inst.server = (inst.server + 1) % n;
        }
        inst.awaiting = true;
        let target = server_actor(inst.server % n);
        let msg = LeaseMsg::Request {
            request_no: out.request_no,
            request: out.request,
        };
        kernel.send(self.instances[idx].actor, target, msg, self.config.latency);
    }

    fn spawn_instance(&mut self, kernel: &mut Kernel<LeaseMsg>, spec: usize) -> usize {
        let idx = self.instances.len();
        self.instances.push(Instance {
            spec,
            actor: ActorId::new(ActorKind::AppInstance, idx as u64),
            shim: None,
            externalizations: 0,
            last_externalized: None,
            booted_at: 0,
            server: idx % self.servers.len(),
            awaiting: false,
        });
        self.boot(kernel, idx);
        idx
    }

    fn boot(&mut self, kernel: &mut Kernel<LeaseMsg>, idx: usize) -> String {
        let actor = self.instances[idx].actor;
        let spec = &self.config.apps[self.instances[idx].spec];
        let (app_id, lease_id) = (self.instances[idx].spec as u64, spec.lease_id);
        let instance_id = InstanceId(kernel.rng().gen());
        let tt = self.read(kernel, actor);
        let (shim, out) = AppInstance::bootstrap(app_id, lease_id, instance_id, tt, self.config.shim);
        self.instances[idx].shim = Some(shim);
        self.instances[idx].booted_at = kernel.now().0;
        self.send(kernel, idx, Some(out));
        kernel.set_timer(actor, 1, TICK);
        format!("boot {instance_id}")
    }

    fn tick(&mut self, kernel: &mut Kernel<LeaseMsg>, idx: usize) -> String {
        let now = kernel.now();
        let actor = self.instances[idx].actor;
        let offset = now.0 - self.instances[idx].booted_at;
        let events = self.config.apps[self.instances[idx].spec].events_at(offset, now.0);
        let tt = self.read(kernel, actor);
        let shim = self.instances[idx].shim.as_mut().expect("booted");
        let before = shim.status;
        let (res, out) = shim.intercept(InterceptEvent::Timer, tt);
        self.send(kernel, idx, out);
        if res == InterceptResult::Terminated {
            return "terminated".into();
        }
        let mut desc = format!("tick tt={tt} {res:?}");
        for event in events {
            let tt = self.read(kernel, actor);
            let shim = self.instances[idx].shim.as_mut().expect("booted");
            let (res, out) = shim.intercept(event, tt);
            self.send(kernel, idx, out);
            if res == InterceptResult::Proceed && event == InterceptEvent::ExternalizingSyscall {
                self.externalized(kernel, idx);
                desc.push_str(" externalized");
            }
        }
        let after = self.instances[idx].shim.as_ref().map(|s| s.status);
        if before == AppStatus::Running && after == Some(AppStatus::Blocked) {
            kernel.observe("instance_blocked", format!("{actor}"));
        }
        kernel.set_timer(actor, 1, TICK);
        desc
    }

    fn externalized(&mut self, kernel: &mut Kernel<LeaseMsg>, idx: usize) {
        let now = kernel.now().0;
        let inst = &mut self.instances[idx];
        inst.externalizations += 1;
        inst.last_externalized = Some(now);
        let shim = inst.shim.as_ref().expect("booted");
        let owner = self.store.committed().get(&shim.lease_id).and_then(|l| l.owner);
        if owner != Some(shim.instance_id) {
            let detail = format!("{} externalized while the lease record names {owner:?}", inst.actor);
            self.violate(kernel, EXTERNALIZE_WITH_LEASE, detail);
        }
    }

    fn on_response(
        &mut self,
        kernel: &mut Kernel<LeaseMsg>,
        idx: usize,
        request_no: u64,
        resp: LeaseResponse,
    ) -> String {
        let now = kernel.now().0;
        let actor = self.instances[idx].actor;
        let tt = self.read(kernel, actor);
        let inst = &mut self.instances[idx];
        let shim = inst.shim.as_mut().expect("booted");
        let was = shim.status;
        shim.on_response(request_no, resp, tt);
        if was != AppStatus::Terminated && shim.status == AppStatus::Terminated {
            kernel.observe("instance_terminated", format!("{actor}"));
            if inst.last_externalized == Some(now) {
                let detail = format!("{actor} externalized in the term it learned of the loss");
                self.violate(kernel, NO_EXTERNALIZATION_AFTER_LOSS, detail);
            }
        }
        format!("response #{request_no} {resp:?}")
    }

    fn serve(
        &mut self,
        kernel: &mut Kernel<LeaseMsg>,
        idx: usize,
        from: ActorId,
        request_no: u64,
        req: LeaseRequest,
    ) -> String {
        let now = kernel.now();
        for id in 0..self.config.replicas as u64 {
            self.store.set_reachable(id, !kernel.is_isolated(replica_actor(id)));
        }
        let tt = self.read(kernel, server_actor(idx));
        let result = self.servers[idx].grant_or_renew(&mut self.store, &req, tt, now);
        let response = match result {
            Ok(GrantOutcome::Granted { expiry }) => LeaseResponse::Granted { expiry },
            Ok(GrantOutcome::Rejected) => LeaseResponse::Rejected,
            Err(LeaseError::StoreConflict) => {
                kernel.observe("server_terminated", format!("{}", server_actor(idx)));
                kernel.terminate(server_actor(idx));
                return format!("request #{request_no} from {from}: conflict, terminating");
            }
            Err(LeaseError::Terminated) => return "terminated".into(),
            Err(_) => LeaseResponse::Error,
        };
        let msg = LeaseMsg::Response { request_no, response };
        kernel.send(server_actor(idx), from, msg, self.config.latency);
        format!("request #{request_no} from {from} tt={tt}: {response:?}")
    }

    fn restart_step(&mut self, kernel: &mut Kernel<LeaseMsg>, node: u64) -> String {
        let now = kernel.now();
        let Some(mut restart) = self.restarts.remove(&node) else {
            return "no restart pending".into();
        };
        let params = ElectionParams::new(self.config.params.epsilon, self.config.params.period);
        let progress = restart.step(&mut self.store, &mut self.clock, &params, now, kernel.rng());
        if observe_restart(kernel, node, &progress) {
            if matches!(progress, RestartProgress::Refused(StoreError::RollbackDetected { .. })) {
                self.rollbacks += 1;
            }
            format!("restart {progress:?}")
        } else {
            self.restarts.insert(node, restart);
            kernel.set_timer(replica_actor(node), 1, RESTART);
            "restart electing".into()
        }
    }

    /// Instances that may hold a valid lease on `lease_id` at real tick
    /// `now`, given that their clock may lag by up to epsilon.
    pub fn possible_holders(&self, kernel: &Kernel<LeaseMsg>, lease_id: LeaseId) -> Vec<ActorId> {
        let now = kernel.now().0;
        let eps = self.config.params.epsilon;
        self.instances
            .iter()
            .filter(|i| !kernel.is_terminated(i.actor))
            .filter_map(|i| i.shim.as_ref().map(|s| (i.actor, s)))
            .filter(|(_, s)| s.lease_id == lease_id && !s.is_terminated())
            .filter(|(_, s)| s.lease_expiry.is_some_and(|lt| lt + eps > now))
            .map(|(a, _)| a)
            .collect()
    }

    pub fn summary(&self) -> LeaseSummary {
        let grants: Vec<_> = self.servers.iter().flat_map(|s| s.grants().iter().cloned()).collect();
        LeaseSummary {
            instances: self
                .instances
                .iter()
                .map(|i| InstanceSummary {
                    app: self.config.apps[i.spec].name.clone(),
                    instance: i.actor.to_string(),
                    status: i.shim.as_ref().map(|s| s.status),
                    externalizations: i.externalizations,
                })
                .collect(),
            servers: self.servers.len(),
            terminated_servers: self.servers.iter().filter(|s| s.is_terminated()).count(),
            grants: grants.len(),
            regrant_delay_respected: regrant_delay_respected(&grants, &self.config.params),
            violations: self
                .violations
                .iter()
                .map(|v| format!("tick {} {}: {}", v.tick, v.invariant, v.detail))
                .collect(),
            max_concurrent_holders: self.max_holders,
            rollbacks_detected: self.rollbacks,
        }
    }
}

impl World for LeaseWorld {
    type Msg = LeaseMsg;

    fn init(&mut self, kernel: &mut Kernel<LeaseMsg>) {
        for i in 0..self.instances.len() {
            let at = VirtualTime(self.config.apps[self.instances[i].spec].start_tick);
            kernel
                .schedule(at, self.instances[i].actor, Payload::Timer(BOOT))
                .expect("start ticks are not in the past");
        }
    }

    fn handle(&mut self, kernel: &mut Kernel<LeaseMsg>, target: ActorId, payload: Payload<LeaseMsg>) -> String {
        let idx = target.uid as usize;
        match (target.kind, payload) {
            (ActorKind::AppInstance, Payload::Timer(BOOT)) => self.boot(kernel, idx),
            (ActorKind::AppInstance, Payload::Timer(_)) => self.tick(kernel, idx),
            (
                ActorKind::AppInstance,
                Payload::Deliver {
                    from,
                    msg: LeaseMsg::Response { request_no, response },
                    ..
                },
            ) => {
                self.instances[idx].server = from.uid as usize;
                self.instances[idx].awaiting = false;
                self.on_response(kernel, idx, request_no, response)
            }
            (
                ActorKind::LeaseServer,
                Payload::Deliver {
                    from,
                    msg: LeaseMsg::Request { request_no, request },
                    ..
                },
            ) => self.serve(kernel, idx, from, request_no, request),
            (ActorKind::StoreReplica, Payload::Timer(_)) => self.restart_step(kernel, target.uid),
            _ => "misrouted".into(),
        }
    }

    fn on_adversary(&mut self, kernel: &mut Kernel<LeaseMsg>, action: &AdversaryAction) -> Result<String, SimError> {
        let map = |e: StoreError| SimError::Rejected(e.to_string());
        match action {
            AdversaryAction::CloneInstance { app } if app == SERVER_APP => {
                let src = self
                    .servers
                    .iter()
                    .position(|s| !s.is_terminated())
                    .ok_or_else(|| SimError::Rejected("no live server to clone".into()))?;
                let idx = self.servers.len();
                let clone = self.servers[src].clone_as(InstanceId(0x5e00 + idx as u64));
                self.servers.push(clone);
                Ok(format!("{} cloned as {}", server_actor(src), server_actor(idx)))
            }
            AdversaryAction::CloneInstance { app } => {
                let spec = self
                    .config
                    .apps
                    .iter()
                    .position(|a| &a.name == app)
                    .ok_or_else(|| SimError::Rejected(format!("unknown app `{app}`")))?;
                let idx = self.spawn_instance(kernel, spec);
                Ok(format!("started {}", self.instances[idx].actor))
            }
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
                self.store.restore_disk(*replica, id).map_err(map)?;
                Ok(String::new())
            }
            other => Err(SimError::Rejected(format!("{} has no effect here", other.label()))),
        }
    }

    fn on_terminate(&mut self, kernel: &mut Kernel<LeaseMsg>, actor: ActorId) {
        if actor.kind == ActorKind::StoreReplica {
            let node = actor.uid;
            self.store.crash(node);
            kernel.revive(actor);
            let instance = InstanceId(kernel.rng().gen());
            self.restarts.insert(node, Restart::new(node, instance));
            kernel.set_timer(actor, self.config.restart_delay, RESTART);
        }
    }

    fn check(&mut self, kernel: &mut Kernel<LeaseMsg>) {
        let mut leases: Vec<LeaseId> = self.config.apps.iter().map(|a| a.lease_id).collect();
        leases.dedup();
        for lid in leases {
            let holders = self.possible_holders(kernel, lid);
            self.max_holders = self.max_holders.max(holders.len());
            if holders.len() > 1 {
                let names: Vec<String> = holders.iter().map(ToString::to_string).collect();
                self.violate(
                    kernel,
                    SINGLE_HOLDER,
                    format!("{lid} possibly held by {}", names.join(", ")),
                );
            }
        }
    }

    fn digest(&self) -> Digest {
        Digest::of(&(
            &self.instances,
            &self.servers,
            self.store.committed(),
            self.store.commit_index(),
        ))
    }
}
