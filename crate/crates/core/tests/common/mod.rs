//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod election_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lld_core::sim::{ActorId, ActorKind, AdversaryAction, Engine, MessageSelector, RandomFaults, VirtualTime};
use lld_core::worlds::lease::{AppSpec, LeaseWorld, LeaseWorldConfig, SERVER_APP};
use lld_core::worlds::InvariantResult;

/// A randomly generated lease run: world shape, faults and adversary script.
#[derive(Debug, Clone)]
pub struct LeaseRun {
    pub seed: u64,
    pub config: LeaseWorldConfig,
    pub faults: RandomFaults,
    pub script: Vec<(u64, AdversaryAction)>,
    pub limit: u64,
}

const NAMES: [&str; 3] = ["kv", "log", "queue"];

fn app(i: u64) -> ActorId {
    ActorId::new(ActorKind::AppInstance, i)
}

fn server(i: u64) -> ActorId {
    ActorId::new(ActorKind::LeaseServer, i)
}

/// Draws a run with up to three services, one or two lease servers,
/// random message delays of up to 15 ticks, and an adversary that clones
/// applications and servers, delays responses, isolates and pauses actors.
pub fn random_lease_run(seed: u64) -> LeaseRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_apps = rng.gen_range(1..=3);
    let apps: Vec<AppSpec> = (0..n_apps)
        .map(|i| {
            // Services occasionally share a lease and so compete for it.
            let lid = if rng.gen_bool(0.3) { 0 } else { i as u64 };
            let mut spec = AppSpec::new(NAMES[i], lid).starting_at(rng.gen_range(0..8));
            spec.externalize_every = rng.gen_range(1..=3);
            spec
        })
        .collect();
    let mut config = LeaseWorldConfig::new(apps);
    config.servers = rng.gen_range(1..=2);
    config.seed = seed;
    let faults = RandomFaults {
        delay_probability: rng.gen_range(0.0..0.4),
        max_delay: rng.gen_range(1..=15),
        drop_probability: rng.gen_range(0.0..0.1),
    };
    let limit = rng.gen_range(40..=90);
    let mut script = Vec::new();
    let mut instances = n_apps as u64;
    let mut servers = config.servers as u64;
    for _ in 0..rng.gen_range(1..=4) {
        let tick = rng.gen_range(1..limit);
        let action = match rng.gen_range(0..6) {
            0 | 1 => {
                instances += 1;
                AdversaryAction::CloneInstance {
                    app: NAMES[rng.gen_range(0..n_apps)].into(),
                }
            }
            2 => {
                servers += 1;
                AdversaryAction::CloneInstance { app: SERVER_APP.into() }
            }
            3 => AdversaryAction::Delay {
                selector: MessageSelector {
                    to: Some(app(rng.gen_range(0..instances))),
                    kind: Some("lease_response".into()),
                    ..Default::default()
                },
                ticks: rng.gen_range(1..=15),
            },
            4 => AdversaryAction::Isolate {
                actor: if rng.gen_bool(0.5) {
                    app(rng.gen_range(0..instances))
                } else {
                    server(rng.gen_range(0..servers))
                },
                until: tick + rng.gen_range(1..=15),
            },
            _ => AdversaryAction::Pause {
                actor: app(rng.gen_range(0..instances)),
                ticks: rng.gen_range(1..=15),
            },
        };
        script.push((tick, action));
    }
    script.sort_by_key(|(t, _)| *t);
    LeaseRun {
        seed,
        config,
        faults,
        script,
        limit,
    }
}

/// Runs `run` and returns the world's invariant results. Script actions
/// aimed at actors that do not exist yet are rejected by the world and
/// skipped.
pub fn execute_lease_run(run: &LeaseRun) -> Vec<InvariantResult> {
    let mut engine = Engine::new(LeaseWorld::new(run.config.clone()), run.seed)
        .without_digests()
        .with_faults(run.faults);
    for (tick, action) in &run.script {
        engine
            .inject(VirtualTime(*tick), action.clone())
            .expect("generated actions are permitted");
    }
    engine.run_until(VirtualTime(run.limit));
    engine.world().invariants()
}
