//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and the counter checks of criterion 8 can cover the runs of the
//! earlier ones.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lld_core::cli::{explore_election, replay_counterexample, Outcome};
use lld_core::counter::InstanceId;
use lld_core::explorer::{
    explore, reachable_states, ElectionAction, ElectionConfig, ElectionModel, LeaseCloneConfig, LeaseCloneModel,
    Limits, Model,
};
use lld_core::lease::{GrantOutcome, Lease, LeaseId, LeaseParams, LeaseRequest, LeaseServer};
use lld_core::sim::{AdversaryAction, Engine, VirtualTime};
use lld_core::store::{Condition, QuorumConfig, ReplicatedStore, StoreError, WriteOutcome};
use lld_core::worlds::election::{ElectionWorld, ElectionWorldConfig};
use lld_core::worlds::store::{replica_actor, store_devices, StoreWorld, StoreWorldConfig};
use lld_core::worlds::{counter_invariants, InvariantResult};

use common::{election_oracle, execute_lease_run, random_lease_run};

const COUNTER_CHECKS: [&str; 3] = [
    "counter_monotonic",
    "counter_linearizable",
    "single_write_per_candidate",
];

/// Counter invariant results gathered from every run of criteria 1 to 7.
#[derive(Default)]
struct CounterAudit {
    checked: u64,
    failures: Vec<String>,
}

impl CounterAudit {
    fn record(&mut self, source: &str, results: &[InvariantResult]) {
        for r in results.iter().filter(|r| COUNTER_CHECKS.contains(&r.name.as_str())) {
            self.checked += 1;
            if !r.holds && self.failures.len() < 5 {
                self.failures.push(format!("{source}: {} ({})", r.name, r.detail));
            }
        }
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Runs a model path on the simulator and returns the world's invariants.
fn simulate_path(config: ElectionConfig, path: &[ElectionAction]) -> Vec<InvariantResult> {
    let script = ElectionModel::script(path, config.epsilon);
    let last = script.last().map_or(0, |e| e.tick);
    let world = ElectionWorld::new(ElectionWorldConfig::scripted(config.params(), script));
    let mut engine = Engine::new(world, 0);
    engine.run_until(VirtualTime(last + 1));
    engine.world().invariants()
}

/// A uniformly random walk through the model, stopping early at a
/// violation.
fn random_walk(model: &ElectionModel, rng: &mut ChaCha8Rng, steps: usize) -> Vec<ElectionAction> {
    let mut state = model.initial().remove(0);
    let mut path = Vec::new();
    let mut succ = Vec::new();
    for _ in 0..steps {
        succ.clear();
        model.successors(&state, &mut succ);
        if succ.is_empty() || model.violation(&state).is_some() {
            break;
        }
        let (a, s) = succ.swap_remove(rng.gen_range(0..succ.len()));
        path.push(a);
        state = s;
    }
    path
}

fn ac1(audit: &mut CounterAudit) -> Verdict {
    let config = ElectionConfig::new(1, 5, 3);
    let started = Instant::now();
    let result = explore_election(
        config,
        Limits {
            depth_bound: 100_000,
            ..Limits::default()
        },
    );
    let elapsed = started.elapsed();
    // Simulate random schedules of the same model so the counter history
    // of real devices is checked too.
    let model = ElectionModel::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for walk in 0..300 {
        let path = random_walk(&model, &mut rng, 200);
        audit.record(&format!("criterion 1 walk {walk}"), &simulate_path(config, &path));
    }
    let r = &result.report;
    verdict(
        result.outcome == Outcome::Pass && elapsed < Duration::from_secs(300),
        format!(
            "{} after {} states, {} transitions, max depth {} in {}",
            r.verdict,
            r.states_explored,
            r.transitions,
            r.max_depth,
            secs(elapsed)
        ),
    )
}

fn ac2(audit: &mut CounterAudit) -> Verdict {
    let config = ElectionConfig::new(1, 5, 3).with_wait(5 + 2);
    let limits = Limits {
        depth_bound: 100_000,
        ..Limits::default()
    };
    let result = explore_election(config, limits);
    let verdict_ok = result.outcome == Outcome::Violation;
    let model = ElectionModel::new(config);
    let path = explore(&model, limits)
        .counterexample()
        .map(<[_]>::to_vec)
        .unwrap_or_default();
    let (replayed, trace) = replay_counterexample(config, &path);
    audit.record("criterion 2 counterexample", &simulate_path(config, &path));
    verdict(
        verdict_ok && replayed && result.report.replay_confirms == Some(true),
        format!(
            "{} with wait P+2eps: {}-step counterexample, simulator replay {} over {} trace events",
            result.report.verdict,
            path.len(),
            if replayed {
                "reproduces it"
            } else {
                "does not reproduce it"
            },
            trace.len()
        ),
    )
}

fn ac3(audit: &mut CounterAudit) -> Verdict {
    const RUNS: u64 = 100_000;
    let started = Instant::now();
    let mut failing = Vec::new();
    let mut clone_runs = 0;
    for seed in 0..RUNS {
        let run = random_lease_run(seed);
        if run
            .script
            .iter()
            .any(|(_, a)| matches!(a, AdversaryAction::CloneInstance { .. }))
        {
            clone_runs += 1;
        }
        let results = execute_lease_run(&run);
        audit.record(&format!("criterion 3 seed {seed}"), &results);
        let broken: Vec<&InvariantResult> = results
            .iter()
            .filter(|r| !r.holds && !COUNTER_CHECKS.contains(&r.name.as_str()))
            .collect();
        if !broken.is_empty() && failing.len() < 5 {
            failing.push(format!(
                "seed {seed}: {} at tick {:?}",
                broken[0].name, broken[0].first_violation_tick
            ));
        }
    }
    verdict(
        failing.is_empty(),
        format!(
            "{RUNS} runs ({clone_runs} with clones) in {}, {}",
            secs(started.elapsed()),
            if failing.is_empty() {
                "no double holders and no externalization after loss".to_string()
            } else {
                failing.join("; ")
            }
        ),
    )
}

fn ac4(audit: &mut CounterAudit) -> Verdict {
    let params = LeaseParams {
        epsilon: 1,
        period: 5,
        lease_length: 5,
    };
    let lid = LeaseId(1);
    let a = InstanceId(0xa);
    let b = InstanceId(0xb);
    let mut outcomes = Vec::new();
    for stamp in [0u64, 3, 10] {
        let lt = stamp + params.lease_length;
        for (offset, want_grant) in [(6u64, false), (7, true)] {
            let mut store = ReplicatedStore::new(QuorumConfig::of_size(3), b"acceptance", stamp);
            let mut server = LeaseServer::new(InstanceId(1), params);
            server
                .create_lease(&mut store, lid, VirtualTime(0))
                .expect("fresh store");
            let first = LeaseRequest {
                lease_id: lid,
                requester: a,
                stamp,
            };
            let granted = server.grant_or_renew(&mut store, &first, stamp, VirtualTime(stamp));
            let second = LeaseRequest {
                lease_id: lid,
                requester: b,
                stamp: lt + offset,
            };
            let answer = server.grant_or_renew(&mut store, &second, lt + offset, VirtualTime(lt + offset));
            let expected = if want_grant {
                GrantOutcome::Granted {
                    expiry: lt + offset + params.lease_length,
                }
            } else {
                GrantOutcome::Rejected
            };
            outcomes.push(granted == Ok(GrantOutcome::Granted { expiry: lt }) && answer == Ok(expected));
            audit.record("criterion 4", &counter_invariants(store_devices(&store)));
        }
    }
    verdict(
        outcomes.iter().all(|&ok| ok),
        format!(
            "{}/{} cases: rejected at LT+6, granted at LT+7",
            outcomes.iter().filter(|&&ok| ok).count(),
            outcomes.len()
        ),
    )
}

fn ac5(audit: &mut CounterAudit) -> Verdict {
    const WANT: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut attacks, mut detected) = (0usize, 0usize);
    let (mut quiet, mut false_positives) = (0usize, 0usize);
    let mut seed = 0;
    while (attacks < WANT || quiet < WANT) && seed < 20 * WANT as u64 {
        seed += 1;
        let replica = rng.gen_range(0..3u64);
        let snap = rng.gen_range(1..20);
        let gap = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..10) };
        let config = StoreWorldConfig {
            write_every: rng.gen_range(1..=4),
            seed,
            ..StoreWorldConfig::default()
        };
        let mut engine = Engine::new(StoreWorld::new(config), seed).without_digests();
        engine
            .inject(VirtualTime(snap), AdversaryAction::SnapshotStorage { replica })
            .expect("permitted");
        engine
            .inject(
                VirtualTime(snap + gap),
                AdversaryAction::RestoreStorage { replica, snapshot: 0 },
            )
            .expect("permitted");
        engine
            .inject(
                VirtualTime(snap + gap),
                AdversaryAction::Terminate {
                    actor: replica_actor(replica),
                },
            )
            .expect("permitted");
        engine.run_until(VirtualTime(snap + gap + 40));
        let world = engine.world();
        audit.record(&format!("criterion 5 seed {seed}"), &world.invariants());
        let Some(restore) = world.restores.first() else {
            continue;
        };
        let tag = format!("replica {replica}");
        let flagged = engine
            .kernel()
            .observations()
            .iter()
            .any(|o| o.name == "rollback_detected" && o.detail.starts_with(&tag));
        if restore.writes_since_snapshot > 0 {
            attacks += 1;
            detected += flagged as usize;
        } else {
            quiet += 1;
            false_positives += flagged as usize;
        }
    }
    verdict(
        attacks >= WANT && quiet >= WANT && detected == attacks && false_positives == 0,
        format!(
            "detected {detected}/{attacks} restores with intervening writes, {false_positives}/{quiet} false positives"
        ),
    )
}

fn ac6(audit: &mut CounterAudit) -> Verdict {
    let mut problems = Vec::new();
    for cut in 0..3u64 {
        let mut store = ReplicatedStore::new(QuorumConfig::of_size(3), b"acceptance", cut);
        let mut oracle = std::collections::BTreeMap::new();
        let mut t = 0;
        let mut write =
            |store: &mut ReplicatedStore, oracle: &mut std::collections::BTreeMap<LeaseId, Lease>, k: u64| {
                t += 1;
                let value = Lease {
                    lease_id: LeaseId(k % 3),
                    owner: Some(InstanceId(t)),
                    expiry: t,
                };
                let r = store.replicated_write(value.lease_id, value.clone(), Condition::Unconditional, VirtualTime(t));
                if matches!(r, Ok(WriteOutcome::Committed { .. })) {
                    oracle.insert(value.lease_id, value);
                }
                r
            };
        // Replica `stale` misses some writes while the other two commit.
        let stale = (cut + 1) % 3;
        store.set_reachable(stale, false);
        for k in 0..5 {
            if write(&mut store, &mut oracle, k).is_err() {
                problems.push("two replicas failed to commit".to_string());
            }
        }
        // Only `cut + 2` remains: one of three.
        store.set_reachable(cut, false);
        let before = (store.commit_index(), store.committed().clone());
        let states: Vec<_> = (0..3).map(|id| store.replica_state(id).cloned()).collect();
        let w = write(&mut store, &mut oracle, 9);
        let r = store.replicated_read(LeaseId(0));
        let all = store.read_all();
        if !matches!(w, Err(StoreError::Unavailable { .. }))
            || !matches!(r, Err(StoreError::Unavailable { .. }))
            || !matches!(all, Err(StoreError::Unavailable { .. }))
        {
            problems.push(format!("cut {cut}: an operation succeeded with one replica"));
        }
        let after: Vec<_> = (0..3).map(|id| store.replica_state(id).cloned()).collect();
        if (store.commit_index(), store.committed().clone()) != before || states != after {
            problems.push(format!("cut {cut}: state changed while unavailable"));
        }
        // Bring back the replica that missed writes.
        store.set_reachable(stale, true);
        for key in 0..3 {
            match store.replicated_read(LeaseId(key)) {
                Ok(v) if v.as_ref() == oracle.get(&LeaseId(key)) => {}
                other => problems.push(format!("cut {cut}: stale read of key {key}: {other:?}")),
            }
        }
        if write(&mut store, &mut oracle, 10).is_err() {
            problems.push(format!("cut {cut}: service did not resume"));
        }
        for id in [stale, (cut + 2) % 3] {
            if store.replica_state(id).map(|s| &s.table) != Some(&oracle) {
                problems.push(format!("cut {cut}: replica {id} diverges from the committed prefix"));
            }
        }
        audit.record("criterion 6", &counter_invariants(store_devices(&store)));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "one of three: reads and writes unavailable, no state change; two of three: no stale reads".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn ac7(audit: &mut CounterAudit) -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    for per_server in 1..=3 {
        let model = LeaseCloneModel::new(LeaseCloneConfig::conflicting(2, per_server));
        let v = explore(&model, Limits::default());
        pass &= v.is_safe();
        let states = reachable_states(&model, 64);
        let mut succ = Vec::new();
        let mut terminal = 0;
        for s in states.keys() {
            succ.clear();
            model.successors(s, &mut succ);
            if succ.is_empty() {
                terminal += 1;
                pass &= s.survivors() == 1;
            }
            audit.record("criterion 7", &counter_invariants(store_devices(&s.store)));
        }
        details.push(format!(
            "{per_server} req/server: {} ({terminal} terminal states)",
            v.label()
        ));
    }
    verdict(pass, format!("exactly one survivor; {}", details.join(", ")))
}

fn ac8(audit: &CounterAudit) -> Verdict {
    verdict(
        audit.checked > 0 && audit.failures.is_empty(),
        if audit.failures.is_empty() {
            format!("{} checks over criteria 1-7 all hold", audit.checked)
        } else {
            audit.failures.join("; ")
        },
    )
}

fn ac9() -> Verdict {
    let config = ElectionConfig::new(1, 5, 2);
    let started = Instant::now();
    let explorer: HashSet<_> = reachable_states(&ElectionModel::new(config), 20).into_keys().collect();
    let oracle = election_oracle::enumerate(&config, 20);
    let missing = oracle.difference(&explorer).count();
    let extra = explorer.difference(&oracle).count();
    verdict(
        missing == 0 && extra == 0,
        format!(
            "explorer {} states, brute force {} states, {missing} only in brute force, {extra} only in explorer ({})",
            explorer.len(),
            oracle.len(),
            secs(started.elapsed())
        ),
    )
}

fn main() -> ExitCode {
    let mut audit = CounterAudit::default();
    let mut all = true;
    let mut report = |n: u32, v: Verdict| {
        all &= v.pass;
        println!("AC{n} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, ac1(&mut audit));
    report(2, ac2(&mut audit));
    report(3, ac3(&mut audit));
    report(4, ac4(&mut audit));
    report(5, ac5(&mut audit));
    report(6, ac6(&mut audit));
    report(7, ac7(&mut audit));
    report(8, ac8(&audit));
    report(9, ac9());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
