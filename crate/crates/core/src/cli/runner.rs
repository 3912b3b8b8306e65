//! Executes scenarios and corpora.

use std::path::Path;

use crate::cli::report::{CorpusEntry, CorpusReport, CostReport, ExplorationReport, Outcome, RunReport, TraceInfo};
use crate::cli::scenario::{
    Expectation, ExpectedOutcome, ExploreSpec, ExploreTarget, Mode, Mutation, Scenario, ScenarioError, System,
};
use crate::counter::CounterId;
use crate::election::ElectionParams;
use crate::explorer::{explore, ElectionConfig, ElectionModel, LeaseCloneConfig, LeaseCloneModel, Limits};
use crate::lease::LeaseParams;
use crate::sim::{Engine, Observation, ScheduleTrace, VirtualTime, World};
use crate::worlds::election::{ElectionWorld, ElectionWorldConfig};
use crate::worlds::lease::{AppSpec, InstanceSummary, LeaseWorld, LeaseWorldConfig};
use crate::worlds::store::{store_devices, StoreWorld, StoreWorldConfig};
use crate::worlds::InvariantResult;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub limit: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: ScheduleTrace,
}

/// Everything a finished simulation contributes to the report.
struct SimResult {
    invariants: Vec<InvariantResult>,
    instances: Vec<InstanceSummary>,
    counter_writes: u64,
}

fn expected(e: ExpectedOutcome) -> Outcome {
    match e {
        ExpectedOutcome::Pass => Outcome::Pass,
        ExpectedOutcome::Violation => Outcome::Violation,
    }
}

fn simulate<W: World>(
    world: W,
    scenario: &Scenario,
    seed: u64,
    limit: u64,
    observations: &mut Vec<Observation>,
    finish: impl FnOnce(&W) -> SimResult,
) -> (SimResult, ScheduleTrace) {
    let mut engine = Engine::new(world, seed);
    if let Some(f) = scenario.faults {
        engine = engine.with_faults(f);
    }
    for a in &scenario.adversary {
        if let Err(e) = engine.inject(VirtualTime(a.tick), a.action.clone()) {
            observations.push(Observation {
                tick: a.tick,
                name: "adversary_rejected".into(),
                detail: e.to_string(),
            });
        }
    }
    engine.run_until(VirtualTime(limit));
    let (world, kernel, trace) = engine.into_parts();
    observations.extend(kernel.observations().iter().cloned());
    (finish(&world), trace)
}

fn lease_world_config(
    scenario: &Scenario,
    servers: usize,
    apps: &[crate::cli::scenario::AppDecl],
    seed: u64,
) -> LeaseWorldConfig {
    let p = scenario.parameters;
    let specs = apps
        .iter()
        .map(|a| {
            let mut spec = AppSpec::new(a.name.clone(), a.lease_id).starting_at(a.start_tick);
            spec.externalize_every = a.externalize_every;
            if let Some(w) = &a.workload {
                spec = spec.with_workload(w.iter().map(|e| (e.offset, e.event)).collect());
            }
            spec
        })
        .collect();
    let mut cfg = LeaseWorldConfig::new(specs);
    cfg.params = LeaseParams {
        epsilon: p.epsilon,
        period: p.period,
        lease_length: p.lease_length,
    };
    cfg.replicas = p.cluster_size;
    cfg.servers = servers;
    cfg.seed = seed;
    cfg
}

fn run_simulation(
    scenario: &Scenario,
    seed: u64,
    limit: u64,
    observations: &mut Vec<Observation>,
) -> (SimResult, ScheduleTrace) {
    let p = scenario.parameters;
    match &scenario.system {
        System::Lease { servers, apps } => {
            let world = LeaseWorld::new(lease_world_config(scenario, *servers, apps, seed));
            simulate(world, scenario, seed, limit, observations, |w| SimResult {
                invariants: w.invariants(),
                instances: w.summary().instances,
                counter_writes: store_devices(&w.store).map(|d| d.writes()).sum(),
            })
        }
        System::Election {
            cid,
            candidates,
            read_latency,
            write_latency,
        } => {
            let mut cfg = ElectionWorldConfig::randomized(ElectionParams::new(p.epsilon, p.period), candidates.clone());
            cfg.cid = CounterId(*cid);
            cfg.read_latency = *read_latency;
            cfg.write_latency = *write_latency;
            simulate(ElectionWorld::new(cfg), scenario, seed, limit, observations, |w| {
                SimResult {
                    invariants: w.invariants(),
                    instances: Vec::new(),
                    counter_writes: w.device.writes(),
                }
            })
        }
        System::Store {
            keys,
            write_every,
            restart_delay,
        } => {
            let cfg = StoreWorldConfig {
                replicas: p.cluster_size,
                keys: *keys,
                write_every: *write_every,
                restart_delay: *restart_delay,
                epsilon: p.epsilon,
                period: p.period,
                seed,
                ..Default::default()
            };
            simulate(StoreWorld::new(cfg), scenario, seed, limit, observations, |w| {
                SimResult {
                    invariants: w.invariants(),
                    instances: Vec::new(),
                    counter_writes: store_devices(&w.store).map(|d| d.writes()).sum(),
                }
            })
        }
    }
}

/// Exploration summary plus the simulator trace of any counterexample.
#[derive(Debug, Clone)]
pub struct Exploration {
    pub report: ExplorationReport,
    pub invariant: InvariantResult,
    pub outcome: Outcome,
    pub trace: ScheduleTrace,
}

fn verdict_outcome(label: &str) -> Outcome {
    match label {
        "safe" => Outcome::Pass,
        "violation" => Outcome::Violation,
        _ => Outcome::Inconclusive,
    }
}

fn run_exploration(scenario: &Scenario, spec: &ExploreSpec) -> Result<Exploration, ScenarioError> {
    let p = scenario.parameters;
    let mut limits = Limits {
        depth_bound: spec.depth,
        ..Limits::default()
    };
    if let Some(m) = spec.max_states {
        limits.max_states = m;
    }
    match spec.target {
        ExploreTarget::Election => {
            let mut config =
                ElectionConfig::new(p.epsilon, p.period, spec.max_instances).with_pause_budget(spec.pause_budget);
            if let Some(Mutation::Wait(w)) = scenario.mutation()? {
                config = config.with_wait(w);
            }
            Ok(explore_election(config, limits))
        }
        ExploreTarget::LeaseClones => {
            let mut config = LeaseCloneConfig::conflicting(spec.max_instances, spec.requests_per_server);
            config.params = LeaseParams {
                epsilon: p.epsilon,
                period: p.period,
                lease_length: p.lease_length,
            };
            let model = LeaseCloneModel::new(config);
            let v = explore(&model, limits);
            let outcome = verdict_outcome(v.label());
            let reason = match &v.outcome {
                crate::explorer::Outcome::Violation { reason, .. } => Some(reason.clone()),
                _ => None,
            };
            let invariant = match outcome {
                Outcome::Pass => InvariantResult::ok("single_surviving_server"),
                _ => InvariantResult {
                    name: "single_surviving_server".into(),
                    holds: false,
                    first_violation_tick: None,
                    detail: reason.clone().unwrap_or_else(|| "bound exhausted".into()),
                },
            };
            Ok(Exploration {
                report: ExplorationReport {
                    target: "lease_clones".into(),
                    verdict: v.label().into(),
                    states_explored: v.states_explored,
                    transitions: v.transitions,
                    max_depth: v.max_depth,
                    wait: None,
                    reason,
                    counterexample: v
                        .counterexample()
                        .map(|p| p.iter().map(|s| format!("server {s} steps")).collect())
                        .unwrap_or_default(),
                    replay_confirms: None,
                },
                invariant,
                outcome,
                trace: ScheduleTrace::default(),
            })
        }
    }
}

/// Explores an election configuration. A counterexample is replayed on the
/// simulator, whose trace becomes the run's trace.
pub fn explore_election(config: ElectionConfig, limits: Limits) -> Exploration {
    let model = ElectionModel::new(config);
    let v = explore(&model, limits);
    let mut report = ExplorationReport {
        target: "election".into(),
        verdict: v.label().into(),
        states_explored: v.states_explored,
        transitions: v.transitions,
        max_depth: v.max_depth,
        wait: Some(config.wait),
        reason: None,
        counterexample: Vec::new(),
        replay_confirms: None,
    };
    let mut trace = ScheduleTrace::default();
    if let crate::explorer::Outcome::Violation { reason, path } = &v.outcome {
        report.reason = Some(reason.clone());
        report.counterexample = path.iter().map(ToString::to_string).collect();
        let (confirmed, t) = replay_counterexample(config, path);
        report.replay_confirms = Some(confirmed);
        trace = t;
    }
    let outcome = verdict_outcome(v.label());
    let invariant = match outcome {
        Outcome::Pass => InvariantResult::ok("single_worker"),
        _ => InvariantResult {
            name: "single_worker".into(),
            holds: false,
            first_violation_tick: trace.last().map(|t| t.tick),
            detail: report.reason.clone().unwrap_or_else(|| "bound exhausted".into()),
        },
    };
    Exploration {
        report,
        invariant,
        outcome,
        trace,
    }
}

/// Replays an explorer path on the simulator. True iff the replay ends in
/// a tick where two candidates work.
pub fn replay_counterexample(
    config: ElectionConfig,
    path: &[crate::explorer::ElectionAction],
) -> (bool, ScheduleTrace) {
    let start = config.epsilon;
    let script = ElectionModel::script(path, start);
    let last = script.last().map_or(start, |e| e.tick);
    let world = ElectionWorld::new(ElectionWorldConfig::scripted(config.params(), script));
    let mut engine = Engine::new(world, 0);
    engine.run_until(VirtualTime(last));
    let confirmed = engine.world().first_violation() == Some(last) && !engine.world().check_state(VirtualTime(last));
    (confirmed, engine.trace().clone())
}

fn check_expectation(exp: &Expectation, observations: &[Observation], instances: &[InstanceSummary]) -> Vec<String> {
    let mut failures = Vec::new();
    for o in &exp.observations {
        let found = observations.iter().any(|x| {
            x.name == o.name
                && o.tick.is_none_or(|t| t == x.tick)
                && o.detail_contains.as_deref().is_none_or(|d| x.detail.contains(d))
        });
        if !found {
            let at = o.tick.map_or(String::new(), |t| format!(" at tick {t}"));
            failures.push(format!("missing observation `{}`{at}", o.name));
        }
    }
    for name in &exp.absent {
        if let Some(x) = observations.iter().find(|x| &x.name == name) {
            failures.push(format!("unexpected observation `{name}` at tick {}", x.tick));
        }
    }
    for want in &exp.instances {
        let id = want.instance.to_string();
        let Some(got) = instances.iter().find(|i| i.instance == id) else {
            failures.push(format!("no instance {id}"));
            continue;
        };
        if let Some(s) = want.status {
            if got.status != Some(s) {
                failures.push(format!("{id} status {:?}, expected {s:?}", got.status));
            }
        }
        if let Some(n) = want.externalizations {
            if got.externalizations != n {
                failures.push(format!(
                    "{id} externalized {} times, expected {n}",
                    got.externalizations
                ));
            }
        }
        if let Some(n) = want.min_externalizations {
            if got.externalizations < n {
                failures.push(format!(
                    "{id} externalized {} times, expected at least {n}",
                    got.externalizations
                ));
            }
        }
    }
    failures
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut observations = Vec::new();
    let (mode, seed, limit, invariants, instances, counter_writes, exploration, outcome, trace) = match &scenario.mode {
        Mode::Simulate { seed, limit } => {
            let seed = opts.seed.unwrap_or(*seed);
            let limit = opts.limit.unwrap_or(*limit);
            let (r, trace) = run_simulation(scenario, seed, limit, &mut observations);
            let outcome = if r.invariants.iter().all(|i| i.holds) {
                Outcome::Pass
            } else {
                Outcome::Violation
            };
            (
                "simulate",
                Some(seed),
                Some(limit),
                r.invariants,
                r.instances,
                r.counter_writes,
                None,
                outcome,
                trace,
            )
        }
        Mode::Explore(spec) => {
            let r = run_exploration(scenario, spec)?;
            (
                "explore",
                None,
                None,
                vec![r.invariant],
                Vec::new(),
                0,
                Some(r.report),
                r.outcome,
                r.trace,
            )
        }
    };
    let expected = expected(scenario.expect.outcome);
    let mut failures = check_expectation(&scenario.expect, &observations, &instances);
    if outcome != expected {
        failures.insert(0, format!("outcome {outcome:?}, expected {expected:?}"));
    }
    let latency = scenario.parameters.counter_write_latency;
    let report = RunReport {
        scenario: scenario.name.clone(),
        system: match scenario.system {
            System::Lease { .. } => "lease",
            System::Election { .. } => "election",
            System::Store { .. } => "store",
        }
        .into(),
        mode: mode.into(),
        seed,
        limit,
        outcome,
        expected,
        met_expectation: failures.is_empty(),
        expectation_failures: failures,
        invariants,
        observations,
        instances,
        cost: CostReport {
            counter_writes,
            counter_write_latency: latency,
            modeled_latency_total: counter_writes * latency,
        },
        exploration,
        trace: TraceInfo {
            events: trace.len(),
            digest: format!("{:032x}", trace.digest().0),
            path: None,
        },
    };
    Ok(RunOutput { report, trace })
}

/// Runs every `*.json` file in `dir`, in file-name order.
pub fn run_corpus(dir: &Path) -> Result<CorpusReport, ScenarioError> {
    let io = |source| ScenarioError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut report = CorpusReport::default();
    for path in files {
        let file = path.display().to_string();
        let entry = match Scenario::load(&path).and_then(|s| run_scenario(&s, &RunOptions::default()).map(|o| (s, o))) {
            Ok((s, out)) => CorpusEntry {
                file,
                scenario: s.name,
                outcome: Some(out.report.outcome),
                expected: Some(out.report.expected),
                passed: out.report.met_expectation,
                error: (!out.report.met_expectation).then(|| out.report.expectation_failures.join("; ")),
            },
            Err(e) => CorpusEntry {
                scenario: path
                    .file_stem()
                    .map_or(String::new(), |s| s.to_string_lossy().into_owned()),
                file,
                outcome: None,
                expected: None,
                passed: false,
                error: Some(e.to_string()),
            },
        };
        report.entries.push(entry);
    }
    Ok(report)
}
