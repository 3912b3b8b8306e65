//! Scenario runner and reporting front end.

pub mod report;
pub mod runner;
pub mod scenario;

pub use report::{CorpusReport, Outcome, RunReport};
pub use runner::{
    explore_election, replay_counterexample, run_corpus, run_scenario, Exploration, RunOptions, RunOutput,
};
pub use scenario::{schema, Mutation, Scenario, ScenarioError};
