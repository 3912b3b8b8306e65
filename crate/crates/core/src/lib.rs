//! Deterministic laboratory for trusted leases, local leader election and a
//! rollback-protected replicated store.

pub mod cli;
pub mod clock;
pub mod counter;
pub mod election;
pub mod explorer;
pub mod lease;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod worlds;
