//! Deterministic simulator for the notigate gateway: synthetic workloads,
//! synthetic users and scripted scenarios.

pub mod report;
pub mod runner;
pub mod scenario;
pub mod users;
pub mod workload;

pub use report::MetricsReport;
pub use runner::{run, RunOptions, SimError, SimOutput};
pub use scenario::Scenario;
pub use users::SyntheticUser;
pub use workload::Workload;
