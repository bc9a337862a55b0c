//! Simulation and estimation toolkit for forward-looking, reference-dependent
//! discrete-choice migration.
//!
//! * [`trending`]: employment growth, the job-trending indicator and
//!   origin/destination distances.
//! * [`rumsim`]: logsum continuation values, extreme-value shocks and
//!   synthetic decision panels.
//! * [`panel`]: survey classification and quasi-panel assembly.
//! * [`lpm`], [`mlogit`], [`gmm`]: linear probability, multilevel logit and
//!   system GMM estimators.
//! * [`frame`]: the column table consumed by the estimators.

pub mod city;
pub mod frame;
pub mod gmm;
pub mod linalg;
pub mod lpm;
pub mod mlogit;
pub mod montecarlo;
pub mod panel;
pub mod rumsim;
pub mod stats;
pub mod trending;

pub use city::CityId;
pub use frame::Frame;
