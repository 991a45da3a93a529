//! Two-period time-of-use pricing for distributed energy storage.
//!
//! Users with uncertain daily demand decide how much storage to buy given a
//! peak/off-peak price difference; a utility picks the price difference
//! that minimises the expected social cost of supplying the residual load.
//! The crate provides the users' best responses, the utility's threshold
//! scan under type-based and individual pricing, a complete-information
//! planner for comparison, and the data handling around them.

pub mod benchmark;
pub mod cost_model;
pub mod demand;
pub mod error;
pub mod experiment;
pub mod numeric;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
