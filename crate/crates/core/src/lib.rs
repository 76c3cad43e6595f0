pub mod audit;
pub mod catalog;
pub mod hypothesis;
pub mod injection;
pub mod maturity;
pub mod model;
pub mod netproxy;
pub mod orchestrator;
pub mod parse;
pub mod report;
pub mod resilience;
pub mod sim;
pub mod store;
pub mod validate;
