pub mod adapters;
pub mod collector;
pub mod fixture;
pub mod git;
pub mod miner;
pub mod pipeline;
pub mod runner;
pub mod store;
pub mod workflow;
