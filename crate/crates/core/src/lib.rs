//! Deterministic fixed-timestep multi-agent driving-interaction simulator.
//!
//! The crate is organized around a provider architecture: a lane-graph road
//! network ([`map`]), a vehicle provider with four controller abstractions
//! ([`vehicle`]), a background traffic provider ([`traffic`]), bubble-based
//! control handover to social agents ([`bubbles`], [`agents`]), observation
//! and reward construction ([`sensing`]), and the orchestrating engine with
//! episode recording ([`engine`]). Evaluation metrics over recorded episodes
//! live in [`metrics`]; scenario composition in [`scenario`]; the parallel
//! episode runner in [`runner`].

pub mod agents;
pub mod bubbles;
pub mod engine;
pub mod map;
pub mod math;
pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod sensing;
pub mod traffic;
pub mod vehicle;

/// Global fixed simulation timestep, seconds.
pub const DT: f64 = 0.1;
