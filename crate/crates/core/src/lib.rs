//! Cooperative prosumer-grid scheduling with neighbor-watch anomaly
//! detection and penalty-driven mitigation.
//!
//! The crate models a small power network of prosumer nodes, computes
//! agreed reference schedules with a distributed optimal-power-flow
//! solver, lets neighbors probe each other's delivered energy for
//! mismatches, turns persistent mismatch into a recursive anomaly factor,
//! prices that factor into penalties, and finally isolates nodes the
//! neighborhood votes against. A deterministic simulation harness wires
//! the pieces together over discrete scheduling intervals.

pub mod detection;
pub mod dopf;
pub mod fixtures;
pub mod grid;
pub mod penalty;
pub mod probing;
pub mod sim;
