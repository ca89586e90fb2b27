//! Trace-driven DRAM controller simulator with a read-disturbance fault
//! model, disturbance mitigations and a characterization harness.

pub mod disturbance;
pub mod dram;
pub mod seed;
pub mod controller;
pub mod mitigation;
pub mod trace;
pub mod patterns;
pub mod par;
pub mod characterize;
pub mod config;
pub mod results;
pub mod plotdata;
pub mod experiments;
