//! Length-aware scheduling for multi-instance LLM serving, plus a
//! deterministic discrete-event simulator to evaluate scheduling policies.
//!
//! The crate is organized as a pipeline of small modules:
//!
//! ```text
//!   profiling CSV ──► cost_model ──► fitted quality coefficients
//!                          │
//!   trace JSONL ──► workload ──► planner ──► pipeline plan (stages)
//!                                   │
//!                                   ▼
//!                    simcore (event loop) ◄── refiner (boundary EMA)
//!                        │        ▲
//!                        │        └── balancer (ask/bid migration)
//!                        ▼
//!                     metrics ──► report.json / events.csv
//! ```
//!
//! `cost_model` fits a linear per-request quality model from profiled batch
//! features. `planner` turns a request trace plus those coefficients into a
//! static pipeline of sequence-length stages via dynamic programming.
//! `refiner` adjusts stage boundaries online, `balancer` implements the
//! ask/bid live-migration protocol, and `simcore` executes everything on a
//! microsecond-resolution event clock so that a fixed seed reproduces output
//! files byte for byte. `metrics` reduces the event log to a report.

pub mod balancer;
pub mod config;
pub mod cost_model;
pub mod metrics;
pub mod planner;
pub mod refiner;
pub mod simcore;
pub mod workload;

pub use config::RunConfig;
pub use cost_model::{QoeParams, RequestShape};
pub use planner::{PipelinePlan, PlanInput, Stage};
pub use workload::TraceRequest;
