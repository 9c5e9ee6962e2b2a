//! Deterministic discrete-event simulator of a multi-instance serving
//! cluster: instances with KV memory running prefill/decode iterations
//! timed by a hardware oracle, length-range routing with ask/bid dispatch,
//! runtime boundary refinement, and bid-ask live migration between
//! instances — all driven by one totally-ordered event queue on an integer
//! microsecond clock.

mod engine;
mod oracle;

pub use engine::{run, SimError, SimOutput};
pub use oracle::HardwareOracle;
