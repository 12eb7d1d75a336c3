//! Core logic for a lab edge-pod platform: testbed reservations, pod
//! scheduling and lifecycle, port allocation, a simulated edge cluster and
//! telemetry. Nothing here touches sockets, so it also builds for wasm.

pub mod clock;
pub mod lifecycle;
pub mod ports;
pub mod reservation;
pub mod scheduler;
pub mod sim;
pub mod telemetry;

pub use clock::{Clock, Millis, SharedClock, SimClock, SystemClock};
