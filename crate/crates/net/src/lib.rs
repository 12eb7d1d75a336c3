//! Networking side of the edge pod platform: the reverse tunnel gateway,
//! the pod-side tunnel agent and stub display, a line-protocol index store,
//! and a loopback UDP jitter probe.

pub mod agent;
pub mod frame;
pub mod gateway;
pub mod keepalive;
pub mod loopback;
mod mux;
pub mod runtime;
pub mod store;

pub use agent::{DisplayServer, TargetSlot, TunnelClient};
pub use gateway::{GatewayConfig, GatewayError, TunnelEvent, TunnelEventKind, TunnelGateway, TunnelRegistration, WebBridge};
pub use keepalive::KeepalivePolicy;
pub use runtime::NetRuntime;
