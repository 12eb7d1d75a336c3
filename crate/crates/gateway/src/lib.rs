//! API gateway for the edge pod platform: authentication, reservations,
//! session connect/disconnect, cluster and pod status, and the metrics
//! scrape endpoint, all over HTTP/JSON.

pub mod auth;
pub mod config;
pub mod error;
pub mod http;
pub mod platform;
pub mod server;

pub use auth::{ApiToken, AuthPolicy, Authenticator, Role, UserRecord};
pub use config::Config;
pub use error::ApiError;
pub use platform::{
    BridgeControl, ConnectRequest, NullBridges, Platform, PlatformParts, ReserveRequest,
    SessionDescriptor, SessionState,
};
pub use server::Server;
