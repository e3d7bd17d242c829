//! Star-topology federated computation: a relay that only forwards frames,
//! a controller that runs app workflows on each client, the app contract,
//! and secure aggregation by additive masking.

pub mod app;
pub mod controller;
pub mod link;
pub mod protocol;
pub mod relay;
pub mod smpc;
pub mod throttle;

pub use protocol::{ClientId, Frame, FrameKind, Role};
