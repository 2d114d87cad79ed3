//! Remote pilot boundary for the simulated robot: a framed JSON protocol,
//! a sans-IO session hub, injected link latency, and a websocket server and
//! client speaking it.

pub mod client;
pub mod codec;
pub mod hub;
pub mod latency;
pub mod schema;
pub mod server;
