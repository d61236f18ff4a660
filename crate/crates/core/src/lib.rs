//! OpenFlow and OVSDB control traffic carried over one QUIC connection
//! between a switch-side and a controller-side agent.
//!
//! - [`codec`]: message construction and stream reframing.
//! - [`mux`]: stream labels and the port to protocol map.
//! - [`transport`]: QUIC endpoint, credentials and session resumption.
//! - [`agent`]: the two agents, as sans-io cores and socket-driven threads.
//! - [`endpoints`]: emulated switch and controller daemons.
//! - [`overhead`]: exact overhead models for TCP and QUIC.
//! - [`harness`]: virtual-time bench, capture accounting and reports.

pub mod agent;
pub mod codec;
pub mod endpoints;
pub mod harness;
pub mod mux;
pub mod overhead;
pub mod transport;
