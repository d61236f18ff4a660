//! Emulated switch and controller daemons.
//!
//! [`Switch`] stands in for ovs-switchd plus ovsdb-server, [`Controller`] for
//! ryu-of plus ryu-ovsdb. Both are pure message handlers; [`live`] runs them
//! over datagram sockets (agent mode) or TCP (baseline mode).

pub mod controller;
pub mod live;
pub mod switch;

use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use crate::codec::Protocol;

pub use controller::{Controller, ControllerCounters};
pub use switch::{Switch, SwitchConfig, SwitchCounters, DEFAULT_PROBE_INTERVAL};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error("unknown transport scheme {0:?}")]
    UnknownScheme(String),
    #[error("malformed transport spec {0:?}, expected udp:<ip>:<port> or tcp:<ip>:<port>")]
    InvalidSpec(String),
    #[error("cannot bind or connect {addr}: {reason}")]
    BindFailure { addr: SocketAddr, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Udp,
    Tcp,
}

/// `udp:<ip>:<port>` or `tcp:<ip>:<port>`, as given to `set-controller`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransportSpec {
    pub scheme: Scheme,
    pub addr: SocketAddr,
}

impl FromStr for TransportSpec {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s.split_once(':').ok_or_else(|| EndpointError::InvalidSpec(s.to_string()))?;
        let scheme = match scheme {
            "udp" => Scheme::Udp,
            "tcp" => Scheme::Tcp,
            other => return Err(EndpointError::UnknownScheme(other.to_string())),
        };
        let addr = rest.parse().map_err(|_| EndpointError::InvalidSpec(s.to_string()))?;
        Ok(Self { scheme, addr })
    }
}

impl fmt::Display for TransportSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scheme = match self.scheme {
            Scheme::Udp => "udp",
            Scheme::Tcp => "tcp",
        };
        write!(f, "{scheme}:{}", self.addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ServiceState {
    Connecting,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    OpenFlowSwitch,
    OvsdbSwitch,
    OpenFlowController,
    OvsdbController,
}

impl Role {
    pub fn protocol(self) -> Protocol {
        match self {
            Role::OpenFlowSwitch | Role::OpenFlowController => Protocol::OpenFlow,
            Role::OvsdbSwitch | Role::OvsdbController => Protocol::Ovsdb,
        }
    }

    pub fn is_switch(self) -> bool {
        matches!(self, Role::OpenFlowSwitch | Role::OvsdbSwitch)
    }
}

/// Connection state of one daemon channel.
///
/// A udp channel has no handshake, so it is ACTIVE as soon as its socket
/// exists. A tcp channel stays CONNECTING until the three-way handshake
/// completes and falls back to CONNECTING when the connection drops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Service {
    pub spec: TransportSpec,
    pub role: Role,
    state: ServiceState,
}

impl Service {
    pub fn new(spec: TransportSpec, role: Role) -> Self {
        let state = match spec.scheme {
            Scheme::Udp => ServiceState::Active,
            Scheme::Tcp => ServiceState::Connecting,
        };
        Self { spec, role, state }
    }

    pub fn state(&self) -> ServiceState {
        self.state
    }

    pub fn on_connected(&mut self) {
        self.state = ServiceState::Active;
    }

    pub fn on_disconnected(&mut self) {
        if self.spec.scheme == Scheme::Tcp {
            self.state = ServiceState::Connecting;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let s: TransportSpec = "udp:127.0.0.1:6653".parse().unwrap();
        assert_eq!(s.scheme, Scheme::Udp);
        assert_eq!(s.addr.port(), 6653);
        assert_eq!(s.to_string(), "udp:127.0.0.1:6653");
        let t: TransportSpec = "tcp:[::1]:6640".parse().unwrap();
        assert_eq!(t.scheme, Scheme::Tcp);
        assert!(matches!("sctp:1.2.3.4:1".parse::<TransportSpec>(), Err(EndpointError::UnknownScheme(s)) if s == "sctp"));
        assert!(matches!("udp:nowhere".parse::<TransportSpec>(), Err(EndpointError::InvalidSpec(_))));
        assert!(matches!("6653".parse::<TransportSpec>(), Err(EndpointError::InvalidSpec(_))));
    }

    #[test]
    fn state_machine_per_scheme() {
        let udp = Service::new("udp:127.0.0.1:6653".parse().unwrap(), Role::OpenFlowSwitch);
        assert_eq!(udp.state(), ServiceState::Active);
        let mut udp = udp;
        udp.on_disconnected();
        assert_eq!(udp.state(), ServiceState::Active);

        let mut tcp = Service::new("tcp:10.0.0.2:6653".parse().unwrap(), Role::OpenFlowSwitch);
        assert_eq!(tcp.state(), ServiceState::Connecting);
        tcp.on_connected();
        assert_eq!(tcp.state(), ServiceState::Active);
        tcp.on_disconnected();
        assert_eq!(tcp.state(), ServiceState::Connecting);
        assert_eq!(Role::OvsdbController.protocol(), Protocol::Ovsdb);
    }
}
