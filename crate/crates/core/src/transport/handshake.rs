//! Handshake driving the QUIC engine's packet protection.
//!
//! Messages are `type u8 | length u24 | body`:
//!
//! | type | name   | space     | body |
//! |------|--------|-----------|------|
//! | 1    | CHLO   | Initial   | random32, x25519 share32, sni, params, optional ticket + binder |
//! | 2    | SHLO   | Initial   | random32, x25519 share32, psk_accepted u8 |
//! | 8    | EE     | Handshake | server transport parameters |
//! | 11   | CERT   | Handshake | certificate DER (omitted on resumption) |
//! | 15   | CV     | Handshake | scheme u16, signature (omitted on resumption) |
//! | 20   | FIN    | both      | HMAC-SHA256 verify data |
//! | 4    | TICKET | Handshake | lifetime u32, nonce8, sealed ticket |
//!
//! The key schedule is the TLS 1.3 one over SHA-256.

use std::any::Any;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use quinn_proto::crypto::{self, ExportKeyingMaterialError, KeyPair, Keys, UnsupportedVersion};
use quinn_proto::transport_parameters::TransportParameters;
use quinn_proto::{ConnectError, ConnectionId, Side, TransportError, TransportErrorCode};
use ring::agreement::{self, EphemeralPrivateKey, UnparsedPublicKey, X25519};
use ring::rand::{SecureRandom, SystemRandom};

use super::credentials::{verify_cert_signature, ServerCredentials};
use super::keys::{self, empty_hash, expand_secret, extract, hash, hmac_sha256, hmac_verify, Secret};
use super::session::SessionTicket;

const QUIC_V1: u32 = 1;

const MSG_CHLO: u8 = 1;
const MSG_SHLO: u8 = 2;
const MSG_TICKET: u8 = 4;
const MSG_EE: u8 = 8;
const MSG_CERT: u8 = 11;
const MSG_CV: u8 = 15;
const MSG_FIN: u8 = 20;

const ALERT_UNEXPECTED: u8 = 10;
const ALERT_BAD_CERT: u8 = 42;
const ALERT_DECODE: u8 = 50;
const ALERT_DECRYPT: u8 = 51;
const ALERT_INTERNAL: u8 = 80;

const SIG_CONTEXT: &[u8] = b"quicsb server signature\0";
const TICKET_FORMAT: u8 = 1;
pub const DEFAULT_TICKET_LIFETIME: Duration = Duration::from_secs(24 * 3600);

/// The four key phases a connection walks through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum HandshakePhase {
    InitialKeyAgreement,
    InitialDataExchange,
    KeyAgreement,
    DataExchange,
}

/// What happened to an offered resumption ticket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStatus {
    NotOffered,
    Offered,
    Accepted,
    Rejected,
}

/// Client and server traffic secrets for one phase.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SecretPair {
    pub client: Secret,
    pub server: Secret,
}

impl SecretPair {
    pub fn local(&self, side: Side) -> &Secret {
        if side.is_client() {
            &self.client
        } else {
            &self.server
        }
    }
}

#[derive(Clone, Default)]
pub struct KeyLedger {
    pub initial: Option<SecretPair>,
    pub early: Option<Secret>,
    pub handshake: Option<SecretPair>,
    pub one_rtt: Option<SecretPair>,
}

impl KeyLedger {
    pub fn phase(&self) -> HandshakePhase {
        if self.one_rtt.is_some() {
            HandshakePhase::DataExchange
        } else if self.handshake.is_some() {
            HandshakePhase::KeyAgreement
        } else if self.initial.is_some() {
            HandshakePhase::InitialDataExchange
        } else {
            HandshakePhase::InitialKeyAgreement
        }
    }

    /// Secrets for `phase`; `aux` selects the 1-RTT key generation.
    pub fn secrets(&self, phase: HandshakePhase, aux: u32) -> Option<SecretPair> {
        match phase {
            HandshakePhase::InitialKeyAgreement => None,
            HandshakePhase::InitialDataExchange => self.initial,
            HandshakePhase::KeyAgreement => self.handshake,
            HandshakePhase::DataExchange => {
                let mut pair = self.one_rtt?;
                for _ in 0..aux {
                    pair = SecretPair { client: keys::update_secret(&pair.client), server: keys::update_secret(&pair.server) };
                }
                Some(pair)
            }
        }
    }
}

struct SharedState {
    ledger: KeyLedger,
    early: EarlyStatus,
    new_ticket: Option<SessionTicket>,
    peer_cert: Option<Vec<u8>>,
}

/// Per-connection state visible to the transport facade.
pub struct SessionShared {
    side: Side,
    auth_failures: Arc<AtomicU64>,
    state: Mutex<SharedState>,
}

impl SessionShared {
    fn new(side: Side) -> Arc<Self> {
        Arc::new(Self {
            side,
            auth_failures: Arc::new(AtomicU64::new(0)),
            state: Mutex::new(SharedState {
                ledger: KeyLedger::default(),
                early: EarlyStatus::NotOffered,
                new_ticket: None,
                peer_cert: None,
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SharedState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Packets whose AEAD tag failed to verify.
    pub fn auth_failures(&self) -> u64 {
        self.auth_failures.load(Ordering::Relaxed)
    }

    pub fn ledger(&self) -> KeyLedger {
        self.lock().ledger.clone()
    }

    pub fn early_status(&self) -> EarlyStatus {
        self.lock().early
    }

    /// Takes the ticket issued during this handshake, if any (client side).
    pub fn take_ticket(&self) -> Option<SessionTicket> {
        self.lock().new_ticket.take()
    }

    pub fn peer_certificate(&self) -> Option<Vec<u8>> {
        self.lock().peer_cert.clone()
    }
}

/// Returned from the engine's `handshake_data` so callers can reach [`SessionShared`].
pub struct HandshakeInfo {
    pub shared: Arc<SessionShared>,
    pub server_name: Option<String>,
}

/// Extracts the shared state from an engine connection.
pub fn shared_of(conn: &quinn_proto::Connection) -> Option<Arc<SessionShared>> {
    let data = conn.crypto_session().handshake_data()?;
    data.downcast::<HandshakeInfo>().ok().map(|info| info.shared)
}

#[derive(Clone, Debug)]
pub enum ServerTrust {
    /// Require this exact certificate DER.
    Pinned(Vec<u8>),
    /// Accept any certificate whose key produced a valid signature.
    AcceptAny,
}

/// Client configuration for one connection attempt.
pub struct ClientCrypto {
    trust: ServerTrust,
    ticket: Option<SessionTicket>,
}

impl ClientCrypto {
    pub fn new(trust: ServerTrust, ticket: Option<SessionTicket>) -> Arc<Self> {
        Arc::new(Self { trust, ticket })
    }
}

/// Server configuration shared by all accepted connections.
pub struct ServerCrypto {
    creds: Arc<ServerCredentials>,
    ticket_key: ring::aead::LessSafeKey,
    ticket_lifetime: Duration,
}

impl ServerCrypto {
    pub fn new(creds: Arc<ServerCredentials>) -> Arc<Self> {
        Self::with_ticket_lifetime(creds, DEFAULT_TICKET_LIFETIME)
    }

    pub fn with_ticket_lifetime(creds: Arc<ServerCredentials>, ticket_lifetime: Duration) -> Arc<Self> {
        let prk = extract(b"quicsb ticket key", &creds.key_der);
        let k = expand_secret(&prk, b"ticket aead", b"");
        let ticket_key = ring::aead::LessSafeKey::new(
            ring::aead::UnboundKey::new(&ring::aead::AES_256_GCM, &k).expect("32-byte key"),
        );
        Arc::new(Self { creds, ticket_key, ticket_lifetime })
    }

    fn seal_ticket(&self, psk: &Secret, sni: &str) -> Vec<u8> {
        let mut plain = vec![TICKET_FORMAT];
        plain.extend_from_slice(psk);
        plain.extend_from_slice(&unix_now().to_be_bytes());
        plain.extend_from_slice(&(self.ticket_lifetime.as_secs() as u32).to_be_bytes());
        plain.push(sni.len().min(255) as u8);
        plain.extend_from_slice(&sni.as_bytes()[..sni.len().min(255)]);
        let mut nonce = [0u8; 12];
        SystemRandom::new().fill(&mut nonce).expect("system RNG");
        self.ticket_key
            .seal_in_place_append_tag(
                ring::aead::Nonce::assume_unique_for_key(nonce),
                ring::aead::Aad::empty(),
                &mut plain,
            )
            .expect("ticket sealing");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&plain);
        out
    }

    /// Returns the ticket's PSK if it opens, is current, and names `sni`.
    fn open_ticket(&self, sealed: &[u8], sni: &str) -> Option<Secret> {
        if sealed.len() < 12 + keys::TAG_LEN {
            return None;
        }
        let nonce: [u8; 12] = sealed[..12].try_into().ok()?;
        let mut body = sealed[12..].to_vec();
        let plain = self
            .ticket_key
            .open_in_place(ring::aead::Nonce::assume_unique_for_key(nonce), ring::aead::Aad::empty(), &mut body)
            .ok()?;
        let mut r = Cursor(plain);
        if r.u8()? != TICKET_FORMAT {
            return None;
        }
        let psk: Secret = r.take(32)?.try_into().ok()?;
        let issued = r.u64()?;
        let lifetime = u64::from(r.u32()?);
        let name_len = usize::from(r.u8()?);
        let name = r.take(name_len)?;
        let now = unix_now();
        if name != sni.as_bytes() || now < issued.saturating_sub(60) || now > issued + lifetime {
            return None;
        }
        Some(psk)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs()
}

impl crypto::ClientConfig for ClientCrypto {
    fn start_session(
        self: Arc<Self>,
        version: u32,
        server_name: &str,
        params: &TransportParameters,
    ) -> Result<Box<dyn crypto::Session>, ConnectError> {
        if version != QUIC_V1 {
            return Err(ConnectError::UnsupportedVersion);
        }
        let mut local_params = Vec::new();
        params.write(&mut local_params);
        let shared = SessionShared::new(Side::Client);
        let ticket = self.ticket.clone().filter(|t| t.server_name == server_name && t.secret.len() == 32);
        if ticket.is_some() {
            shared.lock().early = EarlyStatus::Offered;
        }
        Ok(Box::new(HandshakeSession::new(
            Side::Client,
            shared,
            local_params,
            Role::Client(ClientRole {
                config: self,
                server_name: server_name.to_owned(),
                ticket,
                chlo_sent: false,
                psk_accepted: false,
                peer_cert: None,
                got_fin: false,
                fin_sent: false,
                remembered_params: None,
            }),
        )))
    }
}

impl crypto::ServerConfig for ServerCrypto {
    fn initial_keys(&self, version: u32, dst_cid: &ConnectionId) -> Result<Keys, UnsupportedVersion> {
        if version != QUIC_V1 {
            return Err(UnsupportedVersion);
        }
        let (c, s) = keys::initial_secrets(dst_cid);
        Ok(keys::keys(&s, &c, &Arc::new(AtomicU64::new(0))))
    }

    fn retry_tag(&self, _version: u32, orig_dst_cid: &ConnectionId, packet: &[u8]) -> [u8; 16] {
        keys::retry_tag(orig_dst_cid, packet)
    }

    fn start_session(self: Arc<Self>, _version: u32, params: &TransportParameters) -> Box<dyn crypto::Session> {
        let mut local_params = Vec::new();
        params.write(&mut local_params);
        Box::new(HandshakeSession::new(
            Side::Server,
            SessionShared::new(Side::Server),
            local_params,
            Role::Server(ServerRole { config: self, sni: None, psk_accepted: false, stage: ServerStage::WaitChlo }),
        ))
    }
}

struct ClientRole {
    config: Arc<ClientCrypto>,
    server_name: String,
    ticket: Option<SessionTicket>,
    chlo_sent: bool,
    psk_accepted: bool,
    peer_cert: Option<Vec<u8>>,
    got_fin: bool,
    fin_sent: bool,
    remembered_params: Option<Vec<u8>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ServerStage {
    WaitChlo,
    SendShlo,
    SendFlight,
    WaitFin,
    Done,
}

struct ServerRole {
    config: Arc<ServerCrypto>,
    sni: Option<String>,
    psk_accepted: bool,
    stage: ServerStage,
}

enum Role {
    Client(ClientRole),
    Server(ServerRole),
}

struct HandshakeSession {
    side: Side,
    shared: Arc<SessionShared>,
    role: Role,
    local_params: Vec<u8>,
    peer_params: Option<Vec<u8>>,
    inbox: Vec<u8>,
    outbox: Vec<u8>,
    transcript: Vec<u8>,
    random: [u8; 32],
    ephemeral: Option<EphemeralPrivateKey>,
    psk: Option<Secret>,
    early_secret: Secret,
    early_traffic: Option<Secret>,
    hs_secret: Option<Secret>,
    hs: Option<SecretPair>,
    ap: Option<SecretPair>,
    next_ap: Option<SecretPair>,
    exporter: Option<Secret>,
    resumption: Option<Secret>,
    pending_keys: Option<Keys>,
    handshaking: bool,
}

fn err(alert: u8, reason: &str) -> TransportError {
    TransportError { code: TransportErrorCode::crypto(alert), frame: None, reason: reason.into() }
}

fn push_msg(out: &mut Vec<u8>, ty: u8, body: &[u8]) {
    out.push(ty);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
    out.extend_from_slice(body);
}

fn finished_key(secret: &Secret) -> Secret {
    expand_secret(secret, b"finished", b"")
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Some(h)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }
}

fn random32() -> [u8; 32] {
    let mut r = [0u8; 32];
    SystemRandom::new().fill(&mut r).expect("system RNG");
    r
}

impl HandshakeSession {
    fn new(side: Side, shared: Arc<SessionShared>, local_params: Vec<u8>, role: Role) -> Self {
        Self {
            side,
            shared,
            role,
            local_params,
            peer_params: None,
            inbox: Vec::new(),
            outbox: Vec::new(),
            transcript: Vec::new(),
            random: random32(),
            ephemeral: None,
            psk: None,
            early_secret: extract(&[0; 32], &[0; 32]),
            early_traffic: None,
            hs_secret: None,
            hs: None,
            ap: None,
            next_ap: None,
            exporter: None,
            resumption: None,
            pending_keys: None,
            handshaking: true,
        }
    }

    fn key_share() -> ([u8; 32], EphemeralPrivateKey) {
        let private = EphemeralPrivateKey::generate(&X25519, &SystemRandom::new()).expect("x25519 keygen");
        let public: [u8; 32] = private.compute_public_key().expect("x25519 public").as_ref().try_into().expect("32 bytes");
        (public, private)
    }

    fn binder_key(early: &Secret) -> Secret {
        finished_key(&expand_secret(early, b"res binder", &empty_hash()))
    }

    /// Derives handshake secrets after CHLO and SHLO are in the transcript.
    fn derive_handshake(&mut self, peer_share: &[u8], use_psk: bool) -> Result<(), TransportError> {
        let private = self.ephemeral.take().ok_or_else(|| err(ALERT_INTERNAL, "missing key share"))?;
        let shared_secret = agreement::agree_ephemeral(private, &UnparsedPublicKey::new(&X25519, peer_share), |k| {
            let mut s = [0u8; 32];
            s.copy_from_slice(k);
            s
        })
        .map_err(|_| err(ALERT_DECRYPT, "bad key share"))?;
        let early = if use_psk { self.early_secret } else { extract(&[0; 32], &[0; 32]) };
        let hs_secret = extract(&expand_secret(&early, b"derived", &empty_hash()), &shared_secret);
        let th = hash(&self.transcript);
        self.hs = Some(SecretPair {
            client: expand_secret(&hs_secret, b"c hs traffic", &th),
            server: expand_secret(&hs_secret, b"s hs traffic", &th),
        });
        self.hs_secret = Some(hs_secret);
        self.shared.lock().ledger.handshake = self.hs;
        Ok(())
    }

    /// Derives application, exporter and resumption secrets after the server FIN.
    fn derive_application(&mut self) {
        let hs_secret = self.hs_secret.expect("handshake secret");
        let master = extract(&expand_secret(&hs_secret, b"derived", &empty_hash()), &[0; 32]);
        let th = hash(&self.transcript);
        let ap = SecretPair {
            client: expand_secret(&master, b"c ap traffic", &th),
            server: expand_secret(&master, b"s ap traffic", &th),
        };
        self.ap = Some(ap);
        self.next_ap = Some(ap);
        self.exporter = Some(expand_secret(&master, b"exp master", &th));
        self.resumption = Some(expand_secret(&master, b"res master", &th));
    }

    fn phase_keys(&self, pair: &SecretPair) -> Keys {
        let (local, remote) =
            if self.side.is_client() { (&pair.client, &pair.server) } else { (&pair.server, &pair.client) };
        keys::keys(local, remote, &self.shared.auth_failures)
    }

    fn fin_verify_data(&self, secret: &Secret) -> [u8; 32] {
        hmac_sha256(&finished_key(secret), &hash(&self.transcript))
    }

    fn next_message(&mut self) -> Option<(u8, Vec<u8>)> {
        if self.inbox.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes([0, self.inbox[1], self.inbox[2], self.inbox[3]]) as usize;
        if self.inbox.len() < 4 + len {
            return None;
        }
        let msg: Vec<u8> = self.inbox.drain(..4 + len).collect();
        Some((msg[0], msg))
    }

    fn client_write(&mut self, buf: &mut Vec<u8>) -> Option<Keys> {
        let Role::Client(role) = &mut self.role else { unreachable!() };
        if !role.chlo_sent {
            role.chlo_sent = true;
            let (public, private) = Self::key_share();
            self.ephemeral = Some(private);
            let mut body = Vec::with_capacity(128 + self.local_params.len());
            body.extend_from_slice(&self.random);
            body.extend_from_slice(&public);
            let sni = role.server_name.as_bytes();
            body.push(sni.len().min(255) as u8);
            body.extend_from_slice(&sni[..sni.len().min(255)]);
            body.extend_from_slice(&(self.local_params.len() as u16).to_be_bytes());
            body.extend_from_slice(&self.local_params);
            let mut msg = Vec::new();
            if let Some(ticket) = &role.ticket {
                let psk: Secret = ticket.secret[..].try_into().expect("checked length");
                body.push(1);
                body.extend_from_slice(&(ticket.ticket_bytes.len() as u16).to_be_bytes());
                body.extend_from_slice(&ticket.ticket_bytes);
                body.extend_from_slice(&[0; 32]);
                push_msg(&mut msg, MSG_CHLO, &body);
                self.early_secret = extract(&[0; 32], &psk);
                let prefix = msg.len() - 32;
                let binder = hmac_sha256(&Self::binder_key(&self.early_secret), &hash(&msg[..prefix]));
                msg[prefix..].copy_from_slice(&binder);
                self.psk = Some(psk);
                role.remembered_params = Some(ticket.transport_params.clone());
            } else {
                body.push(0);
                push_msg(&mut msg, MSG_CHLO, &body);
            }
            self.transcript.extend_from_slice(&msg);
            if self.psk.is_some() {
                let c_early = expand_secret(&self.early_secret, b"c e traffic", &hash(&msg));
                self.early_traffic = Some(c_early);
                self.shared.lock().ledger.early = Some(c_early);
            }
            buf.extend_from_slice(&msg);
            return None;
        }
        if let Some(keys) = self.pending_keys.take() {
            return Some(keys);
        }
        if role.got_fin && !role.fin_sent {
            role.fin_sent = true;
            let hs = self.hs.expect("handshake secrets");
            let verify = self.fin_verify_data(&hs.client);
            let mut msg = Vec::new();
            push_msg(&mut msg, MSG_FIN, &verify);
            self.transcript.extend_from_slice(&msg);
            buf.extend_from_slice(&msg);
            self.handshaking = false;
            let ap = self.ap.expect("application secrets");
            self.shared.lock().ledger.one_rtt = Some(ap);
            return Some(self.phase_keys(&ap));
        }
        None
    }

    fn client_read(&mut self, ty: u8, msg: Vec<u8>) -> Result<bool, TransportError> {
        let body = &msg[4..];
        let Role::Client(role) = &mut self.role else { unreachable!() };
        match ty {
            MSG_SHLO if self.hs.is_none() => {
                let mut r = Cursor(body);
                let (_random, share, accepted) = (|| Some((r.take(32)?, r.take(32)?.to_vec(), r.u8()?)))()
                    .ok_or_else(|| err(ALERT_DECODE, "short SHLO"))?;
                let accepted = accepted == 1;
                if accepted && self.psk.is_none() {
                    return Err(err(ALERT_UNEXPECTED, "PSK accepted but not offered"));
                }
                role.psk_accepted = accepted;
                {
                    let mut st = self.shared.lock();
                    if st.early == EarlyStatus::Offered {
                        st.early = if accepted { EarlyStatus::Accepted } else { EarlyStatus::Rejected };
                    }
                }
                self.transcript.extend_from_slice(&msg);
                self.derive_handshake(&share, accepted)?;
                let hs = self.hs.expect("just derived");
                self.pending_keys = Some(self.phase_keys(&hs));
                Ok(true)
            }
            MSG_EE if self.hs.is_some() && self.peer_params.is_none() => {
                TransportParameters::read(Side::Client, &mut &body[..])?;
                self.peer_params = Some(body.to_vec());
                self.transcript.extend_from_slice(&msg);
                Ok(false)
            }
            MSG_CERT if self.peer_params.is_some() && !role.psk_accepted && role.peer_cert.is_none() => {
                if let ServerTrust::Pinned(expected) = &role.config.trust {
                    if expected[..] != *body {
                        return Err(err(ALERT_BAD_CERT, "server certificate does not match pinned certificate"));
                    }
                }
                role.peer_cert = Some(body.to_vec());
                self.shared.lock().peer_cert = Some(body.to_vec());
                self.transcript.extend_from_slice(&msg);
                Ok(false)
            }
            MSG_CV if role.peer_cert.is_some() => {
                let mut r = Cursor(body);
                let scheme = r.u16().ok_or_else(|| err(ALERT_DECODE, "short CV"))?;
                let sig = r.0;
                let mut signed = SIG_CONTEXT.to_vec();
                signed.extend_from_slice(&hash(&self.transcript));
                let cert = role.peer_cert.as_ref().expect("checked");
                if !verify_cert_signature(cert, scheme, &signed, sig) {
                    return Err(err(ALERT_DECRYPT, "bad server signature"));
                }
                self.transcript.extend_from_slice(&msg);
                Ok(false)
            }
            MSG_FIN if self.peer_params.is_some() && !role.got_fin => {
                if !role.psk_accepted && role.peer_cert.is_none() {
                    return Err(err(ALERT_UNEXPECTED, "server did not authenticate"));
                }
                let hs = self.hs.expect("handshake secrets");
                if !hmac_verify(&finished_key(&hs.server), &hash(&self.transcript), body) {
                    return Err(err(ALERT_DECRYPT, "bad server finished"));
                }
                self.transcript.extend_from_slice(&msg);
                self.derive_application();
                Ok(false)
            }
            MSG_TICKET if self.ap.is_some() && !role.got_fin => {
                let mut r = Cursor(body);
                let (_lifetime, nonce, ticket) = (|| {
                    let lifetime = r.u32()?;
                    let nonce = r.take(8)?.to_vec();
                    let len = usize::from(r.u16()?);
                    Some((lifetime, nonce, r.take(len)?.to_vec()))
                })()
                .ok_or_else(|| err(ALERT_DECODE, "short TICKET"))?;
                let psk = expand_secret(&self.resumption.expect("derived"), b"resumption", &nonce);
                self.transcript.extend_from_slice(&msg);
                self.shared.lock().new_ticket = Some(SessionTicket {
                    server_name: role.server_name.clone(),
                    ticket_bytes: ticket,
                    transport_params: self.peer_params.clone().expect("checked"),
                    issued_at: SystemTime::now(),
                    secret: psk.to_vec(),
                });
                role.got_fin = true;
                Ok(false)
            }
            _ => Err(err(ALERT_UNEXPECTED, "unexpected handshake message")),
        }
    }

    fn server_read(&mut self, ty: u8, msg: Vec<u8>) -> Result<bool, TransportError> {
        let Role::Server(role) = &mut self.role else { unreachable!() };
        let body = &msg[4..];
        match (ty, role.stage) {
            (MSG_CHLO, ServerStage::WaitChlo) => {
                let mut r = Cursor(body);
                let parsed = (|| {
                    let _random = r.take(32)?;
                    let share = r.take(32)?.to_vec();
                    let sni_len = usize::from(r.u8()?);
                    let sni = r.take(sni_len)?.to_vec();
                    let plen = usize::from(r.u16()?);
                    let params = r.take(plen)?.to_vec();
                    let has_psk = r.u8()?;
                    let psk = if has_psk == 1 {
                        let tlen = usize::from(r.u16()?);
                        let ticket = r.take(tlen)?.to_vec();
                        let binder = r.take(32)?.to_vec();
                        Some((ticket, binder))
                    } else {
                        None
                    };
                    r.0.is_empty().then_some((share, sni, params, psk))
                })();
                let (share, sni, params, psk) = parsed.ok_or_else(|| err(ALERT_DECODE, "malformed CHLO"))?;
                TransportParameters::read(Side::Server, &mut &params[..])?;
                let sni = String::from_utf8(sni).map_err(|_| err(ALERT_DECODE, "server name not UTF-8"))?;
                if let Some((ticket, binder)) = psk {
                    self.shared.lock().early = EarlyStatus::Offered;
                    let accepted = role.config.open_ticket(&ticket, &sni).filter(|psk| {
                        let early = extract(&[0; 32], psk);
                        let prefix = msg.len() - 32;
                        hmac_verify(&Self::binder_key(&early), &hash(&msg[..prefix]), &binder)
                    });
                    if let Some(psk) = accepted {
                        self.early_secret = extract(&[0; 32], &psk);
                        self.psk = Some(psk);
                        role.psk_accepted = true;
                    }
                    self.shared.lock().early =
                        if role.psk_accepted { EarlyStatus::Accepted } else { EarlyStatus::Rejected };
                }
                self.transcript.extend_from_slice(&msg);
                if role.psk_accepted {
                    let c_early = expand_secret(&self.early_secret, b"c e traffic", &hash(&self.transcript));
                    self.early_traffic = Some(c_early);
                    self.shared.lock().ledger.early = Some(c_early);
                }
                role.sni = Some(sni);
                self.peer_params = Some(params);
                role.stage = ServerStage::SendShlo;
                let (public, private) = Self::key_share();
                self.ephemeral = Some(private);
                let mut shlo = Vec::with_capacity(65);
                shlo.extend_from_slice(&self.random);
                shlo.extend_from_slice(&public);
                shlo.push(u8::from(role.psk_accepted));
                let mut out = Vec::new();
                push_msg(&mut out, MSG_SHLO, &shlo);
                self.transcript.extend_from_slice(&out);
                self.outbox = out;
                let accepted = role.psk_accepted;
                self.derive_handshake(&share, accepted)?;
                Ok(true)
            }
            (MSG_FIN, ServerStage::WaitFin) => {
                let hs = self.hs.expect("handshake secrets");
                if !hmac_verify(&finished_key(&hs.client), &hash(&self.transcript), body) {
                    return Err(err(ALERT_DECRYPT, "bad client finished"));
                }
                self.transcript.extend_from_slice(&msg);
                role.stage = ServerStage::Done;
                self.handshaking = false;
                Ok(false)
            }
            _ => Err(err(ALERT_UNEXPECTED, "unexpected handshake message")),
        }
    }
}

impl HandshakeSession {
    fn server_write(&mut self, buf: &mut Vec<u8>) -> Option<Keys> {
        let Role::Server(role) = &mut self.role else { unreachable!() };
        match role.stage {
            ServerStage::SendShlo => {
                role.stage = ServerStage::SendFlight;
                buf.append(&mut self.outbox);
                let hs = self.hs.expect("handshake secrets");
                Some(self.phase_keys(&hs))
            }
            ServerStage::SendFlight => {
                role.stage = ServerStage::WaitFin;
                let config = role.config.clone();
                let resumed = role.psk_accepted;
                let sni = role.sni.clone().unwrap_or_default();
                let mut out = Vec::new();
                push_msg(&mut out, MSG_EE, &self.local_params);
                self.transcript.extend_from_slice(&out);
                if !resumed {
                    let start = out.len();
                    push_msg(&mut out, MSG_CERT, &config.creds.cert);
                    self.transcript.extend_from_slice(&out[start..]);
                    let mut signed = SIG_CONTEXT.to_vec();
                    signed.extend_from_slice(&hash(&self.transcript));
                    let mut cv = config.creds.signer.scheme().to_be_bytes().to_vec();
                    cv.extend_from_slice(&config.creds.signer.sign(&signed));
                    let start = out.len();
                    push_msg(&mut out, MSG_CV, &cv);
                    self.transcript.extend_from_slice(&out[start..]);
                }
                let hs = self.hs.expect("handshake secrets");
                let verify = self.fin_verify_data(&hs.server);
                let start = out.len();
                push_msg(&mut out, MSG_FIN, &verify);
                self.transcript.extend_from_slice(&out[start..]);
                self.derive_application();

                let mut nonce = [0u8; 8];
                SystemRandom::new().fill(&mut nonce).expect("system RNG");
                let psk = expand_secret(&self.resumption.expect("derived"), b"resumption", &nonce);
                let sealed = config.seal_ticket(&psk, &sni);
                let mut body = (config.ticket_lifetime.as_secs() as u32).to_be_bytes().to_vec();
                body.extend_from_slice(&nonce);
                body.extend_from_slice(&(sealed.len() as u16).to_be_bytes());
                body.extend_from_slice(&sealed);
                let start = out.len();
                push_msg(&mut out, MSG_TICKET, &body);
                self.transcript.extend_from_slice(&out[start..]);

                buf.extend_from_slice(&out);
                let ap = self.ap.expect("application secrets");
                self.shared.lock().ledger.one_rtt = Some(ap);
                Some(self.phase_keys(&ap))
            }
            _ => None,
        }
    }

    fn server_name(&self) -> Option<String> {
        match &self.role {
            Role::Client(c) => Some(c.server_name.clone()),
            Role::Server(s) => s.sni.clone(),
        }
    }
}

impl crypto::Session for HandshakeSession {
    fn initial_keys(&self, dst_cid: &ConnectionId, side: Side) -> Keys {
        let (client, server) = keys::initial_secrets(dst_cid);
        self.shared.lock().ledger.initial = Some(SecretPair { client, server });
        let (local, remote) = if side.is_client() { (&client, &server) } else { (&server, &client) };
        keys::keys(local, remote, &self.shared.auth_failures)
    }

    fn handshake_data(&self) -> Option<Box<dyn Any>> {
        Some(Box::new(HandshakeInfo { shared: self.shared.clone(), server_name: self.server_name() }))
    }

    fn peer_identity(&self) -> Option<Box<dyn Any>> {
        self.shared.peer_certificate().map(|c| Box::new(c) as Box<dyn Any>)
    }

    fn early_crypto(&self) -> Option<(Box<dyn crypto::HeaderKey>, Box<dyn crypto::PacketKey>)> {
        let secret = self.early_traffic?;
        let failures = self.side.is_server().then(|| self.shared.auth_failures.clone());
        Some((Box::new(keys::HeaderKey::from_secret(&secret)), Box::new(keys::PacketKey::from_secret(&secret, failures))))
    }

    fn early_data_accepted(&self) -> Option<bool> {
        match self.shared.early_status() {
            EarlyStatus::Accepted => Some(true),
            EarlyStatus::Rejected => Some(false),
            EarlyStatus::NotOffered | EarlyStatus::Offered => None,
        }
    }

    fn is_handshaking(&self) -> bool {
        self.handshaking
    }

    fn read_handshake(&mut self, buf: &[u8]) -> Result<bool, TransportError> {
        self.inbox.extend_from_slice(buf);
        let mut ready = false;
        while let Some((ty, msg)) = self.next_message() {
            ready |= if self.side.is_client() { self.client_read(ty, msg)? } else { self.server_read(ty, msg)? };
        }
        Ok(ready)
    }

    fn transport_parameters(&self) -> Result<Option<TransportParameters>, TransportError> {
        let bytes = match (&self.peer_params, &self.role) {
            (Some(p), _) => p,
            (None, Role::Client(c)) => match &c.remembered_params {
                Some(p) => p,
                None => return Ok(None),
            },
            (None, Role::Server(_)) => return Ok(None),
        };
        let side = self.side;
        Ok(Some(TransportParameters::read(side, &mut &bytes[..])?))
    }

    fn write_handshake(&mut self, buf: &mut Vec<u8>) -> Option<Keys> {
        if self.side.is_client() {
            self.client_write(buf)
        } else {
            self.server_write(buf)
        }
    }

    fn next_1rtt_keys(&mut self) -> Option<KeyPair<Box<dyn crypto::PacketKey>>> {
        let current = self.next_ap?;
        let next = SecretPair { client: keys::update_secret(&current.client), server: keys::update_secret(&current.server) };
        self.next_ap = Some(next);
        let (local, remote) =
            if self.side.is_client() { (&next.client, &next.server) } else { (&next.server, &next.client) };
        Some(KeyPair {
            local: Box::new(keys::PacketKey::from_secret(local, None)),
            remote: Box::new(keys::PacketKey::from_secret(remote, Some(self.shared.auth_failures.clone()))),
        })
    }

    fn is_valid_retry(&self, orig_dst_cid: &ConnectionId, header: &[u8], payload: &[u8]) -> bool {
        let Some(split) = payload.len().checked_sub(16) else {
            return false;
        };
        let mut packet = header.to_vec();
        packet.extend_from_slice(&payload[..split]);
        let tag = keys::retry_tag(orig_dst_cid, &packet);
        tag.iter().zip(&payload[split..]).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }

    fn export_keying_material(
        &self,
        output: &mut [u8],
        label: &[u8],
        context: &[u8],
    ) -> Result<(), ExportKeyingMaterialError> {
        let exporter = self.exporter.ok_or(ExportKeyingMaterialError)?;
        if output.len() > 255 * 32 || label.len() > 249 || context.len() > 255 {
            return Err(ExportKeyingMaterialError);
        }
        let derived = expand_secret(&exporter, label, &empty_hash());
        keys::expand_label(&derived, b"exporter", &hash(context), output);
        Ok(())
    }
}
