//! Persisted resumption state.
//!
//! File layout (big-endian):
//!
//! ```text
//! "QSB1" | version u8 | issued_at u64 (unix seconds)
//!        | u16 len server_name | u32 len ticket_bytes
//!        | u32 len transport_params | u16 len secret
//! ```

use std::io;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub const SESSION_MAGIC: &[u8; 4] = b"QSB1";
pub const SESSION_VERSION: u8 = 1;
pub const DEFAULT_SESSION_FILE: &str = "./quicsb-session.bin";

#[derive(Clone, PartialEq, Eq)]
pub struct SessionTicket {
    pub server_name: String,
    /// Server-sealed ticket, opaque to the client.
    pub ticket_bytes: Vec<u8>,
    /// Server transport parameters remembered for 0-RTT.
    pub transport_params: Vec<u8>,
    pub issued_at: SystemTime,
    /// Resumption secret bound to the ticket.
    pub secret: Vec<u8>,
}

impl std::fmt::Debug for SessionTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionTicket")
            .field("server_name", &self.server_name)
            .field("ticket_bytes", &self.ticket_bytes.len())
            .field("transport_params", &self.transport_params.len())
            .field("issued_at", &self.issued_at)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionFileError {
    #[error("session file I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bad session file magic")]
    BadMagic,
    #[error("unsupported session file version {0}")]
    Version(u8),
    #[error("session file truncated")]
    Truncated,
    #[error("session file field too large")]
    TooLarge,
    #[error("session file has trailing bytes")]
    Trailing,
    #[error("server name is not UTF-8")]
    BadName,
}

impl SessionTicket {
    pub fn encode(&self) -> Result<Vec<u8>, SessionFileError> {
        let issued = self.issued_at.duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
        let mut out = Vec::with_capacity(32 + self.ticket_bytes.len() + self.transport_params.len());
        out.extend_from_slice(SESSION_MAGIC);
        out.push(SESSION_VERSION);
        out.extend_from_slice(&issued.to_be_bytes());
        put_field(&mut out, self.server_name.as_bytes(), 2)?;
        put_field(&mut out, &self.ticket_bytes, 4)?;
        put_field(&mut out, &self.transport_params, 4)?;
        put_field(&mut out, &self.secret, 2)?;
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, SessionFileError> {
        let mut r = Reader(buf);
        if r.take(4)? != SESSION_MAGIC {
            return Err(SessionFileError::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != SESSION_VERSION {
            return Err(SessionFileError::Version(version));
        }
        let issued = u64::from_be_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let server_name = String::from_utf8(r.field(2)?.to_vec()).map_err(|_| SessionFileError::BadName)?;
        let ticket_bytes = r.field(4)?.to_vec();
        let transport_params = r.field(4)?.to_vec();
        let secret = r.field(2)?.to_vec();
        if !r.0.is_empty() {
            return Err(SessionFileError::Trailing);
        }
        Ok(Self {
            server_name,
            ticket_bytes,
            transport_params,
            issued_at: UNIX_EPOCH + Duration::from_secs(issued),
            secret,
        })
    }

    /// Writes via a temporary file and rename so readers never see a torn file.
    pub fn save(&self, path: &Path) -> Result<(), SessionFileError> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SessionFileError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Absent or unreadable files yield `None`; the caller takes the 1-RTT path.
    pub fn load_optional(path: &Path) -> Option<Self> {
        match Self::load(path) {
            Ok(t) => Some(t),
            Err(SessionFileError::Io(e)) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring session file");
                None
            }
        }
    }
}

fn put_field(out: &mut Vec<u8>, data: &[u8], width: usize) -> Result<(), SessionFileError> {
    let max = if width == 2 { u64::from(u16::MAX) } else { u64::from(u32::MAX) };
    if data.len() as u64 > max {
        return Err(SessionFileError::TooLarge);
    }
    let len = (data.len() as u32).to_be_bytes();
    out.extend_from_slice(&len[4 - width..]);
    out.extend_from_slice(data);
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SessionFileError> {
        if self.0.len() < n {
            return Err(SessionFileError::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn field(&mut self, width: usize) -> Result<&'a [u8], SessionFileError> {
        let raw = self.take(width)?;
        let len = raw.iter().fold(0usize, |acc, &b| (acc << 8) | usize::from(b));
        self.take(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SessionTicket {
        SessionTicket {
            server_name: "controller".into(),
            ticket_bytes: vec![1, 2, 3],
            transport_params: vec![4, 5],
            issued_at: UNIX_EPOCH + Duration::from_secs(1_700_000_000),
            secret: vec![9; 32],
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        sample().save(&path).unwrap();
        assert_eq!(SessionTicket::load(&path).unwrap(), sample());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"QSB1");
    }

    #[test]
    fn absent_or_corrupt_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.bin");
        assert!(SessionTicket::load_optional(&path).is_none());
        std::fs::write(&path, b"QSB1garbage").unwrap();
        assert!(SessionTicket::load_optional(&path).is_none());
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(SessionTicket::load(&path), Err(SessionFileError::BadMagic)));
    }

    proptest! {
        #[test]
        fn encode_decode_lossless(name in "[a-z.]{0,40}", t in proptest::collection::vec(any::<u8>(), 0..300),
                                  p in proptest::collection::vec(any::<u8>(), 0..300), secs in 0u64..4_000_000_000,
                                  s in proptest::collection::vec(any::<u8>(), 0..64)) {
            let ticket = SessionTicket { server_name: name, ticket_bytes: t, transport_params: p,
                issued_at: UNIX_EPOCH + Duration::from_secs(secs), secret: s };
            prop_assert_eq!(SessionTicket::decode(&ticket.encode().unwrap()).unwrap(), ticket);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = SessionTicket::decode(&bytes);
            let mut framed = b"QSB1\x01".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = SessionTicket::decode(&framed);
        }
    }
}
