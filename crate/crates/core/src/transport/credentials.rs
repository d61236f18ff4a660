//! Server certificate and signing key loading.

use std::path::Path;

use ring::rand::SystemRandom;
use ring::signature::{self, EcdsaKeyPair, Ed25519KeyPair, KeyPair};
use rustls_pki_types::pem::PemObject;
use rustls_pki_types::{CertificateDer, PrivateKeyDer};

const DEMO_KEY: &[u8] = include_bytes!("../../certs/server.key");
const DEMO_CERT: &[u8] = include_bytes!("../../certs/server.crt");

pub const SCHEME_ECDSA_P256_SHA256: u16 = 0x0403;
pub const SCHEME_ED25519: u16 = 0x0807;

#[derive(Debug, thiserror::Error)]
pub enum CredentialError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no PEM certificate found: {0}")]
    Certificate(String),
    #[error("no PEM private key found: {0}")]
    Key(String),
    #[error("private key must be PKCS#8 (ECDSA P-256 or Ed25519)")]
    UnsupportedKey,
    #[error("private key does not match certificate")]
    Mismatch,
}

pub(crate) enum Signer {
    Ecdsa(EcdsaKeyPair),
    Ed25519(Ed25519KeyPair),
}

impl Signer {
    pub(crate) fn scheme(&self) -> u16 {
        match self {
            Signer::Ecdsa(_) => SCHEME_ECDSA_P256_SHA256,
            Signer::Ed25519(_) => SCHEME_ED25519,
        }
    }

    pub(crate) fn sign(&self, msg: &[u8]) -> Vec<u8> {
        match self {
            Signer::Ecdsa(k) => k.sign(&SystemRandom::new(), msg).expect("ECDSA signing").as_ref().to_vec(),
            Signer::Ed25519(k) => k.sign(msg).as_ref().to_vec(),
        }
    }
}

/// A server certificate plus the PKCS#8 key that signs for it.
pub struct ServerCredentials {
    pub(crate) cert: CertificateDer<'static>,
    pub(crate) signer: Signer,
    pub(crate) key_der: Vec<u8>,
}

impl std::fmt::Debug for ServerCredentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerCredentials").field("cert_len", &self.cert.len()).finish_non_exhaustive()
    }
}

impl ServerCredentials {
    pub fn from_pem_files(key: &Path, cert: &Path) -> Result<Self, CredentialError> {
        let read = |p: &Path| {
            std::fs::read(p).map_err(|source| CredentialError::Io { path: p.display().to_string(), source })
        };
        Self::from_pem(&read(key)?, &read(cert)?)
    }

    pub fn from_pem(key_pem: &[u8], cert_pem: &[u8]) -> Result<Self, CredentialError> {
        let cert = CertificateDer::from_pem_slice(cert_pem).map_err(|e| CredentialError::Certificate(e.to_string()))?;
        let key = PrivateKeyDer::from_pem_slice(key_pem).map_err(|e| CredentialError::Key(e.to_string()))?;
        let PrivateKeyDer::Pkcs8(pkcs8) = key else {
            return Err(CredentialError::UnsupportedKey);
        };
        let der = pkcs8.secret_pkcs8_der().to_vec();
        let signer = if let Ok(k) =
            EcdsaKeyPair::from_pkcs8(&signature::ECDSA_P256_SHA256_ASN1_SIGNING, &der, &SystemRandom::new())
        {
            Signer::Ecdsa(k)
        } else if let Ok(k) = Ed25519KeyPair::from_pkcs8_maybe_unchecked(&der) {
            Signer::Ed25519(k)
        } else {
            return Err(CredentialError::UnsupportedKey);
        };
        let creds = Self { cert, signer, key_der: der };
        let probe = b"credential check";
        let sig = creds.signer.sign(probe);
        if !verify_cert_signature(&creds.cert, creds.signer.scheme(), probe, &sig) {
            return Err(CredentialError::Mismatch);
        }
        Ok(creds)
    }

    /// Self-signed demo credentials for `controller.quicsb.test`, `localhost` and 127.0.0.1.
    pub fn demo() -> Self {
        Self::from_pem(DEMO_KEY, DEMO_CERT).expect("bundled demo credentials are valid")
    }

    pub fn certificate_der(&self) -> &[u8] {
        &self.cert
    }

    pub fn public_key(&self) -> Vec<u8> {
        match &self.signer {
            Signer::Ecdsa(k) => k.public_key().as_ref().to_vec(),
            Signer::Ed25519(k) => k.public_key().as_ref().to_vec(),
        }
    }
}

/// The bundled demo certificate, for clients that pin it.
pub fn demo_certificate() -> Vec<u8> {
    CertificateDer::from_pem_slice(DEMO_CERT).expect("bundled demo certificate").to_vec()
}

pub(crate) fn verify_cert_signature(cert: &[u8], scheme: u16, msg: &[u8], sig: &[u8]) -> bool {
    let der = CertificateDer::from(cert);
    let Ok(ee) = webpki::EndEntityCert::try_from(&der) else {
        return false;
    };
    let alg: &dyn rustls_pki_types::SignatureVerificationAlgorithm = match scheme {
        SCHEME_ECDSA_P256_SHA256 => webpki::ring::ECDSA_P256_SHA256,
        SCHEME_ED25519 => webpki::ring::ED25519,
        _ => return false,
    };
    ee.verify_signature(alg, msg, sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_credentials_load_and_sign() {
        let c = ServerCredentials::demo();
        assert_eq!(c.signer.scheme(), SCHEME_ECDSA_P256_SHA256);
        let sig = c.signer.sign(b"hello");
        assert!(verify_cert_signature(c.certificate_der(), SCHEME_ECDSA_P256_SHA256, b"hello", &sig));
        assert!(!verify_cert_signature(c.certificate_der(), SCHEME_ECDSA_P256_SHA256, b"hellp", &sig));
    }

    #[test]
    fn ed25519_pair_loads() {
        let key = include_bytes!("../../certs/other.key");
        let cert = include_bytes!("../../certs/other.crt");
        let c = ServerCredentials::from_pem(key, cert).unwrap();
        assert_eq!(c.signer.scheme(), SCHEME_ED25519);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let other_cert = include_bytes!("../../certs/other.crt");
        assert!(matches!(ServerCredentials::from_pem(DEMO_KEY, other_cert), Err(CredentialError::Mismatch)));
    }

    #[test]
    fn missing_files_and_garbage_rejected() {
        let missing = Path::new("/nonexistent/key.pem");
        assert!(matches!(ServerCredentials::from_pem_files(missing, missing), Err(CredentialError::Io { .. })));
        assert!(ServerCredentials::from_pem(b"junk", DEMO_CERT).is_err());
        assert!(ServerCredentials::from_pem(DEMO_KEY, b"junk").is_err());
    }
}
