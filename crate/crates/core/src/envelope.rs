//! Sealed, authenticated payloads between sites and the coordinator.
//!
//! The RSA scheme signs the plaintext with the sender's private key
//! (RSA-PSS/SHA-256), then encrypts it under a fresh AES-256-GCM session key
//! that is wrapped for the recipient with RSA-OAEP/SHA-256. The null scheme
//! passes payloads through untouched and exists only for deterministic tests.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rsa::pkcs1::{
    DecodeRsaPrivateKey, DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey,
};
use rsa::rand_core::{OsRng, RngCore};
use rsa::{Oaep, Pss, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Smallest accepted RSA modulus, in bits.
pub const MIN_RSA_BITS: usize = 2048;

const RSA_SCHEME_ID: &str = "rsa-oaep-sha256+aes-256-gcm+rsa-pss-sha256";
const NULL_SCHEME_ID: &str = "null-insecure";
const NONCE_LEN: usize = 12;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("weak parameters: {bits}-bit modulus below minimum {min}")]
    WeakParameters { bits: usize, min: usize },
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("integrity check failed")]
    IntegrityError,
    #[error("signature verification failed")]
    SignatureError,
    #[error("envelope scheme `{found}` does not match `{expected}`")]
    SchemeMismatch { expected: String, found: String },
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
}

pub(crate) mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Distributable half of a key pair, serialized as base64.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "b64")] pub Vec<u8>);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digest = Sha256::digest(&self.0);
        write!(f, "PublicKey(sha256:{})", hex_prefix(&digest))
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Private half of a key pair. Deliberately not serializable.
#[derive(Clone)]
pub struct PrivateKey(Vec<u8>);

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedEnvelope {
    pub sender_id: String,
    pub scheme_id: String,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Rsa,
    /// Identity seal/open with no signature. Provides no security at all.
    Null,
}

impl Scheme {
    pub fn id(self) -> &'static str {
        match self {
            Scheme::Rsa => RSA_SCHEME_ID,
            Scheme::Null => NULL_SCHEME_ID,
        }
    }

    /// Generates a fresh key pair. `bits` is the RSA modulus size; the null
    /// scheme ignores it and returns fixed placeholder keys.
    pub fn generate_keypair(self, bits: usize) -> Result<KeyPair, EnvelopeError> {
        match self {
            Scheme::Null => Ok(KeyPair {
                public: PublicKey(b"null-public".to_vec()),
                private: PrivateKey(b"null-private".to_vec()),
            }),
            Scheme::Rsa => {
                if bits < MIN_RSA_BITS {
                    return Err(EnvelopeError::WeakParameters { bits, min: MIN_RSA_BITS });
                }
                let private = RsaPrivateKey::new(&mut OsRng, bits)
                    .map_err(|e| EnvelopeError::KeyGeneration(e.to_string()))?;
                let public = RsaPublicKey::from(&private);
                Ok(KeyPair {
                    public: PublicKey(
                        public
                            .to_pkcs1_der()
                            .map_err(|e| EnvelopeError::KeyGeneration(e.to_string()))?
                            .into_vec(),
                    ),
                    private: PrivateKey(
                        private
                            .to_pkcs1_der()
                            .map_err(|e| EnvelopeError::KeyGeneration(e.to_string()))?
                            .as_bytes()
                            .to_vec(),
                    ),
                })
            }
        }
    }

    pub fn seal(
        self,
        sender_id: &str,
        payload: &[u8],
        recipient_public: &PublicKey,
        sender_private: &PrivateKey,
    ) -> Result<SealedEnvelope, EnvelopeError> {
        match self {
            Scheme::Null => Ok(SealedEnvelope {
                sender_id: sender_id.to_string(),
                scheme_id: NULL_SCHEME_ID.to_string(),
                ciphertext: payload.to_vec(),
                signature: Vec::new(),
            }),
            Scheme::Rsa => seal_rsa(sender_id, payload, recipient_public, sender_private),
        }
    }

    /// Returns the payload only if it decrypts and the signature verifies
    /// against `sender_public`.
    pub fn open(
        self,
        envelope: &SealedEnvelope,
        recipient_private: &PrivateKey,
        sender_public: &PublicKey,
    ) -> Result<Vec<u8>, EnvelopeError> {
        if envelope.scheme_id != self.id() {
            return Err(EnvelopeError::SchemeMismatch {
                expected: self.id().to_string(),
                found: envelope.scheme_id.clone(),
            });
        }
        match self {
            Scheme::Null => Ok(envelope.ciphertext.clone()),
            Scheme::Rsa => open_rsa(envelope, recipient_private, sender_public),
        }
    }
}

fn parse_public(key: &PublicKey) -> Result<RsaPublicKey, EnvelopeError> {
    RsaPublicKey::from_pkcs1_der(&key.0)
        .map_err(|e| EnvelopeError::KeyMismatch(format!("public key: {e}")))
}

fn parse_private(key: &PrivateKey) -> Result<RsaPrivateKey, EnvelopeError> {
    RsaPrivateKey::from_pkcs1_der(&key.0)
        .map_err(|e| EnvelopeError::KeyMismatch(format!("private key: {e}")))
}

fn aad(sender_id: &str) -> Vec<u8> {
    let mut v = RSA_SCHEME_ID.as_bytes().to_vec();
    v.push(0);
    v.extend_from_slice(sender_id.as_bytes());
    v
}

// ciphertext layout: u16 BE wrapped-key length | wrapped key | nonce | AES-GCM output
fn seal_rsa(
    sender_id: &str,
    payload: &[u8],
    recipient_public: &PublicKey,
    sender_private: &PrivateKey,
) -> Result<SealedEnvelope, EnvelopeError> {
    let recipient = parse_public(recipient_public)?;
    let signer = parse_private(sender_private)?;

    let digest = Sha256::digest(payload);
    let signature = signer
        .sign_with_rng(&mut OsRng, Pss::new::<Sha256>(), &digest)
        .map_err(|e| EnvelopeError::KeyMismatch(format!("signing: {e}")))?;

    let mut session_key = [0u8; 32];
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut session_key);
    OsRng.fill_bytes(&mut nonce);

    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&session_key));
    let body = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload { msg: payload, aad: &aad(sender_id) },
        )
        .map_err(|_| EnvelopeError::IntegrityError)?;
    let wrapped = recipient
        .encrypt(&mut OsRng, Oaep::new::<Sha256>(), &session_key)
        .map_err(|e| EnvelopeError::KeyMismatch(format!("key wrap: {e}")))?;

    let mut ciphertext = Vec::with_capacity(2 + wrapped.len() + NONCE_LEN + body.len());
    ciphertext.extend_from_slice(&(wrapped.len() as u16).to_be_bytes());
    ciphertext.extend_from_slice(&wrapped);
    ciphertext.extend_from_slice(&nonce);
    ciphertext.extend_from_slice(&body);

    Ok(SealedEnvelope {
        sender_id: sender_id.to_string(),
        scheme_id: RSA_SCHEME_ID.to_string(),
        ciphertext,
        signature,
    })
}

fn open_rsa(
    envelope: &SealedEnvelope,
    recipient_private: &PrivateKey,
    sender_public: &PublicKey,
) -> Result<Vec<u8>, EnvelopeError> {
    let recipient = parse_private(recipient_private)?;
    let sender = parse_public(sender_public)?;

    let ct = &envelope.ciphertext;
    if ct.len() < 2 {
        return Err(EnvelopeError::IntegrityError);
    }
    let wrapped_len = u16::from_be_bytes([ct[0], ct[1]]) as usize;
    let body_start = 2 + wrapped_len + NONCE_LEN;
    if ct.len() < body_start {
        return Err(EnvelopeError::IntegrityError);
    }
    let wrapped = &ct[2..2 + wrapped_len];
    let nonce = &ct[2 + wrapped_len..body_start];

    let session_key = recipient
        .decrypt(Oaep::new::<Sha256>(), wrapped)
        .map_err(|_| EnvelopeError::IntegrityError)?;
    if session_key.len() != 32 {
        return Err(EnvelopeError::IntegrityError);
    }
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&session_key));
    let payload = cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload { msg: &ct[body_start..], aad: &aad(&envelope.sender_id) },
        )
        .map_err(|_| EnvelopeError::IntegrityError)?;

    let digest = Sha256::digest(&payload);
    sender
        .verify(Pss::new::<Sha256>(), &digest, &envelope.signature)
        .map_err(|_| EnvelopeError::SignatureError)?;
    Ok(payload)
}
