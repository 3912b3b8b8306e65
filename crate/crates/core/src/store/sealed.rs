//! Sealed replica state.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LLDS"
//! 4       1     format version (1)
//! 5       8     embedded counter count
//! 13      12    nonce
//! 25      n     ciphertext
//! 25+n    16    Poly1305 tag
//! ```
//!
//! The 25-byte header is bound to the ciphertext as associated data, so the
//! embedded count cannot be edited without failing authentication.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use sha2::{Digest as _, Sha256};

use super::{ReplicaState, StoreError};

pub const MAGIC: [u8; 4] = *b"LLDS";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 8 + 12;
pub const TAG_LEN: usize = 16;

/// Symmetric sealing key of one replica.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SealingKey([u8; 32]);

impl std::fmt::Debug for SealingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SealingKey(..)")
    }
}

impl SealingKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SealingKey(bytes)
    }

    /// Derives a per-replica key from provisioned material.
    pub fn derive(material: &[u8], replica: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"lld-sealing-key");
        h.update(material);
        h.update(replica.to_le_bytes());
        SealingKey(h.finalize().into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SealedState {
    pub embedded_count: u64,
    pub nonce: [u8; 12],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
}

/// How an open succeeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenStatus {
    Clean,
    /// The file is one version ahead of the device: the replica crashed
    /// after persisting a write but before bumping the counter.
    TornWrite,
}

fn header(count: u64, nonce: &[u8; 12]) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = FORMAT_VERSION;
    h[5..13].copy_from_slice(&count.to_le_bytes());
    h[13..25].copy_from_slice(nonce);
    h
}

impl SealedState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&header(self.embedded_count, &self.nonce));
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SealedState, StoreError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(StoreError::IntegrityViolation("sealed file truncated".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(StoreError::IntegrityViolation("bad magic".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(StoreError::IntegrityViolation(format!(
                "unsupported format version {}",
                bytes[4]
            )));
        }
        let embedded_count = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let nonce: [u8; 12] = bytes[13..25].try_into().expect("12 bytes");
        Ok(SealedState {
            embedded_count,
            nonce,
            ciphertext: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// Encrypts and authenticates `replica` with `count` embedded in the header.
pub fn seal(replica: &ReplicaState, count: u64, key: &SealingKey, nonce: [u8; 12]) -> SealedState {
    let plaintext = serde_json::to_vec(replica).expect("replica state serializes");
    let aad = header(count, &nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &plaintext,
                aad: &aad,
            },
        )
        .expect("encryption of in-memory buffer");
    SealedState {
        embedded_count: count,
        nonce,
        ciphertext,
    }
}

/// Authenticates and decrypts, then checks the embedded count against the
/// device count. Equal counts open cleanly; a file exactly one ahead is a
/// torn write; anything else is a rollback.
pub fn open(
    sealed: &SealedState,
    device_count: u64,
    key: &SealingKey,
) -> Result<(ReplicaState, OpenStatus), StoreError> {
    let aad = header(sealed.embedded_count, &sealed.nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let plaintext = cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &sealed.ciphertext,
                aad: &aad,
            },
        )
        .map_err(|_| StoreError::IntegrityViolation("authentication tag mismatch".into()))?;
    let state: ReplicaState = serde_json::from_slice(&plaintext)
        .map_err(|e| StoreError::IntegrityViolation(format!("corrupt payload: {e}")))?;
    let status = if sealed.embedded_count == device_count {
        OpenStatus::Clean
    } else if sealed.embedded_count == device_count + 1 {
        OpenStatus::TornWrite
    } else {
        return Err(StoreError::RollbackDetected {
            sealed: sealed.embedded_count,
            device: device_count,
        });
    };
    Ok((state, status))
}
