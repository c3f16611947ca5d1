// SPDX-License-Identifier: Apache-2.0

//! Symmetric primitives shared by the memory encryption engine and the
//! security monitor.
//!
//! Everything is drawn from the Ascon family: Ascon-AEAD128 for line and page
//! sealing, Ascon-Hash256 for image identities and keyed derivations. The
//! engine only talks to the [`LineAead`] trait, so another 128-bit-key,
//! 128-bit-tag AEAD can be dropped in without touching the callers.

use ascon_aead::aead::{AeadInOut, KeyInit};
use ascon_aead::{AsconAead128, AsconAead128Key, AsconAead128Nonce, AsconAead128Tag};
use ascon_hash::{AsconHash256, Digest};

pub const KEY_BYTES: usize = 16;
pub const NONCE_BYTES: usize = 16;
pub const TAG_BYTES: usize = 16;

pub type Key = [u8; KEY_BYTES];
pub type Nonce = [u8; NONCE_BYTES];
pub type Tag = [u8; TAG_BYTES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authentication tag mismatch")]
pub struct TagMismatch;

/// Detached-tag AEAD over caller-owned buffers.
pub trait LineAead: Send + Sync {
    fn name(&self) -> &'static str;

    /// Encrypts `buf` in place and returns the tag.
    fn seal(&self, key: &Key, nonce: &Nonce, ad: &[u8], buf: &mut [u8]) -> Tag;

    /// Verifies `tag` and decrypts `buf` in place. On failure `buf` is left
    /// in an unspecified state and must be discarded.
    fn open(
        &self,
        key: &Key,
        nonce: &Nonce,
        ad: &[u8],
        buf: &mut [u8],
        tag: &Tag,
    ) -> Result<(), TagMismatch>;
}

/// Ascon-AEAD128 (NIST SP 800-232).
#[derive(Debug, Default, Clone, Copy)]
pub struct Ascon128;

impl LineAead for Ascon128 {
    fn name(&self) -> &'static str {
        "ascon-aead128"
    }

    fn seal(&self, key: &Key, nonce: &Nonce, ad: &[u8], buf: &mut [u8]) -> Tag {
        let cipher = AsconAead128::new(&AsconAead128Key::from(*key));
        let tag = cipher
            .encrypt_inout_detached(&AsconAead128Nonce::from(*nonce), ad, buf.into())
            .expect("ascon input lengths are bounded by the simulator");
        tag.into()
    }

    fn open(
        &self,
        key: &Key,
        nonce: &Nonce,
        ad: &[u8],
        buf: &mut [u8],
        tag: &Tag,
    ) -> Result<(), TagMismatch> {
        let cipher = AsconAead128::new(&AsconAead128Key::from(*key));
        cipher
            .decrypt_inout_detached(
                &AsconAead128Nonce::from(*nonce),
                ad,
                buf.into(),
                &AsconAead128Tag::from(*tag),
            )
            .map_err(|_| TagMismatch)
    }
}

/// Ascon-Hash256 over length-prefixed parts, so `["ab", "c"]` and
/// `["a", "bc"]` never collide.
pub fn hash256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = AsconHash256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.finalize().into()
}

/// Keyed derivation: `Hash(key || label || input)`. The sponge construction
/// makes the prefix-keyed hash a PRF, so no HMAC wrapper is needed.
pub fn kdf(key: &Key, label: &str, input: &[u8]) -> [u8; 32] {
    hash256(&[b"servas-kdf-v1", key, label.as_bytes(), input])
}

/// First 16 bytes of [`kdf`], for use as an AEAD key.
pub fn kdf_key(key: &Key, label: &str, input: &[u8]) -> Key {
    let full = kdf(key, label, input);
    let mut out = [0u8; KEY_BYTES];
    out.copy_from_slice(&full[..KEY_BYTES]);
    out
}
