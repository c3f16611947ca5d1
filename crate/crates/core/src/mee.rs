// SPDX-License-Identifier: Apache-2.0

//! Line-granular authenticated memory encryption with replay counters.
//!
//! Each 64-byte line is sealed with the AEAD under the full tweak (counter
//! plus software tweak) as associated data and a nonce derived from the line
//! index and counter. Counters live in a trusted map standing in for the
//! integrity tree; ciphertext and tags live in "DRAM" and are exposed to the
//! physical attacker through [`Mee::raw`], [`Mee::restore_raw`] and
//! [`Mee::flip_bit`].
//!
//! A line whose counter is still zero has never been written. Boot-time
//! scrubbing makes such lines read as zeros, but only for unprotected tweaks
//! (empty xrange bitmap); every protected access to them fails.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Ascon128, Key, LineAead, Nonce, Tag, TAG_BYTES};
use crate::tweak::{FullTweak, SwTweak, TweakLayout, COUNTER_BITS, LINE_BYTES};

pub type LineData = [u8; LINE_BYTES];

/// Physical line number (physical address >> 6).
pub type LineIndex = u64;

pub const COUNTER_LIMIT: u64 = 1 << COUNTER_BITS;

/// Per-machine memory encryption key.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeeKey(pub Key);

impl std::fmt::Debug for MeeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MeeKey(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemLine {
    #[serde(with = "hex_bytes")]
    pub ciphertext: LineData,
    pub tag: Tag,
    pub counter: u64,
}

impl Default for MemLine {
    fn default() -> Self {
        MemLine {
            ciphertext: [0; LINE_BYTES],
            tag: [0; TAG_BYTES],
            counter: 0,
        }
    }
}

/// What a physical attacker can copy out of DRAM: everything but the counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLine {
    #[serde(with = "hex_bytes")]
    pub ciphertext: LineData,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MeeError {
    #[error("authentication failed on line {0:#x}")]
    Authentication(LineIndex),
    #[error("integrity counter of line {0:#x} exhausted")]
    CounterOverflow(LineIndex),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineState {
    /// Never written since boot.
    Blank,
    Initialized,
    Destroyed,
}

pub struct Mee {
    key: MeeKey,
    layout: TweakLayout,
    aead: Box<dyn LineAead>,
    lines: BTreeMap<LineIndex, MemLine>,
}

impl std::fmt::Debug for Mee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mee")
            .field("aead", &self.aead.name())
            .field("lines", &self.lines.len())
            .finish()
    }
}

impl Mee {
    pub fn new(key: MeeKey, layout: TweakLayout) -> Self {
        Self::with_aead(key, layout, Box::new(Ascon128))
    }

    pub fn with_aead(key: MeeKey, layout: TweakLayout, aead: Box<dyn LineAead>) -> Self {
        Mee {
            key,
            layout,
            aead,
            lines: BTreeMap::new(),
        }
    }

    pub fn layout(&self) -> TweakLayout {
        self.layout
    }

    /// Nonce for one (line, counter) pair: the first 16 bytes of
    /// `Hash(line || counter)`.
    pub fn nonce(line: LineIndex, counter: u64) -> Nonce {
        let h = crypto::hash256(&[b"mee-nonce", &line.to_le_bytes(), &counter.to_le_bytes()]);
        let mut n = [0u8; 16];
        n.copy_from_slice(&h[..16]);
        n
    }

    pub fn write(&mut self, line: LineIndex, plaintext: &LineData, sw: &SwTweak) -> Result<(), MeeError> {
        let entry = self.lines.entry(line).or_default();
        let counter = entry.counter + 1;
        if counter >= COUNTER_LIMIT {
            return Err(MeeError::CounterOverflow(line));
        }
        let ad = FullTweak { counter, sw: *sw }.to_bytes(self.layout);
        let mut buf = *plaintext;
        let tag = self
            .aead
            .seal(&self.key.0, &Self::nonce(line, counter), &ad, &mut buf);
        *entry = MemLine {
            ciphertext: buf,
            tag,
            counter,
        };
        Ok(())
    }

    pub fn read(&self, line: LineIndex, sw: &SwTweak) -> Result<LineData, MeeError> {
        let Some(stored) = self.lines.get(&line).filter(|l| l.counter > 0) else {
            return if sw.xrange == 0 {
                Ok([0; LINE_BYTES])
            } else {
                Err(MeeError::Authentication(line))
            };
        };
        let ad = FullTweak {
            counter: stored.counter,
            sw: *sw,
        }
        .to_bytes(self.layout);
        let mut buf = stored.ciphertext;
        self.aead
            .open(&self.key.0, &Self::nonce(line, stored.counter), &ad, &mut buf, &stored.tag)
            .map_err(|_| MeeError::Authentication(line))?;
        Ok(buf)
    }

    /// Re-tags the line under the reserved destroy tweak. Counts as a write.
    pub fn destroy(&mut self, line: LineIndex) -> Result<(), MeeError> {
        self.write(line, &[0; LINE_BYTES], &SwTweak::DESTROYED)
    }

    pub fn counter_of(&self, line: LineIndex) -> u64 {
        self.lines.get(&line).map_or(0, |l| l.counter)
    }

    pub fn state_of(&self, line: LineIndex) -> LineState {
        match self.lines.get(&line) {
            None => LineState::Blank,
            Some(l) if l.counter == 0 => LineState::Blank,
            Some(_) if self.read(line, &SwTweak::DESTROYED).is_ok() => LineState::Destroyed,
            Some(_) => LineState::Initialized,
        }
    }

    /// Unauthenticated store used by the encryption bypass. The counter does
    /// not move, so the stale tag no longer matches and any later protected
    /// read of the line fails.
    pub fn write_plain(&mut self, line: LineIndex, data: &LineData) {
        self.lines.entry(line).or_default().ciphertext = *data;
    }

    pub fn read_plain(&self, line: LineIndex) -> LineData {
        self.lines.get(&line).map_or([0; LINE_BYTES], |l| l.ciphertext)
    }

    pub fn raw(&self, line: LineIndex) -> RawLine {
        let l = self.lines.get(&line).copied().unwrap_or_default();
        RawLine {
            ciphertext: l.ciphertext,
            tag: l.tag,
        }
    }

    /// Overwrites ciphertext and tag, leaving the trusted counter alone.
    pub fn restore_raw(&mut self, line: LineIndex, raw: &RawLine) {
        let l = self.lines.entry(line).or_default();
        l.ciphertext = raw.ciphertext;
        l.tag = raw.tag;
    }

    /// Flips one stored bit: 0..512 address the ciphertext, 512..640 the tag.
    pub fn flip_bit(&mut self, line: LineIndex, bit: usize) {
        let l = self.lines.entry(line).or_default();
        let (bytes, bit): (&mut [u8], usize) = if bit < LINE_BYTES * 8 {
            (&mut l.ciphertext, bit)
        } else {
            (&mut l.tag, bit - LINE_BYTES * 8)
        };
        bytes[bit / 8] ^= 1 << (bit % 8);
    }

    pub fn lines(&self) -> impl Iterator<Item = (&LineIndex, &MemLine)> {
        self.lines.iter()
    }

    pub(crate) fn load_lines(&mut self, lines: BTreeMap<LineIndex, MemLine>) {
        self.lines = lines;
    }

    #[cfg(test)]
    pub(crate) fn force_counter(&mut self, line: LineIndex, counter: u64) {
        self.lines.entry(line).or_default().counter = counter;
    }
}

pub(crate) mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(b: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(D::Error::custom)?;
        v.try_into().map_err(|_| D::Error::custom("wrong byte length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tweak::{Perms, Prv, Rsw, Sid};

    fn mee() -> Mee {
        Mee::new(MeeKey([0x42; 16]), TweakLayout::SV48)
    }

    fn regular(voffset: u64) -> SwTweak {
        SwTweak::new(0b100, voffset, Prv::U, Perms::U | Perms::R | Perms::W, Rsw::SID0, Sid::new(7))
    }

    #[test]
    fn first_write_sets_counter_to_one() {
        let mut m = mee();
        assert_eq!(m.counter_of(0), 0);
        m.write(0, &[0; 64], &regular(0)).unwrap();
        assert_eq!(m.counter_of(0), 1);
        assert_eq!(m.state_of(0), LineState::Initialized);
    }

    #[test]
    fn round_trip() {
        let mut m = mee();
        let data = [0xab; 64];
        m.write(5, &data, &regular(3)).unwrap();
        assert_eq!(m.read(5, &regular(3)), Ok(data));
        assert_eq!(m.read(5, &regular(4)), Err(MeeError::Authentication(5)));
    }

    #[test]
    fn destroy_semantics() {
        let mut m = mee();
        m.write(1, &[1; 64], &regular(0)).unwrap();
        m.destroy(1).unwrap();
        assert_eq!(m.counter_of(1), 2);
        assert_eq!(m.state_of(1), LineState::Destroyed);
        assert!(m.read(1, &regular(0)).is_err());
        m.destroy(1).unwrap();
        assert_eq!(m.state_of(1), LineState::Destroyed);
        m.write(1, &[9; 64], &regular(0)).unwrap();
        assert_eq!(m.read(1, &regular(0)), Ok([9; 64]));
    }

    #[test]
    fn blank_lines_are_unprotected_zeros() {
        let m = mee();
        let unprot = SwTweak::new(0, 0x40, Prv::S, Perms::R | Perms::W, Rsw::NONE, Sid::ZERO);
        assert_eq!(m.read(9, &unprot), Ok([0; 64]));
        assert!(m.read(9, &regular(0)).is_err());
        assert_eq!(m.state_of(9), LineState::Blank);
    }

    #[test]
    fn counter_overflow_is_an_error() {
        let mut m = mee();
        m.force_counter(3, COUNTER_LIMIT - 2);
        m.write(3, &[0; 64], &regular(0)).unwrap();
        assert_eq!(m.counter_of(3), COUNTER_LIMIT - 1);
        assert_eq!(
            m.write(3, &[0; 64], &regular(0)),
            Err(MeeError::CounterOverflow(3))
        );
        assert_eq!(m.counter_of(3), COUNTER_LIMIT - 1);
    }

    #[test]
    fn plain_write_invalidates_tag() {
        let mut m = mee();
        m.write(2, &[1; 64], &regular(0)).unwrap();
        m.write_plain(2, &[5; 64]);
        assert_eq!(m.read_plain(2), [5; 64]);
        assert_eq!(m.counter_of(2), 1);
        assert!(m.read(2, &regular(0)).is_err());
    }

    #[test]
    fn tag_bit_flip_detected() {
        let mut m = mee();
        m.write(0, &[3; 64], &regular(0)).unwrap();
        m.flip_bit(0, 512 + 17);
        assert!(m.read(0, &regular(0)).is_err());
        m.flip_bit(0, 512 + 17);
        assert!(m.read(0, &regular(0)).is_ok());
    }
}
