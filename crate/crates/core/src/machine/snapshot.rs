// SPDX-License-Identifier: Apache-2.0

//! Versioned JSON snapshot of a machine's architectural state.
//!
//! Keys are never written out. A snapshot carries a fingerprint of them and
//! only restores into a machine built with the same keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EnclaveHandle, Machine, PageTable, RegFile, SpaceId};
use crate::crypto;
use crate::csr::CsrFile;
use crate::mee::{LineIndex, MemLine};
use crate::tweak::{Prv, TweakLayout};

pub const SNAPSHOT_FORMAT: &str = "servas-machine";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("not a machine snapshot (format {0:?})")]
    Format(String),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("snapshot was taken on a machine with different keys")]
    KeyMismatch,
    #[error("snapshot layout {0} VA bits does not match machine layout {1}")]
    Layout(u32, u32),
    #[error("malformed snapshot: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSnapshot {
    pub format: String,
    pub version: u32,
    pub key_fingerprint: String,
    pub layout: TweakLayout,
    pub prv: Prv,
    pub regs: RegFile,
    pub csr: CsrFile,
    pub bypass: bool,
    pub active_enclave: Option<EnclaveHandle>,
    pub ticks: u64,
    pub spaces: BTreeMap<SpaceId, PageTable>,
    pub memory: BTreeMap<LineIndex, MemLine>,
    /// Position of the hardware random stream, in 32-bit words.
    pub trng_word_pos: u128,
}

fn fingerprint(m: &Machine) -> String {
    let c = &m.config;
    let h = crypto::hash256(&[b"snapshot-fingerprint", &c.mee_key, &c.cpu_key]);
    hex::encode(&h[..8])
}

impl MachineSnapshot {
    pub(super) fn capture(m: &Machine) -> Self {
        MachineSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            key_fingerprint: fingerprint(m),
            layout: m.layout(),
            prv: m.prv,
            regs: m.regs,
            csr: m.csr.clone(),
            bypass: m.bypass,
            active_enclave: m.active_enclave,
            ticks: m.ticks,
            spaces: m.spaces.clone(),
            memory: m.mee.lines().map(|(k, v)| (*k, *v)).collect(),
            trng_word_pos: m.trng.get_word_pos(),
        }
    }

    pub(super) fn apply(&self, m: &mut Machine) -> Result<(), SnapshotError> {
        if self.format != SNAPSHOT_FORMAT {
            return Err(SnapshotError::Format(self.format.clone()));
        }
        if self.version != SNAPSHOT_VERSION {
            return Err(SnapshotError::Version(self.version));
        }
        if self.key_fingerprint != fingerprint(m) {
            return Err(SnapshotError::KeyMismatch);
        }
        if self.layout != m.layout() {
            return Err(SnapshotError::Layout(self.layout.va_bits(), m.layout().va_bits()));
        }
        m.prv = self.prv;
        m.regs = self.regs;
        m.csr = self.csr.clone();
        m.bypass = self.bypass;
        m.active_enclave = self.active_enclave;
        m.ticks = self.ticks;
        m.spaces = self.spaces.clone();
        m.mee.load_lines(self.memory.clone());
        m.trng.set_word_pos(self.trng_word_pos);
        if let Some(c) = m.cache.as_mut() {
            c.flush();
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SnapshotError> {
        serde_json::from_str(s).map_err(|e| SnapshotError::Json(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{MachineConfig, Pte};
    use super::*;
    use crate::tweak::{Perms, Rsw};

    #[test]
    fn json_round_trip_restores_memory() {
        let mut m = Machine::new(MachineConfig::from_seed(4));
        m.map_page(Prv::S, 1, 0x1000, Pte::new(2, Perms::R | Perms::W, Rsw::NONE)).unwrap();
        m.store(1, 0x1000, b"before", Prv::S).unwrap();
        let snap = MachineSnapshot::from_json(&m.snapshot().to_json()).unwrap();
        m.store(1, 0x1000, b"after!", Prv::S).unwrap();
        m.restore(&snap).unwrap();
        assert_eq!(m.load(1, 0x1000, 6, Prv::S).unwrap(), b"before");
    }

    #[test]
    fn foreign_keys_rejected() {
        let a = Machine::new(MachineConfig::from_seed(4));
        let mut b = Machine::new(MachineConfig::from_seed(5));
        assert_eq!(b.restore(&a.snapshot()), Err(SnapshotError::KeyMismatch));
        let mut s = a.snapshot();
        s.version = 9;
        assert_eq!(b.restore(&s), Err(SnapshotError::Version(9)));
    }
}
