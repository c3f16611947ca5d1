// SPDX-License-Identifier: Apache-2.0

//! Tweak-related control and status registers.

use serde::{Deserialize, Serialize};

use crate::tweak::{Prv, TweakOverride, LINE_BYTES};

/// One xRANGE register: a line-aligned virtual address window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeReg {
    pub base: u64,
    pub size: u64,
    pub enabled: bool,
}

impl RangeReg {
    pub const DISABLED: RangeReg = RangeReg {
        base: 0,
        size: 0,
        enabled: false,
    };

    pub fn new(base: u64, size: u64) -> Self {
        RangeReg {
            base,
            size,
            enabled: true,
        }
    }

    pub fn contains(&self, va: u64) -> bool {
        self.enabled && va >= self.base && va - self.base < self.size
    }

    pub fn end(&self) -> u64 {
        self.base.saturating_add(self.size)
    }

    pub fn is_line_aligned(&self) -> bool {
        self.base.is_multiple_of(LINE_BYTES as u64) && self.size.is_multiple_of(LINE_BYTES as u64)
    }
}

/// Which of the two SID registers of a privilege level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SidIndex {
    Sid0,
    Sid1,
}

/// A CSR write request. Values travel with the name so that gating and
/// validation happen in one place ([`crate::machine::Machine::write_csr`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsrWrite {
    Range(Prv, RangeReg),
    Sid(Prv, SidIndex, u64),
    LoadOverride(Option<TweakOverride>),
    StoreOverride(Option<TweakOverride>),
}

impl CsrWrite {
    /// Lowest privilege allowed to perform this write.
    pub fn required_prv(&self) -> Prv {
        match self {
            CsrWrite::Range(level, _) | CsrWrite::Sid(level, _, _) => *level,
            CsrWrite::LoadOverride(_) | CsrWrite::StoreOverride(_) => Prv::M,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrFile {
    /// Indexed by [`Prv::level_index`]: U, S, M.
    ranges: [RangeReg; 3],
    sids: [[u64; 2]; 3],
    pub load_override: Option<TweakOverride>,
    pub store_override: Option<TweakOverride>,
}

impl CsrFile {
    pub fn range(&self, level: Prv) -> &RangeReg {
        &self.ranges[level.level_index()]
    }

    pub fn sid(&self, level: Prv, idx: SidIndex) -> u64 {
        self.sids[level.level_index()][idx as usize]
    }

    /// Unchecked setters. Privilege gating lives in the machine.
    pub fn set_range(&mut self, level: Prv, range: RangeReg) {
        self.ranges[level.level_index()] = range;
    }

    pub fn set_sid(&mut self, level: Prv, idx: SidIndex, value: u64) {
        self.sids[level.level_index()][idx as usize] = value;
    }

    /// Resets one level's range and SID registers.
    pub fn clear_level(&mut self, level: Prv) {
        self.ranges[level.level_index()] = RangeReg::DISABLED;
        self.sids[level.level_index()] = [0, 0];
    }

    pub fn apply(&mut self, write: &CsrWrite) {
        match write {
            CsrWrite::Range(level, r) => self.set_range(*level, *r),
            CsrWrite::Sid(level, idx, v) => self.set_sid(*level, *idx, *v),
            CsrWrite::LoadOverride(o) => self.load_override = *o,
            CsrWrite::StoreOverride(o) => self.store_override = *o,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_range_matches_nothing() {
        let r = RangeReg {
            base: 0,
            size: u64::MAX,
            enabled: false,
        };
        assert!(!r.contains(0));
        assert!(!r.contains(0x1000));
    }

    #[test]
    fn range_is_half_open() {
        let r = RangeReg::new(0x1000, 0x1000);
        assert!(r.contains(0x1000));
        assert!(r.contains(0x1fff));
        assert!(!r.contains(0x2000));
        assert!(!r.contains(0xfff));
    }
}
