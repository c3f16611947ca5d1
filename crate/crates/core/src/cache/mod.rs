// SPDX-License-Identifier: Apache-2.0

//! Tweak-tagged caching.
//!
//! [`TweakCache`] is the functional write-through cache that sits in the
//! machine's access path: a hit needs both the line address and the stored
//! software tweak to match. [`overhead`] and [`eviction`] are the offline
//! sizing analytics for inline tags versus a separate tweak cache.

pub mod eviction;
pub mod overhead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mee::{LineData, LineIndex, MeeError};
use crate::tweak::SwTweak;

/// Storage behind the cache: the engine or the bypass path.
pub trait LineBacking {
    fn fill(&mut self, line: LineIndex, sw: &SwTweak) -> Result<LineData, MeeError>;
    fn write_through(&mut self, line: LineIndex, data: &LineData, sw: &SwTweak) -> Result<(), MeeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit(LineData),
    MissFilled(LineData),
}

impl CacheOutcome {
    pub fn data(&self) -> &LineData {
        match self {
            CacheOutcome::Hit(d) | CacheOutcome::MissFilled(d) => d,
        }
    }

    pub fn is_hit(&self) -> bool {
        matches!(self, CacheOutcome::Hit(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    line: LineIndex,
    sw: SwTweak,
    data: LineData,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub tweak_mismatches: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl Default for CacheGeometry {
    /// 32 KiB, 8-way.
    fn default() -> Self {
        CacheGeometry { sets: 64, ways: 8 }
    }
}

/// Set-associative, write-through, write-allocate cache with inline tweak
/// tags and random replacement.
#[derive(Debug, Clone)]
pub struct TweakCache {
    geometry: CacheGeometry,
    entries: Vec<Option<Entry>>,
    rng: ChaCha8Rng,
    stats: CacheStats,
}

impl TweakCache {
    pub fn new(geometry: CacheGeometry, seed: u64) -> Self {
        assert!(geometry.sets > 0 && geometry.ways > 0);
        TweakCache {
            geometry,
            entries: vec![None; geometry.sets * geometry.ways],
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: CacheStats::default(),
        }
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn set_slots(&self, line: LineIndex) -> std::ops::Range<usize> {
        let set = (line % self.geometry.sets as u64) as usize;
        set * self.geometry.ways..(set + 1) * self.geometry.ways
    }

    fn find(&self, line: LineIndex) -> Option<usize> {
        self.set_slots(line)
            .find(|&i| matches!(self.entries[i], Some(e) if e.line == line))
    }

    fn install(&mut self, line: LineIndex, sw: SwTweak, data: LineData) {
        let slots = self.set_slots(line);
        let slot = match self.find(line) {
            Some(i) => i,
            None => match slots.clone().find(|&i| self.entries[i].is_none()) {
                Some(i) => i,
                None => {
                    self.stats.evictions += 1;
                    self.rng.random_range(slots)
                }
            },
        };
        self.entries[slot] = Some(Entry { line, sw, data });
    }

    /// Returns the cached line if both address and tweak match. An address
    /// match under a different tweak drops the entry (nothing is dirty in a
    /// write-through cache) and refills under the new tweak.
    pub fn read(
        &mut self,
        line: LineIndex,
        sw: &SwTweak,
        backing: &mut dyn LineBacking,
    ) -> Result<CacheOutcome, MeeError> {
        if let Some(i) = self.find(line) {
            let e = self.entries[i].expect("found slot is occupied");
            if e.sw == *sw {
                self.stats.hits += 1;
                return Ok(CacheOutcome::Hit(e.data));
            }
            self.stats.tweak_mismatches += 1;
            self.entries[i] = None;
        }
        self.stats.misses += 1;
        let data = backing.fill(line, sw)?;
        self.install(line, *sw, data);
        Ok(CacheOutcome::MissFilled(data))
    }

    /// Partial write: allocate (verifying the current content under `sw`),
    /// merge, then write through.
    pub fn write(
        &mut self,
        line: LineIndex,
        sw: &SwTweak,
        offset: usize,
        bytes: &[u8],
        backing: &mut dyn LineBacking,
    ) -> Result<CacheOutcome, MeeError> {
        let outcome = self.read(line, sw, backing)?;
        let mut data = *outcome.data();
        data[offset..offset + bytes.len()].copy_from_slice(bytes);
        backing.write_through(line, &data, sw)?;
        self.install(line, *sw, data);
        Ok(outcome)
    }

    /// Full-line write without allocation check. Used for M-mode page
    /// initialization, which must succeed whatever the line held before.
    pub fn write_line(
        &mut self,
        line: LineIndex,
        sw: &SwTweak,
        data: &LineData,
        backing: &mut dyn LineBacking,
    ) -> Result<(), MeeError> {
        self.invalidate(line);
        backing.write_through(line, data, sw)?;
        self.install(line, *sw, *data);
        Ok(())
    }

    pub fn invalidate(&mut self, line: LineIndex) {
        if let Some(i) = self.find(line) {
            self.entries[i] = None;
        }
    }

    pub fn flush(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    /// Tweak currently tagging `line`, if cached.
    pub fn cached_tweak(&self, line: LineIndex) -> Option<SwTweak> {
        self.find(line).and_then(|i| self.entries[i]).map(|e| e.sw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mee::{Mee, MeeKey};
    use crate::tweak::{Perms, Prv, Rsw, Sid, TweakLayout};

    struct MeeBacking<'a>(&'a mut Mee);

    impl LineBacking for MeeBacking<'_> {
        fn fill(&mut self, line: LineIndex, sw: &SwTweak) -> Result<LineData, MeeError> {
            self.0.read(line, sw)
        }
        fn write_through(&mut self, line: LineIndex, data: &LineData, sw: &SwTweak) -> Result<(), MeeError> {
            self.0.write(line, data, sw)
        }
    }

    fn enclave_tweak(rtid: u128) -> SwTweak {
        SwTweak::new(0b100, 0, Prv::U, Perms::U | Perms::R | Perms::W, Rsw::SID0, Sid::new(rtid))
    }

    #[test]
    fn second_read_hits() {
        let mut mee = Mee::new(MeeKey([1; 16]), TweakLayout::SV48);
        let sw = enclave_tweak(1);
        mee.write(4, &[7; 64], &sw).unwrap();
        let mut c = TweakCache::new(CacheGeometry { sets: 4, ways: 2 }, 0);
        assert!(!c.read(4, &sw, &mut MeeBacking(&mut mee)).unwrap().is_hit());
        assert!(c.read(4, &sw, &mut MeeBacking(&mut mee)).unwrap().is_hit());
    }

    #[test]
    fn tweak_mismatch_refills_and_fails() {
        let mut mee = Mee::new(MeeKey([1; 16]), TweakLayout::SV48);
        let a = enclave_tweak(1);
        let b = enclave_tweak(2);
        mee.write(4, &[7; 64], &a).unwrap();
        let mut c = TweakCache::new(CacheGeometry { sets: 4, ways: 2 }, 0);
        c.read(4, &a, &mut MeeBacking(&mut mee)).unwrap();
        assert_eq!(
            c.read(4, &b, &mut MeeBacking(&mut mee)),
            Err(MeeError::Authentication(4))
        );
        assert_eq!(c.stats().tweak_mismatches, 1);
        assert_eq!(c.cached_tweak(4), None);
    }

    #[test]
    fn write_through_updates_memory() {
        let mut mee = Mee::new(MeeKey([1; 16]), TweakLayout::SV48);
        let sw = enclave_tweak(1);
        mee.write(0, &[0; 64], &sw).unwrap();
        let before = mee.raw(0);
        let mut c = TweakCache::new(CacheGeometry { sets: 4, ways: 2 }, 0);
        c.write(0, &sw, 8, &[1, 2, 3], &mut MeeBacking(&mut mee)).unwrap();
        assert_ne!(mee.raw(0), before);
        let mut expect = [0u8; 64];
        expect[8..11].copy_from_slice(&[1, 2, 3]);
        assert_eq!(mee.read(0, &sw), Ok(expect));
    }

    #[test]
    fn full_set_evicts() {
        let mut mee = Mee::new(MeeKey([1; 16]), TweakLayout::SV48);
        let sw = SwTweak::new(0, 0, Prv::S, Perms::R | Perms::W, Rsw::NONE, Sid::ZERO);
        let mut c = TweakCache::new(CacheGeometry { sets: 1, ways: 2 }, 0);
        for line in 0..3 {
            c.read(line, &sw, &mut MeeBacking(&mut mee)).unwrap();
        }
        assert_eq!(c.stats().evictions, 1);
    }
}
