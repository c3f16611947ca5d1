// SPDX-License-Identifier: Apache-2.0

//! One simulated hart with its memory system.
//!
//! Every access runs the same pipeline:
//!
//! 1. page-table walk (single-level map from virtual page to [`Pte`]);
//! 2. privilege check of the PTE U bit against the access privilege;
//! 3. software tweak composition, with the load/store override applied for
//!    M-mode accesses;
//! 4. page-type classification (invalid combinations trap);
//! 5. R/W/X permission check;
//! 6. the tweak-tagged cache, backed by the encryption engine or, for
//!    unprotected pages with the bypass enabled, by plain DRAM.
//!
//! M-mode skips the permission checks, as the security monitor always
//! supplies the full tweak through the override registers.

mod snapshot;

pub use snapshot::{MachineSnapshot, SnapshotError, SNAPSHOT_FORMAT, SNAPSHOT_VERSION};

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheGeometry, CacheStats, LineBacking, TweakCache};
use crate::crypto::{self, Key};
use crate::csr::{CsrFile, CsrWrite, RangeReg};
use crate::mee::{LineData, LineIndex, LineState, Mee, MeeError, MeeKey, RawLine};
use crate::tweak::{
    compose_sw_tweak, PageType, Perms, Prv, Rsw, SwTweak, TweakLayout, TweakOverride, LINE_BYTES,
    LINE_SHIFT,
};

pub const PAGE_BYTES: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const LINES_PER_PAGE: u64 = PAGE_BYTES / LINE_BYTES as u64;

pub type SpaceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte {
    pub ppn: u64,
    pub perms: Perms,
    pub rsw: Rsw,
    pub valid: bool,
}

impl Pte {
    pub fn new(ppn: u64, perms: Perms, rsw: Rsw) -> Pte {
        Pte {
            ppn,
            perms,
            rsw,
            valid: true,
        }
    }
}

pub type PageTable = BTreeMap<u64, Pte>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
    /// M-mode full-line initialization that skips verification of the old
    /// content.
    Init,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Fetch => "fetch",
            AccessKind::Init => "init",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrapKind {
    AuthenticationException,
    PageFault,
    PrivilegeViolation,
    InvalidCombination,
}

impl TrapKind {
    pub fn name(self) -> &'static str {
        match self {
            TrapKind::AuthenticationException => "auth",
            TrapKind::PageFault => "page-fault",
            TrapKind::PrivilegeViolation => "privilege",
            TrapKind::InvalidCombination => "invalid-combination",
        }
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} trap on {access} at {va:#x} (prv {prv}): {detail}")]
pub struct Trap {
    pub kind: TrapKind,
    pub space: SpaceId,
    pub va: u64,
    pub prv: Prv,
    pub access: AccessKind,
    /// Access tweak, when composition got that far.
    pub tweak: Option<SwTweak>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("operation requires privilege {required}, caller is {actual}")]
    Privilege { required: Prv, actual: Prv },
    #[error("range {base:#x}+{size:#x} is not line aligned")]
    MisalignedRange { base: u64, size: u64 },
    #[error("range {base:#x}+{size:#x} exceeds the virtual address space")]
    RangeOutOfBounds { base: u64, size: u64 },
    #[error("address {0:#x} is not page aligned")]
    Unaligned(u64),
}

/// Integer register file plus program counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegFile {
    pub x: [u64; 32],
    pub pc: u64,
}

impl RegFile {
    pub const A0: usize = 10;
    pub const A1: usize = 11;
    /// Argument registers a0..a7.
    pub const ARGS: std::ops::Range<usize> = 10..18;

    pub fn is_zero(&self) -> bool {
        self.pc == 0 && self.x.iter().all(|&r| r == 0)
    }
}

/// Location of an enclave's two MONITOR pages in its host's address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnclaveHandle {
    pub space: SpaceId,
    pub enclave_page: u64,
    pub thread_page: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct MachineConfig {
    pub layout: TweakLayout,
    /// `None` disables the functional cache.
    pub cache: Option<CacheGeometry>,
    pub mee_key: Key,
    pub cpu_key: Key,
    pub seed: u64,
}

impl MachineConfig {
    /// Keys and randomness all derived from one seed.
    pub fn from_seed(seed: u64) -> Self {
        let s = seed.to_le_bytes();
        MachineConfig {
            layout: TweakLayout::SV48,
            cache: Some(CacheGeometry::default()),
            mee_key: crypto::kdf_key(&[0; 16], "machine-mee-key", &s),
            cpu_key: crypto::kdf_key(&[0; 16], "machine-cpu-key", &s),
            seed,
        }
    }
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self::from_seed(0)
    }
}

pub struct Machine {
    config: MachineConfig,
    mee: Mee,
    cache: Option<TweakCache>,
    spaces: BTreeMap<SpaceId, PageTable>,
    csr: CsrFile,
    bypass: bool,
    trng: ChaCha20Rng,
    /// Current hart privilege.
    pub prv: Prv,
    pub regs: RegFile,
    /// M-mode scratch: the enclave currently executing, if any.
    pub active_enclave: Option<EnclaveHandle>,
    /// Simulated time, advanced by the security monitor's fault penalties.
    pub ticks: u64,
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("prv", &self.prv)
            .field("spaces", &self.spaces.len())
            .field("bypass", &self.bypass)
            .field("mee", &self.mee)
            .finish_non_exhaustive()
    }
}

struct MeePath<'a> {
    mee: &'a mut Mee,
    plain: bool,
}

impl LineBacking for MeePath<'_> {
    fn fill(&mut self, line: LineIndex, sw: &SwTweak) -> Result<LineData, MeeError> {
        if self.plain {
            Ok(self.mee.read_plain(line))
        } else {
            self.mee.read(line, sw)
        }
    }

    fn write_through(&mut self, line: LineIndex, data: &LineData, sw: &SwTweak) -> Result<(), MeeError> {
        if self.plain {
            self.mee.write_plain(line, data);
            Ok(())
        } else {
            self.mee.write(line, data, sw)
        }
    }
}

/// Resolved translation of one line.
struct LineCtx {
    pa_line: LineIndex,
    sw: SwTweak,
    plain: bool,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        Machine {
            mee: Mee::new(MeeKey(config.mee_key), config.layout),
            cache: config.cache.map(|g| TweakCache::new(g, config.seed ^ 0xcac4e)),
            spaces: BTreeMap::new(),
            csr: CsrFile::default(),
            bypass: false,
            trng: ChaCha20Rng::seed_from_u64(config.seed ^ 0x7a9e),
            prv: Prv::S,
            regs: RegFile::default(),
            active_enclave: None,
            ticks: 0,
            config,
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn layout(&self) -> TweakLayout {
        self.config.layout
    }

    pub fn csr(&self) -> &CsrFile {
        &self.csr
    }

    pub fn mee(&self) -> &Mee {
        &self.mee
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(|c| c.stats())
    }

    pub fn bypass(&self) -> bool {
        self.bypass
    }

    /// The fused CPU key. Only the security monitor may ask.
    pub fn cpu_key(&self, prv: Prv) -> Result<Key, ConfigError> {
        require(prv, Prv::M)?;
        Ok(self.config.cpu_key)
    }

    /// Hardware random number source, M-mode only.
    pub fn trng(&mut self, prv: Prv, out: &mut [u8]) -> Result<(), ConfigError> {
        require(prv, Prv::M)?;
        self.trng.fill_bytes(out);
        Ok(())
    }

    // ---- CSRs ----

    pub fn write_csr(&mut self, prv: Prv, write: CsrWrite) -> Result<(), ConfigError> {
        require(prv, write.required_prv())?;
        if let CsrWrite::Range(_, r) = &write {
            self.check_range(r)?;
        }
        self.csr.apply(&write);
        Ok(())
    }

    fn check_range(&self, r: &RangeReg) -> Result<(), ConfigError> {
        if !r.enabled {
            return Ok(());
        }
        if !r.is_line_aligned() {
            return Err(ConfigError::MisalignedRange {
                base: r.base,
                size: r.size,
            });
        }
        if r.base.checked_add(r.size).is_none_or(|end| end > self.layout().va_limit()) {
            return Err(ConfigError::RangeOutOfBounds {
                base: r.base,
                size: r.size,
            });
        }
        Ok(())
    }

    /// Clears one level's range and SID registers (M-mode housekeeping).
    pub fn clear_csr_level(&mut self, prv: Prv, level: Prv) -> Result<(), ConfigError> {
        require(prv, Prv::M)?;
        self.csr.clear_level(level);
        Ok(())
    }

    pub fn set_bypass(&mut self, prv: Prv, enabled: bool) -> Result<(), ConfigError> {
        require(prv, Prv::M)?;
        if enabled != self.bypass {
            // Write-through leaves nothing dirty; dropping the contents keeps
            // stale plain/encrypted views from surviving the switch.
            if let Some(c) = self.cache.as_mut() {
                c.flush();
            }
            self.bypass = enabled;
        }
        Ok(())
    }

    // ---- page tables ----

    pub fn map_page(&mut self, prv: Prv, space: SpaceId, va: u64, pte: Pte) -> Result<(), ConfigError> {
        require(prv, Prv::S)?;
        if !va.is_multiple_of(PAGE_BYTES) {
            return Err(ConfigError::Unaligned(va));
        }
        self.spaces.entry(space).or_default().insert(va >> PAGE_SHIFT, pte);
        Ok(())
    }

    pub fn unmap_page(&mut self, prv: Prv, space: SpaceId, va: u64) -> Result<(), ConfigError> {
        require(prv, Prv::S)?;
        if let Some(t) = self.spaces.get_mut(&space) {
            t.remove(&(va >> PAGE_SHIFT));
        }
        Ok(())
    }

    pub fn pte(&self, space: SpaceId, va: u64) -> Option<Pte> {
        self.spaces
            .get(&space)
            .and_then(|t| t.get(&(va >> PAGE_SHIFT)))
            .copied()
            .filter(|p| p.valid)
    }

    /// Physical address backing `va`, if mapped.
    pub fn translate(&self, space: SpaceId, va: u64) -> Option<u64> {
        self.pte(space, va)
            .map(|p| p.ppn << PAGE_SHIFT | (va & (PAGE_BYTES - 1)))
    }

    // ---- accesses ----

    pub fn load(&mut self, space: SpaceId, va: u64, len: usize, prv: Prv) -> Result<Vec<u8>, Trap> {
        let mut out = Vec::with_capacity(len);
        for (line_va, off, n) in line_chunks(va, len) {
            let data = self.read_line(space, line_va, AccessKind::Read, prv)?;
            out.extend_from_slice(&data[off..off + n]);
        }
        Ok(out)
    }

    pub fn fetch(&mut self, space: SpaceId, va: u64, len: usize, prv: Prv) -> Result<Vec<u8>, Trap> {
        let mut out = Vec::with_capacity(len);
        for (line_va, off, n) in line_chunks(va, len) {
            let data = self.read_line(space, line_va, AccessKind::Fetch, prv)?;
            out.extend_from_slice(&data[off..off + n]);
        }
        Ok(out)
    }

    pub fn store(&mut self, space: SpaceId, va: u64, data: &[u8], prv: Prv) -> Result<(), Trap> {
        let mut consumed = 0;
        for (line_va, off, n) in line_chunks(va, data.len()) {
            let ctx = self.resolve(space, line_va, AccessKind::Write, prv)?;
            let chunk = &data[consumed..consumed + n];
            let mut path = MeePath {
                mee: &mut self.mee,
                plain: ctx.plain,
            };
            let res = match self.cache.as_mut() {
                Some(c) => c.write(ctx.pa_line, &ctx.sw, off, chunk, &mut path).map(drop),
                None => path.fill(ctx.pa_line, &ctx.sw).and_then(|mut line| {
                    line[off..off + n].copy_from_slice(chunk);
                    path.write_through(ctx.pa_line, &line, &ctx.sw)
                }),
            };
            res.map_err(|e| self.mee_trap(e, space, line_va, prv, AccessKind::Write, ctx.sw))?;
            consumed += n;
        }
        Ok(())
    }

    /// Writes a whole line without verifying what it held. M-mode only; the
    /// tweak normally comes entirely from the store override.
    pub fn init_line(&mut self, space: SpaceId, va: u64, data: &LineData, prv: Prv) -> Result<(), Trap> {
        let line_va = va & !(LINE_BYTES as u64 - 1);
        if prv != Prv::M {
            return Err(trap(TrapKind::PrivilegeViolation, space, line_va, prv, AccessKind::Init, None, "init writes are M-mode only"));
        }
        let ctx = self.resolve(space, line_va, AccessKind::Init, prv)?;
        let mut path = MeePath {
            mee: &mut self.mee,
            plain: ctx.plain,
        };
        let res = match self.cache.as_mut() {
            Some(c) => c.write_line(ctx.pa_line, &ctx.sw, data, &mut path),
            None => path.write_through(ctx.pa_line, data, &ctx.sw),
        };
        res.map_err(|e| self.mee_trap(e, space, line_va, prv, AccessKind::Init, ctx.sw))
    }

    /// Invalidates the line backing `va` under the engine's reserved tweak.
    pub fn destroy_line(&mut self, space: SpaceId, va: u64, prv: Prv) -> Result<(), Trap> {
        let line_va = va & !(LINE_BYTES as u64 - 1);
        if prv != Prv::M {
            return Err(trap(TrapKind::PrivilegeViolation, space, line_va, prv, AccessKind::Init, None, "destroy is M-mode only"));
        }
        let pa = self.translate(space, line_va).ok_or_else(|| {
            trap(TrapKind::PageFault, space, line_va, prv, AccessKind::Init, None, "unmapped")
        })?;
        let line = pa >> LINE_SHIFT;
        if let Some(c) = self.cache.as_mut() {
            c.invalidate(line);
        }
        self.mee
            .destroy(line)
            .map_err(|e| self.mee_trap(e, space, line_va, prv, AccessKind::Init, SwTweak::DESTROYED))
    }

    /// The tweak an access would use, without touching memory.
    pub fn access_tweak(&self, space: SpaceId, va: u64, kind: AccessKind, prv: Prv) -> Result<SwTweak, Trap> {
        self.resolve(space, va & !(LINE_BYTES as u64 - 1), kind, prv).map(|c| c.sw)
    }

    fn read_line(&mut self, space: SpaceId, line_va: u64, kind: AccessKind, prv: Prv) -> Result<LineData, Trap> {
        let ctx = self.resolve(space, line_va, kind, prv)?;
        let mut path = MeePath {
            mee: &mut self.mee,
            plain: ctx.plain,
        };
        let res = match self.cache.as_mut() {
            Some(c) => c.read(ctx.pa_line, &ctx.sw, &mut path).map(|o| *o.data()),
            None => path.fill(ctx.pa_line, &ctx.sw),
        };
        res.map_err(|e| self.mee_trap(e, space, line_va, prv, kind, ctx.sw))
    }

    fn resolve(&self, space: SpaceId, line_va: u64, kind: AccessKind, prv: Prv) -> Result<LineCtx, Trap> {
        let fault = |k, tweak, detail: &str| trap(k, space, line_va, prv, kind, tweak, detail);

        if line_va >= self.layout().va_limit() {
            return Err(fault(TrapKind::PageFault, None, "address beyond virtual address width"));
        }
        let pte = self
            .pte(space, line_va)
            .ok_or_else(|| fault(TrapKind::PageFault, None, "unmapped"))?;
        match prv {
            Prv::U if !pte.perms.contains(Perms::U) => {
                return Err(fault(TrapKind::PageFault, None, "supervisor page accessed from U-mode"))
            }
            Prv::S if pte.perms.contains(Perms::U) => {
                return Err(fault(TrapKind::PageFault, None, "user page accessed from S-mode"))
            }
            _ => {}
        }

        let ovr: Option<&TweakOverride> = match (prv, kind) {
            (Prv::M, AccessKind::Read | AccessKind::Fetch) => self.csr.load_override.as_ref(),
            (Prv::M, AccessKind::Write | AccessKind::Init) => self.csr.store_override.as_ref(),
            _ => None,
        };
        let sw = compose_sw_tweak(line_va, prv, pte.perms, pte.rsw, &self.csr, self.layout(), ovr)
            .map_err(|e| fault(TrapKind::PrivilegeViolation, None, &e.to_string()))?;
        let page_type = sw
            .page_type()
            .map_err(|e| fault(TrapKind::InvalidCombination, Some(sw), &e.to_string()))?;
        if kind == AccessKind::Fetch && page_type == PageType::Shm {
            return Err(fault(TrapKind::InvalidCombination, Some(sw), "SHM pages are never executable"));
        }
        if prv != Prv::M {
            let need = match kind {
                AccessKind::Read => Perms::R,
                AccessKind::Write | AccessKind::Init => Perms::W,
                AccessKind::Fetch => Perms::X,
            };
            if !pte.perms.contains(need) {
                return Err(fault(TrapKind::PageFault, Some(sw), &format!("{kind} not permitted by {}", pte.perms)));
            }
        }
        Ok(LineCtx {
            pa_line: (pte.ppn << (PAGE_SHIFT - LINE_SHIFT)) | ((line_va >> LINE_SHIFT) & (LINES_PER_PAGE - 1)),
            sw,
            plain: self.bypass && page_type == PageType::Unprotected,
        })
    }

    fn mee_trap(&self, e: MeeError, space: SpaceId, va: u64, prv: Prv, kind: AccessKind, sw: SwTweak) -> Trap {
        trap(TrapKind::AuthenticationException, space, va, prv, kind, Some(sw), &e.to_string())
    }

    // ---- physical attacker hooks ----

    /// Ciphertext and tag of the line at physical address `pa`.
    pub fn raw_line(&self, pa: u64) -> RawLine {
        self.mee.raw(pa >> LINE_SHIFT)
    }

    pub fn restore_raw_line(&mut self, pa: u64, raw: &RawLine) {
        let line = pa >> LINE_SHIFT;
        self.mee.restore_raw(line, raw);
        self.invalidate_pa(line);
    }

    pub fn flip_raw_bit(&mut self, pa: u64, bit: usize) {
        let line = pa >> LINE_SHIFT;
        self.mee.flip_bit(line, bit);
        self.invalidate_pa(line);
    }

    /// Models the attacker waiting for the line to leave the cache.
    fn invalidate_pa(&mut self, line: LineIndex) {
        if let Some(c) = self.cache.as_mut() {
            c.invalidate(line);
        }
    }

    pub fn counter_at(&self, pa: u64) -> u64 {
        self.mee.counter_of(pa >> LINE_SHIFT)
    }

    pub fn line_state_at(&self, pa: u64) -> LineState {
        self.mee.state_of(pa >> LINE_SHIFT)
    }

    pub fn snapshot(&self) -> MachineSnapshot {
        MachineSnapshot::capture(self)
    }

    pub fn restore(&mut self, snap: &MachineSnapshot) -> Result<(), SnapshotError> {
        snap.apply(self)
    }
}

fn require(actual: Prv, required: Prv) -> Result<(), ConfigError> {
    if actual >= required {
        Ok(())
    } else {
        Err(ConfigError::Privilege { required, actual })
    }
}

fn trap(kind: TrapKind, space: SpaceId, va: u64, prv: Prv, access: AccessKind, tweak: Option<SwTweak>, detail: &str) -> Trap {
    Trap {
        kind,
        space,
        va,
        prv,
        access,
        tweak,
        detail: detail.to_string(),
    }
}

/// Splits `[va, va+len)` into (line base, offset in line, byte count).
fn line_chunks(va: u64, len: usize) -> impl Iterator<Item = (u64, usize, usize)> {
    let end = va + len as u64;
    let mut cur = va;
    std::iter::from_fn(move || {
        if cur >= end {
            return None;
        }
        let base = cur & !(LINE_BYTES as u64 - 1);
        let off = (cur - base) as usize;
        let n = ((base + LINE_BYTES as u64).min(end) - cur) as usize;
        cur += n as u64;
        Some((base, off, n))
    })
}
