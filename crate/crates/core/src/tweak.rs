// SPDX-License-Identifier: Apache-2.0

//! Composition of the software half of the memory tweak and the page-type
//! decision table.
//!
//! The software tweak carries five fields, serialized most significant first:
//!
//! ```text
//!  | xrange (3) | voffset (va_bits - 6) | prv (2) | pte (7) | sid (80) |
//! ```
//!
//! With 48-bit virtual addresses this is 3 + 42 + 2 + 7 + 80 = 134 bits. The
//! engine prepends its 58-bit line counter to form the full 192-bit tweak
//! (counter in the high bits).
//!
//! The `pte` field packs `R W X U G` into bits 0..=4 and the two tweak-select
//! bits (RSW) into bits 5..=6.

use std::fmt;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::csr::{CsrFile, SidIndex};

pub const LINE_BYTES: usize = 64;
pub const LINE_SHIFT: u32 = 6;
pub const COUNTER_BITS: u32 = 58;
pub const XRANGE_BITS: u32 = 3;
pub const PRV_BITS: u32 = 2;
pub const PTE_BITS: u32 = 7;
pub const SID_BITS: u32 = 80;
pub const FULL_TWEAK_BYTES: usize = 24;

pub const XRANGE_U: u8 = 0b001;
pub const XRANGE_S: u8 = 0b010;
pub const XRANGE_M: u8 = 0b100;

/// CPU privilege level. Ordered U < S < M.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Prv {
    U,
    S,
    M,
}

impl Prv {
    pub const ALL: [Prv; 3] = [Prv::U, Prv::S, Prv::M];

    /// Two-bit encoding used in the tweak: U=00, S=01, M=11. `10` is never
    /// produced by a running hart.
    pub fn encode(self) -> u8 {
        match self {
            Prv::U => 0b00,
            Prv::S => 0b01,
            Prv::M => 0b11,
        }
    }

    pub fn decode(bits: u8) -> Option<Prv> {
        match bits {
            0b00 => Some(Prv::U),
            0b01 => Some(Prv::S),
            0b11 => Some(Prv::M),
            _ => None,
        }
    }

    pub(crate) fn level_index(self) -> usize {
        match self {
            Prv::U => 0,
            Prv::S => 1,
            Prv::M => 2,
        }
    }

    /// Bitmap bit of this level's xRANGE register.
    pub fn xrange_bit(self) -> u8 {
        1 << self.level_index()
    }
}

impl fmt::Display for Prv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prv::U => "U",
            Prv::S => "S",
            Prv::M => "M",
        })
    }
}

bitflags! {
    /// The five page-table permission bits that enter the tweak.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct Perms: u8 {
        const R = 1 << 0;
        const W = 1 << 1;
        const X = 1 << 2;
        const U = 1 << 3;
        const G = 1 << 4;
    }
}

impl Perms {
    /// Parses `rwx`-style strings with optional `u`/`g`, e.g. `"urw-"`,
    /// `"r-x"`, `"ugrwx"`. Dashes are ignored.
    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::empty();
        for c in s.chars() {
            p |= match c.to_ascii_lowercase() {
                'r' => Perms::R,
                'w' => Perms::W,
                'x' => Perms::X,
                'u' => Perms::U,
                'g' => Perms::G,
                '-' => Perms::empty(),
                _ => return None,
            };
        }
        Some(p)
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |p: Perms, c: char| if self.contains(p) { c } else { '-' };
        write!(
            f,
            "{}{}{}{}{}",
            flag(Perms::U, 'u'),
            flag(Perms::G, 'g'),
            flag(Perms::R, 'r'),
            flag(Perms::W, 'w'),
            flag(Perms::X, 'x')
        )
    }
}

/// The two tweak-select bits stored in the PTE's reserved field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rsw(u8);

impl Rsw {
    pub const NONE: Rsw = Rsw(0b00);
    pub const SID0: Rsw = Rsw(0b01);
    pub const SID1: Rsw = Rsw(0b10);
    pub const BOTH: Rsw = Rsw(0b11);

    pub fn new(bits: u8) -> Option<Rsw> {
        (bits < 4).then_some(Rsw(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Rsw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02b}", self.0)
    }
}

/// Packs permissions and RSW into the 7-bit tweak field.
pub fn pte_bits(perms: Perms, rsw: Rsw) -> u8 {
    perms.bits() | (rsw.bits() << 5)
}

pub fn split_pte_bits(bits: u8) -> (Perms, Rsw) {
    (Perms::from_bits_truncate(bits & 0x1f), Rsw((bits >> 5) & 0b11))
}

/// 80-bit session identifier (memory color).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sid(u128);

impl Sid {
    pub const MASK: u128 = (1u128 << SID_BITS) - 1;
    pub const ZERO: Sid = Sid(0);
    pub const ALL_ONES: Sid = Sid(Self::MASK);

    /// Truncates to 80 bits.
    pub fn new(value: u128) -> Sid {
        Sid(value & Self::MASK)
    }

    pub fn value(self) -> u128 {
        self.0
    }

    /// `trunc_80(sid1 || sid0)`: the low 80 bits of the 128-bit
    /// concatenation with `sid1` in the high half.
    pub fn from_pair(sid0: u64, sid1: u64) -> Sid {
        Sid::new(((sid1 as u128) << 64) | sid0 as u128)
    }

    /// Splits into the register pair that reproduces this SID under RSW=11.
    pub fn to_pair(self) -> (u64, u64) {
        (self.0 as u64, (self.0 >> 64) as u64)
    }

    /// Low 64 bits, the part that fits a single SID register.
    pub fn low_word(self) -> u64 {
        self.0 as u64
    }

    pub fn from_bytes(bytes: &[u8]) -> Sid {
        let mut buf = [0u8; 16];
        let n = bytes.len().min(10);
        buf[..n].copy_from_slice(&bytes[..n]);
        Sid::new(u128::from_le_bytes(buf))
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:020x}", self.0)
    }
}

/// Virtual address width in use. Sets the voffset width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TweakLayout {
    va_bits: u32,
}

impl Default for TweakLayout {
    fn default() -> Self {
        TweakLayout::SV48
    }
}

impl TweakLayout {
    pub const SV48: TweakLayout = TweakLayout { va_bits: 48 };
    pub const SV39: TweakLayout = TweakLayout { va_bits: 39 };

    /// Any width from 7 to 48 bits.
    pub fn new(va_bits: u32) -> Option<TweakLayout> {
        (7..=48).contains(&va_bits).then_some(TweakLayout { va_bits })
    }

    pub fn va_bits(self) -> u32 {
        self.va_bits
    }

    pub fn voffset_bits(self) -> u32 {
        self.va_bits - LINE_SHIFT
    }

    /// Width of the software tweak, i.e. the per-line tag of the inline cache.
    pub fn sw_bits(self) -> u32 {
        XRANGE_BITS + self.voffset_bits() + PRV_BITS + PTE_BITS + SID_BITS
    }

    pub fn full_bits(self) -> u32 {
        COUNTER_BITS + self.sw_bits()
    }

    pub fn voffset_mask(self) -> u64 {
        (1u64 << self.voffset_bits()) - 1
    }

    pub fn va_limit(self) -> u64 {
        1u64 << self.va_bits
    }
}

/// The software-visible 134-bit (for 48-bit VAs) half of the tweak.
///
/// Fields hold raw encodings so that reserved values (such as the engine's
/// destroy marker) are representable; [`SwTweak::page_type`] decodes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwTweak {
    pub xrange: u8,
    pub voffset: u64,
    pub prv: u8,
    pub pte_bits: u8,
    pub sid: Sid,
}

impl SwTweak {
    /// Reserved tweak used to invalidate lines. Its PRV encoding `10` is never
    /// produced by a hart or by an override, so nothing can authenticate
    /// against it.
    pub const DESTROYED: SwTweak = SwTweak {
        xrange: 0b111,
        voffset: 0,
        prv: 0b10,
        pte_bits: 0,
        sid: Sid::ALL_ONES,
    };

    pub fn new(xrange: u8, voffset: u64, prv: Prv, perms: Perms, rsw: Rsw, sid: Sid) -> SwTweak {
        SwTweak {
            xrange: xrange & 0b111,
            voffset,
            prv: prv.encode(),
            pte_bits: pte_bits(perms, rsw),
            sid,
        }
    }

    pub fn prv(&self) -> Option<Prv> {
        Prv::decode(self.prv)
    }

    pub fn perms(&self) -> Perms {
        split_pte_bits(self.pte_bits).0
    }

    pub fn rsw(&self) -> Rsw {
        split_pte_bits(self.pte_bits).1
    }

    /// Decision-table classification of this tweak.
    pub fn page_type(&self) -> Result<PageType, InvalidCombination> {
        let prv = self.prv().ok_or(InvalidCombination {
            xrange: self.xrange,
            prv: self.prv,
            pte_bits: self.pte_bits,
        })?;
        classify_page_type(self.xrange, prv, self.perms(), self.rsw())
    }

    /// Serializes MSB-first into exactly `layout.sw_bits()` bits.
    pub fn pack(&self, layout: TweakLayout) -> PackedBits {
        let mut w = BitWriter::default();
        self.write_into(&mut w, layout);
        w.finish()
    }

    fn write_into(&self, w: &mut BitWriter, layout: TweakLayout) {
        w.push(self.xrange as u128, XRANGE_BITS);
        w.push((self.voffset & layout.voffset_mask()) as u128, layout.voffset_bits());
        w.push(self.prv as u128, PRV_BITS);
        w.push(self.pte_bits as u128, PTE_BITS);
        w.push(self.sid.0, SID_BITS);
    }

    pub fn unpack(bits: &PackedBits, layout: TweakLayout) -> Option<SwTweak> {
        if bits.len() != layout.sw_bits() as usize {
            return None;
        }
        let mut r = BitReader::new(bits);
        Some(SwTweak {
            xrange: r.take(XRANGE_BITS) as u8,
            voffset: r.take(layout.voffset_bits()) as u64,
            prv: r.take(PRV_BITS) as u8,
            pte_bits: r.take(PTE_BITS) as u8,
            sid: Sid(r.take(SID_BITS)),
        })
    }
}

impl fmt::Display for SwTweak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prv = self
            .prv()
            .map(|p| p.to_string())
            .unwrap_or_else(|| format!("{:02b}", self.prv));
        write!(
            f,
            "xr={:03b} voff={:#x} prv={} pte={}/{} sid={}",
            self.xrange,
            self.voffset,
            prv,
            self.perms(),
            self.rsw(),
            self.sid
        )
    }
}

/// Counter plus software tweak: the associated data of one line encryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FullTweak {
    pub counter: u64,
    pub sw: SwTweak,
}

impl FullTweak {
    pub fn pack(&self, layout: TweakLayout) -> PackedBits {
        let mut w = BitWriter::default();
        w.push(self.counter as u128, COUNTER_BITS);
        self.sw.write_into(&mut w, layout);
        w.finish()
    }

    /// Right-aligned in 24 bytes (exactly filled for 48-bit layouts).
    pub fn to_bytes(&self, layout: TweakLayout) -> [u8; FULL_TWEAK_BYTES] {
        let packed = self.pack(layout);
        let mut out = [0u8; FULL_TWEAK_BYTES];
        let bytes = packed.bytes();
        out[FULL_TWEAK_BYTES - bytes.len()..].copy_from_slice(bytes);
        out
    }
}

/// A big-endian bit string, right-aligned in its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    len: usize,
    bytes: Vec<u8>,
}

impl PackedBits {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len);
        let pos = self.bytes.len() * 8 - self.len + i;
        self.bytes[pos / 8] >> (7 - pos % 8) & 1 == 1
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len)
            .map(|i| if self.bit(i) { '1' } else { '0' })
            .collect()
    }
}

#[derive(Default)]
struct BitWriter {
    bits: Vec<bool>,
}

impl BitWriter {
    fn push(&mut self, value: u128, width: u32) {
        debug_assert!(width == 128 || value >> width == 0, "value wider than field");
        for i in (0..width).rev() {
            self.bits.push(value >> i & 1 == 1);
        }
    }

    fn finish(self) -> PackedBits {
        let len = self.bits.len();
        let nbytes = len.div_ceil(8);
        let pad = nbytes * 8 - len;
        let mut bytes = vec![0u8; nbytes];
        for (i, b) in self.bits.into_iter().enumerate() {
            if b {
                let pos = pad + i;
                bytes[pos / 8] |= 1 << (7 - pos % 8);
            }
        }
        PackedBits { len, bytes }
    }
}

struct BitReader<'a> {
    src: &'a PackedBits,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(src: &'a PackedBits) -> Self {
        BitReader { src, pos: 0 }
    }

    fn take(&mut self, width: u32) -> u128 {
        let mut v = 0u128;
        for _ in 0..width {
            v = v << 1 | self.src.bit(self.pos) as u128;
            self.pos += 1;
        }
        v
    }
}

/// Per-field replacements applied to the composed tweak. Only M-mode can arm
/// these, and the engine counter is deliberately not among them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweakOverride {
    pub xrange: Option<u8>,
    pub voffset: Option<u64>,
    pub prv: Option<Prv>,
    pub pte_bits: Option<u8>,
    pub sid: Option<Sid>,
}

impl TweakOverride {
    /// Overrides every field so that the result equals `sw` regardless of
    /// the CPU state. Returns `None` for tweaks with a reserved PRV encoding.
    pub fn full(sw: &SwTweak) -> Option<TweakOverride> {
        Some(TweakOverride {
            xrange: Some(sw.xrange),
            voffset: Some(sw.voffset),
            prv: Some(sw.prv()?),
            pte_bits: Some(sw.pte_bits),
            sid: Some(sw.sid),
        })
    }

    pub fn apply(&self, sw: &mut SwTweak) {
        if let Some(x) = self.xrange {
            sw.xrange = x & 0b111;
        }
        if let Some(v) = self.voffset {
            sw.voffset = v;
        }
        if let Some(p) = self.prv {
            sw.prv = p.encode();
        }
        if let Some(b) = self.pte_bits {
            sw.pte_bits = b & 0x7f;
        }
        if let Some(s) = self.sid {
            sw.sid = s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageType {
    Unprotected,
    Regular,
    ShEnclave,
    Shm,
    Monitor,
}

impl PageType {
    pub const ALL: [PageType; 5] = [
        PageType::Unprotected,
        PageType::Regular,
        PageType::ShEnclave,
        PageType::Shm,
        PageType::Monitor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PageType::Unprotected => "UNPROTECTED",
            PageType::Regular => "REGULAR",
            PageType::ShEnclave => "SHENCLAVE",
            PageType::Shm => "SHM",
            PageType::Monitor => "MONITOR",
        }
    }

    pub fn parse(s: &str) -> Option<PageType> {
        PageType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
    }

    /// RSW value the page type requires in its PTE, if any.
    pub fn rsw(self) -> Option<Rsw> {
        match self {
            PageType::Regular => Some(Rsw::SID0),
            PageType::ShEnclave => Some(Rsw::SID1),
            PageType::Shm => Some(Rsw::BOTH),
            PageType::Unprotected | PageType::Monitor => None,
        }
    }
}

impl fmt::Display for PageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("tweak combination xrange={xrange:03b} prv={prv:02b} pte={pte_bits:07b} matches no page type")]
pub struct InvalidCombination {
    pub xrange: u8,
    pub prv: u8,
    pub pte_bits: u8,
}

/// Decision table over (xrange bitmap, privilege, PTE permissions, RSW).
///
/// | MRANGE SRANGE URANGE | PRV | PTE | RSW | type        |
/// |----------------------|-----|-----|-----|-------------|
/// | •      •      •      | M   | rw  | •   | MONITOR     |
/// | 0      0      0      | •   | •   | •   | UNPROTECTED |
/// | 1      0      0      | U   | •   | 01  | REGULAR     |
/// | 1      0      0      | U   | !W  | 10  | SHENCLAVE   |
/// | 0      0      1      | U   | !X  | 11  | SHM         |
///
/// The MONITOR row is checked first, so an M-mode read-write access is
/// always MONITOR even outside every range. Anything else is rejected.
pub fn classify_page_type(
    xrange: u8,
    prv: Prv,
    perms: Perms,
    rsw: Rsw,
) -> Result<PageType, InvalidCombination> {
    let rw = Perms::R | Perms::W;
    let ty = match (xrange & 0b111, prv, rsw) {
        (_, Prv::M, _) if perms.contains(rw) => Some(PageType::Monitor),
        (0b000, _, _) => Some(PageType::Unprotected),
        (XRANGE_M, Prv::U, Rsw::SID0) => Some(PageType::Regular),
        (XRANGE_M, Prv::U, Rsw::SID1) if !perms.contains(Perms::W) => Some(PageType::ShEnclave),
        (XRANGE_U, Prv::U, Rsw::BOTH) if !perms.contains(Perms::X) => Some(PageType::Shm),
        _ => None,
    };
    ty.ok_or(InvalidCombination {
        xrange,
        prv: prv.encode(),
        pte_bits: pte_bits(perms, rsw),
    })
}

/// Bitmap of the enabled ranges containing `va` (bit0 U, bit1 S, bit2 M).
pub fn match_ranges(va: u64, csr: &CsrFile) -> u8 {
    Prv::ALL
        .into_iter()
        .filter(|&l| csr.range(l).contains(va))
        .fold(0, |acc, l| acc | l.xrange_bit())
}

/// Rightmost set bit wins: URANGE before SRANGE before MRANGE.
pub fn select_basis(bitmap: u8) -> Option<Prv> {
    Prv::ALL.into_iter().find(|l| bitmap & l.xrange_bit() != 0)
}

/// Line-granular offset from the basis range, or the absolute line index
/// when no range matched.
pub fn compute_voffset(va: u64, basis: Option<Prv>, csr: &CsrFile, layout: TweakLayout) -> u64 {
    let off = match basis {
        Some(level) => va.wrapping_sub(csr.range(level).base) >> LINE_SHIFT,
        None => va >> LINE_SHIFT,
    };
    off & layout.voffset_mask()
}

pub fn select_sid(basis: Option<Prv>, rsw: Rsw, csr: &CsrFile) -> Sid {
    let Some(level) = basis else {
        return Sid::ZERO;
    };
    match rsw {
        Rsw::SID0 => Sid::new(csr.sid(level, SidIndex::Sid0) as u128),
        Rsw::SID1 => Sid::new(csr.sid(level, SidIndex::Sid1) as u128),
        Rsw::BOTH => Sid::from_pair(
            csr.sid(level, SidIndex::Sid0),
            csr.sid(level, SidIndex::Sid1),
        ),
        _ => Sid::ZERO,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("tweak override supplied at privilege {0}")]
pub struct OverrideNotPermitted(pub Prv);

/// Builds the software tweak for an access at `va` with the given PTE
/// attributes and CPU state, then applies the override if one is supplied.
pub fn compose_sw_tweak(
    va: u64,
    prv: Prv,
    perms: Perms,
    rsw: Rsw,
    csr: &CsrFile,
    layout: TweakLayout,
    ovr: Option<&TweakOverride>,
) -> Result<SwTweak, OverrideNotPermitted> {
    if ovr.is_some() && prv != Prv::M {
        return Err(OverrideNotPermitted(prv));
    }
    let xrange = match_ranges(va, csr);
    let basis = select_basis(xrange);
    let mut sw = SwTweak {
        xrange,
        voffset: compute_voffset(va, basis, csr, layout),
        prv: prv.encode(),
        pte_bits: pte_bits(perms, rsw),
        sid: select_sid(basis, rsw, csr),
    };
    if let Some(o) = ovr {
        o.apply(&mut sw);
    }
    Ok(sw)
}
