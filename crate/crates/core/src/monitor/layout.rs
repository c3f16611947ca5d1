// SPDX-License-Identifier: Apache-2.0

//! Fixed-offset layouts of the two MONITOR pages kept per enclave.
//!
//! Enclave page (little-endian):
//!
//! ```text
//! 0x000  8    magic "SRVSMETA"
//! 0x008  4    layout version (1)
//! 0x00c  4    state: 1 LOADED, 2 RUNNING, 3 INTERRUPTED, 4 TERMINATED
//! 0x010  32   encid (image hash)
//! 0x030  8    rtid
//! 0x038  8    entry point (absolute va)
//! 0x040  8    MRANGE base
//! 0x048  8    MRANGE size
//! 0x050  8    authentication fault count
//! 0x058  8    SHENCLAVE color (low word of the truncated encid)
//! 0x060  8    thread page va
//! 0x068  8    host privilege (0 U, 1 S, 3 M)
//! 0x070  264  host registers x0..x31, pc
//! 0x178  24   host URANGE base, size, enabled
//! 0x190  16   host USID0, USID1
//! 0x200  256  page bitmap over MRANGE, bit i = page i
//! 0x300  8    SHM page count
//! 0x308  120  SHM page vas
//! 0x400  48*k swap records
//! ```
//!
//! Swap record: va u64, nonce [16], tag [16], perms u8, rsw u8, live u8,
//! five reserved bytes.
//!
//! Thread page:
//!
//! ```text
//! 0x000  8    magic "SRVSTHRD"
//! 0x008  4    layout version (1)
//! 0x00c  4    in-enclave flag
//! 0x010  8    enclave page va
//! 0x018  4    saved-state flag
//! 0x020  264  saved enclave registers x0..x31, pc
//! 0x128  24   saved URANGE base, size, enabled
//! 0x140  16   saved USID0, USID1
//! ```

use crate::crypto::{Nonce, Tag};
use crate::csr::RangeReg;
use crate::machine::{RegFile, PAGE_BYTES};
use crate::tweak::{Perms, Prv, Rsw};

pub const LAYOUT_VERSION: u32 = 1;
pub const ENCLAVE_MAGIC: &[u8; 8] = b"SRVSMETA";
pub const THREAD_MAGIC: &[u8; 8] = b"SRVSTHRD";

pub const BITMAP_OFFSET: usize = 0x200;
pub const BITMAP_BYTES: usize = 0x100;
/// Largest enclave range the bitmap can describe, in pages.
pub const MAX_ENCLAVE_PAGES: u64 = BITMAP_BYTES as u64 * 8;
pub const SHM_OFFSET: usize = 0x300;
pub const MAX_SHM_PAGES: usize = 15;
pub const SWAP_OFFSET: usize = 0x400;
pub const SWAP_RECORD_BYTES: usize = 48;
pub const MAX_SWAP_RECORDS: usize = (PAGE_BYTES as usize - SWAP_OFFSET) / SWAP_RECORD_BYTES;

pub type PageBuf = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Loaded,
    Running,
    Interrupted,
    Terminated,
}

impl EnclaveState {
    fn code(self) -> u32 {
        match self {
            EnclaveState::Loaded => 1,
            EnclaveState::Running => 2,
            EnclaveState::Interrupted => 3,
            EnclaveState::Terminated => 4,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            1 => EnclaveState::Loaded,
            2 => EnclaveState::Running,
            3 => EnclaveState::Interrupted,
            4 => EnclaveState::Terminated,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapRecord {
    pub va: u64,
    pub nonce: Nonce,
    pub tag: Tag,
    pub perms: Perms,
    pub rsw: Rsw,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveMeta {
    pub state: EnclaveState,
    pub encid: [u8; 32],
    pub rtid: u64,
    pub entry: u64,
    pub mrange: RangeReg,
    pub fault_count: u64,
    pub shared_color: u64,
    pub thread_page: u64,
    pub host_prv: Prv,
    pub host_regs: RegFile,
    pub host_urange: RangeReg,
    pub host_usid: [u64; 2],
    pub bitmap: [u8; BITMAP_BYTES],
    pub shm_pages: Vec<u64>,
    pub swap: Vec<SwapRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadMeta {
    pub in_enclave: bool,
    pub enclave_page: u64,
    pub saved: Option<SavedContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SavedContext {
    pub regs: RegFile,
    pub urange: RangeReg,
    pub usid: [u64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("bad MONITOR page magic")]
    Magic,
    #[error("unsupported MONITOR page layout version {0}")]
    Version(u32),
    #[error("corrupt field at {0:#x}")]
    Field(usize),
}

fn put(buf: &mut [u8], off: usize, bytes: &[u8]) {
    buf[off..off + bytes.len()].copy_from_slice(bytes);
}

fn put_u64(buf: &mut [u8], off: usize, v: u64) {
    put(buf, off, &v.to_le_bytes());
}

fn put_u32(buf: &mut [u8], off: usize, v: u32) {
    put(buf, off, &v.to_le_bytes());
}

fn get_u64(buf: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(buf[off..off + 8].try_into().unwrap())
}

fn get_u32(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn put_regs(buf: &mut [u8], off: usize, r: &RegFile) {
    for (i, x) in r.x.iter().enumerate() {
        put_u64(buf, off + 8 * i, *x);
    }
    put_u64(buf, off + 8 * 32, r.pc);
}

fn get_regs(buf: &[u8], off: usize) -> RegFile {
    let mut r = RegFile::default();
    for i in 0..32 {
        r.x[i] = get_u64(buf, off + 8 * i);
    }
    r.pc = get_u64(buf, off + 8 * 32);
    r
}

fn put_range(buf: &mut [u8], off: usize, r: &RangeReg) {
    put_u64(buf, off, r.base);
    put_u64(buf, off + 8, r.size);
    put_u64(buf, off + 16, r.enabled as u64);
}

fn get_range(buf: &[u8], off: usize) -> RangeReg {
    RangeReg {
        base: get_u64(buf, off),
        size: get_u64(buf, off + 8),
        enabled: get_u64(buf, off + 16) != 0,
    }
}

fn check_header(buf: &[u8], magic: &[u8; 8]) -> Result<(), LayoutError> {
    if &buf[..8] != magic {
        return Err(LayoutError::Magic);
    }
    match get_u32(buf, 8) {
        LAYOUT_VERSION => Ok(()),
        v => Err(LayoutError::Version(v)),
    }
}

impl EnclaveMeta {
    pub fn encode(&self) -> PageBuf {
        let mut b = vec![0u8; PAGE_BYTES as usize];
        put(&mut b, 0, ENCLAVE_MAGIC);
        put_u32(&mut b, 0x8, LAYOUT_VERSION);
        put_u32(&mut b, 0xc, self.state.code());
        put(&mut b, 0x10, &self.encid);
        put_u64(&mut b, 0x30, self.rtid);
        put_u64(&mut b, 0x38, self.entry);
        put_u64(&mut b, 0x40, self.mrange.base);
        put_u64(&mut b, 0x48, self.mrange.size);
        put_u64(&mut b, 0x50, self.fault_count);
        put_u64(&mut b, 0x58, self.shared_color);
        put_u64(&mut b, 0x60, self.thread_page);
        put_u64(&mut b, 0x68, self.host_prv.encode() as u64);
        put_regs(&mut b, 0x70, &self.host_regs);
        put_range(&mut b, 0x178, &self.host_urange);
        put_u64(&mut b, 0x190, self.host_usid[0]);
        put_u64(&mut b, 0x198, self.host_usid[1]);
        put(&mut b, BITMAP_OFFSET, &self.bitmap);
        put_u64(&mut b, SHM_OFFSET, self.shm_pages.len() as u64);
        for (i, va) in self.shm_pages.iter().enumerate() {
            put_u64(&mut b, SHM_OFFSET + 8 + 8 * i, *va);
        }
        for (i, r) in self.swap.iter().enumerate() {
            let o = SWAP_OFFSET + SWAP_RECORD_BYTES * i;
            put_u64(&mut b, o, r.va);
            put(&mut b, o + 8, &r.nonce);
            put(&mut b, o + 24, &r.tag);
            b[o + 40] = r.perms.bits();
            b[o + 41] = r.rsw.bits();
            b[o + 42] = 1 | (r.live as u8) << 1;
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, LayoutError> {
        check_header(b, ENCLAVE_MAGIC)?;
        let state = EnclaveState::from_code(get_u32(b, 0xc)).ok_or(LayoutError::Field(0xc))?;
        let host_prv = Prv::decode(get_u64(b, 0x68) as u8).ok_or(LayoutError::Field(0x68))?;
        let shm_count = get_u64(b, SHM_OFFSET) as usize;
        if shm_count > MAX_SHM_PAGES {
            return Err(LayoutError::Field(SHM_OFFSET));
        }
        let mut swap = Vec::new();
        for i in 0..MAX_SWAP_RECORDS {
            let o = SWAP_OFFSET + SWAP_RECORD_BYTES * i;
            // Bit 0 marks an occupied slot; slots are filled contiguously.
            if b[o + 42] & 1 == 0 {
                break;
            }
            swap.push(SwapRecord {
                va: get_u64(b, o),
                nonce: b[o + 8..o + 24].try_into().unwrap(),
                tag: b[o + 24..o + 40].try_into().unwrap(),
                perms: Perms::from_bits(b[o + 40]).ok_or(LayoutError::Field(o + 40))?,
                rsw: Rsw::new(b[o + 41]).ok_or(LayoutError::Field(o + 41))?,
                live: b[o + 42] & 2 != 0,
            });
        }
        Ok(EnclaveMeta {
            state,
            encid: b[0x10..0x30].try_into().unwrap(),
            rtid: get_u64(b, 0x30),
            entry: get_u64(b, 0x38),
            mrange: RangeReg::new(get_u64(b, 0x40), get_u64(b, 0x48)),
            fault_count: get_u64(b, 0x50),
            shared_color: get_u64(b, 0x58),
            thread_page: get_u64(b, 0x60),
            host_prv,
            host_regs: get_regs(b, 0x70),
            host_urange: get_range(b, 0x178),
            host_usid: [get_u64(b, 0x190), get_u64(b, 0x198)],
            bitmap: b[BITMAP_OFFSET..BITMAP_OFFSET + BITMAP_BYTES].try_into().unwrap(),
            shm_pages: (0..shm_count).map(|i| get_u64(b, SHM_OFFSET + 8 + 8 * i)).collect(),
            swap,
        })
    }

    fn page_bit(&self, va: u64) -> Option<usize> {
        if !self.mrange.contains(va) {
            return None;
        }
        Some(((va - self.mrange.base) / PAGE_BYTES) as usize)
    }

    /// Whether `va` is a page the enclave has claimed, inside or outside its
    /// range.
    pub fn owns(&self, va: u64) -> bool {
        match self.page_bit(va) {
            Some(i) => self.bitmap[i / 8] & (1 << (i % 8)) != 0,
            None => self.shm_pages.contains(&va),
        }
    }

    /// Records `va` as claimed. Returns false when out of slots.
    pub fn claim(&mut self, va: u64) -> bool {
        match self.page_bit(va) {
            Some(i) => {
                self.bitmap[i / 8] |= 1 << (i % 8);
                true
            }
            None if self.shm_pages.len() < MAX_SHM_PAGES => {
                self.shm_pages.push(va);
                true
            }
            None => false,
        }
    }

    pub fn release(&mut self, va: u64) {
        match self.page_bit(va) {
            Some(i) => self.bitmap[i / 8] &= !(1 << (i % 8)),
            None => self.shm_pages.retain(|&p| p != va),
        }
    }

    pub fn live_swap(&self, va: u64) -> Option<usize> {
        self.swap.iter().position(|r| r.live && r.va == va)
    }

    /// Stores a new live record, reusing a consumed slot when possible.
    pub fn push_swap(&mut self, rec: SwapRecord) -> bool {
        if let Some(slot) = self.swap.iter_mut().find(|r| !r.live) {
            *slot = rec;
            true
        } else if self.swap.len() < MAX_SWAP_RECORDS {
            self.swap.push(rec);
            true
        } else {
            false
        }
    }
}

impl ThreadMeta {
    pub fn encode(&self) -> PageBuf {
        let mut b = vec![0u8; PAGE_BYTES as usize];
        put(&mut b, 0, THREAD_MAGIC);
        put_u32(&mut b, 0x8, LAYOUT_VERSION);
        put_u32(&mut b, 0xc, self.in_enclave as u32);
        put_u64(&mut b, 0x10, self.enclave_page);
        if let Some(s) = &self.saved {
            put_u32(&mut b, 0x18, 1);
            put_regs(&mut b, 0x20, &s.regs);
            put_range(&mut b, 0x128, &s.urange);
            put_u64(&mut b, 0x140, s.usid[0]);
            put_u64(&mut b, 0x148, s.usid[1]);
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, LayoutError> {
        check_header(b, THREAD_MAGIC)?;
        let saved = (get_u32(b, 0x18) != 0).then(|| SavedContext {
            regs: get_regs(b, 0x20),
            urange: get_range(b, 0x128),
            usid: [get_u64(b, 0x140), get_u64(b, 0x148)],
        });
        Ok(ThreadMeta {
            in_enclave: get_u32(b, 0xc) != 0,
            enclave_page: get_u64(b, 0x10),
            saved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> EnclaveMeta {
        let mut regs = RegFile::default();
        regs.x[5] = 55;
        regs.pc = 0x1234;
        EnclaveMeta {
            state: EnclaveState::Interrupted,
            encid: [9; 32],
            rtid: 3,
            entry: 0x4000_0010,
            mrange: RangeReg::new(0x4000_0000, 0x8000),
            fault_count: 2,
            shared_color: 0xfeed,
            thread_page: 0x7000,
            host_prv: Prv::U,
            host_regs: regs,
            host_urange: RangeReg::new(0x100, 0x40),
            host_usid: [1, 2],
            bitmap: [0; BITMAP_BYTES],
            shm_pages: vec![0x9000],
            swap: vec![SwapRecord {
                va: 0x4000_1000,
                nonce: [1; 16],
                tag: [2; 16],
                perms: Perms::U | Perms::R,
                rsw: Rsw::SID0,
                live: true,
            }],
        }
    }

    #[test]
    fn enclave_page_round_trip() {
        let m = meta();
        assert_eq!(EnclaveMeta::decode(&m.encode()), Ok(m));
    }

    #[test]
    fn thread_page_round_trip() {
        let t = ThreadMeta {
            in_enclave: true,
            enclave_page: 0x6000,
            saved: Some(SavedContext {
                regs: RegFile::default(),
                urange: RangeReg::DISABLED,
                usid: [4, 5],
            }),
        };
        assert_eq!(ThreadMeta::decode(&t.encode()), Ok(t));
        let mut b = ThreadMeta::default().encode();
        b[0] = 0;
        assert_eq!(ThreadMeta::decode(&b), Err(LayoutError::Magic));
    }

    #[test]
    fn ownership_inside_and_outside_range() {
        let mut m = meta();
        assert!(!m.owns(0x4000_2000));
        assert!(m.claim(0x4000_2000));
        assert!(m.owns(0x4000_2000));
        assert!(m.owns(0x9000));
        m.release(0x9000);
        assert!(!m.owns(0x9000));
    }

    #[test]
    fn swap_slots_are_reused() {
        let mut m = meta();
        let mut r = m.swap[0];
        m.swap[0].live = false;
        r.va = 0x4000_3000;
        assert!(m.push_swap(r));
        assert_eq!(m.swap.len(), 1);
        assert_eq!(m.live_swap(0x4000_3000), Some(0));
    }
}
