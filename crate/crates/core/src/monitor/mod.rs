// SPDX-License-Identifier: Apache-2.0

//! The M-mode security monitor.
//!
//! The monitor keeps no enclave state of its own: everything lives in the
//! two MONITOR pages of each enclave, which the untrusted OS allocates and
//! maps but can only access through ciphertext. The monitor reaches them,
//! and initializes enclave memory, through the tweak override registers.
//! Its single piece of mutable state is the runtime id counter.

pub mod image;
pub mod layout;

use crate::crypto::{self, Ascon128, Key, LineAead, Nonce};
use crate::csr::{CsrFile, CsrWrite, RangeReg, SidIndex};
use crate::machine::{
    AccessKind, ConfigError, EnclaveHandle, Machine, MachineConfig, Pte, RegFile, SpaceId, Trap,
    TrapKind, PAGE_BYTES,
};
use crate::mee::LineData;
use crate::tweak::{
    compose_sw_tweak, PageType, Perms, Prv, Rsw, Sid, SwTweak, TweakOverride, LINE_BYTES,
    LINE_SHIFT,
};

use image::{EnclaveImage, FormatError, LoadedImage};
use layout::{EnclaveMeta, EnclaveState, SavedContext, SwapRecord, ThreadMeta, MAX_ENCLAVE_PAGES};

const PAGE: usize = PAGE_BYTES as usize;
const LINES: u64 = PAGE_BYTES / LINE_BYTES as u64;

/// SID tags separating the two MONITOR page kinds.
const ENCLAVE_PAGE_TAG: u128 = 1;
const THREAD_PAGE_TAG: u128 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SmError {
    #[error("handle does not name a valid enclave")]
    BadHandle,
    #[error("enclave is {0:?}")]
    WrongState(EnclaveState),
    #[error("another enclave is already running")]
    Busy,
    #[error("not executing inside an enclave")]
    NotInEnclave,
    #[error("enclave image failed authentication")]
    ImageAuthFailure,
    #[error("invalid enclave image: {0}")]
    InvalidImage(#[from] FormatError),
    #[error("MONITOR pages cannot be requested by enclaves")]
    MonitorTypeForbidden,
    #[error("page {0:#x} is already in use")]
    DoubleMap(u64),
    #[error("address {0:#x} is outside the permitted range")]
    RangeViolation(u64),
    #[error("page {0:#x} is not owned by the enclave")]
    NotOwned(u64),
    #[error("page {0:#x} cannot be swapped")]
    TypeNotSwappable(u64),
    #[error("sealed page for {0:#x} failed authentication")]
    SwapAuthFailure(u64),
    #[error("no swap record for {0:#x}")]
    NoRecord(u64),
    #[error("page {0:#x} is already swapped out")]
    AlreadySwapped(u64),
    #[error("page {0:#x} does not decrypt under the given context")]
    AuthenticationError(u64),
    #[error("context does not form a valid page type")]
    InvalidCombination,
    #[error("enclave metadata is full")]
    Capacity,
    #[error(transparent)]
    Trap(#[from] Trap),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Response of the authentication fault handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    RetryDenied,
    EnclaveTerminated,
    Delay(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmConfig {
    /// Authentication faults after which an enclave is terminated.
    pub fault_threshold: u64,
    /// Simulated ticks charged per fault below the threshold.
    pub fault_delay: u64,
}

impl Default for SmConfig {
    fn default() -> Self {
        SmConfig {
            fault_threshold: 3,
            fault_delay: 0,
        }
    }
}

/// Type, permissions and color of an enclave page, as the enclave would see
/// it. `sid: None` takes the color from the enclave's SID registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageCtx {
    pub page_type: PageType,
    pub perms: Perms,
    pub sid: Option<Sid>,
}

impl PageCtx {
    pub fn new(page_type: PageType, perms: Perms) -> Self {
        PageCtx {
            page_type,
            perms,
            sid: None,
        }
    }

    pub fn with_sid(mut self, sid: Sid) -> Self {
        self.sid = Some(sid);
        self
    }
}

/// Everything ECREATE needs from the caller.
#[derive(Debug, Clone)]
pub struct CreateRequest {
    pub image: LoadedImage,
    pub space: SpaceId,
    pub base: u64,
    pub stack_pages: u64,
    /// Pages reserved in the enclave range for later EPREPARE calls.
    pub heap_pages: u64,
    pub enclave_page: u64,
    pub thread_page: u64,
}

/// Key an image developer wraps images with.
pub fn developer_key(cpu_key: &Key, developer_id: &[u8; 16]) -> Key {
    crypto::kdf_key(cpu_key, "developer", developer_id)
}

/// 80-bit SHENCLAVE color of an image identity on one machine.
pub fn derive_truncated_encid(cpu_key: &Key, encid: &[u8; 32]) -> Sid {
    Sid::from_bytes(&crypto::kdf(cpu_key, "encid", encid)[..10])
}

pub fn seal_key(cpu_key: &Key, encid: &[u8; 32]) -> Key {
    crypto::kdf_key(cpu_key, "seal", encid)
}

fn swap_key(cpu_key: &Key, rtid: u64) -> Key {
    crypto::kdf_key(cpu_key, "swap", &rtid.to_le_bytes())
}

fn swap_ad(rtid: u64, va: u64, perms: Perms, rsw: Rsw, mrange: &RangeReg) -> Vec<u8> {
    let mut ad = Vec::with_capacity(34);
    ad.extend_from_slice(&rtid.to_le_bytes());
    ad.extend_from_slice(&va.to_le_bytes());
    ad.push(perms.bits());
    ad.push(rsw.bits());
    ad.extend_from_slice(&mrange.base.to_le_bytes());
    ad.extend_from_slice(&mrange.size.to_le_bytes());
    ad
}

fn monitor_tweak(m: &Machine, space: SpaceId, line_va: u64, tag: u128) -> SwTweak {
    SwTweak::new(
        0,
        (line_va >> LINE_SHIFT) & m.layout().voffset_mask(),
        Prv::M,
        Perms::R | Perms::W,
        Rsw::NONE,
        Sid::new((space as u128) << 8 | tag),
    )
}

/// The M-level CSRs the enclave runs with; U-level registers left clear.
fn enclave_view(meta: &EnclaveMeta) -> CsrFile {
    let mut c = CsrFile::default();
    c.set_range(Prv::M, meta.mrange);
    c.set_sid(Prv::M, SidIndex::Sid0, meta.rtid);
    c.set_sid(Prv::M, SidIndex::Sid1, meta.shared_color);
    c
}

/// Tweak of one line of a page in context `ctx`, checked against the
/// requested type.
fn ctx_tweak(m: &Machine, view: &CsrFile, line_va: u64, ctx: &PageCtx) -> Result<SwTweak, SmError> {
    let rsw = match ctx.page_type {
        PageType::Monitor => return Err(SmError::MonitorTypeForbidden),
        PageType::Unprotected => return Err(SmError::InvalidCombination),
        t => t.rsw().expect("enclave page types carry an RSW"),
    };
    let perms = (ctx.perms & (Perms::R | Perms::W | Perms::X)) | Perms::U;
    let mut sw = compose_sw_tweak(line_va, Prv::U, perms, rsw, view, m.layout(), None)
        .expect("no override supplied");
    if let Some(sid) = ctx.sid {
        sw.sid = sid;
    }
    match sw.page_type() {
        Ok(t) if t == ctx.page_type => Ok(sw),
        _ => Err(SmError::InvalidCombination),
    }
}

fn set_override(m: &mut Machine, write: bool, sw: Option<&SwTweak>) {
    let o = sw.and_then(TweakOverride::full);
    let req = if write {
        CsrWrite::StoreOverride(o)
    } else {
        CsrWrite::LoadOverride(o)
    };
    m.write_csr(Prv::M, req).expect("M-mode may write overrides");
}

/// Initializes a page line by line under `tweak_at(line_va)`.
fn write_page(
    m: &mut Machine,
    space: SpaceId,
    va: u64,
    data: &[u8],
    mut tweak_at: impl FnMut(&Machine, u64) -> Result<SwTweak, SmError>,
) -> Result<(), SmError> {
    let res = (|| {
        for i in 0..LINES {
            let line_va = va + i * LINE_BYTES as u64;
            let sw = tweak_at(m, line_va)?;
            set_override(m, true, Some(&sw));
            let off = (i as usize) * LINE_BYTES;
            let line: LineData = data[off..off + LINE_BYTES].try_into().unwrap();
            m.init_line(space, line_va, &line, Prv::M)?;
        }
        Ok(())
    })();
    set_override(m, true, None);
    res
}

fn read_page(
    m: &mut Machine,
    space: SpaceId,
    va: u64,
    mut tweak_at: impl FnMut(&Machine, u64) -> Result<SwTweak, SmError>,
) -> Result<Vec<u8>, SmError> {
    let res = (|| {
        let mut out = Vec::with_capacity(PAGE);
        for i in 0..LINES {
            let line_va = va + i * LINE_BYTES as u64;
            let sw = tweak_at(m, line_va)?;
            set_override(m, false, Some(&sw));
            out.extend(m.load(space, line_va, LINE_BYTES, Prv::M)?);
        }
        Ok(out)
    })();
    set_override(m, false, None);
    res
}

fn destroy_page(m: &mut Machine, space: SpaceId, va: u64) -> Result<(), SmError> {
    for i in 0..LINES {
        m.destroy_line(space, va + i * LINE_BYTES as u64, Prv::M)?;
    }
    Ok(())
}

fn load_meta(m: &mut Machine, h: &EnclaveHandle) -> Result<(EnclaveMeta, ThreadMeta), SmError> {
    let e = read_page(m, h.space, h.enclave_page, |m, va| {
        Ok(monitor_tweak(m, h.space, va, ENCLAVE_PAGE_TAG))
    })
    .map_err(|_| SmError::BadHandle)?;
    let t = read_page(m, h.space, h.thread_page, |m, va| {
        Ok(monitor_tweak(m, h.space, va, THREAD_PAGE_TAG))
    })
    .map_err(|_| SmError::BadHandle)?;
    let e = EnclaveMeta::decode(&e).map_err(|_| SmError::BadHandle)?;
    let t = ThreadMeta::decode(&t).map_err(|_| SmError::BadHandle)?;
    if e.thread_page != h.thread_page || t.enclave_page != h.enclave_page {
        return Err(SmError::BadHandle);
    }
    Ok((e, t))
}

fn store_enclave_meta(m: &mut Machine, h: &EnclaveHandle, e: &EnclaveMeta) -> Result<(), SmError> {
    write_page(m, h.space, h.enclave_page, &e.encode(), |m, va| {
        Ok(monitor_tweak(m, h.space, va, ENCLAVE_PAGE_TAG))
    })
}

fn store_thread_meta(m: &mut Machine, h: &EnclaveHandle, t: &ThreadMeta) -> Result<(), SmError> {
    write_page(m, h.space, h.thread_page, &t.encode(), |m, va| {
        Ok(monitor_tweak(m, h.space, va, THREAD_PAGE_TAG))
    })
}

fn user_csr(m: &Machine) -> (RangeReg, [u64; 2]) {
    let c = m.csr();
    (
        *c.range(Prv::U),
        [c.sid(Prv::U, SidIndex::Sid0), c.sid(Prv::U, SidIndex::Sid1)],
    )
}

fn set_user_csr(m: &mut Machine, range: RangeReg, sid: [u64; 2]) {
    m.write_csr(Prv::M, CsrWrite::Range(Prv::U, range))
        .expect("saved range was valid when saved");
    m.write_csr(Prv::M, CsrWrite::Sid(Prv::U, SidIndex::Sid0, sid[0])).unwrap();
    m.write_csr(Prv::M, CsrWrite::Sid(Prv::U, SidIndex::Sid1, sid[1])).unwrap();
}

/// Leaves enclave context: M-level CSRs cleared, host U-level CSRs back.
fn leave_enclave(m: &mut Machine, meta: &EnclaveMeta) {
    m.clear_csr_level(Prv::M, Prv::M).unwrap();
    set_user_csr(m, meta.host_urange, meta.host_usid);
    m.active_enclave = None;
}

fn page_aligned(va: u64) -> Result<(), SmError> {
    if va.is_multiple_of(PAGE_BYTES) {
        Ok(())
    } else {
        Err(SmError::RangeViolation(va))
    }
}

#[derive(Debug, Clone)]
pub struct SecurityMonitor {
    config: SmConfig,
    next_rtid: u64,
}

impl Default for SecurityMonitor {
    fn default() -> Self {
        Self::new(SmConfig::default())
    }
}

impl SecurityMonitor {
    pub fn new(config: SmConfig) -> Self {
        SecurityMonitor {
            config,
            next_rtid: 1,
        }
    }

    pub fn config(&self) -> &SmConfig {
        &self.config
    }

    /// Runtime id the next ECREATE will hand out.
    pub fn next_rtid(&self) -> u64 {
        self.next_rtid
    }

    fn active(&self, m: &Machine) -> Result<EnclaveHandle, SmError> {
        match m.active_enclave {
            Some(h) if m.prv == Prv::U => Ok(h),
            _ => Err(SmError::NotInEnclave),
        }
    }

    pub fn ecreate(&mut self, m: &mut Machine, req: &CreateRequest) -> Result<EnclaveHandle, SmError> {
        if m.active_enclave.is_some() {
            return Err(SmError::Busy);
        }
        let cpu_key = m.cpu_key(Prv::M)?;
        let image: EnclaveImage = match &req.image {
            LoadedImage::Plain(i) => i.clone(),
            LoadedImage::Wrapped(w) => w
                .unwrap_with(&developer_key(&cpu_key, &w.developer_id()))
                .map_err(|_| SmError::ImageAuthFailure)?,
        };
        image.validate()?;
        page_aligned(req.base)?;
        page_aligned(req.enclave_page)?;
        page_aligned(req.thread_page)?;
        let span = image.span_pages();
        let total = span + req.stack_pages + req.heap_pages;
        if total > MAX_ENCLAVE_PAGES {
            return Err(SmError::Capacity);
        }
        let mrange = RangeReg::new(req.base, total * PAGE_BYTES);
        for va in [req.enclave_page, req.thread_page] {
            if mrange.contains(va) {
                return Err(SmError::RangeViolation(va));
            }
        }
        if req.enclave_page == req.thread_page {
            return Err(SmError::RangeViolation(req.thread_page));
        }
        let rtid = self.next_rtid;
        self.next_rtid += 1;
        let encid = image.encid()?;
        let mut meta = EnclaveMeta {
            state: EnclaveState::Loaded,
            encid,
            rtid,
            entry: req.base + image.entry_offset,
            mrange,
            fault_count: 0,
            shared_color: derive_truncated_encid(&cpu_key, &encid).low_word(),
            thread_page: req.thread_page,
            host_prv: Prv::U,
            host_regs: RegFile::default(),
            host_urange: RangeReg::DISABLED,
            host_usid: [0, 0],
            bitmap: [0; layout::BITMAP_BYTES],
            shm_pages: Vec::new(),
            swap: Vec::new(),
        };
        let view = enclave_view(&meta);

        for p in &image.pages {
            let va = req.base + p.index as u64 * PAGE_BYTES;
            let ctx = PageCtx::new(p.page_type, p.perms);
            write_page(m, req.space, va, &p.data, |m, line| ctx_tweak(m, &view, line, &ctx))?;
            meta.claim(va);
        }
        let zero = vec![0u8; PAGE];
        let stack = PageCtx::new(PageType::Regular, Perms::R | Perms::W);
        for i in 0..req.stack_pages {
            let va = req.base + (span + i) * PAGE_BYTES;
            write_page(m, req.space, va, &zero, |m, line| ctx_tweak(m, &view, line, &stack))?;
            meta.claim(va);
        }

        let h = EnclaveHandle {
            space: req.space,
            enclave_page: req.enclave_page,
            thread_page: req.thread_page,
        };
        store_enclave_meta(m, &h, &meta)?;
        store_thread_meta(
            m,
            &h,
            &ThreadMeta {
                in_enclave: false,
                enclave_page: req.enclave_page,
                saved: None,
            },
        )?;
        Ok(h)
    }

    /// Enters a loaded enclave, or resumes an interrupted one. `args` land in
    /// a0..a7 on a fresh entry and are ignored on resume.
    pub fn eenter(&mut self, m: &mut Machine, h: &EnclaveHandle, args: &[u64]) -> Result<(), SmError> {
        if m.active_enclave.is_some() {
            return Err(SmError::Busy);
        }
        let (mut meta, mut thread) = load_meta(m, h)?;
        let resume = match meta.state {
            EnclaveState::Loaded => None,
            EnclaveState::Interrupted => Some(thread.saved.ok_or(SmError::BadHandle)?),
            s => return Err(SmError::WrongState(s)),
        };

        let regs = match &resume {
            Some(saved) => {
                set_user_csr(m, saved.urange, saved.usid);
                saved.regs
            }
            None => {
                meta.host_prv = m.prv;
                meta.host_regs = m.regs;
                (meta.host_urange, meta.host_usid) = user_csr(m);
                set_user_csr(m, RangeReg::DISABLED, [0, 0]);
                let mut r = RegFile {
                    pc: meta.entry,
                    ..RegFile::default()
                };
                for (slot, v) in RegFile::ARGS.zip(args) {
                    r.x[slot] = *v;
                }
                r
            }
        };
        m.write_csr(Prv::M, CsrWrite::Range(Prv::M, meta.mrange))?;
        m.write_csr(Prv::M, CsrWrite::Sid(Prv::M, SidIndex::Sid0, meta.rtid))?;
        m.write_csr(Prv::M, CsrWrite::Sid(Prv::M, SidIndex::Sid1, meta.shared_color))?;

        meta.state = EnclaveState::Running;
        thread.in_enclave = true;
        thread.saved = None;
        store_enclave_meta(m, h, &meta)?;
        store_thread_meta(m, h, &thread)?;
        m.regs = regs;
        m.prv = Prv::U;
        m.active_enclave = Some(*h);
        Ok(())
    }

    /// Returns to the host. a0 and a1 carry the enclave's values; every
    /// other register is the host's from before entry.
    pub fn eexit(&mut self, m: &mut Machine) -> Result<(u64, u64), SmError> {
        let h = self.active(m)?;
        let (mut meta, mut thread) = load_meta(m, &h)?;
        let ret = (m.regs.x[RegFile::A0], m.regs.x[RegFile::A1]);
        meta.state = EnclaveState::Loaded;
        thread.in_enclave = false;
        store_enclave_meta(m, &h, &meta)?;
        store_thread_meta(m, &h, &thread)?;
        leave_enclave(m, &meta);
        m.regs = meta.host_regs;
        m.regs.x[RegFile::A0] = ret.0;
        m.regs.x[RegFile::A1] = ret.1;
        m.prv = meta.host_prv;
        Ok(ret)
    }

    /// Asynchronous exit: the enclave context goes to the thread page and
    /// the OS gets a zeroed register file.
    pub fn interrupt(&mut self, m: &mut Machine) -> Result<(), SmError> {
        let h = self.active(m)?;
        let (mut meta, mut thread) = load_meta(m, &h)?;
        let (urange, usid) = user_csr(m);
        thread.saved = Some(SavedContext {
            regs: m.regs,
            urange,
            usid,
        });
        thread.in_enclave = false;
        meta.state = EnclaveState::Interrupted;
        store_thread_meta(m, &h, &thread)?;
        store_enclave_meta(m, &h, &meta)?;
        leave_enclave(m, &meta);
        m.regs = RegFile::default();
        m.prv = Prv::S;
        Ok(())
    }

    /// Claims and zeroes one page in the given context.
    pub fn eprepare(&mut self, m: &mut Machine, va: u64, ctx: PageCtx) -> Result<(), SmError> {
        let h = self.active(m)?;
        page_aligned(va)?;
        let (mut meta, _) = load_meta(m, &h)?;
        self.check_placement(m, &meta, va, ctx.page_type)?;
        if meta.owns(va) {
            return Err(SmError::DoubleMap(va));
        }
        let view = m.csr().clone();
        let zero = vec![0u8; PAGE];
        write_page(m, h.space, va, &zero, |m, line| ctx_tweak(m, &view, line, &ctx))?;
        if !meta.claim(va) {
            return Err(SmError::Capacity);
        }
        store_enclave_meta(m, &h, &meta)
    }

    fn check_placement(&self, m: &Machine, meta: &EnclaveMeta, va: u64, ty: PageType) -> Result<(), SmError> {
        match ty {
            PageType::Monitor => Err(SmError::MonitorTypeForbidden),
            PageType::Unprotected => Err(SmError::InvalidCombination),
            PageType::Regular | PageType::ShEnclave if meta.mrange.contains(va) => Ok(()),
            PageType::Shm if m.csr().range(Prv::U).contains(va) && !meta.mrange.contains(va) => Ok(()),
            _ => Err(SmError::RangeViolation(va)),
        }
    }

    pub fn edestroy(&mut self, m: &mut Machine, va: u64) -> Result<(), SmError> {
        let h = self.active(m)?;
        let (mut meta, _) = load_meta(m, &h)?;
        if !meta.owns(va) {
            return Err(SmError::NotOwned(va));
        }
        destroy_page(m, h.space, va)?;
        meta.release(va);
        if let Some(i) = meta.live_swap(va) {
            meta.swap[i].live = false;
        }
        store_enclave_meta(m, &h, &meta)
    }

    /// Re-encrypts a page from `old` to `new` in place.
    pub fn emod(&mut self, m: &mut Machine, va: u64, old: PageCtx, new: PageCtx) -> Result<(), SmError> {
        let h = self.active(m)?;
        page_aligned(va)?;
        let (meta, _) = load_meta(m, &h)?;
        if !meta.owns(va) {
            return Err(SmError::NotOwned(va));
        }
        self.check_placement(m, &meta, va, new.page_type)?;
        let view = m.csr().clone();
        // Validate the new context before touching memory.
        ctx_tweak(m, &view, va, &new)?;
        let data = read_page(m, h.space, va, |m, line| ctx_tweak(m, &view, line, &old))
            .map_err(|_| SmError::AuthenticationError(va))?;
        write_page(m, h.space, va, &data, |m, line| ctx_tweak(m, &view, line, &new))
    }

    pub fn egetsealkey(&mut self, m: &mut Machine) -> Result<Key, SmError> {
        let h = self.active(m)?;
        let (meta, _) = load_meta(m, &h)?;
        Ok(seal_key(&m.cpu_key(Prv::M)?, &meta.encid))
    }

    /// Seals an enclave page into the OS page at `temp_va` and invalidates
    /// the original.
    pub fn swap_out(&mut self, m: &mut Machine, h: &EnclaveHandle, va: u64, temp_va: u64) -> Result<(), SmError> {
        if m.active_enclave.is_some() {
            return Err(SmError::Busy);
        }
        page_aligned(va)?;
        if va == h.enclave_page || va == h.thread_page {
            return Err(SmError::TypeNotSwappable(va));
        }
        let (mut meta, _) = load_meta(m, h)?;
        if meta.shm_pages.contains(&va) {
            return Err(SmError::TypeNotSwappable(va));
        }
        if !meta.owns(va) {
            return Err(SmError::NotOwned(va));
        }
        if meta.live_swap(va).is_some() {
            return Err(SmError::AlreadySwapped(va));
        }
        let pte: Pte = m.pte(h.space, va).ok_or(SmError::NotOwned(va))?;
        let page_type = match pte.rsw {
            Rsw::SID0 => PageType::Regular,
            Rsw::SID1 => PageType::ShEnclave,
            _ => return Err(SmError::TypeNotSwappable(va)),
        };
        let view = enclave_view(&meta);
        let ctx = PageCtx::new(page_type, pte.perms);
        let mut data = read_page(m, h.space, va, |m, line| ctx_tweak(m, &view, line, &ctx))
            .map_err(|_| SmError::AuthenticationError(va))?;

        let cpu_key = m.cpu_key(Prv::M)?;
        let mut nonce: Nonce = [0; 16];
        m.trng(Prv::M, &mut nonce[..12])?;
        let perms = pte.perms & (Perms::R | Perms::W | Perms::X);
        let ad = swap_ad(meta.rtid, va, perms, pte.rsw, &meta.mrange);
        let tag = Ascon128.seal(&swap_key(&cpu_key, meta.rtid), &nonce, &ad, &mut data);

        m.store(h.space, temp_va, &data, Prv::S)?;
        let rec = SwapRecord {
            va,
            nonce,
            tag,
            perms,
            rsw: pte.rsw,
            live: true,
        };
        if !meta.push_swap(rec) {
            return Err(SmError::Capacity);
        }
        destroy_page(m, h.space, va)?;
        store_enclave_meta(m, h, &meta)
    }

    /// Restores a sealed page from `temp_va` to `va`, which the OS must have
    /// mapped again.
    pub fn swap_in(&mut self, m: &mut Machine, h: &EnclaveHandle, va: u64, temp_va: u64) -> Result<(), SmError> {
        if m.active_enclave.is_some() {
            return Err(SmError::Busy);
        }
        let (mut meta, _) = load_meta(m, h)?;
        let idx = meta.live_swap(va).ok_or(SmError::NoRecord(va))?;
        let rec = meta.swap[idx];
        let mut data = m.load(h.space, temp_va, PAGE, Prv::S)?;
        let cpu_key = m.cpu_key(Prv::M)?;
        let ad = swap_ad(meta.rtid, va, rec.perms, rec.rsw, &meta.mrange);
        Ascon128
            .open(&swap_key(&cpu_key, meta.rtid), &rec.nonce, &ad, &mut data, &rec.tag)
            .map_err(|_| SmError::SwapAuthFailure(va))?;
        let page_type = if rec.rsw == Rsw::SID1 {
            PageType::ShEnclave
        } else {
            PageType::Regular
        };
        let view = enclave_view(&meta);
        let ctx = PageCtx::new(page_type, rec.perms);
        write_page(m, h.space, va, &data, |m, line| ctx_tweak(m, &view, line, &ctx))?;
        meta.swap[idx].live = false;
        store_enclave_meta(m, h, &meta)
    }

    /// Authentication exception handler: counts faults against the running
    /// enclave and terminates it at the threshold.
    pub fn handle_auth_fault(&mut self, m: &mut Machine, trap: &Trap) -> Disposition {
        debug_assert_eq!(trap.kind, TrapKind::AuthenticationException);
        let Some(h) = m.active_enclave else {
            return Disposition::RetryDenied;
        };
        let Ok((mut meta, mut thread)) = load_meta(m, &h) else {
            return Disposition::RetryDenied;
        };
        meta.fault_count += 1;
        if meta.fault_count >= self.config.fault_threshold {
            meta.state = EnclaveState::Terminated;
            thread.in_enclave = false;
            let stored = store_enclave_meta(m, &h, &meta).and(store_thread_meta(m, &h, &thread));
            debug_assert!(stored.is_ok());
            leave_enclave(m, &meta);
            m.regs = meta.host_regs;
            m.regs.x[RegFile::A0] = u64::MAX;
            m.prv = meta.host_prv;
            return Disposition::EnclaveTerminated;
        }
        m.ticks += self.config.fault_delay;
        if store_enclave_meta(m, &h, &meta).is_err() {
            return Disposition::RetryDenied;
        }
        match self.config.fault_delay {
            0 => Disposition::RetryDenied,
            t => Disposition::Delay(t),
        }
    }

    /// Reads an enclave's metadata on behalf of M-mode tooling.
    pub fn inspect(&self, m: &mut Machine, h: &EnclaveHandle) -> Result<(EnclaveMeta, ThreadMeta), SmError> {
        load_meta(m, h)
    }
}

/// An access that trapped, with the monitor's response when the trap was an
/// authentication exception.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{trap}")]
pub struct Fault {
    pub trap: Trap,
    pub disposition: Option<Disposition>,
}

/// A machine with its security monitor installed.
#[derive(Debug)]
pub struct Platform {
    pub machine: Machine,
    pub sm: SecurityMonitor,
    next_frame: u64,
}

/// First physical frame handed out by [`Platform::alloc_frame`].
pub const FIRST_FRAME: u64 = 0x100;

impl Platform {
    pub fn new(config: MachineConfig, sm: SmConfig) -> Self {
        Platform {
            machine: Machine::new(config),
            sm: SecurityMonitor::new(sm),
            next_frame: FIRST_FRAME,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(MachineConfig::from_seed(seed), SmConfig::default())
    }

    pub fn alloc_frame(&mut self) -> u64 {
        let f = self.next_frame;
        self.next_frame += 1;
        f
    }

    fn route<T>(&mut self, r: Result<T, Trap>) -> Result<T, Fault> {
        r.map_err(|trap| {
            let disposition = (trap.kind == TrapKind::AuthenticationException)
                .then(|| self.sm.handle_auth_fault(&mut self.machine, &trap));
            Fault { trap, disposition }
        })
    }

    pub fn read(&mut self, space: SpaceId, va: u64, len: usize, prv: Prv) -> Result<Vec<u8>, Fault> {
        let r = self.machine.load(space, va, len, prv);
        self.route(r)
    }

    pub fn write(&mut self, space: SpaceId, va: u64, data: &[u8], prv: Prv) -> Result<(), Fault> {
        let r = self.machine.store(space, va, data, prv);
        self.route(r)
    }

    pub fn fetch(&mut self, space: SpaceId, va: u64, len: usize, prv: Prv) -> Result<Vec<u8>, Fault> {
        let r = self.machine.fetch(space, va, len, prv);
        self.route(r)
    }

    pub fn access(&mut self, space: SpaceId, va: u64, kind: AccessKind, data: &[u8], prv: Prv) -> Result<Vec<u8>, Fault> {
        match kind {
            AccessKind::Read => self.read(space, va, data.len(), prv),
            AccessKind::Fetch => self.fetch(space, va, data.len(), prv),
            AccessKind::Write | AccessKind::Init => self.write(space, va, data, prv).map(|_| Vec::new()),
        }
    }

    /// Maps an enclave the way an honest OS would and creates it. The two
    /// MONITOR pages go right after the enclave range.
    pub fn load_enclave(
        &mut self,
        space: SpaceId,
        base: u64,
        image: &LoadedImage,
        stack_pages: u64,
        heap_pages: u64,
    ) -> Result<EnclaveHandle, SmError> {
        let shell = image.shell();
        let span = shell.span_pages();
        for p in &shell.pages {
            let ppn = self.alloc_frame();
            let rsw = p.page_type.rsw().expect("image pages are enclave types");
            let pte = Pte::new(ppn, p.perms | Perms::U, rsw);
            self.machine.map_page(Prv::S, space, base + p.index as u64 * PAGE_BYTES, pte)?;
        }
        for i in 0..stack_pages {
            let ppn = self.alloc_frame();
            let pte = Pte::new(ppn, Perms::U | Perms::R | Perms::W, Rsw::SID0);
            self.machine.map_page(Prv::S, space, base + (span + i) * PAGE_BYTES, pte)?;
        }
        let end = base + (span + stack_pages + heap_pages) * PAGE_BYTES;
        let (enclave_page, thread_page) = (end, end + PAGE_BYTES);
        for va in [enclave_page, thread_page] {
            let ppn = self.alloc_frame();
            self.machine
                .map_page(Prv::S, space, va, Pte::new(ppn, Perms::R | Perms::W, Rsw::NONE))?;
        }
        let req = CreateRequest {
            image: image.clone(),
            space,
            base,
            stack_pages,
            heap_pages,
            enclave_page,
            thread_page,
        };
        self.sm.ecreate(&mut self.machine, &req)
    }

    /// Maps a fresh frame at `va` with user attributes for the given type.
    pub fn map_fresh(&mut self, space: SpaceId, va: u64, perms: Perms, rsw: Rsw) -> Result<u64, ConfigError> {
        let ppn = self.alloc_frame();
        self.machine.map_page(Prv::S, space, va, Pte::new(ppn, perms, rsw))?;
        Ok(ppn)
    }
}
