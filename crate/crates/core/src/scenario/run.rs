// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use super::{Action, ActorKind, Addr, CsrName, CtxSpec, FrameSpec, ImageSpec, Outcome, Scenario, ScriptError, Verdict, DEFAULT_SPACE};
use crate::crypto::Key;
use crate::csr::{CsrWrite, RangeReg};
use crate::machine::{ConfigError, EnclaveHandle, Pte, SpaceId, TrapKind, PAGE_BYTES};
use crate::mee::RawLine;
use crate::monitor::image::{EnclaveImage, ImagePage, LoadedImage};
use crate::monitor::{Disposition, Fault, PageCtx, Platform, SmError};
use crate::tweak::{PageType, Perms, Prv, Rsw, Sid, LINE_BYTES};

/// Address space holding the OS's kernel aliases of physical frames.
pub const KERNEL_SPACE: SpaceId = 0;
const KERNEL_ALIAS_BASE: u64 = 0x7f00_0000_0000;
const DEVELOPER_ID: [u8; 16] = [0xd0; 16];

/// What one step did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: usize,
    pub line: usize,
    pub actor: String,
    pub text: String,
    /// `ok`, `ok: DETAIL`, or the reason the step stopped or was tolerated.
    pub result: String,
}

/// Full record of a run: verdict, per-step log and the final platform.
#[derive(Debug)]
pub struct Trace {
    pub verdict: Verdict,
    pub steps: Vec<StepRecord>,
    pub platform: Platform,
}

enum Stop {
    Detected(String, String),
    Terminated(String),
    Mismatch(String),
    Script(String),
}

impl From<Fault> for Stop {
    fn from(f: Fault) -> Self {
        match f.disposition {
            Some(Disposition::EnclaveTerminated) => Stop::Terminated(f.trap.to_string()),
            _ => Stop::Detected(f.trap.kind.name().into(), f.trap.to_string()),
        }
    }
}

fn sm_kind(e: &SmError) -> &'static str {
    match e {
        SmError::BadHandle => "bad-handle",
        SmError::WrongState(_) => "wrong-state",
        SmError::Busy => "busy",
        SmError::NotInEnclave => "not-in-enclave",
        SmError::ImageAuthFailure => "image-auth",
        SmError::InvalidImage(_) => "invalid-image",
        SmError::MonitorTypeForbidden => "monitor-type-forbidden",
        SmError::DoubleMap(_) => "double-map",
        SmError::RangeViolation(_) => "range-violation",
        SmError::NotOwned(_) => "not-owned",
        SmError::TypeNotSwappable(_) => "type-not-swappable",
        SmError::SwapAuthFailure(_) => "swap-auth",
        SmError::NoRecord(_) => "no-record",
        SmError::AlreadySwapped(_) => "already-swapped",
        SmError::AuthenticationError(_) => "authentication-error",
        SmError::InvalidCombination => "invalid-combination",
        SmError::Capacity => "capacity",
        SmError::Trap(t) => t.kind.name(),
        SmError::Config(c) => config_kind(c),
    }
}

fn config_kind(e: &ConfigError) -> &'static str {
    match e {
        ConfigError::Privilege { .. } => TrapKind::PrivilegeViolation.name(),
        _ => "config",
    }
}

impl From<SmError> for Stop {
    fn from(e: SmError) -> Self {
        Stop::Detected(sm_kind(&e).into(), e.to_string())
    }
}

impl From<ConfigError> for Stop {
    fn from(e: ConfigError) -> Self {
        Stop::Detected(config_kind(&e).into(), e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
struct EnclaveInfo {
    handle: EnclaveHandle,
    base: u64,
}

struct Runtime<'s> {
    sc: &'s Scenario,
    p: Platform,
    enclaves: BTreeMap<String, EnclaveInfo>,
    labels: BTreeMap<String, Vec<u8>>,
    raw: BTreeMap<String, Vec<(u64, RawLine)>>,
    seal_keys: BTreeMap<String, Key>,
}

fn script<T>(msg: impl Into<String>) -> Result<T, Stop> {
    Err(Stop::Script(msg.into()))
}

pub fn build_image(spec: &ImageSpec) -> EnclaveImage {
    EnclaveImage {
        entry_offset: spec.entry,
        developer_id: DEVELOPER_ID,
        pages: vec![
            ImagePage::new(0, Perms::R | Perms::X, PageType::ShEnclave, &spec.code),
            ImagePage::new(1, Perms::R | Perms::W, PageType::Regular, &spec.data),
        ],
    }
}

fn page_ctx(c: &CtxSpec) -> PageCtx {
    let ctx = PageCtx::new(c.page_type, c.perms);
    match c.sid {
        Some(s) => ctx.with_sid(Sid::new(s)),
        None => ctx,
    }
}

impl Runtime<'_> {
    fn enclave(&self, name: &str) -> Result<EnclaveInfo, Stop> {
        match self.enclaves.get(name) {
            Some(e) => Ok(*e),
            None => script(format!("enclave {name} has not been spawned")),
        }
    }

    /// Resolves an address to its space and virtual address.
    fn resolve(&self, a: &Addr, space: Option<u32>) -> Result<(SpaceId, u64), Stop> {
        let Some(sym) = &a.symbol else {
            return Ok((space.unwrap_or(DEFAULT_SPACE), a.offset));
        };
        let (name, part) = match sym.split_once('.') {
            Some((n, p)) => (n, Some(p)),
            None => (sym.as_str(), None),
        };
        let e = self.enclave(name)?;
        let base = match part {
            None => e.base,
            Some("meta") => e.handle.enclave_page,
            Some("thread") => e.handle.thread_page,
            Some(p) => return script(format!("unknown symbol suffix .{p}")),
        };
        Ok((space.unwrap_or(e.handle.space), base.wrapping_add(a.offset)))
    }

    fn pte(&self, space: SpaceId, va: u64) -> Result<Pte, Stop> {
        match self.p.machine.pte(space, va) {
            Some(p) => Ok(p),
            None => script(format!("{va:#x} is not mapped in space {space}")),
        }
    }

    /// Splits `[va, va+len)` into per-page pieces.
    fn pages(va: u64, len: usize) -> impl Iterator<Item = (u64, usize, usize)> {
        let mut pos = 0usize;
        std::iter::from_fn(move || {
            if pos >= len {
                return None;
            }
            let cur = va + pos as u64;
            let n = ((PAGE_BYTES - cur % PAGE_BYTES) as usize).min(len - pos);
            let item = (cur, pos, n);
            pos += n;
            Some(item)
        })
    }

    /// Where the OS touches `va`: its own supervisor mapping, or a kernel
    /// alias of the frame when the page belongs to user mode.
    fn os_view(&mut self, space: SpaceId, va: u64) -> Result<(SpaceId, u64), Stop> {
        let pte = self.pte(space, va)?;
        if !pte.perms.contains(Perms::U) {
            return Ok((space, va));
        }
        let alias = KERNEL_ALIAS_BASE | pte.ppn << 12;
        self.p
            .machine
            .map_page(Prv::S, KERNEL_SPACE, alias, Pte::new(pte.ppn, Perms::R | Perms::W, Rsw::NONE))?;
        Ok((KERNEL_SPACE, alias | (va & (PAGE_BYTES - 1))))
    }

    fn os_read(&mut self, space: SpaceId, va: u64, len: usize) -> Result<Vec<u8>, Stop> {
        let mut out = Vec::with_capacity(len);
        for (cur, _, n) in Self::pages(va, len) {
            let (s, v) = self.os_view(space, cur)?;
            out.extend(self.p.read(s, v, n, Prv::S)?);
        }
        Ok(out)
    }

    fn os_write(&mut self, space: SpaceId, va: u64, data: &[u8]) -> Result<(), Stop> {
        for (cur, pos, n) in Self::pages(va, data.len()) {
            let (s, v) = self.os_view(space, cur)?;
            self.p.write(s, v, &data[pos..pos + n], Prv::S)?;
        }
        Ok(())
    }

    fn actor_prv(kind: ActorKind) -> Prv {
        match kind {
            ActorKind::Os => Prv::S,
            _ => Prv::U,
        }
    }

    fn check(expect: &Option<Vec<u8>>, got: &[u8]) -> Result<String, Stop> {
        match expect {
            Some(e) if e != got => Err(Stop::Mismatch(format!(
                "expected {}, got {}",
                hex::encode(e),
                hex::encode(got)
            ))),
            _ => Ok(format!("ok: {}", hex::encode(got))),
        }
    }

    fn exec(&mut self, actor: &str, kind: ActorKind, action: &Action) -> Result<String, Stop> {
        if kind == ActorKind::Enclave {
            let e = self.enclave(actor)?;
            if self.p.machine.active_enclave != Some(e.handle) {
                return script(format!("enclave {actor} is not running"));
            }
        }
        let prv = Self::actor_prv(kind);
        let m = &mut self.p.machine;
        match action {
            Action::Spawn { enclave, image, base, stack, heap, space } => {
                if self.enclaves.contains_key(enclave) {
                    return script(format!("enclave {enclave} already spawned"));
                }
                let Some(spec) = self.sc.images.get(image) else {
                    return script(format!("unknown image {image}"));
                };
                let (_, base) = self.resolve(base, Some(*space))?;
                let img = LoadedImage::Plain(build_image(spec));
                let handle = self.p.load_enclave(*space, base, &img, *stack, *heap)?;
                self.enclaves.insert(enclave.clone(), EnclaveInfo { handle, base });
                Ok(format!("ok: rtid {}", self.p.sm.next_rtid() - 1))
            }
            Action::Enter { enclave, args } => {
                let e = self.enclave(enclave)?;
                let m = &mut self.p.machine;
                if m.active_enclave.is_none() {
                    m.prv = prv;
                }
                self.p.sm.eenter(&mut self.p.machine, &e.handle, args)?;
                Ok("ok".into())
            }
            Action::Exit => {
                let (a0, a1) = self.p.sm.eexit(m)?;
                Ok(format!("ok: a0={a0:#x} a1={a1:#x}"))
            }
            Action::Read { addr, len, expect, space } => {
                let (s, va) = self.resolve(addr, *space)?;
                let got = match kind {
                    ActorKind::Os => self.os_read(s, va, *len)?,
                    _ => self.p.read(s, va, *len, prv)?,
                };
                Self::check(expect, &got)
            }
            Action::Fetch { addr, len, expect, space } => {
                let (s, va) = self.resolve(addr, *space)?;
                let got = self.p.fetch(s, va, *len, prv)?;
                Self::check(expect, &got)
            }
            Action::Write { addr, data, space } => {
                let (s, va) = self.resolve(addr, *space)?;
                match kind {
                    ActorKind::Os => self.os_write(s, va, data)?,
                    _ => self.p.write(s, va, data, prv)?,
                }
                Ok("ok".into())
            }
            Action::Csr { name, values } => {
                let w = match *name {
                    CsrName::Range(l) => CsrWrite::Range(l, RangeReg::new(values[0], values[1])),
                    CsrName::Sid(l, i) => CsrWrite::Sid(l, i, values[0]),
                };
                m.write_csr(prv, w)?;
                Ok("ok".into())
            }
            Action::SetReg { reg, value } => {
                if *reg != 0 {
                    m.regs.x[*reg] = *value;
                }
                Ok("ok".into())
            }
            Action::CheckReg { reg, value } => {
                let got = m.regs.x[*reg];
                if got != *value {
                    return Err(Stop::Mismatch(format!("x{reg} is {got:#x}, expected {value:#x}")));
                }
                Ok("ok".into())
            }
            Action::Eprepare { addr, ctx } => {
                let (_, va) = self.resolve(addr, None)?;
                self.p.sm.eprepare(&mut self.p.machine, va, page_ctx(ctx))?;
                Ok("ok".into())
            }
            Action::Edestroy { addr } => {
                let (_, va) = self.resolve(addr, None)?;
                self.p.sm.edestroy(&mut self.p.machine, va)?;
                Ok("ok".into())
            }
            Action::Emod { addr, old, new } => {
                let (_, va) = self.resolve(addr, None)?;
                self.p
                    .sm
                    .emod(&mut self.p.machine, va, page_ctx(old), page_ctx(new))?;
                Ok("ok".into())
            }
            Action::SealKey { save_as, expect } => {
                let key = self.p.sm.egetsealkey(m)?;
                if let Some(label) = expect {
                    match self.seal_keys.get(label) {
                        None => return script(format!("no seal key saved as {label}")),
                        Some(k) if *k != key => {
                            return Err(Stop::Mismatch(format!("seal key differs from {label}")))
                        }
                        Some(_) => {}
                    }
                }
                if let Some(label) = save_as {
                    self.seal_keys.insert(label.clone(), key);
                }
                Ok(format!("ok: {}", hex::encode(&key[..8])))
            }
            Action::Map { addr, frame, perms, rsw, space } => {
                let (s, va) = self.resolve(addr, *space)?;
                let ppn = match frame {
                    FrameSpec::New => self.p.alloc_frame(),
                    FrameSpec::Ppn(n) => *n,
                    FrameSpec::SameAs(a) => {
                        let (fs, fva) = self.resolve(a, None)?;
                        self.pte(fs, fva)?.ppn
                    }
                };
                self.p.machine.map_page(Prv::S, s, va, Pte::new(ppn, *perms, *rsw))?;
                Ok(format!("ok: ppn {ppn:#x}"))
            }
            Action::Unmap { addr, space } => {
                let (s, va) = self.resolve(addr, *space)?;
                self.p.machine.unmap_page(Prv::S, s, va)?;
                Ok("ok".into())
            }
            Action::SwapPte { a, b } => {
                let (sa, va) = self.resolve(a, None)?;
                let (sb, vb) = self.resolve(b, None)?;
                let (pa, pb) = (self.pte(sa, va)?, self.pte(sb, vb)?);
                let m = &mut self.p.machine;
                m.map_page(Prv::S, sa, va, pb)?;
                m.map_page(Prv::S, sb, vb, pa)?;
                Ok("ok".into())
            }
            Action::Protect { addr, perms, rsw } => {
                let (s, va) = self.resolve(addr, None)?;
                let mut pte = self.pte(s, va)?;
                pte.perms = *perms;
                if let Some(r) = rsw {
                    pte.rsw = *r;
                }
                self.p.machine.map_page(Prv::S, s, va, pte)?;
                Ok("ok".into())
            }
            Action::Interrupt => {
                self.p.sm.interrupt(m)?;
                Ok("ok".into())
            }
            Action::SwapOut { enclave, addr, temp } | Action::SwapIn { enclave, addr, temp } => {
                let e = self.enclave(enclave)?;
                let (_, va) = self.resolve(addr, None)?;
                let (_, tva) = self.resolve(temp, Some(e.handle.space))?;
                let m = &mut self.p.machine;
                if matches!(action, Action::SwapOut { .. }) {
                    self.p.sm.swap_out(m, &e.handle, va, tva)?;
                } else {
                    self.p.sm.swap_in(m, &e.handle, va, tva)?;
                }
                Ok("ok".into())
            }
            Action::Save { addr, len, label } => {
                let (s, va) = self.resolve(addr, None)?;
                let data = self.os_read(s, va, *len)?;
                self.labels.insert(label.clone(), data);
                Ok("ok".into())
            }
            Action::Load { addr, label } => {
                let Some(data) = self.labels.get(label).cloned() else {
                    return script(format!("nothing saved as {label}"));
                };
                let (s, va) = self.resolve(addr, None)?;
                self.os_write(s, va, &data)?;
                Ok("ok".into())
            }
            Action::Snapshot { addr, pages, label } => {
                let (s, va) = self.resolve(addr, None)?;
                let mut lines = Vec::new();
                for p in 0..*pages {
                    let page_va = (va & !(PAGE_BYTES - 1)) + p * PAGE_BYTES;
                    let Some(pa) = self.p.machine.translate(s, page_va) else {
                        return script(format!("{page_va:#x} is not mapped in space {s}"));
                    };
                    for off in (0..PAGE_BYTES).step_by(LINE_BYTES) {
                        lines.push((pa + off, self.p.machine.raw_line(pa + off)));
                    }
                }
                self.raw.insert(label.clone(), lines);
                Ok("ok".into())
            }
            Action::Restore { label } => {
                let Some(lines) = self.raw.get(label) else {
                    return script(format!("no snapshot named {label}"));
                };
                for (pa, raw) in lines {
                    self.p.machine.restore_raw_line(*pa, raw);
                }
                Ok("ok".into())
            }
            Action::Flip { addr, bit } => {
                let (s, va) = self.resolve(addr, None)?;
                let Some(pa) = self.p.machine.translate(s, va) else {
                    return script(format!("{va:#x} is not mapped in space {s}"));
                };
                self.p.machine.flip_raw_bit(pa, *bit);
                Ok("ok".into())
            }
        }
    }
}

/// Runs a scenario on a fresh platform built from `seed`.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<Verdict, ScriptError> {
    run_scenario_traced(sc, seed).map(|t| t.verdict)
}

pub fn run_scenario_traced(sc: &Scenario, seed: u64) -> Result<Trace, ScriptError> {
    let mut rt = Runtime {
        sc,
        p: Platform::from_seed(seed),
        enclaves: BTreeMap::new(),
        labels: BTreeMap::new(),
        raw: BTreeMap::new(),
        seal_keys: BTreeMap::new(),
    };
    let mut records = Vec::with_capacity(sc.steps.len());
    let mut verdict = None;
    for (i, step) in sc.steps.iter().enumerate() {
        let n = i + 1;
        let Some(actor) = sc.actor(&step.actor) else {
            return Err(ScriptError::Runtime {
                step: n,
                msg: format!("undeclared actor {}", step.actor),
            });
        };
        let res = rt.exec(&step.actor, actor.kind, &step.action);
        let (result, stop) = match res {
            Ok(r) => (r, None),
            Err(Stop::Script(msg)) => return Err(ScriptError::Runtime { step: n, msg }),
            Err(Stop::Detected(kind, detail)) if step.tolerate => {
                (format!("tolerated {kind}: {detail}"), None)
            }
            Err(Stop::Detected(kind, detail)) => {
                (format!("detected {kind}: {detail}"), Some(Outcome::Detected(kind)))
            }
            Err(Stop::Terminated(detail)) => (format!("terminated: {detail}"), Some(Outcome::Terminated)),
            Err(Stop::Mismatch(detail)) => (format!("mismatch: {detail}"), Some(Outcome::Mismatch)),
        };
        records.push(StepRecord {
            step: n,
            line: step.line,
            actor: step.actor.clone(),
            text: step.text.clone(),
            result,
        });
        if let Some(outcome) = stop {
            verdict = Some(Verdict { outcome, at_step: n });
            break;
        }
    }
    Ok(Trace {
        verdict: verdict.unwrap_or(Verdict {
            outcome: Outcome::Allowed,
            at_step: sc.steps.len(),
        }),
        steps: records,
        platform: rt.p,
    })
}
