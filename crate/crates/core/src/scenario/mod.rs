// SPDX-License-Identifier: Apache-2.0

//! Declarative attack scenarios.
//!
//! A scenario file holds one or more scenarios. Lines are whitespace
//! separated tokens; `#` starts a comment; double quotes group a token and
//! understand `\n`, `\t`, `\\`, `\"` and `\xNN`.
//!
//! ```text
//! scenario NAME
//! description free text
//! expect detected KIND at STEP | expect terminated at STEP | expect allowed
//! actor os | actor host | actor physical | actor enclave NAME
//! image NAME [code=TEXT] [data=TEXT] [entry=N]
//! [try] ACTOR ACTION ARGS...
//! ```
//!
//! Steps are numbered from 1 in file order. A step that traps ends the run
//! with `detected KIND`, unless prefixed with `try`. An authentication fault
//! that makes the monitor terminate the running enclave always ends the run
//! with `terminated`. A failed `expect=` data check ends it with `mismatch`.
//! A run that reaches the end is `allowed`.
//!
//! Addresses are `NUMBER`, `SYMBOL` or `SYMBOL+NUMBER`, where a symbol is an
//! enclave name (its base), `NAME.meta` or `NAME.thread` (its MONITOR
//! pages). Numbers are decimal or `0x` hex. Data is text, or hex bytes
//! after a `hex:` prefix.
//!
//! Actions by actor:
//!
//! | actor     | action                                                  |
//! |-----------|---------------------------------------------------------|
//! | host, os  | `spawn E base=ADDR [image=I] [stack=N] [heap=N] [space=N]` |
//! | host, os  | `enter E [ARGS...]`                                     |
//! | host, os, enclave | `read ADDR LEN [expect=DATA]`, `write ADDR DATA` |
//! | host, enclave | `fetch ADDR LEN [expect=DATA]`                      |
//! | host, os, enclave | `csr NAME VALUE...` (`urange B S`, `usid0 V`, ...) |
//! | host, enclave | `setreg xN V`, `checkreg xN V`                      |
//! | enclave   | `exit`, `eprepare ADDR TYPE PERMS [sid=V]`, `edestroy ADDR` |
//! | enclave   | `emod ADDR TYPE PERMS TYPE PERMS [oldsid=V] [newsid=V]` |
//! | enclave   | `sealkey [as LABEL] [expect=LABEL]`                     |
//! | os        | `map ADDR FRAME PERMS RSW [space=N]` (FRAME: `new`, `@ADDR`, number) |
//! | os        | `unmap ADDR`, `swap-pte ADDR ADDR`, `protect ADDR PERMS [rsw=R]` |
//! | os        | `interrupt`, `swap-out E ADDR TEMP`, `swap-in E ADDR TEMP` |
//! | os        | `save ADDR LEN as LABEL`, `load ADDR from LABEL`         |
//! | physical  | `snapshot ADDR [pages=N] as LABEL`, `restore LABEL`, `flip ADDR BIT` |
//!
//! Host accesses run at U in the host space. OS accesses run at S: pages
//! without the U bit are used in place, user pages through a kernel alias of
//! the backing frame. Enclave accesses run at U and require the enclave to
//! be the one currently entered. Enclave images hold a SHENCLAVE code page
//! at the base and a REGULAR data page after it; the stack and heap pages
//! follow, then the two MONITOR pages.

mod parse;
mod report;
mod run;

pub use parse::{parse_scenarios, ScriptError};
pub use report::{junit_report, text_report, ScenarioResult, SuiteResult};
pub use run::{build_image, run_scenario, run_scenario_traced, StepRecord, Trace, KERNEL_SPACE};

use std::fmt;

use crate::tweak::{PageType, Perms, Rsw};

/// Host address space used when a step names none.
pub const DEFAULT_SPACE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActorKind {
    Os,
    Host,
    Enclave,
    Physical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actor {
    pub name: String,
    pub kind: ActorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Outcome {
    Allowed,
    Detected(String),
    Terminated,
    Mismatch,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Allowed => f.write_str("allowed"),
            Outcome::Detected(k) => write!(f, "detected {k}"),
            Outcome::Terminated => f.write_str("terminated"),
            Outcome::Mismatch => f.write_str("mismatch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Verdict {
    pub outcome: Outcome,
    /// 1-based index of the deciding step; the step count for `allowed`.
    pub at_step: usize,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.outcome, self.at_step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Addr {
    pub symbol: Option<String>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSpec {
    New,
    SameAs(Addr),
    Ppn(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtxSpec {
    pub page_type: PageType,
    pub perms: Perms,
    pub sid: Option<u128>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsrName {
    Range(crate::tweak::Prv),
    Sid(crate::tweak::Prv, crate::csr::SidIndex),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSpec {
    pub code: Vec<u8>,
    pub data: Vec<u8>,
    pub entry: u64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            code: vec![0x13, 0x05, 0x10, 0x00],
            data: b"initial".to_vec(),
            entry: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Spawn {
        enclave: String,
        image: String,
        base: Addr,
        stack: u64,
        heap: u64,
        space: u32,
    },
    Enter { enclave: String, args: Vec<u64> },
    Exit,
    Read { addr: Addr, len: usize, expect: Option<Vec<u8>>, space: Option<u32> },
    Write { addr: Addr, data: Vec<u8>, space: Option<u32> },
    Fetch { addr: Addr, len: usize, expect: Option<Vec<u8>>, space: Option<u32> },
    Csr { name: CsrName, values: Vec<u64> },
    SetReg { reg: usize, value: u64 },
    CheckReg { reg: usize, value: u64 },
    Eprepare { addr: Addr, ctx: CtxSpec },
    Edestroy { addr: Addr },
    Emod { addr: Addr, old: CtxSpec, new: CtxSpec },
    SealKey { save_as: Option<String>, expect: Option<String> },
    Map { addr: Addr, frame: FrameSpec, perms: Perms, rsw: Rsw, space: Option<u32> },
    Unmap { addr: Addr, space: Option<u32> },
    SwapPte { a: Addr, b: Addr },
    Protect { addr: Addr, perms: Perms, rsw: Option<Rsw> },
    Interrupt,
    SwapOut { enclave: String, addr: Addr, temp: Addr },
    SwapIn { enclave: String, addr: Addr, temp: Addr },
    Save { addr: Addr, len: usize, label: String },
    Load { addr: Addr, label: String },
    Snapshot { addr: Addr, pages: u64, label: String },
    Restore { label: String },
    Flip { addr: Addr, bit: usize },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Spawn { .. } => "spawn",
            Action::Enter { .. } => "enter",
            Action::Exit => "exit",
            Action::Read { .. } => "read",
            Action::Write { .. } => "write",
            Action::Fetch { .. } => "fetch",
            Action::Csr { .. } => "csr",
            Action::SetReg { .. } => "setreg",
            Action::CheckReg { .. } => "checkreg",
            Action::Eprepare { .. } => "eprepare",
            Action::Edestroy { .. } => "edestroy",
            Action::Emod { .. } => "emod",
            Action::SealKey { .. } => "sealkey",
            Action::Map { .. } => "map",
            Action::Unmap { .. } => "unmap",
            Action::SwapPte { .. } => "swap-pte",
            Action::Protect { .. } => "protect",
            Action::Interrupt => "interrupt",
            Action::SwapOut { .. } => "swap-out",
            Action::SwapIn { .. } => "swap-in",
            Action::Save { .. } => "save",
            Action::Load { .. } => "load",
            Action::Snapshot { .. } => "snapshot",
            Action::Restore { .. } => "restore",
            Action::Flip { .. } => "flip",
        }
    }

    /// Actor kinds allowed to perform this action.
    pub fn allowed_actors(&self) -> &'static [ActorKind] {
        use ActorKind::*;
        match self {
            Action::Spawn { .. } | Action::Enter { .. } => &[Host, Os],
            Action::Read { .. } | Action::Write { .. } | Action::Csr { .. } => &[Host, Os, Enclave],
            Action::Fetch { .. } | Action::SetReg { .. } | Action::CheckReg { .. } => &[Host, Enclave],
            Action::Exit
            | Action::Eprepare { .. }
            | Action::Edestroy { .. }
            | Action::Emod { .. }
            | Action::SealKey { .. } => &[Enclave],
            Action::Map { .. }
            | Action::Unmap { .. }
            | Action::SwapPte { .. }
            | Action::Protect { .. }
            | Action::Interrupt
            | Action::SwapOut { .. }
            | Action::SwapIn { .. }
            | Action::Save { .. }
            | Action::Load { .. } => &[Os],
            Action::Snapshot { .. } | Action::Restore { .. } | Action::Flip { .. } => &[Physical],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    /// Source line, 1-based.
    pub line: usize,
    pub actor: String,
    pub action: Action,
    /// `try` prefix: a trap does not end the run.
    pub tolerate: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub actors: Vec<Actor>,
    pub images: std::collections::BTreeMap<String, ImageSpec>,
    pub steps: Vec<Step>,
    pub expected: Verdict,
}

impl Scenario {
    pub fn actor(&self, name: &str) -> Option<&Actor> {
        self.actors.iter().find(|a| a.name == name)
    }

    /// Attack scenarios expect a detection or termination.
    pub fn is_attack(&self) -> bool {
        self.expected.outcome != Outcome::Allowed
    }
}

const BUILTIN_SOURCES: &[(&str, &str)] = &[
    ("os-read-enclave", include_str!("builtin/os-read-enclave.scn")),
    ("physical-replay", include_str!("builtin/physical-replay.scn")),
    ("dram-duplicate-toggle", include_str!("builtin/dram-duplicate-toggle.scn")),
    ("physical-bit-flip", include_str!("builtin/physical-bit-flip.scn")),
    ("downgrade", include_str!("builtin/downgrade.scn")),
    ("remap", include_str!("builtin/remap.scn")),
    ("cross-enclave-remap", include_str!("builtin/cross-enclave-remap.scn")),
    ("permission-flip", include_str!("builtin/permission-flip.scn")),
    ("swap-replay", include_str!("builtin/swap-replay.scn")),
    ("swap-double-copy", include_str!("builtin/swap-double-copy.scn")),
    ("shm-wrong-key", include_str!("builtin/shm-wrong-key.scn")),
    ("shm-bruteforce", include_str!("builtin/shm-bruteforce.scn")),
    ("encid-bruteforce", include_str!("builtin/encid-bruteforce.scn")),
    ("privilege-separation", include_str!("builtin/privilege-separation.scn")),
    ("shm-happy-path", include_str!("builtin/shm-happy-path.scn")),
    ("code-dedup", include_str!("builtin/code-dedup.scn")),
    ("lifecycle", include_str!("builtin/lifecycle.scn")),
];

/// Source text of the built-in scenarios, by name.
pub fn builtin_sources() -> &'static [(&'static str, &'static str)] {
    BUILTIN_SOURCES
}

pub fn builtin_suite() -> Vec<Scenario> {
    BUILTIN_SOURCES
        .iter()
        .flat_map(|(name, src)| {
            parse_scenarios(src).unwrap_or_else(|e| panic!("builtin scenario {name}: {e}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_meets_expectations() {
        let suite = builtin_suite();
        assert_eq!(suite.len(), BUILTIN_SOURCES.len());
        for seed in [0, 1, 0xdead_beef] {
            let r = SuiteResult::run(&suite, seed);
            assert!(r.all_passed(), "{}", text_report(&r));
        }
    }

    #[test]
    fn traced_run_records_each_step() {
        let sc = &parse_scenarios(include_str!("builtin/physical-bit-flip.scn")).unwrap()[0];
        let t = run_scenario_traced(sc, 3).unwrap();
        assert_eq!(t.steps.len(), 5);
        assert!(t.steps[4].result.starts_with("detected auth"));
        assert!(t.steps[..4].iter().all(|s| s.result.starts_with("ok")));
    }

    #[test]
    fn enclave_steps_need_a_running_enclave() {
        let src = "scenario x\nexpect allowed\nactor host\nactor enclave E\nhost spawn E base=0x40000000\nE read E 1\n";
        let sc = &parse_scenarios(src).unwrap()[0];
        assert!(matches!(run_scenario(sc, 0), Err(ScriptError::Runtime { step: 2, .. })));
    }
}
