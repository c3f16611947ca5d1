// SPDX-License-Identifier: Apache-2.0

//! Bounded search over a malicious supervisor. The OS remaps and reprotects
//! enclave pages, aliases any frame into its own space, rewrites its CSRs,
//! swaps pages and replays raw lines, while the enclave keeps writing fresh
//! random values and reading them back.

use proptest::prelude::*;

use servas_core::csr::{CsrWrite, RangeReg, SidIndex};
use servas_core::machine::{EnclaveHandle, MachineConfig, Pte, PAGE_BYTES};
use servas_core::mee::RawLine;
use servas_core::monitor::image::{EnclaveImage, ImagePage, LoadedImage};
use servas_core::monitor::{Platform, SmConfig};
use servas_core::tweak::{PageType, Perms, Prv, Rsw};

const KERNEL: u32 = 0;
const HOST: u32 = 1;
const BASE: u64 = 0x4000_0000;
const ALIAS: u64 = 0x7f00_0000_0000;
const TEMP: u64 = 0x7000_0000;
/// Code, data and stack.
const PAGES: [u64; 3] = [BASE, BASE + PAGE_BYTES, BASE + 2 * PAGE_BYTES];
const WRITABLE: [usize; 2] = [1, 2];
const OS_FRAMES: usize = 2;

#[derive(Debug, Clone)]
enum Op {
    Remap { page: usize, frame: usize, perms: u8, rsw: u8 },
    AliasRead { frame: usize, rsw: u8, line: u64 },
    AliasWrite { frame: usize, rsw: u8, line: u64, byte: u8 },
    Csr { which: u8, value: u64 },
    SwapOut { page: usize },
    SwapIn { page: usize },
    Capture { frame: usize, line: u64 },
    Replay,
    Flip { frame: usize, bit: usize },
    EnclaveWrite { page: usize, data: [u8; 32] },
    EnclaveRead { page: usize },
    EnclaveExit,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    let frame = 0..PAGES.len() + OS_FRAMES;
    let page = 0..PAGES.len();
    let wpage = prop::sample::select(WRITABLE.to_vec());
    prop_oneof![
        2 => (page.clone(), frame.clone(), 0u8..32, 0u8..4)
            .prop_map(|(page, frame, perms, rsw)| Op::Remap { page, frame, perms, rsw }),
        3 => (frame.clone(), 0u8..4, 0u64..2).prop_map(|(frame, rsw, line)| Op::AliasRead { frame, rsw, line }),
        1 => (frame.clone(), 0u8..4, 0u64..2, any::<u8>())
            .prop_map(|(frame, rsw, line, byte)| Op::AliasWrite { frame, rsw, line, byte }),
        1 => (0u8..3, 0u64..8).prop_map(|(which, value)| Op::Csr { which, value }),
        1 => wpage.clone().prop_map(|page| Op::SwapOut { page }),
        1 => wpage.clone().prop_map(|page| Op::SwapIn { page }),
        1 => (frame.clone(), 0u64..2).prop_map(|(frame, line)| Op::Capture { frame, line }),
        1 => Just(Op::Replay),
        1 => (frame, 0usize..640).prop_map(|(frame, bit)| Op::Flip { frame, bit }),
        3 => (wpage.clone(), any::<[u8; 32]>()).prop_map(|(page, data)| Op::EnclaveWrite { page, data }),
        4 => page.prop_map(|page| Op::EnclaveRead { page }),
        1 => Just(Op::EnclaveExit),
    ]
}

struct World {
    p: Platform,
    h: EnclaveHandle,
    frames: Vec<u64>,
    /// What the enclave last wrote at offset 0 of each page.
    model: Vec<Vec<u8>>,
    /// Every value the enclave ever wrote.
    secrets: Vec<[u8; 32]>,
    captured: Option<(u64, RawLine)>,
}

impl World {
    fn new(seed: u64) -> World {
        let sm = SmConfig {
            fault_threshold: u64::MAX,
            fault_delay: 0,
        };
        let mut p = Platform::new(MachineConfig::from_seed(seed), sm);
        let image = EnclaveImage {
            entry_offset: 0,
            developer_id: [3; 16],
            pages: vec![
                ImagePage::new(0, Perms::R | Perms::X, PageType::ShEnclave, &[0x13; 32]),
                ImagePage::new(1, Perms::R | Perms::W, PageType::Regular, &[0x44; 32]),
            ],
        };
        let h = p.load_enclave(HOST, BASE, &LoadedImage::Plain(image), 1, 0).unwrap();
        let mut frames: Vec<u64> = PAGES.iter().map(|va| p.machine.pte(HOST, *va).unwrap().ppn).collect();
        frames.extend((0..OS_FRAMES).map(|_| p.alloc_frame()));
        for i in 0..PAGES.len() as u64 {
            p.map_fresh(HOST, TEMP + i * PAGE_BYTES, Perms::R | Perms::W, Rsw::NONE).unwrap();
        }
        let model = vec![vec![0x13; 32], vec![0x44; 32], vec![0; 32]];
        World {
            p,
            h,
            frames,
            model,
            secrets: Vec::new(),
            captured: None,
        }
    }

    fn running(&self) -> bool {
        self.p.machine.active_enclave.is_some()
    }

    /// The OS only runs once the enclave has been interrupted.
    fn as_os(&mut self) {
        if self.running() {
            self.p.sm.interrupt(&mut self.p.machine).unwrap();
        }
    }

    fn as_enclave(&mut self) -> bool {
        self.running() || self.p.sm.eenter(&mut self.p.machine, &self.h, &[]).is_ok()
    }

    fn alias(&mut self, frame: usize, rsw: u8) -> u64 {
        let ppn = self.frames[frame];
        let va = ALIAS | ppn << 12;
        let pte = Pte::new(ppn, Perms::R | Perms::W, Rsw::new(rsw).unwrap());
        self.p.machine.map_page(Prv::S, KERNEL, va, pte).unwrap();
        va
    }

    fn step(&mut self, op: &Op) -> Result<(), TestCaseError> {
        match *op {
            Op::Remap { page, frame, perms, rsw } => {
                self.as_os();
                let pte = Pte::new(self.frames[frame], Perms::from_bits_truncate(perms), Rsw::new(rsw).unwrap());
                self.p.machine.map_page(Prv::S, HOST, PAGES[page], pte).unwrap();
            }
            Op::AliasRead { frame, rsw, line } => {
                self.as_os();
                let va = self.alias(frame, rsw) + line * 64;
                if let Ok(got) = self.p.read(KERNEL, va, 32, Prv::S) {
                    prop_assert!(!self.secrets.iter().any(|s| s[..] == got[..]), "OS read an enclave value");
                }
            }
            Op::AliasWrite { frame, rsw, line, byte } => {
                self.as_os();
                let va = self.alias(frame, rsw) + line * 64;
                let _ = self.p.write(KERNEL, va, &[byte; 32], Prv::S);
            }
            Op::Csr { which, value } => {
                self.as_os();
                let w = match which {
                    0 => CsrWrite::Range(Prv::S, RangeReg::new(BASE, value * PAGE_BYTES)),
                    1 => CsrWrite::Sid(Prv::S, SidIndex::Sid0, value),
                    _ => CsrWrite::Sid(Prv::S, SidIndex::Sid1, value),
                };
                let _ = self.p.machine.write_csr(Prv::S, w);
            }
            Op::SwapOut { page } => {
                self.as_os();
                let temp = TEMP + page as u64 * PAGE_BYTES;
                let _ = self.p.sm.swap_out(&mut self.p.machine, &self.h, PAGES[page], temp);
            }
            Op::SwapIn { page } => {
                self.as_os();
                let temp = TEMP + page as u64 * PAGE_BYTES;
                let _ = self.p.sm.swap_in(&mut self.p.machine, &self.h, PAGES[page], temp);
            }
            Op::Capture { frame, line } => {
                let pa = self.frames[frame] * PAGE_BYTES + line * 64;
                self.captured = Some((pa, self.p.machine.raw_line(pa)));
            }
            Op::Replay => {
                if let Some((pa, raw)) = &self.captured {
                    self.p.machine.restore_raw_line(*pa, raw);
                }
            }
            Op::Flip { frame, bit } => {
                self.p.machine.flip_raw_bit(self.frames[frame] * PAGE_BYTES, bit);
            }
            Op::EnclaveWrite { page, data } => {
                if self.as_enclave() && self.p.write(HOST, PAGES[page], &data, Prv::U).is_ok() {
                    self.model[page] = data.to_vec();
                    self.secrets.push(data);
                }
            }
            Op::EnclaveRead { page } => {
                if self.as_enclave() {
                    if let Ok(got) = self.p.read(HOST, PAGES[page], 32, Prv::U) {
                        prop_assert_eq!(&got, &self.model[page], "stale or forged read of page {}", page);
                    }
                }
            }
            Op::EnclaveExit => {
                if self.running() {
                    self.p.sm.eexit(&mut self.p.machine).unwrap();
                }
            }
        }
        Ok(())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn supervisor_cannot_read_or_forge(seed in any::<u64>(), ops in prop::collection::vec(op_strategy(), 1..48)) {
        let mut w = World::new(seed);
        for op in &ops {
            w.step(op)?;
        }
    }
}

/// The unattacked run of the same world keeps every write.
#[test]
fn honest_run_round_trips() {
    let mut w = World::new(5);
    for (i, page) in WRITABLE.iter().enumerate() {
        w.step(&Op::EnclaveWrite { page: *page, data: [i as u8 + 1; 32] }).unwrap();
    }
    w.step(&Op::SwapOut { page: 2 }).unwrap();
    w.step(&Op::SwapIn { page: 2 }).unwrap();
    for page in 0..PAGES.len() {
        assert!(w.as_enclave());
        let got = w.p.read(HOST, PAGES[page], 32, Prv::U).unwrap();
        assert_eq!(got, w.model[page]);
    }
    assert_eq!(w.model[1], vec![1; 32]);
}
