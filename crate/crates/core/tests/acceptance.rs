// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks AC1..AC8. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ascon_aead::aead::{AeadInOut, KeyInit};
use ascon_aead::{AsconAead128, AsconAead128Key, AsconAead128Nonce};
use ascon_hash::{AsconHash256, Digest};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servas_core::cache::eviction::{eviction_tally, EvictionMode};
use servas_core::cache::overhead::{
    break_even, default_tc_configs, inline_overhead_bits, overhead_sweep, tweak_bits, CacheCfg,
};
use servas_core::machine::{MachineConfig, Pte, PAGE_BYTES};
use servas_core::mee::{Mee, MeeKey};
use servas_core::monitor::image::{EnclaveImage, ImagePage, LoadedImage};
use servas_core::monitor::{PageCtx, Platform, SmConfig, SmError};
use servas_core::scenario::{builtin_suite, run_scenario, Outcome};
use servas_core::tweak::{
    classify_page_type, FullTweak, PageType, Perms, Prv, Rsw, Sid, SwTweak, TweakLayout,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- AC1 ----

/// Bit span `[start, end)` set when only one field is all ones.
fn field_span(sw: SwTweak, layout: TweakLayout) -> (usize, usize) {
    let p = sw.pack(layout);
    let set: Vec<usize> = (0..p.len()).filter(|&i| p.bit(i)).collect();
    (set[0], set[set.len() - 1] + 1)
}

fn ac1() -> Check {
    let l = TweakLayout::SV48;
    let zero = SwTweak {
        xrange: 0,
        voffset: 0,
        prv: 0,
        pte_bits: 0,
        sid: Sid::ZERO,
    };
    let fields = [
        SwTweak { xrange: 0b111, ..zero },
        SwTweak { voffset: u64::MAX >> 22, ..zero },
        SwTweak { prv: 0b11, ..zero },
        SwTweak { pte_bits: 0x7f, ..zero },
        SwTweak { sid: Sid::ALL_ONES, ..zero },
    ];
    let spans: Vec<_> = fields.iter().map(|f| field_span(*f, l)).collect();
    let widths: Vec<usize> = spans.iter().map(|(a, b)| b - a).collect();
    ensure(widths == [3, 42, 2, 7, 80], || format!("field widths {widths:?}"))?;
    ensure(spans.windows(2).all(|w| w[0].1 == w[1].0), || format!("fields not contiguous: {spans:?}"))?;
    let sw48 = fields[4].pack(l).len();
    ensure(sw48 == 134, || format!("48-bit tweak is {sw48} bits"))?;
    let full = FullTweak { counter: 1, sw: zero }.pack(l).len();
    ensure(full == 192, || format!("full tweak is {full} bits"))?;
    let sw39 = zero.pack(TweakLayout::SV39).len();
    ensure(sw39 == 125, || format!("39-bit tweak is {sw39} bits"))?;
    Ok(format!("{sw48}+58={full} bits, Sv39 tag {sw39} bits"))
}

// ---- AC2 ----

/// Direct reading of the page-type table over raw encodings. `pte` holds
/// r,w,x,u,g in bits 0..5 and the two RSW bits above them.
fn table_oracle(xrange: u8, prv: u8, pte: u8) -> Option<PageType> {
    let (r, w, x) = (pte & 1 != 0, pte & 2 != 0, pte & 4 != 0);
    let rsw = pte >> 5;
    let m_range = xrange == 0b100;
    let u_range = xrange == 0b001;
    let user = prv == 0b00;
    let machine = prv == 0b11;
    if machine && r && w {
        Some(PageType::Monitor)
    } else if xrange == 0 {
        Some(PageType::Unprotected)
    } else if m_range && user && rsw == 0b01 {
        Some(PageType::Regular)
    } else if m_range && user && rsw == 0b10 && !w {
        Some(PageType::ShEnclave)
    } else if u_range && user && rsw == 0b11 && !x {
        Some(PageType::Shm)
    } else {
        None
    }
}

fn ac2() -> Check {
    let mut n = 0;
    let (mut shenclave_w, mut shm_x) = (0, 0);
    for xrange in 0..8u8 {
        for prv in Prv::ALL {
            for pte in 0..128u8 {
                n += 1;
                let perms = Perms::from_bits_truncate(pte & 0x1f);
                let rsw = Rsw::new(pte >> 5).unwrap();
                let got = classify_page_type(xrange, prv, perms, rsw).ok();
                let want = table_oracle(xrange, prv.encode(), pte);
                ensure(got == want, || {
                    format!("xrange={xrange:03b} prv={prv} pte={pte:07b}: got {got:?}, table says {want:?}")
                })?;
                if xrange == 0b100 && prv == Prv::U && pte >> 5 == 0b10 && pte & 2 != 0 {
                    shenclave_w += 1;
                    ensure(got.is_none(), || "SHENCLAVE with W accepted".into())?;
                }
                if xrange == 0b001 && prv == Prv::U && pte >> 5 == 0b11 && pte & 4 != 0 {
                    shm_x += 1;
                    ensure(got.is_none(), || "SHM with X accepted".into())?;
                }
            }
        }
    }
    ensure(n == 3072, || format!("{n} combinations"))?;
    Ok(format!("{n} combinations equal; {shenclave_w} SHENCLAVE+W and {shm_x} SHM+X rejected"))
}

// ---- AC3 ----

/// Reference packing of counter and software tweak, MSB first, into 24 bytes.
fn reference_ad(counter: u64, sw: &SwTweak) -> [u8; 24] {
    let fields: [(u128, u32); 6] = [
        (counter as u128, 58),
        (sw.xrange as u128, 3),
        ((sw.voffset & ((1 << 42) - 1)) as u128, 42),
        (sw.prv as u128, 2),
        (sw.pte_bits as u128, 7),
        (sw.sid.value(), 80),
    ];
    let mut out = [0u8; 24];
    let mut pos = 0usize;
    for (v, w) in fields {
        for i in (0..w).rev() {
            if v >> i & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    assert_eq!(pos, 192);
    out
}

fn reference_nonce(line: u64, counter: u64) -> [u8; 16] {
    let mut h = AsconHash256::new();
    for part in [&b"mee-nonce"[..], &line.to_le_bytes(), &counter.to_le_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let d: [u8; 32] = h.finalize().into();
    d[..16].try_into().unwrap()
}

fn random_tweak(rng: &mut ChaCha8Rng) -> SwTweak {
    SwTweak {
        xrange: rng.random_range(0..8),
        voffset: rng.random::<u64>() & ((1 << 42) - 1),
        prv: [0b00, 0b01, 0b11][rng.random_range(0..3)],
        pte_bits: rng.random_range(0..128),
        sid: Sid::new(rng.random::<u128>() & Sid::MASK),
    }
}

fn ac3() -> Check {
    let l = TweakLayout::SV48;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 1000;
    let mut rejected = 0u64;
    for t in 0..trials {
        let key: [u8; 16] = rng.random();
        let mut mee = Mee::new(MeeKey(key), l);
        let line = rng.next_u64() >> 20;
        let sw = random_tweak(&mut rng);
        let mut data = [0u8; 64];
        rng.fill_bytes(&mut data);
        mee.write(line, &data, &sw).map_err(|e| e.to_string())?;

        // Round trip, and the stored line equals the reference AEAD output.
        ensure(mee.read(line, &sw).ok() == Some(data), || format!("trial {t}: round trip"))?;
        let stored = *mee.lines().find(|(i, _)| **i == line).unwrap().1;
        let mut buf = data;
        let tag = AsconAead128::new(&AsconAead128Key::from(key))
            .encrypt_inout_detached(
                &AsconAead128Nonce::from(reference_nonce(line, stored.counter)),
                &reference_ad(stored.counter, &sw),
                (&mut buf[..]).into(),
            )
            .unwrap();
        ensure(buf == stored.ciphertext && <[u8; 16]>::from(tag) == stored.tag, || {
            format!("trial {t}: ciphertext differs from reference AEAD")
        })?;

        // Every single-bit tweak change must fail.
        let packed = sw.pack(l);
        for bit in 0..packed.len() {
            let alt = flip_field(sw, bit);
            let diff: Vec<usize> = {
                let a = alt.pack(l);
                (0..a.len()).filter(|&i| a.bit(i) != packed.bit(i)).collect()
            };
            ensure(diff == [bit], || format!("trial {t}: flipping bit {bit} changed {diff:?}"))?;
            ensure(mee.read(line, &alt).is_err(), || format!("trial {t}: tweak bit {bit} accepted"))?;
            rejected += 1;
        }

        // Ciphertext and tag tampering.
        let raw = mee.raw(line);
        for _ in 0..4 {
            let bit = rng.random_range(0..640);
            mee.flip_bit(line, bit);
            ensure(mee.read(line, &sw).is_err(), || format!("trial {t}: flip {bit} accepted"))?;
            mee.restore_raw(line, &raw);
            rejected += 1;
        }

        // Replay of an older ciphertext.
        let mut newer = data;
        newer[0] ^= 1;
        mee.write(line, &newer, &sw).map_err(|e| e.to_string())?;
        mee.restore_raw(line, &raw);
        ensure(mee.read(line, &sw).is_err(), || format!("trial {t}: replay accepted"))?;
        rejected += 1;
    }
    Ok(format!("{trials} trials, {rejected} forgeries rejected, 0 false accepts"))
}

/// Flips bit `bit` (MSB-first, 134-bit layout) of the tweak's fields.
fn flip_field(sw: SwTweak, bit: usize) -> SwTweak {
    let mut s = sw;
    match bit {
        0..=2 => s.xrange ^= 1 << (2 - bit),
        3..=44 => s.voffset ^= 1 << (44 - bit),
        45..=46 => s.prv ^= 1 << (46 - bit),
        47..=53 => s.pte_bits ^= 1 << (53 - bit),
        _ => s = SwTweak { sid: Sid::new(s.sid.value() ^ (1u128 << (133 - bit))), ..s },
    }
    s
}

// ---- AC4 ----

fn ac4() -> Check {
    let suite = builtin_suite();
    let required = [
        "downgrade",
        "remap",
        "permission-flip",
        "os-read-enclave",
        "physical-replay",
        "dram-duplicate-toggle",
        "swap-replay",
        "swap-double-copy",
        "shm-wrong-key",
        "shm-bruteforce",
        "encid-bruteforce",
        "privilege-separation",
    ];
    for name in required {
        let sc = suite.iter().find(|s| s.name == name).ok_or(format!("missing scenario {name}"))?;
        ensure(sc.is_attack(), || format!("{name} is not an attack scenario"))?;
    }
    let bf = |n: &str| suite.iter().find(|s| s.name == n).unwrap().expected.outcome.clone();
    ensure(bf("shm-bruteforce") == Outcome::Terminated && bf("encid-bruteforce") == Outcome::Terminated, || {
        "brute-force scenarios must end in termination".into()
    })?;
    let seeds = 100;
    for seed in 0..seeds {
        for sc in &suite {
            let v = run_scenario(sc, seed).map_err(|e| format!("{}: {e}", sc.name))?;
            ensure(v == sc.expected, || format!("{} seed {seed}: {v}, expected {}", sc.name, sc.expected))?;
        }
    }
    let attacks = suite.iter().filter(|s| s.is_attack()).count();
    Ok(format!("{} scenarios ({attacks} attacks) x {seeds} seeds, 0 flakes", suite.len()))
}

// ---- AC5 ----

/// Expected evictions per insertion after `n` uniform insertions into `s`
/// sets of `w` ways: `s * E[max(Bin(n, 1/s) - w, 0)] / n`.
fn total_oracle(n: u64, s: u64, w: u64) -> f64 {
    let p = 1.0 / s as f64;
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut excess = 0.0;
    for k in 0..=n {
        if k > w {
            excess += (k - w) as f64 * pmf;
        }
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    s as f64 * excess / n as f64
}

/// Probability that some set receives more than `w` of `n` insertions:
/// `1 - n! [x^n] (sum_{k<=w} x^k/k!)^s / s^n`.
fn at_least_one_oracle(n: u64, s: u64, w: u64) -> f64 {
    let n = n as usize;
    // Coefficients carry the 1/s^k factor so nothing overflows.
    let mut base = vec![0.0; n + 1];
    let mut term = 1.0;
    for (k, b) in base.iter_mut().enumerate().take(w as usize + 1) {
        *b = term;
        term /= (k + 1) as f64 * s as f64;
    }
    let mut poly = vec![0.0; n + 1];
    poly[0] = 1.0;
    for _ in 0..s {
        let mut next = vec![0.0; n + 1];
        for (i, &a) in poly.iter().enumerate().filter(|(_, a)| **a != 0.0) {
            for (j, &b) in base.iter().enumerate().take(n + 1 - i) {
                next[i + j] += a * b;
            }
        }
        poly = next;
    }
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    1.0 - fact * poly[n]
}

fn ac5() -> Check {
    let trials = 10_000;
    let seed = 5;
    let mut worst = 0.0f64;
    let mut out = Vec::new();
    for entries in [32u64, 128] {
        for ways in [1u64, 2, 4, 8] {
            let sets = entries / ways;
            let max = 96;
            let t = eviction_tally(entries, ways, max, trials, seed).map_err(|e| e.to_string())?;
            let mut prev = (0.0, 0.0);
            for n in 1..=max {
                let any = t.probability(n, EvictionMode::AtLeastOne);
                let total = t.probability(n, EvictionMode::Total);
                let (oa, ot) = (at_least_one_oracle(n, sets, ways), total_oracle(n, sets, ways));
                let tol_any = 5.0 * (oa * (1.0 - oa) / trials as f64).sqrt() + 1e-3;
                ensure((any - oa).abs() <= tol_any, || {
                    format!("{entries}/{ways} n={n}: at-least-one {any:.4} vs analytic {oa:.4}")
                })?;
                ensure((total - ot).abs() <= 0.01, || {
                    format!("{entries}/{ways} n={n}: total {total:.4} vs analytic {ot:.4}")
                })?;
                worst = worst.max((total - ot).abs());
                ensure(any >= prev.0, || format!("{entries}/{ways}: at-least-one drops at n={n}"))?;
                ensure(total >= prev.1 - 2e-3, || format!("{entries}/{ways}: total drops at n={n}"))?;
                prev = (any, total);
                if ways > 1 {
                    let (fewer_ways, fewer) = (ways / 2, entries / (ways / 2));
                    ensure(total_oracle(n, fewer, fewer_ways) >= ot - 1e-12, || {
                        format!("{entries} entries: analytic total not monotone in ways at n={n}")
                    })?;
                }
            }
            if (entries, ways) == (32, 2) || (entries, ways) == (128, 4) {
                let n = if entries == 32 { 2 * 6 } else { 11 * 6 };
                out.push((entries, ways, n, t.probability(n, EvictionMode::Total)));
            }
        }
    }
    let (_, _, _, p32) = out[0];
    let (_, _, _, p128) = out[1];
    ensure(p32 <= 0.05 + 0.02, || format!("32/2 with 12 tweaks: {p32:.4}"))?;
    ensure((p128 - 0.05).abs() <= 0.02, || format!("128/4 with 66 tweaks: {p128:.4}"))?;
    Ok(format!(
        "32/2 x12 tweaks total={p32:.4}; 128/4 x66 tweaks total={p128:.4}; max |MC-analytic| {worst:.4}"
    ))
}

// ---- AC6 ----

fn ac6() -> Check {
    for (layout, want) in [(TweakLayout::SV48, 134u64), (TweakLayout::SV39, 125)] {
        let per_line = inline_overhead_bits(&CacheCfg {
            n_lines: 1,
            ways: 1,
            layout,
        }) / 2;
        ensure(per_line == want && tweak_bits(layout) == want, || {
            format!("{}-bit VA: {per_line} bits per line", layout.va_bits())
        })?;
    }
    let layout = TweakLayout::SV48;
    let tcs = default_tc_configs(layout);
    let rows = overhead_sweep(layout, 4..=14, &tcs).map_err(|e| e.to_string())?;
    for tc in &tcs {
        let lg = tc.n_tweak.trailing_zeros() as u64;
        let low = tc.voffset_low_bits as u64;
        for r in rows.iter().filter(|r| r.n_tweak == tc.n_tweak && r.b_voffset_low == tc.voffset_low_bits) {
            let inline = 2 * 134 * r.n_lines;
            let tc_bits = 2 * (low + lg) * r.n_lines + (1 + 134 - low) * tc.n_tweak;
            ensure(r.inline_bits == inline && r.tc_bits == tc_bits, || {
                format!("row {r:?}: expected inline {inline}, tc {tc_bits}")
            })?;
        }
        let be = break_even(&rows, tc.n_tweak, tc.voffset_low_bits);
        ensure(be == Some(tc.n_tweak), || {
            format!("N_tweak={} b={}: break-even at {be:?}", tc.n_tweak, tc.voffset_low_bits)
        })?;
    }
    Ok(format!("134/125 bits per line; break-even at n_lines = n_tweak for {} configurations", tcs.len()))
}

// ---- AC7 ----

const HOST: u32 = 1;
const BASE: u64 = 0x4000_0000;
const DATA: u64 = BASE + PAGE_BYTES;
const TEMP: u64 = 0x7000_0000;

fn image(rng: &mut ChaCha8Rng) -> EnclaveImage {
    let mut code = vec![0u8; rng.random_range(4..64)];
    rng.fill_bytes(&mut code);
    let mut data = vec![0u8; rng.random_range(1..256)];
    rng.fill_bytes(&mut data);
    EnclaveImage {
        entry_offset: 0,
        developer_id: rng.random(),
        pages: vec![
            ImagePage::new(0, Perms::R | Perms::X, PageType::ShEnclave, &code),
            ImagePage::new(1, Perms::R | Perms::W, PageType::Regular, &data),
        ],
    }
}

fn seal_key_for(seed: u64, img: &EnclaveImage) -> Result<[u8; 16], String> {
    let mut p = Platform::new(MachineConfig::from_seed(seed), SmConfig::default());
    let h = p
        .load_enclave(HOST, BASE, &LoadedImage::Plain(img.clone()), 1, 0)
        .map_err(|e| e.to_string())?;
    p.sm.eenter(&mut p.machine, &h, &[]).map_err(|e| e.to_string())?;
    p.sm.egetsealkey(&mut p.machine).map_err(|e| e.to_string())
}

fn lifecycle_trace(t: u64) -> Result<(), String> {
    let e = |x: &dyn std::fmt::Display| format!("trace {t}: {x}");
    let mut rng = ChaCha8Rng::seed_from_u64(0xac7 ^ t);
    let seed = rng.next_u64();
    let img = image(&mut rng);
    let mut p = Platform::new(MachineConfig::from_seed(seed), SmConfig::default());
    let h = p
        .load_enclave(HOST, BASE, &LoadedImage::Plain(img.clone()), 1, 0)
        .map_err(|x| e(&x))?;
    let temp = [TEMP, TEMP + PAGE_BYTES, TEMP + 2 * PAGE_BYTES];
    for va in temp {
        p.map_fresh(HOST, va, Perms::R | Perms::W, Rsw::NONE).map_err(|x| e(&x))?;
    }

    p.sm.eenter(&mut p.machine, &h, &[]).map_err(|x| e(&x))?;
    let mut patch = vec![0u8; rng.random_range(1..512)];
    rng.fill_bytes(&mut patch);
    let off = rng.random_range(0..PAGE_BYTES - patch.len() as u64);
    p.write(HOST, DATA + off, &patch, Prv::U).map_err(|x| e(&x))?;
    let before = p.read(HOST, DATA, PAGE_BYTES as usize, Prv::U).map_err(|x| e(&x))?;

    // EMOD to read-only and back; the OS follows each change in the PTE.
    let rw = PageCtx::new(PageType::Regular, Perms::R | Perms::W);
    let ro = PageCtx::new(PageType::Regular, Perms::R);
    let ppn = p.machine.pte(HOST, DATA).unwrap().ppn;
    for (old, new, perms) in [(rw, ro, Perms::U | Perms::R), (ro, rw, Perms::U | Perms::R | Perms::W)] {
        p.sm.emod(&mut p.machine, DATA, old, new).map_err(|x| e(&x))?;
        p.machine
            .map_page(Prv::S, HOST, DATA, Pte::new(ppn, perms, Rsw::SID0))
            .map_err(|x| e(&x))?;
        let after = p.read(HOST, DATA, PAGE_BYTES as usize, Prv::U).map_err(|x| e(&x))?;
        ensure(after == before, || e(&"EMOD changed page content"))?;
    }
    p.sm.eexit(&mut p.machine).map_err(|x| e(&x))?;

    // Swap round trip, then a second cycle and a stale replay.
    p.sm.swap_out(&mut p.machine, &h, DATA, temp[0]).map_err(|x| e(&x))?;
    let stale = p.read(HOST, temp[0], PAGE_BYTES as usize, Prv::S).map_err(|x| e(&x))?;
    p.sm.swap_in(&mut p.machine, &h, DATA, temp[0]).map_err(|x| e(&x))?;
    p.sm.swap_out(&mut p.machine, &h, DATA, temp[1]).map_err(|x| e(&x))?;
    p.write(HOST, temp[2], &stale, Prv::S).map_err(|x| e(&x))?;
    ensure(
        p.sm.swap_in(&mut p.machine, &h, DATA, temp[2]) == Err(SmError::SwapAuthFailure(DATA)),
        || e(&"stale sealed page accepted"),
    )?;
    p.sm.swap_in(&mut p.machine, &h, DATA, temp[1]).map_err(|x| e(&x))?;
    p.sm.eenter(&mut p.machine, &h, &[]).map_err(|x| e(&x))?;
    let after = p.read(HOST, DATA, PAGE_BYTES as usize, Prv::U).map_err(|x| e(&x))?;
    ensure(after == before, || e(&"swap round trip changed page content"))?;

    // Sealing keys: deterministic, and sensitive to image and machine.
    let key = p.sm.egetsealkey(&mut p.machine).map_err(|x| e(&x))?;
    ensure(seal_key_for(seed, &img)? == key, || e(&"seal key not deterministic"))?;
    let mut tweaked = img.clone();
    let page = rng.random_range(0..tweaked.pages.len());
    let byte = rng.random_range(0..tweaked.pages[page].data.len());
    tweaked.pages[page].data[byte] ^= 1 << rng.random_range(0..8);
    ensure(seal_key_for(seed, &tweaked)? != key, || e(&"one-bit image change kept the seal key"))?;
    ensure(seal_key_for(seed ^ 1, &img)? != key, || e(&"other machine derived the same seal key"))?;
    Ok(())
}

fn ac7() -> Check {
    let traces = 500;
    for t in 0..traces {
        lifecycle_trace(t)?;
    }
    Ok(format!("{traces} randomized traces: EMOD, swap, replay and sealing properties hold"))
}

// ---- driver ----

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: "AC1", title: "tweak layout", budget: Duration::from_secs(1), run: ac1 },
        Criterion { id: "AC2", title: "decision table", budget: Duration::from_secs(1), run: ac2 },
        Criterion { id: "AC3", title: "cryptographic isolation", budget: Duration::from_secs(60), run: ac3 },
        Criterion { id: "AC4", title: "attack scenarios", budget: Duration::from_secs(120), run: ac4 },
        Criterion { id: "AC5", title: "eviction Monte Carlo", budget: Duration::from_secs(120), run: ac5 },
        Criterion { id: "AC6", title: "overhead analytics", budget: Duration::from_secs(1), run: ac6 },
        Criterion { id: "AC7", title: "lifecycle properties", budget: Duration::from_secs(120), run: ac7 },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let res = (c.run)();
        let took = start.elapsed();
        let res = res.and_then(|m| {
            if took <= c.budget {
                Ok(m)
            } else {
                Err(format!("{m}; took {took:.2?}, budget {:?}", c.budget))
            }
        });
        match res {
            Ok(m) => println!("[PASS] {} {}: {m} ({took:.2?})", c.id, c.title),
            Err(m) => {
                failed += 1;
                println!("[FAIL] {} {}: {m} ({took:.2?})", c.id, c.title);
            }
        }
    }
    if failed == 0 {
        println!(
            "[PASS] AC8 desk-scale substitution: cycle-level timing, MEE slowdown and FPGA area \
             figures are not reproducible in a behavioral model; AC1..AC7 stand in for them and all pass"
        );
    } else {
        failed += 1;
        println!("[FAIL] AC8 desk-scale substitution: {failed} of AC1..AC7 failed");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
