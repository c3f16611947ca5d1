// SPDX-License-Identifier: Apache-2.0

//! Browser bindings for the demo page in `www/`. Each export has a plain
//! Rust twin returning `Result<_, String>` so it can be tested natively.

use std::fmt::Write;

use wasm_bindgen::prelude::*;

use servas_core::cache::eviction::{eviction_tally, EvictionMode};
use servas_core::cache::overhead::{default_tc_configs, overhead_sweep, write_overhead_csv};
use servas_core::tweak::{
    classify_page_type, Perms, Prv, Rsw, Sid, SwTweak, TweakLayout, PRV_BITS, PTE_BITS, SID_BITS, XRANGE_BITS,
};

/// Eviction probability for 1..=max_tweaks inserted tweaks.
pub fn eviction_curve_impl(
    entries: u32,
    ways: u32,
    max_tweaks: u32,
    trials: u32,
    seed: u32,
    mode: &str,
) -> Result<Vec<f64>, String> {
    let mode: EvictionMode = mode.parse()?;
    let t = eviction_tally(entries as u64, ways as u64, max_tweaks as u64, trials as u64, seed as u64)
        .map_err(|e| e.to_string())?;
    Ok((1..=max_tweaks as u64).map(|n| t.probability(n, mode)).collect())
}

/// Overhead CSV for cache sizes 2^min_exp..=2^max_exp.
pub fn overhead_sweep_impl(va_bits: u32, min_exp: u32, max_exp: u32) -> Result<String, String> {
    let layout = TweakLayout::new(va_bits).ok_or_else(|| format!("unsupported address width {va_bits}"))?;
    if min_exp > max_exp || max_exp > 30 {
        return Err("cache size exponents must satisfy min <= max <= 30".into());
    }
    let rows =
        overhead_sweep(layout, min_exp..=max_exp, &default_tc_configs(layout)).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    write_overhead_csv(&rows, &mut out).map_err(|e| e.to_string())?;
    String::from_utf8(out).map_err(|e| e.to_string())
}

fn parse_prv(s: &str) -> Result<Prv, String> {
    match s.trim().to_ascii_uppercase().as_str() {
        "U" => Ok(Prv::U),
        "S" => Ok(Prv::S),
        "M" => Ok(Prv::M),
        _ => Err(format!("privilege must be U, S or M, not {s:?}")),
    }
}

fn parse_hex(s: &str, what: &str) -> Result<u128, String> {
    let t = s.trim().trim_start_matches("0x").replace('_', "");
    if t.is_empty() {
        return Ok(0);
    }
    u128::from_str_radix(&t, 16).map_err(|e| format!("{what}: {e}"))
}

/// Builds a software tweak from its fields and describes it: classification,
/// packed bits and where each field sits.
pub fn compose_tweak_impl(
    va_bits: u32,
    xrange: u8,
    voffset: &str,
    prv: &str,
    perms: &str,
    rsw: u8,
    sid: &str,
) -> Result<String, String> {
    let layout = TweakLayout::new(va_bits).ok_or_else(|| format!("unsupported address width {va_bits}"))?;
    if xrange >= 1 << XRANGE_BITS {
        return Err("xrange is three bits".into());
    }
    let voffset = parse_hex(voffset, "voffset")?;
    if voffset > layout.voffset_mask() as u128 {
        return Err(format!("voffset exceeds {} bits", layout.voffset_bits()));
    }
    let prv = parse_prv(prv)?;
    let perms = Perms::parse(perms).ok_or_else(|| format!("bad permissions {perms:?}"))?;
    let rsw = Rsw::new(rsw).ok_or("rsw is two bits")?;
    let sid = parse_hex(sid, "sid")?;
    if sid > Sid::MASK {
        return Err(format!("sid exceeds {SID_BITS} bits"));
    }

    let tw = SwTweak::new(xrange, voffset as u64, prv, perms, rsw, Sid::new(sid));
    let packed = tw.pack(layout);
    let mut s = String::new();
    let class = match classify_page_type(xrange, prv, perms, rsw) {
        Ok(t) => t.name().to_string(),
        Err(e) => format!("rejected ({e})"),
    };
    let _ = writeln!(s, "page type   {class}");
    let _ = writeln!(s, "fields      {tw}");
    let _ = writeln!(s, "width       {} bits, {} with the counter", layout.sw_bits(), layout.full_bits());
    let _ = writeln!(s, "packed      {}", hex_string(packed.bytes()));
    let mut pos = 0;
    for (name, w) in [
        ("xrange", XRANGE_BITS),
        ("voffset", layout.voffset_bits()),
        ("prv", PRV_BITS),
        ("pte", PTE_BITS),
        ("sid", SID_BITS),
    ] {
        let bits: String = (pos..pos + w as usize).map(|i| if packed.bit(i) { '1' } else { '0' }).collect();
        let _ = writeln!(s, "  {name:<8} [{pos:>3}..{:>3})  {bits}", pos + w as usize);
        pos += w as usize;
    }
    Ok(s)
}

fn hex_string(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[wasm_bindgen]
pub fn eviction_curve(
    entries: u32,
    ways: u32,
    max_tweaks: u32,
    trials: u32,
    seed: u32,
    mode: &str,
) -> Result<Vec<f64>, JsError> {
    eviction_curve_impl(entries, ways, max_tweaks, trials, seed, mode).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn overhead_sweep_csv(va_bits: u32, min_exp: u32, max_exp: u32) -> Result<String, JsError> {
    overhead_sweep_impl(va_bits, min_exp, max_exp).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compose_tweak(
    va_bits: u32,
    xrange: u8,
    voffset: &str,
    prv: &str,
    perms: &str,
    rsw: u8,
    sid: &str,
) -> Result<String, JsError> {
    compose_tweak_impl(va_bits, xrange, voffset, prv, perms, rsw, sid).map_err(|e| JsError::new(&e))
}
