// SPDX-License-Identifier: Apache-2.0

//! Tag-storage overhead of tweak caching, in bits.
//!
//! The inline variant stores the whole software tweak next to every line of
//! the data and instruction caches (assumed equal in size):
//!
//! ```text
//! b_tweak  = b_voffset + b_xrange + b_prv + b_pte + b_sid
//! S_inline = 2 * b_tweak * N_lines
//! ```
//!
//! The tweak-cache variant keeps only the low voffset bits plus an index in
//! the main caches and deduplicates the rest into `N_tweak` entries that each
//! carry a valid bit:
//!
//! ```text
//! S_tc = 2 * (b_voffsetL + log2 N_tweak) * N_lines + (1 + b_tweak - b_voffsetL) * N_tweak
//! ```

use std::io::{self, Write};

use crate::tweak::TweakLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheCfg {
    /// Lines per cache (data and instruction caches each).
    pub n_lines: u64,
    pub ways: u64,
    pub layout: TweakLayout,
}

impl CacheCfg {
    pub const LINE_BITS: u64 = 512;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcCfg {
    pub n_tweak: u64,
    pub tc_ways: u64,
    /// Low voffset bits kept in the main caches.
    pub voffset_low_bits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum OverheadError {
    #[error("tweak cache size {0} is not a power of two")]
    TweakCountNotPowerOfTwo(u64),
    #[error("{low} low voffset bits exceed the {total}-bit voffset")]
    VoffsetSplit { low: u32, total: u32 },
    #[error("{lines} lines are not divisible into {ways} ways")]
    Geometry { lines: u64, ways: u64 },
}

pub fn tweak_bits(layout: TweakLayout) -> u64 {
    layout.sw_bits() as u64
}

pub fn inline_overhead_bits(cfg: &CacheCfg) -> u64 {
    2 * tweak_bits(cfg.layout) * cfg.n_lines
}

pub fn tc_overhead_bits(cfg: &CacheCfg, tc: &TcCfg) -> Result<u64, OverheadError> {
    if !tc.n_tweak.is_power_of_two() {
        return Err(OverheadError::TweakCountNotPowerOfTwo(tc.n_tweak));
    }
    let voffset = cfg.layout.voffset_bits();
    if tc.voffset_low_bits > voffset {
        return Err(OverheadError::VoffsetSplit {
            low: tc.voffset_low_bits,
            total: voffset,
        });
    }
    if cfg.ways == 0 || !cfg.n_lines.is_multiple_of(cfg.ways) {
        return Err(OverheadError::Geometry {
            lines: cfg.n_lines,
            ways: cfg.ways,
        });
    }
    let idx_bits = tc.n_tweak.trailing_zeros() as u64;
    let low = tc.voffset_low_bits as u64;
    let main = 2 * (low + idx_bits) * cfg.n_lines;
    let side = (1 + tweak_bits(cfg.layout) - low) * tc.n_tweak;
    Ok(main + side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadRow {
    pub n_lines: u64,
    pub n_tweak: u64,
    pub b_voffset_low: u32,
    pub inline_bits: u64,
    pub tc_bits: u64,
}

/// Every combination of `n_lines = 2^e` for `e` in `line_exps` with each
/// tweak-cache configuration. Rows are ordered by configuration, then lines.
pub fn overhead_sweep(
    layout: TweakLayout,
    line_exps: std::ops::RangeInclusive<u32>,
    tcs: &[TcCfg],
) -> Result<Vec<OverheadRow>, OverheadError> {
    let mut rows = Vec::new();
    for tc in tcs {
        for e in line_exps.clone() {
            let cfg = CacheCfg {
                n_lines: 1 << e,
                ways: 1,
                layout,
            };
            rows.push(OverheadRow {
                n_lines: cfg.n_lines,
                n_tweak: tc.n_tweak,
                b_voffset_low: tc.voffset_low_bits,
                inline_bits: inline_overhead_bits(&cfg),
                tc_bits: tc_overhead_bits(&cfg, tc)?,
            });
        }
    }
    Ok(rows)
}

/// Smallest swept cache size at which the tweak cache stores fewer bits
/// than inline tags, for one (N_tweak, b_voffsetL) series.
pub fn break_even(rows: &[OverheadRow], n_tweak: u64, b_voffset_low: u32) -> Option<u64> {
    rows.iter()
        .filter(|r| r.n_tweak == n_tweak && r.b_voffset_low == b_voffset_low)
        .filter(|r| r.tc_bits < r.inline_bits)
        .map(|r| r.n_lines)
        .min()
}

/// The configurations plotted against each other: 32, 128 and 512 tweak
/// entries, each with 6, 20 or the full 42 voffset bits kept inline.
pub fn default_tc_configs(layout: TweakLayout) -> Vec<TcCfg> {
    let full = layout.voffset_bits();
    let mut out = Vec::new();
    for n_tweak in [32, 128, 512] {
        for low in [6, 20, full] {
            if low <= full {
                out.push(TcCfg {
                    n_tweak,
                    tc_ways: 2,
                    voffset_low_bits: low,
                });
            }
        }
    }
    out.dedup();
    out
}

pub const OVERHEAD_CSV_HEADER: &str = "n_lines,n_tweak,b_voffsetL,inline_bits,tc_bits,break_even";

pub fn write_overhead_csv<W: Write>(rows: &[OverheadRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{OVERHEAD_CSV_HEADER}")?;
    for r in rows {
        let be = break_even(rows, r.n_tweak, r.b_voffset_low)
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.n_lines, r.n_tweak, r.b_voffset_low, r.inline_bits, r.tc_bits, be
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_lines: u64, layout: TweakLayout) -> CacheCfg {
        CacheCfg {
            n_lines,
            ways: 1,
            layout,
        }
    }

    #[test]
    fn inline_tag_widths() {
        assert_eq!(tweak_bits(TweakLayout::SV48), 134);
        assert_eq!(tweak_bits(TweakLayout::SV39), 125);
        assert_eq!(inline_overhead_bits(&cfg(512, TweakLayout::SV48)), 137_216);
    }

    #[test]
    fn tc_formula_by_hand() {
        // 2*(6+5)*1024 + (1+134-6)*32 = 22528 + 4128
        let tc = TcCfg {
            n_tweak: 32,
            tc_ways: 2,
            voffset_low_bits: 6,
        };
        assert_eq!(tc_overhead_bits(&cfg(1024, TweakLayout::SV48), &tc), Ok(26_656));
    }

    #[test]
    fn single_entry_with_full_voffset() {
        // log2(1) = 0, so the main caches carry just the voffset; the one TC
        // entry carries the rest plus its valid bit.
        let tc = TcCfg {
            n_tweak: 1,
            tc_ways: 1,
            voffset_low_bits: 42,
        };
        let c = cfg(256, TweakLayout::SV48);
        assert_eq!(tc_overhead_bits(&c, &tc), Ok(2 * 42 * 256 + (1 + 134 - 42)));
    }

    #[test]
    fn rejects_bad_configs() {
        let c = cfg(256, TweakLayout::SV48);
        let mut tc = TcCfg {
            n_tweak: 48,
            tc_ways: 2,
            voffset_low_bits: 6,
        };
        assert_eq!(
            tc_overhead_bits(&c, &tc),
            Err(OverheadError::TweakCountNotPowerOfTwo(48))
        );
        tc.n_tweak = 64;
        tc.voffset_low_bits = 43;
        assert!(matches!(
            tc_overhead_bits(&c, &tc),
            Err(OverheadError::VoffsetSplit { .. })
        ));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = overhead_sweep(
            TweakLayout::SV48,
            6..=7,
            &[TcCfg {
                n_tweak: 32,
                tc_ways: 2,
                voffset_low_bits: 6,
            }],
        )
        .unwrap();
        let mut out = Vec::new();
        write_overhead_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], OVERHEAD_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("64,32,6,17152,"));
    }
}
