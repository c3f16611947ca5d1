// SPDX-License-Identifier: Apache-2.0

//! Monte Carlo estimate of tweak-cache self-eviction.
//!
//! Each trial inserts `n` distinct tweaks into a set-associative store with
//! `entries / ways` sets. The set of each tweak is drawn uniformly at random,
//! standing in for a keyed hash of the tweak. A tweak landing in a full set
//! evicts a resident one. Two statistics come out:
//!
//! * `AtLeastOne`: fraction of trials in which any eviction happened.
//! * `Total`: expected fraction of the inserted tweaks that caused an
//!   eviction, i.e. `E[evictions] / n`.
//!
//! Tweaks are inserted once per trial with no re-reference, so the number of
//! evictions does not depend on which way the replacement policy picks.
//!
//! Trial `t` draws its set indices from a stream seeded by `(seed, t)` alone,
//! and a set index is taken from the top bits of a 32-bit uniform. For
//! power-of-two set counts this nests the geometries: within a trial the
//! eviction count can only fall when entries or ways grow, and can only rise
//! as more tweaks are inserted.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TRIALS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvictionMode {
    AtLeastOne,
    Total,
}

impl EvictionMode {
    pub fn name(self) -> &'static str {
        match self {
            EvictionMode::AtLeastOne => "at_least_one",
            EvictionMode::Total => "total",
        }
    }
}

impl fmt::Display for EvictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvictionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "at_least_one" | "at-least-one" => Ok(EvictionMode::AtLeastOne),
            "total" => Ok(EvictionMode::Total),
            _ => Err(format!("unknown eviction mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EvictionError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("{entries} entries cannot be split into {ways} ways")]
    Geometry { entries: u64, ways: u64 },
}

/// Counts for one geometry and every tweak count `1..=max_tweaks`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionTally {
    pub entries: u64,
    pub ways: u64,
    pub trials: u64,
    pub seed: u64,
    /// `trials_with_eviction[n - 1]`: trials with at least one eviction
    /// among the first `n` insertions.
    pub trials_with_eviction: Vec<u64>,
    /// `evictions[n - 1]`: evictions summed over all trials.
    pub evictions: Vec<u64>,
}

impl EvictionTally {
    pub fn max_tweaks(&self) -> u64 {
        self.evictions.len() as u64
    }

    pub fn probability(&self, n_tweaks: u64, mode: EvictionMode) -> f64 {
        if n_tweaks == 0 {
            return 0.0;
        }
        let i = (n_tweaks - 1) as usize;
        match mode {
            EvictionMode::AtLeastOne => self.trials_with_eviction[i] as f64 / self.trials as f64,
            EvictionMode::Total => {
                self.evictions[i] as f64 / (self.trials as f64 * n_tweaks as f64)
            }
        }
    }
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn check_geometry(entries: u64, ways: u64) -> Result<u64, EvictionError> {
    if ways == 0 || entries == 0 || !entries.is_multiple_of(ways) {
        return Err(EvictionError::Geometry { entries, ways });
    }
    Ok(entries / ways)
}

/// Runs one trial, adding into the per-n accumulators.
fn run_trial(sets: u64, ways: u64, max_tweaks: usize, mut rng: ChaCha8Rng, any: &mut [u64], evictions: &mut [u64]) {
    let mut occupancy = vec![0u64; sets as usize];
    let mut evicted = 0u64;
    for n in 0..max_tweaks {
        let u = rng.next_u32() as u64;
        let set = ((u * sets) >> 32) as usize;
        if occupancy[set] == ways {
            evicted += 1;
        } else {
            occupancy[set] += 1;
        }
        evictions[n] += evicted;
        any[n] += (evicted > 0) as u64;
    }
}

/// Monte Carlo tally for `1..=max_tweaks` tweaks.
pub fn eviction_tally(
    entries: u64,
    ways: u64,
    max_tweaks: u64,
    trials: u64,
    seed: u64,
) -> Result<EvictionTally, EvictionError> {
    if trials == 0 {
        return Err(EvictionError::NoTrials);
    }
    let sets = check_geometry(entries, ways)?;
    let n = max_tweaks as usize;

    let chunk = |range: std::ops::Range<u64>| {
        let mut any = vec![0u64; n];
        let mut ev = vec![0u64; n];
        for t in range {
            run_trial(sets, ways, n, trial_rng(seed, t), &mut any, &mut ev);
        }
        (any, ev)
    };
    let merge = |(mut a1, mut e1): (Vec<u64>, Vec<u64>), (a2, e2): (Vec<u64>, Vec<u64>)| {
        a1.iter_mut().zip(a2).for_each(|(x, y)| *x += y);
        e1.iter_mut().zip(e2).for_each(|(x, y)| *x += y);
        (a1, e1)
    };

    const CHUNK: u64 = 512;
    let chunks: Vec<_> = (0..trials.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(trials))
        .collect();

    #[cfg(feature = "parallel")]
    let (any, ev) = {
        use rayon::prelude::*;
        chunks
            .into_par_iter()
            .map(chunk)
            .reduce(|| (vec![0; n], vec![0; n]), merge)
    };
    #[cfg(not(feature = "parallel"))]
    let (any, ev) = chunks
        .into_iter()
        .map(chunk)
        .fold((vec![0; n], vec![0; n]), merge);

    Ok(EvictionTally {
        entries,
        ways,
        trials,
        seed,
        trials_with_eviction: any,
        evictions: ev,
    })
}

/// Single-point estimate.
pub fn simulate_eviction(
    entries: u64,
    ways: u64,
    n_tweaks: u64,
    trials: u64,
    mode: EvictionMode,
    seed: u64,
) -> Result<f64, EvictionError> {
    Ok(eviction_tally(entries, ways, n_tweaks, trials, seed)?.probability(n_tweaks, mode))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvictionRow {
    pub n_entries: u64,
    pub ways: u64,
    pub n_tweaks: u64,
    pub mode: EvictionMode,
    pub probability: f64,
    pub trials: u64,
    pub seed: u64,
}

/// Full grid, ordered by entries, ways, tweak count, then mode.
pub fn eviction_grid(
    entries: &[u64],
    ways: &[u64],
    tweaks: std::ops::RangeInclusive<u64>,
    trials: u64,
    seed: u64,
) -> Result<Vec<EvictionRow>, EvictionError> {
    let mut rows = Vec::new();
    for &e in entries {
        for &w in ways {
            if w > e {
                continue;
            }
            let tally = eviction_tally(e, w, *tweaks.end(), trials, seed)?;
            for n in tweaks.clone().filter(|&n| n > 0) {
                for mode in [EvictionMode::AtLeastOne, EvictionMode::Total] {
                    rows.push(EvictionRow {
                        n_entries: e,
                        ways: w,
                        n_tweaks: n,
                        mode,
                        probability: tally.probability(n, mode),
                        trials,
                        seed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub const EVICTION_CSV_HEADER: &str = "n_entries,ways,n_tweaks,mode,probability,trials,seed";

pub fn write_eviction_csv<W: Write>(rows: &[EvictionRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{EVICTION_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{},{}",
            r.n_entries, r.ways, r.n_tweaks, r.mode, r.probability, r.trials, r.seed
        )?;
    }
    Ok(())
}

/// Gnuplot script plotting one mode of an eviction CSV, one curve per
/// (entries, ways) series.
pub fn gnuplot_script(csv_path: &str, entries: &[u64], ways: &[u64], mode: EvictionMode) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set xlabel 'tweaks inserted'\n");
    s.push_str(&format!("set ylabel 'eviction probability ({mode})'\n"));
    s.push_str("set key left top\n");
    let mut plots = Vec::new();
    for e in entries {
        for w in ways {
            plots.push(format!(
                "'{csv_path}' using ($1=={e} && $2=={w} && strcol(4) eq '{mode}' ? $3 : 1/0):5 with lines title '{e} entries, {w} ways'"
            ));
        }
    }
    s.push_str("plot ");
    s.push_str(&plots.join(", \\\n     "));
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_eviction_when_tweaks_fit_one_set() {
        for mode in [EvictionMode::AtLeastOne, EvictionMode::Total] {
            assert_eq!(simulate_eviction(32, 4, 4, 1000, mode, 1).unwrap(), 0.0);
            assert_eq!(simulate_eviction(128, 8, 8, 1000, mode, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn fully_associative_never_evicts_below_capacity() {
        assert_eq!(
            simulate_eviction(16, 16, 16, 200, EvictionMode::AtLeastOne, 3).unwrap(),
            0.0
        );
        assert_eq!(
            simulate_eviction(16, 16, 17, 200, EvictionMode::AtLeastOne, 3).unwrap(),
            1.0
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let a = eviction_tally(32, 2, 40, 777, 9).unwrap();
        let b = eviction_tally(32, 2, 40, 777, 9).unwrap();
        assert_eq!(a, b);
        let c = eviction_tally(32, 2, 40, 777, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_trial_runs() {
        let p = simulate_eviction(32, 2, 12, 1, EvictionMode::Total, 0).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            eviction_tally(32, 2, 4, 0, 0),
            Err(EvictionError::NoTrials)
        );
        assert!(matches!(
            eviction_tally(30, 4, 4, 1, 0),
            Err(EvictionError::Geometry { .. })
        ));
    }

    #[test]
    fn grid_rows_and_csv() {
        let rows = eviction_grid(&[32], &[1, 2], 1..=3, 10, 5).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2);
        let mut out = Vec::new();
        write_eviction_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(EVICTION_CSV_HEADER));
        assert!(text.contains("32,1,1,at_least_one,0.000000,10,5"));
    }
}
