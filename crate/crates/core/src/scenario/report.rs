// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write;

use super::{run_scenario, Scenario, ScriptError, Verdict};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub name: String,
    pub attack: bool,
    pub expected: Verdict,
    pub observed: Result<Verdict, ScriptError>,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.observed.as_ref() == Ok(&self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub seed: u64,
    pub results: Vec<ScenarioResult>,
}

impl SuiteResult {
    pub fn run(scenarios: &[Scenario], seed: u64) -> Self {
        let results = scenarios
            .iter()
            .map(|s| ScenarioResult {
                name: s.name.clone(),
                attack: s.is_attack(),
                expected: s.expected.clone(),
                observed: run_scenario(s, seed),
            })
            .collect();
        SuiteResult { seed, results }
    }

    pub fn passed(&self) -> usize {
        self.results.iter().filter(|r| r.passed()).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.results.len()
    }

    /// Attack scenarios whose expected detection happened.
    pub fn attacks_detected(&self) -> (usize, usize) {
        let attacks = self.results.iter().filter(|r| r.attack);
        let total = attacks.clone().count();
        (attacks.filter(|r| r.passed()).count(), total)
    }
}

fn observed_text(r: &ScenarioResult) -> String {
    match &r.observed {
        Ok(v) => v.to_string(),
        Err(e) => format!("error: {e}"),
    }
}

pub fn text_report(s: &SuiteResult) -> String {
    let width = s.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in &s.results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = write!(out, "{status}  {:width$}  {}", r.name, observed_text(r));
        if !r.passed() {
            let _ = write!(out, "  (expected {})", r.expected);
        }
        out.push('\n');
    }
    let (det, att) = s.attacks_detected();
    let _ = writeln!(
        out,
        "{}/{} scenarios passed, {det}/{att} attacks detected, seed {}",
        s.passed(),
        s.results.len(),
        s.seed
    );
    out
}

fn xml_escape(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => o.push_str("&amp;"),
            '<' => o.push_str("&lt;"),
            '>' => o.push_str("&gt;"),
            '"' => o.push_str("&quot;"),
            '\'' => o.push_str("&apos;"),
            c => o.push(c),
        }
    }
    o
}

pub fn junit_report(s: &SuiteResult) -> String {
    let failures = s.results.iter().filter(|r| !r.passed() && r.observed.is_ok()).count();
    let errors = s.results.iter().filter(|r| r.observed.is_err()).count();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<testsuite name=\"scenarios\" tests=\"{}\" failures=\"{failures}\" errors=\"{errors}\">",
        s.results.len()
    );
    let _ = writeln!(out, "  <properties><property name=\"seed\" value=\"{}\"/></properties>", s.seed);
    for r in &s.results {
        let name = xml_escape(&r.name);
        let _ = write!(out, "  <testcase classname=\"scenarios\" name=\"{name}\"");
        match &r.observed {
            _ if r.passed() => out.push_str("/>\n"),
            Ok(v) => {
                let msg = xml_escape(&format!("expected {}, observed {v}", r.expected));
                let _ = writeln!(out, ">\n    <failure message=\"{msg}\"/>\n  </testcase>");
            }
            Err(e) => {
                let msg = xml_escape(&e.to_string());
                let _ = writeln!(out, ">\n    <error message=\"{msg}\"/>\n  </testcase>");
            }
        }
    }
    out.push_str("</testsuite>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Outcome;

    fn result(name: &str, ok: bool) -> ScenarioResult {
        let expected = Verdict {
            outcome: Outcome::Detected("auth".into()),
            at_step: 3,
        };
        let observed = if ok {
            Ok(expected.clone())
        } else {
            Ok(Verdict {
                outcome: Outcome::Allowed,
                at_step: 4,
            })
        };
        ScenarioResult {
            name: name.into(),
            attack: true,
            expected,
            observed,
        }
    }

    #[test]
    fn reports_count_failures() {
        let s = SuiteResult {
            seed: 9,
            results: vec![result("a<b", true), result("c", false)],
        };
        let t = text_report(&s);
        assert!(t.contains("PASS  a<b"));
        assert!(t.contains("FAIL  c"));
        assert!(t.contains("1/2 scenarios passed, 1/2 attacks detected, seed 9"));
        let j = junit_report(&s);
        assert!(j.contains("tests=\"2\" failures=\"1\" errors=\"0\""));
        assert!(j.contains("name=\"a&lt;b\"/>"));
        assert!(j.contains("expected detected auth at 3, observed allowed at 4"));
    }
}
