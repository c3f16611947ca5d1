// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use super::{
    Action, Actor, ActorKind, Addr, CsrName, CtxSpec, FrameSpec, ImageSpec, Outcome, Scenario,
    Step, Verdict,
};
use crate::csr::SidIndex;
use crate::tweak::{PageType, Perms, Prv, Rsw};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("step {step}: {msg}")]
    Runtime { step: usize, msg: String },
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ScriptError> {
    Err(ScriptError::Syntax {
        line,
        msg: msg.into(),
    })
}

/// Splits a line into tokens, honoring quotes and escapes. Returns the
/// tokens with everything after an unquoted `#` dropped.
fn tokenize(s: &str, line: usize) -> Result<Vec<String>, ScriptError> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_token = false;
    let mut chars = s.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                quoted = !quoted;
                in_token = true;
            }
            '\\' if quoted => {
                let e = chars.next().ok_or(ScriptError::Syntax {
                    line,
                    msg: "dangling escape".into(),
                })?;
                match e {
                    'n' => cur.push('\n'),
                    't' => cur.push('\t'),
                    '\\' | '"' => cur.push(e),
                    'x' => {
                        let hex: String = chars.by_ref().take(2).collect();
                        let b = u8::from_str_radix(&hex, 16).map_err(|_| ScriptError::Syntax {
                            line,
                            msg: format!("bad escape \\x{hex}"),
                        })?;
                        cur.push(char::from(b));
                    }
                    _ => return err(line, format!("unknown escape \\{e}")),
                }
            }
            '#' if !quoted => break,
            c if c.is_whitespace() && !quoted => {
                if in_token {
                    out.push(std::mem::take(&mut cur));
                    in_token = false;
                }
            }
            c => {
                cur.push(c);
                in_token = true;
            }
        }
    }
    if quoted {
        return err(line, "unterminated quote");
    }
    if in_token {
        out.push(cur);
    }
    Ok(out)
}

/// Text tokens carry chars 0..=255 for `\xNN`; map them back to bytes.
fn token_bytes(s: &str) -> Vec<u8> {
    s.chars().map(|c| c as u32 as u8).collect()
}

fn parse_num(s: &str, line: usize) -> Result<u64, ScriptError> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    r.or_else(|_| err(line, format!("bad number {s:?}")))
}

fn parse_u128(s: &str, line: usize) -> Result<u128, ScriptError> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u128::from_str_radix(&h.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    r.or_else(|_| err(line, format!("bad number {s:?}")))
}

fn parse_addr(s: &str, line: usize) -> Result<Addr, ScriptError> {
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        return Ok(Addr {
            symbol: None,
            offset: parse_num(s, line)?,
        });
    }
    let (sym, off) = match s.split_once('+') {
        Some((a, b)) => (a, parse_num(b, line)?),
        None => (s, 0),
    };
    if sym.is_empty() {
        return err(line, format!("bad address {s:?}"));
    }
    Ok(Addr {
        symbol: Some(sym.to_string()),
        offset: off,
    })
}

fn parse_data(s: &str, line: usize) -> Result<Vec<u8>, ScriptError> {
    match s.strip_prefix("hex:") {
        Some(h) => hex::decode(h).or_else(|_| err(line, format!("bad hex data {s:?}"))),
        None => Ok(token_bytes(s)),
    }
}

fn parse_perms(s: &str, line: usize) -> Result<Perms, ScriptError> {
    Perms::parse(s).ok_or(ScriptError::Syntax {
        line,
        msg: format!("bad permissions {s:?}"),
    })
}

fn parse_rsw(s: &str, line: usize) -> Result<Rsw, ScriptError> {
    let v = u8::from_str_radix(s, 2).ok().and_then(Rsw::new);
    v.ok_or(ScriptError::Syntax {
        line,
        msg: format!("bad rsw {s:?} (expected two binary digits)"),
    })
}

fn parse_type(s: &str, line: usize) -> Result<PageType, ScriptError> {
    PageType::parse(s).ok_or(ScriptError::Syntax {
        line,
        msg: format!("unknown page type {s:?}"),
    })
}

fn parse_csr(s: &str, line: usize) -> Result<CsrName, ScriptError> {
    let level = match s.chars().next() {
        Some('u') => Prv::U,
        Some('s') => Prv::S,
        Some('m') => Prv::M,
        _ => return err(line, format!("unknown csr {s:?}")),
    };
    Ok(match &s[1..] {
        "range" => CsrName::Range(level),
        "sid0" => CsrName::Sid(level, SidIndex::Sid0),
        "sid1" => CsrName::Sid(level, SidIndex::Sid1),
        _ => return err(line, format!("unknown csr {s:?}")),
    })
}

fn parse_reg(s: &str, line: usize) -> Result<usize, ScriptError> {
    match s {
        "a0" => return Ok(10),
        "a1" => return Ok(11),
        _ => {}
    }
    s.strip_prefix('x')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| n < 32)
        .ok_or(ScriptError::Syntax {
            line,
            msg: format!("bad register {s:?}"),
        })
}

/// Positional arguments plus `key=value` options.
struct Args<'a> {
    line: usize,
    pos: Vec<&'a str>,
    kv: BTreeMap<&'a str, &'a str>,
    next: usize,
}

impl<'a> Args<'a> {
    fn new(tokens: &'a [String], line: usize) -> Self {
        let mut pos = Vec::new();
        let mut kv = BTreeMap::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') => {
                    kv.insert(k, v);
                }
                _ => pos.push(t.as_str()),
            }
        }
        Args {
            line,
            pos,
            kv,
            next: 0,
        }
    }

    fn positional(&mut self, what: &str) -> Result<&'a str, ScriptError> {
        let v = self.pos.get(self.next).copied();
        self.next += 1;
        v.ok_or(ScriptError::Syntax {
            line: self.line,
            msg: format!("missing {what}"),
        })
    }

    fn opt(&mut self, key: &str) -> Option<&'a str> {
        self.kv.remove(key)
    }

    fn opt_num(&mut self, key: &str) -> Result<Option<u64>, ScriptError> {
        self.opt(key).map(|v| parse_num(v, self.line)).transpose()
    }

    /// Consumes the literal keyword `kw` followed by a value.
    fn keyword(&mut self, kw: &str) -> Result<&'a str, ScriptError> {
        let k = self.positional(kw)?;
        if k != kw {
            return err(self.line, format!("expected {kw:?}, found {k:?}"));
        }
        self.positional(&format!("value after {kw}"))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        let r = self.pos[self.next.min(self.pos.len())..].to_vec();
        self.next = self.pos.len();
        r
    }

    fn finish(self) -> Result<(), ScriptError> {
        if let Some(extra) = self.pos.get(self.next) {
            return err(self.line, format!("unexpected argument {extra:?}"));
        }
        if let Some(k) = self.kv.keys().next() {
            return err(self.line, format!("unknown option {k}="));
        }
        Ok(())
    }
}

fn parse_ctx(a: &mut Args<'_>, sid_key: &str) -> Result<CtxSpec, ScriptError> {
    let line = a.line;
    Ok(CtxSpec {
        page_type: parse_type(a.positional("page type")?, line)?,
        perms: parse_perms(a.positional("permissions")?, line)?,
        sid: a.opt(sid_key).map(|v| parse_u128(v, line)).transpose()?,
    })
}

fn parse_action(verb: &str, tokens: &[String], line: usize) -> Result<Action, ScriptError> {
    let mut a = Args::new(tokens, line);
    let space = |a: &mut Args<'_>| -> Result<Option<u32>, ScriptError> {
        Ok(a.opt_num("space")?.map(|v| v as u32))
    };
    let action = match verb {
        "spawn" => {
            let enclave = a.positional("enclave name")?.to_string();
            let base = parse_addr(a.opt("base").ok_or(ScriptError::Syntax {
                line,
                msg: "spawn needs base=".into(),
            })?, line)?;
            Action::Spawn {
                enclave,
                image: a.opt("image").unwrap_or("default").to_string(),
                base,
                stack: a.opt_num("stack")?.unwrap_or(1),
                heap: a.opt_num("heap")?.unwrap_or(4),
                space: space(&mut a)?.unwrap_or(super::DEFAULT_SPACE),
            }
        }
        "enter" => {
            let enclave = a.positional("enclave name")?.to_string();
            let args = a.rest().into_iter().map(|v| parse_num(v, line)).collect::<Result<_, _>>()?;
            Action::Enter { enclave, args }
        }
        "exit" => Action::Exit,
        "read" | "fetch" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            let len = parse_num(a.positional("length")?, line)? as usize;
            let expect = a.opt("expect").map(|v| parse_data(v, line)).transpose()?;
            let space = space(&mut a)?;
            if verb == "read" {
                Action::Read { addr, len, expect, space }
            } else {
                Action::Fetch { addr, len, expect, space }
            }
        }
        "write" => Action::Write {
            addr: parse_addr(a.positional("address")?, line)?,
            data: parse_data(a.positional("data")?, line)?,
            space: space(&mut a)?,
        },
        "csr" => {
            let name = parse_csr(a.positional("csr name")?, line)?;
            let values: Vec<u64> = a.rest().into_iter().map(|v| parse_num(v, line)).collect::<Result<_, _>>()?;
            let want = if matches!(name, CsrName::Range(_)) { 2 } else { 1 };
            if values.len() != want {
                return err(line, format!("csr takes {want} value(s)"));
            }
            Action::Csr { name, values }
        }
        "setreg" | "checkreg" => {
            let reg = parse_reg(a.positional("register")?, line)?;
            let value = parse_num(a.positional("value")?, line)?;
            if verb == "setreg" {
                Action::SetReg { reg, value }
            } else {
                Action::CheckReg { reg, value }
            }
        }
        "eprepare" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            Action::Eprepare {
                addr,
                ctx: parse_ctx(&mut a, "sid")?,
            }
        }
        "edestroy" => Action::Edestroy {
            addr: parse_addr(a.positional("address")?, line)?,
        },
        "emod" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            let old = parse_ctx(&mut a, "oldsid")?;
            let new = parse_ctx(&mut a, "newsid")?;
            Action::Emod { addr, old, new }
        }
        "sealkey" => {
            let save_as = if a.pos.get(a.next) == Some(&"as") {
                Some(a.keyword("as")?.to_string())
            } else {
                None
            };
            Action::SealKey {
                save_as,
                expect: a.opt("expect").map(str::to_string),
            }
        }
        "map" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            let f = a.positional("frame")?;
            let frame = match f {
                "new" => FrameSpec::New,
                _ if f.starts_with('@') => FrameSpec::SameAs(parse_addr(&f[1..], line)?),
                _ => FrameSpec::Ppn(parse_num(f, line)?),
            };
            Action::Map {
                addr,
                frame,
                perms: parse_perms(a.positional("permissions")?, line)?,
                rsw: parse_rsw(a.positional("rsw")?, line)?,
                space: space(&mut a)?,
            }
        }
        "unmap" => Action::Unmap {
            addr: parse_addr(a.positional("address")?, line)?,
            space: space(&mut a)?,
        },
        "swap-pte" => Action::SwapPte {
            a: parse_addr(a.positional("address")?, line)?,
            b: parse_addr(a.positional("address")?, line)?,
        },
        "protect" => Action::Protect {
            addr: parse_addr(a.positional("address")?, line)?,
            perms: parse_perms(a.positional("permissions")?, line)?,
            rsw: a.opt("rsw").map(|v| parse_rsw(v, line)).transpose()?,
        },
        "interrupt" => Action::Interrupt,
        "swap-out" | "swap-in" => {
            let enclave = a.positional("enclave name")?.to_string();
            let addr = parse_addr(a.positional("address")?, line)?;
            let temp = parse_addr(a.positional("temp address")?, line)?;
            if verb == "swap-out" {
                Action::SwapOut { enclave, addr, temp }
            } else {
                Action::SwapIn { enclave, addr, temp }
            }
        }
        "save" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            let len = parse_num(a.positional("length")?, line)? as usize;
            Action::Save {
                addr,
                len,
                label: a.keyword("as")?.to_string(),
            }
        }
        "load" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            Action::Load {
                addr,
                label: a.keyword("from")?.to_string(),
            }
        }
        "snapshot" => {
            let addr = parse_addr(a.positional("address")?, line)?;
            let pages = a.opt_num("pages")?.unwrap_or(1);
            Action::Snapshot {
                addr,
                pages,
                label: a.keyword("as")?.to_string(),
            }
        }
        "restore" => Action::Restore {
            label: a.positional("label")?.to_string(),
        },
        "flip" => Action::Flip {
            addr: parse_addr(a.positional("address")?, line)?,
            bit: parse_num(a.positional("bit")?, line)? as usize,
        },
        _ => return err(line, format!("unknown action {verb:?}")),
    };
    a.finish()?;
    Ok(action)
}

fn parse_expect(tokens: &[String], line: usize) -> Result<Verdict, ScriptError> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let at = |s: &[&str]| -> Result<usize, ScriptError> {
        match s {
            ["at", n] => Ok(parse_num(n, line)? as usize),
            _ => err(line, "expected `at STEP`"),
        }
    };
    Ok(match t.as_slice() {
        ["allowed"] => Verdict {
            outcome: Outcome::Allowed,
            at_step: 0,
        },
        ["detected", kind, rest @ ..] => Verdict {
            outcome: Outcome::Detected(kind.to_string()),
            at_step: at(rest)?,
        },
        ["terminated", rest @ ..] => Verdict {
            outcome: Outcome::Terminated,
            at_step: at(rest)?,
        },
        ["mismatch", rest @ ..] => Verdict {
            outcome: Outcome::Mismatch,
            at_step: at(rest)?,
        },
        _ => return err(line, "expect: allowed | detected KIND at N | terminated at N"),
    })
}

#[derive(Default)]
struct Builder {
    name: String,
    line: usize,
    description: String,
    actors: Vec<Actor>,
    images: BTreeMap<String, ImageSpec>,
    steps: Vec<Step>,
    expected: Option<Verdict>,
}

impl Builder {
    fn finish(mut self) -> Result<Scenario, ScriptError> {
        let mut expected = self.expected.ok_or(ScriptError::Syntax {
            line: self.line,
            msg: format!("scenario {} has no expect line", self.name),
        })?;
        if expected.outcome == Outcome::Allowed {
            expected.at_step = self.steps.len();
        }
        if expected.at_step == 0 || expected.at_step > self.steps.len() {
            return err(self.line, format!("scenario {}: expected step out of range", self.name));
        }
        self.images.entry("default".into()).or_default();
        Ok(Scenario {
            name: self.name,
            description: self.description,
            actors: self.actors,
            images: self.images,
            steps: self.steps,
            expected,
        })
    }
}

/// Parses every scenario in `src`.
pub fn parse_scenarios(src: &str) -> Result<Vec<Scenario>, ScriptError> {
    let mut out = Vec::new();
    let mut cur: Option<Builder> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let tokens = tokenize(raw, line)?;
        let Some(head) = tokens.first() else { continue };
        if head == "scenario" {
            if let Some(b) = cur.take() {
                out.push(b.finish()?);
            }
            let [_, name] = tokens.as_slice() else {
                return err(line, "usage: scenario NAME");
            };
            cur = Some(Builder {
                name: name.clone(),
                line,
                ..Builder::default()
            });
            continue;
        }
        let Some(b) = cur.as_mut() else {
            return err(line, "statement before the first `scenario` line");
        };
        match head.as_str() {
            "description" => {
                b.description = raw.trim_start()["description".len()..].trim().to_string();
            }
            "expect" => {
                if b.expected.is_some() {
                    return err(line, "duplicate expect line");
                }
                b.expected = Some(parse_expect(&tokens[1..], line)?);
            }
            "actor" => {
                let (kind, name) = match tokens.get(1).map(String::as_str) {
                    Some("os") => (ActorKind::Os, "os".to_string()),
                    Some("host") => (ActorKind::Host, "host".to_string()),
                    Some("physical") => (ActorKind::Physical, "physical".to_string()),
                    Some("enclave") => match tokens.get(2) {
                        Some(n) => (ActorKind::Enclave, n.clone()),
                        None => return err(line, "usage: actor enclave NAME"),
                    },
                    _ => return err(line, "usage: actor os|host|physical|enclave NAME"),
                };
                if tokens.len() > if kind == ActorKind::Enclave { 3 } else { 2 } {
                    return err(line, "trailing tokens after actor declaration");
                }
                if b.actors.iter().any(|a| a.name == name) {
                    return err(line, format!("actor {name} declared twice"));
                }
                b.actors.push(Actor { name, kind });
            }
            "image" => {
                let name = tokens.get(1).ok_or(ScriptError::Syntax {
                    line,
                    msg: "usage: image NAME [code=..] [data=..] [entry=N]".into(),
                })?;
                let mut a = Args::new(&tokens[2..], line);
                let mut spec = ImageSpec::default();
                if let Some(c) = a.opt("code") {
                    spec.code = parse_data(c, line)?;
                }
                if let Some(d) = a.opt("data") {
                    spec.data = parse_data(d, line)?;
                }
                if let Some(e) = a.opt_num("entry")? {
                    spec.entry = e;
                }
                a.finish()?;
                b.images.insert(name.clone(), spec);
            }
            _ => {
                let (tolerate, rest) = match head.as_str() {
                    "try" => (true, &tokens[1..]),
                    _ => (false, &tokens[..]),
                };
                let [actor, verb, args @ ..] = rest else {
                    return err(line, "expected `ACTOR ACTION ARGS...`");
                };
                let Some(kind) = b.actors.iter().find(|a| &a.name == actor).map(|a| a.kind) else {
                    return err(line, format!("undeclared actor {actor:?}"));
                };
                let action = parse_action(verb, args, line)?;
                if !action.allowed_actors().contains(&kind) {
                    return err(line, format!("{actor} ({kind:?}) may not perform {verb}"));
                }
                b.steps.push(Step {
                    line,
                    actor: actor.clone(),
                    action,
                    tolerate,
                    text: raw.trim().to_string(),
                });
            }
        }
    }
    if let Some(b) = cur {
        out.push(b.finish()?);
    }
    Ok(out)
}
