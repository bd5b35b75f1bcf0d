//! Parser for the pulse-sequence language.
//!
//! ```text
//! # four-level echo
//! system levels.json
//! let ta = 15us
//! let tb = 5us
//! pulse at=0us   trans=w25 area=0.05pi env=gauss(fwhm=1us)
//! pulse at=ta    trans=w35 area=1pi    env=gauss(fwhm=0.6us)
//! pulse at=ta+tb trans=w24 area=1pi    env=gauss(fwhm=0.6us) phase=0.5pi k=(0,0.01,1)
//! observe from=2*ta+tb-4us to=2*ta+tb+4us rate=100MHz
//! ```
//!
//! Times are absolute from t = 0 and may be sums of literals and `let`
//! names with optional numeric factors. Durations take `ns|us|ms|s`,
//! frequencies `Hz|kHz|MHz|GHz`.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{Envelope, ObservationWindow, Pulse, SequenceTimeline};
use crate::error::{Error, Result};
use crate::level::{LevelSystem, Transition};

#[derive(Debug, Clone, PartialEq)]
enum Atom {
    Seconds(f64),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    coeff: f64,
    atom: Atom,
    column: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Expr {
    terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq)]
struct LetStmt {
    name: String,
    expr: Expr,
    line: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum EnvSpec {
    Gauss(Expr),
    Square(Expr),
}

#[derive(Debug, Clone, PartialEq)]
struct PulseStmt {
    at: Expr,
    trans: String,
    area_pi: f64,
    env: EnvSpec,
    phase_pi: f64,
    detune_hz: f64,
    k: [f64; 3],
    line: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ObserveStmt {
    from: Expr,
    to: Expr,
    rate: f64,
    line: usize,
}

/// A parsed but unresolved sequence programme.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub system: Option<String>,
    lets: Vec<LetStmt>,
    pulses: Vec<PulseStmt>,
    observes: Vec<ObserveStmt>,
}

/// Parses and resolves a programme with no parameter overrides.
pub fn parse_sequence(text: &str, ls: &LevelSystem) -> Result<SequenceTimeline> {
    parse_program(text)?.resolve(ls, &[])
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax { line, column, message: message.into() }
}

fn semantic(line: usize, message: impl Into<String>) -> Error {
    Error::Sequence { line, message: message.into() }
}

/// Parses programme text without resolving names or transitions.
pub fn parse_program(text: &str) -> Result<Program> {
    let mut prog = Program { system: None, lets: Vec::new(), pulses: Vec::new(), observes: Vec::new() };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("");
        let lead = body.len() - body.trim_start().len();
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        let kw_end = body.find(char::is_whitespace).unwrap_or(body.len());
        let (kw, rest) = body.split_at(kw_end);
        let rest_col = lead + kw_end + 1 + (rest.len() - rest.trim_start().len());
        let rest = rest.trim();
        match kw {
            "system" => {
                if rest.is_empty() {
                    return Err(syntax(line, rest_col, "expected a level-system file name"));
                }
                prog.system = Some(rest.to_owned());
            }
            "let" => prog.lets.push(parse_let(rest, line, rest_col)?),
            "pulse" => prog.pulses.push(parse_pulse(rest, line, rest_col)?),
            "observe" => prog.observes.push(parse_observe(rest, line, rest_col)?),
            other => return Err(syntax(line, lead + 1, format!("unknown statement `{other}`"))),
        }
    }
    Ok(prog)
}

fn parse_let(rest: &str, line: usize, col: usize) -> Result<LetStmt> {
    let eq = rest.find('=').ok_or_else(|| syntax(line, col, "expected `let <name> = <duration>`"))?;
    let name = rest[..eq].trim();
    if !is_ident(name) {
        return Err(syntax(line, col, format!("invalid name `{name}`")));
    }
    let value = &rest[eq + 1..];
    let expr = parse_expr(value, line, col + eq + 1)?;
    Ok(LetStmt { name: name.to_owned(), expr, line })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits `key=value` arguments on whitespace outside parentheses, returning
/// each argument with its 1-based column.
fn split_args(rest: &str, line: usize, col: usize) -> Result<Vec<(usize, &str)>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start: Option<usize> = None;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(syntax(line, col + i, "unbalanced `)`"));
        }
        if c.is_whitespace() && depth == 0 {
            if let Some(s) = start.take() {
                out.push((col + s, &rest[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if depth != 0 {
        return Err(syntax(line, col + rest.len(), "unbalanced `(`"));
    }
    if let Some(s) = start {
        out.push((col + s, &rest[s..]));
    }
    Ok(out)
}

fn key_values<'a>(rest: &'a str, line: usize, col: usize, allowed: &[&str]) -> Result<Vec<(&'a str, usize, &'a str)>> {
    let mut out: Vec<(&str, usize, &str)> = Vec::new();
    for (c, arg) in split_args(rest, line, col)? {
        let eq = arg.find('=').ok_or_else(|| syntax(line, c, format!("expected key=value, found `{arg}`")))?;
        let key = &arg[..eq];
        if !allowed.contains(&key) {
            return Err(syntax(line, c, format!("unknown argument `{key}`")));
        }
        if out.iter().any(|(k, _, _)| *k == key) {
            return Err(syntax(line, c, format!("duplicate argument `{key}`")));
        }
        out.push((key, c + eq + 1, &arg[eq + 1..]));
    }
    Ok(out)
}

fn parse_pulse(rest: &str, line: usize, col: usize) -> Result<PulseStmt> {
    let kv = key_values(rest, line, col, &["at", "trans", "area", "env", "phase", "detune", "k"])?;
    let get = |k: &str| kv.iter().find(|(key, _, _)| *key == k).map(|&(_, c, v)| (c, v));
    let need = |k: &str| get(k).ok_or_else(|| syntax(line, col, format!("pulse is missing `{k}=`")));
    let (c, v) = need("at")?;
    let at = parse_expr(v, line, c)?;
    let (_, trans) = need("trans")?;
    let (c, v) = need("area")?;
    let area_pi = parse_pi_multiple(v, line, c)?;
    let (c, v) = need("env")?;
    let env = parse_env(v, line, c)?;
    let phase_pi = match get("phase") {
        Some((c, v)) => parse_pi_multiple(v, line, c)?,
        None => 0.0,
    };
    let detune_hz = match get("detune") {
        Some((c, v)) => parse_frequency(v, line, c)?,
        None => 0.0,
    };
    let k = match get("k") {
        Some((c, v)) => parse_vector(v, line, c)?,
        None => [0.0, 0.0, 1.0],
    };
    Ok(PulseStmt { at, trans: trans.to_owned(), area_pi, env, phase_pi, detune_hz, k, line })
}

fn parse_observe(rest: &str, line: usize, col: usize) -> Result<ObserveStmt> {
    let kv = key_values(rest, line, col, &["from", "to", "rate"])?;
    let need = |k: &str| {
        kv.iter()
            .find(|(key, _, _)| *key == k)
            .map(|&(_, c, v)| (c, v))
            .ok_or_else(|| syntax(line, col, format!("observe is missing `{k}=`")))
    };
    let (c, v) = need("from")?;
    let from = parse_expr(v, line, c)?;
    let (c, v) = need("to")?;
    let to = parse_expr(v, line, c)?;
    let (c, v) = need("rate")?;
    let rate = parse_frequency(v, line, c)?;
    Ok(ObserveStmt { from, to, rate, line })
}

fn parse_env(v: &str, line: usize, col: usize) -> Result<EnvSpec> {
    let open = v.find('(').ok_or_else(|| syntax(line, col, "expected gauss(fwhm=..) or square(dur=..)"))?;
    if !v.ends_with(')') {
        return Err(syntax(line, col + v.len(), "expected `)`"));
    }
    let kind = &v[..open];
    let inner = &v[open + 1..v.len() - 1];
    let icol = col + open + 1;
    let (key, val) = inner.split_once('=').ok_or_else(|| syntax(line, icol, "expected key=duration"))?;
    let vcol = icol + key.len() + 1;
    match (kind, key.trim()) {
        ("gauss", "fwhm") => Ok(EnvSpec::Gauss(parse_expr(val, line, vcol)?)),
        ("square", "dur") => Ok(EnvSpec::Square(parse_expr(val, line, vcol)?)),
        _ => Err(syntax(line, col, format!("unknown envelope `{v}`"))),
    }
}

/// Length of the leading floating-point literal in `s`.
fn number_len(s: &str) -> usize {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
        i += 1;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

fn parse_number(s: &str, line: usize, col: usize) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| syntax(line, col, format!("invalid number `{s}`")))
}

fn split_unit(s: &str) -> (&str, &str) {
    s.split_at(number_len(s))
}

fn time_unit(u: &str) -> Option<f64> {
    Some(match u {
        "ns" => 1e-9,
        "us" | "µs" => 1e-6,
        "ms" => 1e-3,
        "s" => 1.0,
        _ => return None,
    })
}

fn parse_frequency(v: &str, line: usize, col: usize) -> Result<f64> {
    let (num, unit) = split_unit(v.trim());
    let x = parse_number(num, line, col)?;
    let scale = match unit {
        "Hz" => 1.0,
        "kHz" => 1e3,
        "MHz" => 1e6,
        "GHz" => 1e9,
        _ => return Err(syntax(line, col + num.len(), format!("expected Hz|kHz|MHz|GHz, found `{unit}`"))),
    };
    Ok(x * scale)
}

fn parse_pi_multiple(v: &str, line: usize, col: usize) -> Result<f64> {
    let body = v
        .strip_suffix("pi")
        .ok_or_else(|| syntax(line, col, format!("expected a multiple of pi, found `{v}`")))?;
    if body.is_empty() {
        return Ok(1.0);
    }
    parse_number(body.trim_end_matches('*'), line, col)
}

fn parse_vector(v: &str, line: usize, col: usize) -> Result<[f64; 3]> {
    let inner = v
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| syntax(line, col, "expected (x,y,z)"))?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 {
        return Err(syntax(line, col, "expected three components"));
    }
    let mut k = [0.0; 3];
    for (slot, p) in k.iter_mut().zip(&parts) {
        *slot = parse_number(p.trim(), line, col)?;
    }
    let n2: f64 = k.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return Err(syntax(line, col, "wavevector direction must be non-zero"));
    }
    if (n2 - 1.0).abs() > 1e-14 {
        let n = n2.sqrt();
        k.iter_mut().for_each(|x| *x /= n);
    }
    Ok(k)
}

/// expr := term (('+'|'-') term)* ; term := [number '*'] (name | number unit)
fn parse_expr(src: &str, line: usize, col: usize) -> Result<Expr> {
    let mut terms = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    let mut sign = 1.0;
    let skip_ws = |i: &mut usize| {
        while *i < bytes.len() && (bytes[*i] as char).is_whitespace() {
            *i += 1;
        }
    };
    loop {
        skip_ws(&mut i);
        if i >= bytes.len() {
            return Err(syntax(line, col + i, "expected a duration"));
        }
        let tcol = col + i;
        let (coeff, atom) = parse_term(&src[i..], line, tcol, &mut i)?;
        terms.push(Term { coeff: sign * coeff, atom, column: tcol });
        skip_ws(&mut i);
        if i >= bytes.len() {
            break;
        }
        sign = match bytes[i] {
            b'+' => 1.0,
            b'-' => -1.0,
            _ => return Err(syntax(line, col + i, format!("unexpected `{}`", &src[i..]))),
        };
        i += 1;
    }
    Ok(Expr { terms })
}

fn parse_term(s: &str, line: usize, col: usize, cursor: &mut usize) -> Result<(f64, Atom)> {
    let ident_len = |s: &str| s.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(s.len());
    let starts_ident = |s: &str| s.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_');
    if starts_ident(s) {
        let n = ident_len(s);
        *cursor += n;
        return Ok((1.0, Atom::Name(s[..n].to_owned())));
    }
    let nl = number_len(s);
    if nl == 0 {
        return Err(syntax(line, col, format!("expected a duration, found `{s}`")));
    }
    let x = parse_number(&s[..nl], line, col)?;
    let after = &s[nl..];
    if let Some(rest) = after.strip_prefix('*') {
        let rest_trim = rest.trim_start();
        let skipped = rest.len() - rest_trim.len();
        *cursor += nl + 1 + skipped;
        let (c2, atom) = parse_term(rest_trim, line, col + nl + 1 + skipped, cursor)?;
        return Ok((x * c2, atom));
    }
    let ul = after.find(|c: char| !(c.is_alphabetic())).unwrap_or(after.len());
    let unit = &after[..ul];
    let scale = time_unit(unit)
        .ok_or_else(|| syntax(line, col + nl, format!("expected a time unit ns|us|ms|s, found `{unit}`")))?;
    *cursor += nl + ul;
    Ok((1.0, Atom::Seconds(x * scale)))
}

fn eval(expr: &Expr, env: &[(String, f64)], line: usize) -> Result<f64> {
    let mut total = 0.0;
    for t in &expr.terms {
        let v = match &t.atom {
            Atom::Seconds(s) => *s,
            Atom::Name(n) => env
                .iter()
                .find(|(k, _)| k == n)
                .map(|&(_, v)| v)
                .ok_or_else(|| syntax(line, t.column, format!("undefined name `{n}`")))?,
        };
        total += if t.coeff == 1.0 { v } else { t.coeff * v };
    }
    Ok(total)
}

fn resolve_transition(name: &str, ls: &LevelSystem, line: usize) -> Result<Transition> {
    let unknown = || semantic(line, format!("unknown transition `{name}`"));
    let (a, b) = if let Some(d) = name.strip_prefix('w') {
        let digits: Vec<usize> = d.chars().map(|c| c.to_digit(10).map(|v| v as usize)).collect::<Option<_>>().ok_or_else(unknown)?;
        if digits.len() != 2 {
            return Err(unknown());
        }
        (digits[0], digits[1])
    } else if let Some((a, b)) = name.split_once('-') {
        (a.parse().map_err(|_| unknown())?, b.parse().map_err(|_| unknown())?)
    } else {
        return Err(unknown());
    };
    if ls.check_level(a).is_err() || ls.check_level(b).is_err() {
        return Err(unknown());
    }
    let t = if ls.is_ground(a) { Transition::new(a, b) } else { Transition::new(b, a) };
    if !ls.is_optical(t) {
        return Err(semantic(line, format!("transition `{name}` is not a ground-excited optical transition")));
    }
    Ok(t)
}

impl Program {
    /// Names bound by `let`, in declaration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.lets.iter().map(|l| l.name.as_str())
    }

    /// Binds names (with optional overrides of `let` values) and resolves
    /// transitions, producing a validated timeline.
    pub fn resolve(&self, ls: &LevelSystem, overrides: &[(String, f64)]) -> Result<SequenceTimeline> {
        for (name, _) in overrides {
            if !self.lets.iter().any(|l| &l.name == name) {
                return Err(semantic(0, format!("override of undeclared parameter `{name}`")));
            }
        }
        let mut env: Vec<(String, f64)> = Vec::new();
        for l in &self.lets {
            let v = match overrides.iter().find(|(n, _)| n == &l.name) {
                Some(&(_, v)) => v,
                None => eval(&l.expr, &env, l.line)?,
            };
            if !v.is_finite() {
                return Err(semantic(l.line, format!("parameter `{}` is not finite", l.name)));
            }
            env.retain(|(n, _)| n != &l.name);
            env.push((l.name.clone(), v));
        }

        let mut pulses: Vec<(usize, Pulse)> = Vec::new();
        for p in &self.pulses {
            let at = eval(&p.at, &env, p.line)?;
            if at < 0.0 {
                return Err(semantic(p.line, format!("negative time {at} s")));
            }
            let envelope = match &p.env {
                EnvSpec::Gauss(e) => Envelope::Gaussian { fwhm: eval(e, &env, p.line)? },
                EnvSpec::Square(e) => Envelope::Square { duration: eval(e, &env, p.line)? },
            };
            if !(envelope.fwhm() > 0.0) {
                return Err(semantic(p.line, "envelope duration must be positive"));
            }
            if !(p.area_pi >= 0.0) {
                return Err(semantic(p.line, "pulse area must be non-negative"));
            }
            let transition = resolve_transition(&p.trans, ls, p.line)?;
            pulses.push((
                p.line,
                Pulse {
                    at,
                    envelope,
                    transition,
                    area_pi: p.area_pi,
                    carrier_detuning: p.detune_hz,
                    phase_pi: p.phase_pi,
                    k: p.k,
                },
            ));
        }
        pulses.sort_by(|a, b| a.1.at.total_cmp(&b.1.at));
        for (i, (line, p)) in pulses.iter().enumerate() {
            let clash = pulses[..i]
                .iter()
                .any(|(_, q)| q.transition == p.transition && q.support().1 > p.support().0);
            if clash {
                return Err(semantic(*line, format!("pulse overlaps an earlier pulse on {}", p.transition.name())));
            }
        }

        let mut windows = Vec::new();
        for o in &self.observes {
            let start = eval(&o.from, &env, o.line)?;
            let end = eval(&o.to, &env, o.line)?;
            if start < 0.0 {
                return Err(semantic(o.line, format!("negative time {start} s")));
            }
            if !(end > start) {
                return Err(semantic(o.line, "observation window must have to > from"));
            }
            if !(o.rate > 0.0) {
                return Err(semantic(o.line, "sample rate must be positive"));
            }
            windows.push(ObservationWindow { start, end, rate: o.rate });
        }

        Ok(SequenceTimeline {
            system: self.system.clone(),
            params: env,
            pulses: pulses.into_iter().map(|(_, p)| p).collect(),
            windows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::level::build_default_system;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const FOUR_LEVEL: &str = "\
# four-level echo
system levels.json
let ta = 15us
let tb = 5us
pulse at=0us trans=w25 area=0.05pi env=gauss(fwhm=1us)
pulse at=ta trans=w35 area=1pi env=gauss(fwhm=0.6us)
pulse at=ta+tb trans=w24 area=pi env=gauss(fwhm=0.6us) phase=0.5pi
observe from=2*ta+tb-4us to=2*ta+tb+4us rate=100MHz
";

    #[test]
    fn minimal_program() {
        let ls = build_default_system();
        let tl = parse_sequence("pulse at=0us trans=w25 area=0.01pi env=gauss(fwhm=1us)", &ls).unwrap();
        assert_eq!(tl.pulses.len(), 1);
        let p = &tl.pulses[0];
        assert_eq!(p.transition, Transition::new(2, 5));
        assert_relative_eq!(p.area(), 0.01 * core::f64::consts::PI);
        assert_eq!(p.envelope, Envelope::Gaussian { fwhm: 1e-6 });
        assert_eq!(p.k, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn four_level_program_binds_parameters() {
        let ls = build_default_system();
        let tl = parse_sequence(FOUR_LEVEL, &ls).unwrap();
        assert_eq!(tl.system.as_deref(), Some("levels.json"));
        assert_relative_eq!(tl.param("ta").unwrap(), 15e-6);
        assert_relative_eq!(tl.param("tb").unwrap(), 5e-6);
        let trans: Vec<_> = tl.pulses.iter().map(|p| p.transition).collect();
        assert_eq!(trans, [Transition::new(2, 5), Transition::new(3, 5), Transition::new(2, 4)]);
        assert_relative_eq!(tl.pulses[2].at, 20e-6, epsilon = 1e-18);
        assert_relative_eq!(tl.windows[0].start, 31e-6, epsilon = 1e-18);
        assert_relative_eq!(tl.windows[0].rate, 100e6);

        let prog = parse_program(FOUR_LEVEL).unwrap();
        let swept = prog.resolve(&ls, &[("tb".into(), 0.0)]).unwrap();
        assert_relative_eq!(swept.pulses[2].at, 15e-6);
        assert!(prog.resolve(&ls, &[("nope".into(), 0.0)]).is_err());
    }

    #[test]
    fn error_paths() {
        let ls = build_default_system();
        let neg = parse_sequence("pulse at=-1us trans=w25 area=0.1pi env=gauss(fwhm=1us)", &ls);
        assert!(matches!(neg, Err(Error::Sequence { line: 1, ref message }) if message.contains("negative")));
        let unknown = parse_sequence("pulse at=1us trans=w99 area=0.1pi env=gauss(fwhm=1us)", &ls);
        assert!(matches!(unknown, Err(Error::Sequence { ref message, .. }) if message.contains("unknown transition")));
        let spin = parse_sequence("pulse at=1us trans=w23 area=0.1pi env=gauss(fwhm=1us)", &ls);
        assert!(spin.is_err());
        let overlap = parse_sequence(
            "pulse at=0us trans=w25 area=1pi env=gauss(fwhm=1us)\npulse at=5us trans=w25 area=1pi env=gauss(fwhm=1us)",
            &ls,
        );
        assert!(matches!(overlap, Err(Error::Sequence { line: 2, .. })));
        // different transitions may overlap in time
        parse_sequence(
            "pulse at=10us trans=w35 area=1pi env=gauss(fwhm=1us)\npulse at=10us trans=w24 area=1pi env=gauss(fwhm=1us)",
            &ls,
        )
        .unwrap();
        let bad = parse_sequence("pulse at=1xs trans=w25 area=0.1pi env=gauss(fwhm=1us)", &ls);
        assert!(matches!(bad, Err(Error::Syntax { line: 1, column: 11, .. })), "{bad:?}");
        assert!(matches!(parse_sequence("fire at=1us", &ls), Err(Error::Syntax { column: 1, .. })));
        assert!(parse_sequence("pulse at=1us trans=w25 env=gauss(fwhm=1us)", &ls).is_err());
        assert!(parse_sequence("observe from=5us to=1us rate=1MHz", &ls).is_err());
        assert!(parse_sequence("let x = y + 1us", &ls).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let ls = build_default_system();
        let tl = parse_sequence(FOUR_LEVEL, &ls).unwrap();
        let again = parse_sequence(&tl.to_text(), &ls).unwrap();
        assert_eq!(tl, again);
    }

    proptest! {
        #[test]
        fn printer_round_trip(
            ta in 1e-6..50e-6f64,
            tb in 0.0..50e-6f64,
            area in 0.0..4.0f64,
            fwhm in 0.1e-6..2e-6f64,
            det in -1e6..1e6f64,
            kx in -0.1..0.1f64,
        ) {
            let ls = build_default_system();
            let text = alloc::format!(
                "let ta = {ta}s\nlet tb = {tb}s\n\
                 pulse at=0us trans=2-5 area={area}pi env=square(dur={fwhm}s) detune={det}Hz\n\
                 pulse at=ta trans=w35 area=1pi env=gauss(fwhm={fwhm}s) k=({kx},0,1)\n\
                 pulse at=ta+tb+10us trans=w24 area=1pi env=gauss(fwhm={fwhm}s)\n\
                 observe from=ta to=2*ta+tb+20us rate=50MHz\n"
            );
            let first = parse_sequence(&text, &ls).unwrap();
            let second = parse_sequence(&first.to_text(), &ls).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
