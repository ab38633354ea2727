//! Text netlists for switched converters.
//!
//! The format is line oriented: one component per line, the first letter of
//! the name selecting the kind, `.pwm` declaring the gate schedule and `.end`
//! terminating the file. Node `0` is ground.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const GROUND: &str = "0";

// Suffix and decimal exponent; `meg` must be tried before `m`.
const SUFFIXES: [(&str, i32); 6] = [("meg", 6), ("p", -12), ("n", -9), ("u", -6), ("m", -3), ("k", 3)];

/// Electrical role of a component together with its parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    Resistor(f64),
    Inductor(f64),
    Capacitor(f64),
    DcSource(f64),
    Switch { gate: String },
    Diode,
}

impl Kind {
    pub fn prefix(&self) -> char {
        match self {
            Kind::Resistor(_) => 'R',
            Kind::Inductor(_) => 'L',
            Kind::Capacitor(_) => 'C',
            Kind::DcSource(_) => 'V',
            Kind::Switch { .. } => 'S',
            Kind::Diode => 'D',
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Kind::Resistor(v) | Kind::Inductor(v) | Kind::Capacitor(v) | Kind::DcSource(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    pub kind: Kind,
    /// Positive terminal; the anode for diodes.
    pub node_a: String,
    /// Negative terminal; the cathode for diodes.
    pub node_b: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwmSpec {
    pub freq_hz: f64,
    pub duty: f64,
    pub gate_name: String,
}

impl PwmSpec {
    pub fn new(freq_hz: f64, duty: f64, gate_name: impl Into<String>) -> Result<Self> {
        let p = PwmSpec { freq_hz, duty, gate_name: gate_name.into() };
        p.validate()?;
        Ok(p)
    }

    pub fn period(&self) -> f64 {
        1.0 / self.freq_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.freq_hz.is_finite() && self.freq_hz > 0.0) {
            return Err(Error::InvalidValue { name: "freq".into(), msg: format!("{} must be positive", self.freq_hz) });
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(Error::InvalidDuty(self.duty));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Netlist {
    pub title: String,
    pub components: Vec<Component>,
    pub pwm: Option<PwmSpec>,
}

impl Netlist {
    /// Non-ground nodes in order of first appearance.
    pub fn nodes(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for c in &self.components {
            for n in [&c.node_a, &c.node_b] {
                if n != GROUND && seen.insert(n.clone()) {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn count(&self, prefix: char) -> usize {
        self.components.iter().filter(|c| c.kind.prefix() == prefix).count()
    }

    pub fn inductors(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| matches!(c.kind, Kind::Inductor(_)))
    }

    pub fn capacitors(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| matches!(c.kind, Kind::Capacitor(_)))
    }

    pub fn sources(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| matches!(c.kind, Kind::DcSource(_)))
    }

    /// Switches and diodes, the elements a `SwitchConfig` must cover.
    pub fn switching(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(|c| matches!(c.kind, Kind::Switch { .. } | Kind::Diode))
    }

    /// The load: the resistor named `RL` if present, otherwise the last resistor.
    pub fn load(&self) -> Option<&Component> {
        self.find("RL")
            .filter(|c| matches!(c.kind, Kind::Resistor(_)))
            .or_else(|| self.components.iter().rev().find(|c| matches!(c.kind, Kind::Resistor(_))))
    }

    /// Input voltage: the value of the first DC source.
    pub fn v_in(&self) -> Option<f64> {
        self.sources().next().and_then(|c| c.kind.value())
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::EmptyNetlist);
        }
        let mut names = HashSet::new();
        for c in &self.components {
            if !names.insert(c.name.to_ascii_lowercase()) {
                return Err(Error::DuplicateName(c.name.clone()));
            }
            check_component(c)?;
        }
        let mut degree: HashMap<&str, usize> = HashMap::new();
        for c in &self.components {
            *degree.entry(c.node_a.as_str()).or_default() += 1;
            *degree.entry(c.node_b.as_str()).or_default() += 1;
        }
        if !degree.contains_key(GROUND) {
            return Err(Error::MissingGround);
        }
        for n in self.nodes() {
            if degree[n.as_str()] < 2 {
                return Err(Error::FloatingNode(n));
            }
        }
        if let Some(p) = &self.pwm {
            p.validate()?;
        }
        Ok(())
    }
}

/// Parses a number with an optional engineering suffix, e.g. `10u` or `1meg`.
pub fn parse_value(token: &str) -> Result<f64> {
    let t = token.trim();
    let split = numeric_prefix_len(t);
    if split == 0 {
        return Err(Error::MalformedNumber(token.to_string()));
    }
    let (num, suffix) = t.split_at(split);
    let base: f64 = num.parse().map_err(|_| Error::MalformedNumber(token.to_string()))?;
    if suffix.is_empty() {
        return Ok(base);
    }
    let lower = suffix.to_ascii_lowercase();
    let &(_, shift) = SUFFIXES.iter().find(|(s, _)| *s == lower).ok_or_else(|| Error::UnknownSuffix(token.to_string()))?;
    // shift the decimal exponent textually so that e.g. `100u` is exactly 1e-4
    let (mantissa, exp) = match num.find(['e', 'E']) {
        Some(i) => (&num[..i], num[i + 1..].parse::<i32>().map_err(|_| Error::MalformedNumber(token.to_string()))?),
        None => (num, 0),
    };
    let scaled: f64 = format!("{mantissa}e{}", exp.saturating_add(shift))
        .parse()
        .map_err(|_| Error::MalformedNumber(token.to_string()))?;
    if base.is_finite() && !scaled.is_finite() {
        return Err(Error::MalformedNumber(token.to_string()));
    }
    Ok(scaled)
}

// Length of the leading `[+-]digits[.digits][e[+-]digits]` run.
fn numeric_prefix_len(t: &str) -> usize {
    let b = t.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let digits_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut mantissa_digits = i - digits_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        mantissa_digits += i - frac;
    }
    if mantissa_digits == 0 {
        return 0;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp {
            i = j;
        }
    }
    i
}

/// Canonical text for a value: the engineering suffix keeping the mantissa in
/// [1, 1000) when that round-trips exactly, plain shortest form otherwise.
pub fn format_value(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs();
    let preferred = [("p", 1e-12), ("n", 1e-9), ("u", 1e-6), ("m", 1e-3), ("", 1.0), ("k", 1e3), ("meg", 1e6)]
        .into_iter()
        .rev()
        .find(|(_, m)| mag >= *m * (1.0 - 1e-12));
    if let Some((s, m)) = preferred {
        if mag < m * 1000.0 || s == "meg" {
            for digits in 0..17 {
                let text = format!("{:.*}{}", digits, v / m, s);
                if parse_value(&text).ok() == Some(v) {
                    return trim_zeros(&text, s);
                }
            }
        }
    }
    format!("{v:e}")
}

fn trim_zeros(text: &str, suffix: &str) -> String {
    let num = &text[..text.len() - suffix.len()];
    let num = if num.contains('.') { num.trim_end_matches('0').trim_end_matches('.') } else { num };
    format!("{num}{suffix}")
}

fn strip_comment(line: &str) -> &str {
    let line = match line.find(';') {
        Some(i) => &line[..i],
        None => line,
    };
    let t = line.trim_start();
    if t.starts_with('*') || t.starts_with('#') {
        ""
    } else {
        line
    }
}

/// Parses and validates netlist text.
pub fn parse_netlist(text: &str) -> Result<Netlist> {
    let mut net = Netlist::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        let syntax = |msg: String| Error::Syntax { line, msg };
        if let Some(directive) = body.strip_prefix('.') {
            let mut toks = directive.split_whitespace();
            let head = toks.next().unwrap_or("").to_ascii_lowercase();
            match head.as_str() {
                "end" => break,
                "title" => net.title = directive.trim_start()[5..].trim().to_string(),
                "pwm" => {
                    if net.pwm.is_some() {
                        return Err(syntax("duplicate .pwm directive".into()));
                    }
                    let gate = toks.next().ok_or_else(|| syntax(".pwm needs a gate name".into()))?;
                    let (mut freq, mut duty) = (None, None);
                    for kv in toks {
                        let (k, v) = kv.split_once('=').ok_or_else(|| syntax(format!("expected key=value, got {kv:?}")))?;
                        let v = parse_value(v).map_err(|e| syntax(e.to_string()))?;
                        match k.to_ascii_lowercase().as_str() {
                            "freq" => freq = Some(v),
                            "duty" => duty = Some(v),
                            other => return Err(syntax(format!("unknown .pwm parameter {other:?}"))),
                        }
                    }
                    let freq = freq.ok_or_else(|| syntax(".pwm needs freq=".into()))?;
                    let duty = duty.ok_or_else(|| syntax(".pwm needs duty=".into()))?;
                    let pwm = PwmSpec { freq_hz: freq, duty, gate_name: gate.to_string() };
                    pwm.validate().map_err(|e| syntax(e.to_string()))?;
                    net.pwm = Some(pwm);
                }
                other => return Err(syntax(format!("unknown directive .{other}"))),
            }
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        let name = toks[0];
        let prefix = name.chars().next().map(|c| c.to_ascii_uppercase());
        let two_terminal = |n: usize| -> Result<()> {
            if toks.len() != n {
                Err(syntax(format!("{name}: expected {} fields, found {}", n, toks.len())))
            } else {
                Ok(())
            }
        };
        let value = || parse_value(toks[3]).map_err(|e| syntax(format!("{name}: {e}")));
        let kind = match prefix {
            Some('R') => {
                two_terminal(4)?;
                Kind::Resistor(value()?)
            }
            Some('L') => {
                two_terminal(4)?;
                Kind::Inductor(value()?)
            }
            Some('C') => {
                two_terminal(4)?;
                Kind::Capacitor(value()?)
            }
            Some('V') => {
                two_terminal(4)?;
                Kind::DcSource(value()?)
            }
            Some('S') => {
                two_terminal(4)?;
                let gate = toks[3]
                    .split_once('=')
                    .filter(|(k, v)| k.eq_ignore_ascii_case("gate") && !v.is_empty())
                    .map(|(_, v)| v.to_string())
                    .ok_or_else(|| syntax(format!("{name}: expected gate=NAME")))?;
                Kind::Switch { gate }
            }
            Some('D') => {
                two_terminal(3)?;
                Kind::Diode
            }
            _ => return Err(Error::UnknownPrefix { line, name: name.to_string() }),
        };
        let comp = Component { name: name.to_string(), kind, node_a: toks[1].to_string(), node_b: toks[2].to_string() };
        check_component(&comp).map_err(|e| syntax(e.to_string()))?;
        net.components.push(comp);
    }
    net.validate()?;
    Ok(net)
}

fn check_component(c: &Component) -> Result<()> {
    if c.node_a == c.node_b {
        return Err(Error::InvalidValue { name: c.name.clone(), msg: "both terminals on the same node".into() });
    }
    match c.kind {
        Kind::Resistor(v) | Kind::Inductor(v) | Kind::Capacitor(v) if !(v.is_finite() && v > 0.0) => {
            Err(Error::InvalidValue { name: c.name.clone(), msg: format!("{v} must be positive") })
        }
        Kind::DcSource(v) if !v.is_finite() => Err(Error::InvalidValue { name: c.name.clone(), msg: "must be finite".into() }),
        _ => Ok(()),
    }
}

/// Canonical text; `parse_netlist` of the result reproduces `n` exactly.
pub fn serialize_netlist(n: &Netlist) -> String {
    let mut out = String::new();
    if !n.title.is_empty() {
        out.push_str(&format!(".title {}\n", n.title));
    }
    for c in &n.components {
        let param = match &c.kind {
            Kind::Switch { gate } => Some(format!("gate={gate}")),
            Kind::Diode => None,
            k => k.value().map(format_value),
        };
        match param {
            Some(p) => out.push_str(&format!("{} {} {} {}\n", c.name, c.node_a, c.node_b, p)),
            None => out.push_str(&format!("{} {} {}\n", c.name, c.node_a, c.node_b)),
        }
    }
    if let Some(p) = &n.pwm {
        out.push_str(&format!(
            ".pwm {} freq={} duty={}\n",
            p.gate_name,
            format_value(p.freq_hz),
            format_value(p.duty)
        ));
    }
    out.push_str(".end\n");
    out
}

impl fmt::Display for Netlist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_netlist(self))
    }
}

/// The closed set of built-in converters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TopologyId {
    ClassicalCuk,
    Proposed1,
    Proposed2,
    Proposed3,
}

impl TopologyId {
    pub const ALL: [TopologyId; 4] =
        [TopologyId::ClassicalCuk, TopologyId::Proposed1, TopologyId::Proposed2, TopologyId::Proposed3];

    pub fn name(self) -> &'static str {
        match self {
            TopologyId::ClassicalCuk => "classical_cuk",
            TopologyId::Proposed1 => "proposed1",
            TopologyId::Proposed2 => "proposed2",
            TopologyId::Proposed3 => "proposed3",
        }
    }

    /// Human readable gain expression.
    pub fn formula_text(self) -> &'static str {
        match self {
            TopologyId::ClassicalCuk => "-k/(1-k)",
            TopologyId::Proposed1 => "-1/(1-k)",
            TopologyId::Proposed2 => "-2/(1-k)",
            TopologyId::Proposed3 => "-(2+k)/(1-k)",
        }
    }

    pub fn default_rload(self) -> f64 {
        match self {
            TopologyId::Proposed3 => 1000.0,
            _ => 100.0,
        }
    }

    /// Recognizes a built-in by its title.
    pub fn from_netlist(n: &Netlist) -> Option<TopologyId> {
        n.title.parse().ok()
    }
}

impl fmt::Display for TopologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TopologyId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTopology(s.to_string()))
    }
}

/// Recognized override keys for [`builtin`].
pub const OVERRIDE_KEYS: [&str; 6] = ["vin", "rload", "l", "c", "freq", "duty"];

struct Params {
    vin: f64,
    rload: f64,
    l: f64,
    c: f64,
}

/// A built-in converter with defaults (5 V, 10 µF, 100 µH, 120 kHz, k = 0.8)
/// adjusted by `overrides`.
pub fn builtin(id: TopologyId, overrides: &BTreeMap<String, f64>) -> Result<(Netlist, PwmSpec)> {
    let mut p = Params { vin: 5.0, rload: id.default_rload(), l: 100e-6, c: 10e-6 };
    let (mut freq, mut duty) = (120e3, 0.8);
    for (key, &value) in overrides {
        let range = || Error::OverrideRange { key: key.clone(), value };
        match key.to_ascii_lowercase().as_str() {
            "vin" if value.is_finite() => p.vin = value,
            "rload" | "l" | "c" | "freq" if !(value.is_finite() && value > 0.0) => return Err(range()),
            "rload" => p.rload = value,
            "l" => p.l = value,
            "c" => p.c = value,
            "freq" => freq = value,
            "duty" if value > 0.0 && value < 1.0 => duty = value,
            "vin" | "duty" => return Err(range()),
            _ => return Err(Error::UnknownOverride(key.clone())),
        }
    }
    let pwm = PwmSpec::new(freq, duty, "pwm1")?;
    let net = Netlist { title: id.name().to_string(), components: topology(id, &p), pwm: Some(pwm.clone()) };
    net.validate()?;
    Ok((net, pwm))
}

fn topology(id: TopologyId, p: &Params) -> Vec<Component> {
    use Kind::*;
    let gate = || Switch { gate: "pwm1".into() };
    let rows: Vec<(&str, Kind, &str, &str)> = match id {
        TopologyId::ClassicalCuk => vec![
            ("V1", DcSource(p.vin), "in", "0"),
            ("L1", Inductor(p.l), "in", "sw"),
            ("S1", gate(), "sw", "0"),
            ("C1", Capacitor(p.c), "sw", "x"),
            ("D0", Diode, "x", "0"),
            ("L2", Inductor(p.l), "x", "out"),
            ("Co", Capacitor(p.c), "out", "0"),
            ("RL", Resistor(p.rload), "out", "0"),
        ],
        TopologyId::Proposed1 => vec![
            ("V1", DcSource(p.vin), "in", "0"),
            ("L1", Inductor(p.l), "in", "sw"),
            ("S1", gate(), "sw", "0"),
            ("C1", Capacitor(p.c), "sw", "x"),
            ("D0", Diode, "x", "0"),
            ("L2", Inductor(p.l), "x", "o"),
            ("L3", Inductor(p.l), "sw", "m"),
            ("C3", Capacitor(p.c), "m", "0"),
            ("Co", Capacitor(p.c), "m", "o"),
            ("RL", Resistor(p.rload), "o", "m"),
        ],
        // proposed1's input stage plus a charge-pump cell: C3 is charged to V(m)
        // through D1 while the switch conducts and lifts the rail p through D2
        TopologyId::Proposed2 => vec![
            ("V1", DcSource(p.vin), "in", "0"),
            ("L1", Inductor(p.l), "in", "sw"),
            ("S1", gate(), "sw", "0"),
            ("C1", Capacitor(p.c), "sw", "x"),
            ("D0", Diode, "x", "0"),
            ("L2", Inductor(p.l), "x", "o"),
            ("C4", Capacitor(p.c), "o", "0"),
            ("L3", Inductor(p.l), "sw", "m"),
            ("C2", Capacitor(p.c), "m", "0"),
            ("D1", Diode, "m", "y"),
            ("C3", Capacitor(p.c), "sw", "y"),
            ("D2", Diode, "y", "p"),
            ("Co", Capacitor(p.c), "p", "o"),
            ("RL", Resistor(p.rload), "p", "o"),
        ],
        TopologyId::Proposed3 => vec![
            ("V1", DcSource(p.vin), "in", "0"),
            ("L1", Inductor(p.l), "in", "sw"),
            ("S1", gate(), "sw", "0"),
            ("D1", Diode, "sw", "p"),
            ("C2", Capacitor(p.c), "p", "0"),
            ("C3", Capacitor(p.c), "sw", "q"),
            ("D2", Diode, "p", "q"),
            ("D3", Diode, "q", "r"),
            ("C4", Capacitor(p.c), "r", "0"),
            ("C1", Capacitor(p.c), "sw", "x"),
            ("D4", Diode, "x", "0"),
            ("L2", Inductor(p.l), "x", "o"),
            ("Co", Capacitor(p.c), "o", "0"),
            ("RL", Resistor(p.rload), "o", "r"),
        ],
    };
    rows.into_iter()
        .map(|(name, kind, a, b)| Component { name: name.into(), kind, node_a: a.into(), node_b: b.into() })
        .collect()
}
