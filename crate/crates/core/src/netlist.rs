//! Netlist model, parser, serializer and validator.
//!
//! The accepted format is a SPICE subset, case-insensitive, with SI suffixes
//! (`f p n u m k meg g t`):
//!
//! ```text
//! * comment
//! M<name> d g s b NMOS|PMOS W=<len> L=<len> [VT=HVT|SVT|LVT] [ARR=BL|SP|SOD|@group] [M=<fingers>] [ROLE=<tag>]
//! R<name> n+ n- <ohms>
//! C<name> n+ n- <farads>
//! V<name> n+ n- [DC] <volts> [AC <mag>]
//! I<name> n+ n- [DC] <amps>
//! .supply <V element>
//! .input <node+> <node->
//! .output <node>
//! .gmprobe <node> [<node> ...]
//! .end
//! ```
//!
//! Lines starting with `+` continue the previous card. Node `0` and `gnd`
//! are ground.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lde::{Arrangement, Flavor, Polarity};

/// Canonical subcircuit role tags.
pub mod roles {
    pub const INPUT_PAIR: &str = "input_pair";
    pub const SUMMING: &str = "summing";
    pub const CLASS_AB_CONTROL: &str = "class_ab_control";
    pub const BIAS: &str = "bias";
    pub const CLASS_AB_OUTPUT: &str = "class_ab_output";
    pub const INVERTER: &str = "inverter";

    /// Human-readable block name for a role tag.
    pub fn label(tag: &str) -> &str {
        match tag {
            INPUT_PAIR => "input differential pair",
            SUMMING => "summing circuit",
            CLASS_AB_CONTROL => "floating class-AB control",
            BIAS => "bias circuit",
            CLASS_AB_OUTPUT => "class-AB output",
            INVERTER => "inverter",
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const GROUND: NodeId = NodeId(0);

    pub fn is_ground(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArrangementSlot {
    Literal(Arrangement),
    /// Arrangement chosen by the key group with this id.
    Key(String),
}

impl fmt::Display for ArrangementSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrangementSlot::Literal(a) => write!(f, "{a}"),
            ArrangementSlot::Key(g) => write!(f, "@{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosInstance {
    pub name: String,
    pub drain: NodeId,
    pub gate: NodeId,
    pub source: NodeId,
    pub bulk: NodeId,
    pub polarity: Polarity,
    pub flavor: Flavor,
    /// Width of one finger (m).
    pub width: f64,
    pub length: f64,
    pub fingers: u32,
    pub slot: ArrangementSlot,
    pub role: Option<String>,
    pub line: usize,
}

impl MosInstance {
    /// Total electrical width over all fingers.
    pub fn total_width(&self) -> f64 {
        self.width * self.fingers as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ElementKind {
    Resistor,
    Capacitor,
    /// Independent voltage source; `ac` is the small-signal magnitude.
    Voltage {
        ac: f64,
    },
    Current,
}

/// Two-terminal element. For sources `pos`/`neg` follow SPICE orientation:
/// a current source drives `value` amps from `pos` through itself into `neg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    pub kind: ElementKind,
    pub pos: NodeId,
    pub neg: NodeId,
    pub value: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    nodes: Vec<String>,
    pub mosfets: Vec<MosInstance>,
    pub elements: Vec<Element>,
    /// Name of the voltage source that powers the circuit.
    pub supply: String,
    pub input: Option<(NodeId, NodeId)>,
    pub output: Option<NodeId>,
    pub gm_probe: Vec<NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetlistError {
    #[error("line {line}, column {column}: {reason}")]
    Syntax {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("line {line}: unknown node `{node}`")]
    UnknownNode { line: usize, node: String },
    #[error("line {line}: duplicate element name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("missing directive `{0}`")]
    MissingDirective(&'static str),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("ring oscillator needs an odd stage count >= 3, got {0}")]
    EvenStageCount(usize),
}

/// One violated circuit invariant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnostic {
    DuplicateName(String),
    /// Node with no DC path: only gates and capacitors attach to it.
    FloatingNode(String),
    /// Node not connected to ground through any element.
    Disconnected(String),
    UnknownNode(String),
    BadValue(String),
    BadGeometry(String),
    MissingSupply(String),
}

impl Circuit {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0]
    }

    pub fn node_names(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        let n = normalize_node(name);
        self.nodes.iter().position(|x| *x == n).map(NodeId)
    }

    /// Look a MOSFET up by card name (`MP1`) or by its schematic name
    /// without the leading `M` (`P1`).
    pub fn device(&self, name: &str) -> Option<&MosInstance> {
        self.device_index(name).map(|i| &self.mosfets[i])
    }

    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.mosfets
            .iter()
            .position(|m| m.name.eq_ignore_ascii_case(name))
            .or_else(|| {
                self.mosfets
                    .iter()
                    .position(|m| m.name.len() > 1 && m.name[1..].eq_ignore_ascii_case(name))
            })
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
    }

    /// Supply voltage, from the `.supply` source.
    pub fn supply_voltage(&self) -> Option<f64> {
        self.element(&self.supply).map(|e| e.value)
    }

    pub fn supply_node(&self) -> Option<NodeId> {
        self.element(&self.supply)
            .map(|e| if e.pos.is_ground() { e.neg } else { e.pos })
    }

    /// Key-group ids referenced by `ARR=@id` slots.
    pub fn key_slots(&self) -> BTreeSet<String> {
        self.mosfets
            .iter()
            .filter_map(|m| match &m.slot {
                ArrangementSlot::Key(g) => Some(g.clone()),
                ArrangementSlot::Literal(_) => None,
            })
            .collect()
    }

    pub fn devices_with_role(&self, role: &str) -> Vec<&MosInstance> {
        self.mosfets
            .iter()
            .filter(|m| m.role.as_deref() == Some(role))
            .collect()
    }

    /// Copy with the named device's arrangement slot replaced.
    pub fn with_slot(&self, device: &str, slot: ArrangementSlot) -> Result<Circuit, NetlistError> {
        let idx = self
            .device_index(device)
            .ok_or_else(|| NetlistError::UnknownDevice(device.to_string()))?;
        let mut c = self.clone();
        c.mosfets[idx].slot = slot;
        Ok(c)
    }

    /// Fold finger multipliers into the drawn width so every device is single-finger.
    pub fn merge_fingers(&self) -> Circuit {
        let mut c = self.clone();
        for m in &mut c.mosfets {
            m.width *= m.fingers as f64;
            m.fingers = 1;
        }
        c
    }

    /// Canonical netlist text. Reparsing yields a structurally identical circuit.
    pub fn to_netlist(&self) -> String {
        let mut out = String::from("* canonical netlist\n");
        let mut mos: Vec<&MosInstance> = self.mosfets.iter().collect();
        mos.sort_by(|a, b| a.name.cmp(&b.name));
        for m in mos {
            let _ = write!(
                out,
                "{} {} {} {} {} {} W={:e} L={:e} VT={} ARR={}",
                m.name,
                self.node_name(m.drain),
                self.node_name(m.gate),
                self.node_name(m.source),
                self.node_name(m.bulk),
                m.polarity,
                m.width,
                m.length,
                m.flavor,
                m.slot
            );
            if m.fingers != 1 {
                let _ = write!(out, " M={}", m.fingers);
            }
            if let Some(r) = &m.role {
                let _ = write!(out, " ROLE={r}");
            }
            out.push('\n');
        }
        let rank = |k: &ElementKind| match k {
            ElementKind::Resistor => 0,
            ElementKind::Capacitor => 1,
            ElementKind::Voltage { .. } => 2,
            ElementKind::Current => 3,
        };
        let mut els: Vec<&Element> = self.elements.iter().collect();
        els.sort_by(|a, b| rank(&a.kind).cmp(&rank(&b.kind)).then(a.name.cmp(&b.name)));
        for e in els {
            let _ = write!(
                out,
                "{} {} {} ",
                e.name,
                self.node_name(e.pos),
                self.node_name(e.neg)
            );
            match e.kind {
                ElementKind::Voltage { ac } if ac != 0.0 => {
                    let _ = write!(out, "DC {:e} AC {:e}", e.value, ac);
                }
                ElementKind::Voltage { .. } | ElementKind::Current => {
                    let _ = write!(out, "DC {:e}", e.value);
                }
                _ => {
                    let _ = write!(out, "{:e}", e.value);
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, ".supply {}", self.supply);
        if let Some((p, n)) = self.input {
            let _ = writeln!(out, ".input {} {}", self.node_name(p), self.node_name(n));
        }
        if let Some(o) = self.output {
            let _ = writeln!(out, ".output {}", self.node_name(o));
        }
        if !self.gm_probe.is_empty() {
            let names: Vec<&str> = self.gm_probe.iter().map(|n| self.node_name(*n)).collect();
            let _ = writeln!(out, ".gmprobe {}", names.join(" "));
        }
        out.push_str(".end\n");
        out
    }
}

fn normalize_node(name: &str) -> String {
    let n = name.to_ascii_lowercase();
    if n == "gnd" {
        "0".to_string()
    } else {
        n
    }
}

/// Parse a number with an optional SI suffix, e.g. `10u`, `1.5meg`, `2e-9`.
pub fn parse_value(tok: &str) -> Option<f64> {
    let s = tok.trim().to_ascii_lowercase();
    let bytes = s.as_bytes();
    let mut end = 0;
    let mut seen_digit = false;
    while end < bytes.len() {
        let c = bytes[end];
        if c.is_ascii_digit() {
            seen_digit = true;
            end += 1;
        } else if c == b'.' || ((c == b'+' || c == b'-') && end == 0) {
            end += 1;
        } else if c == b'e' && seen_digit {
            // Exponent only when followed by a digit or a signed digit.
            let next = bytes.get(end + 1).copied();
            let next2 = bytes.get(end + 2).copied();
            let is_exp = match next {
                Some(d) if d.is_ascii_digit() => true,
                Some(b'+') | Some(b'-') => next2.is_some_and(|d| d.is_ascii_digit()),
                _ => false,
            };
            if !is_exp {
                break;
            }
            end += 2;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            break;
        } else {
            break;
        }
    }
    let base: f64 = s[..end].parse().ok()?;
    let suffix = &s[end..];
    let exp: i32 = if suffix.starts_with("meg") {
        6
    } else {
        match suffix.chars().next() {
            None => 0,
            Some('f') => -15,
            Some('p') => -12,
            Some('n') => -9,
            Some('u') => -6,
            Some('m') => -3,
            Some('k') => 3,
            Some('g') => 9,
            Some('t') => 12,
            // Bare unit letters such as `V`, `A`, `F`, `ohm`.
            Some(c) if c.is_ascii_alphabetic() => 0,
            _ => return None,
        }
    };
    // Divide for small scales so `10u` is exactly the literal `10e-6`.
    Some(if exp < 0 {
        base / 10f64.powi(-exp)
    } else {
        base * 10f64.powi(exp)
    })
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: s + 1,
        });
    }
    out
}

struct Parser {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Parser {
    fn node(&mut self, name: &str) -> NodeId {
        let n = normalize_node(name);
        if let Some(&i) = self.index.get(&n) {
            return NodeId(i);
        }
        let i = self.nodes.len();
        self.nodes.push(n.clone());
        self.index.insert(n, i);
        NodeId(i)
    }

    fn lookup(&self, name: &str) -> Option<NodeId> {
        self.index.get(&normalize_node(name)).copied().map(NodeId)
    }
}

fn syntax(line: usize, column: usize, reason: impl Into<String>) -> NetlistError {
    NetlistError::Syntax {
        line,
        column,
        reason: reason.into(),
    }
}

/// Parse netlist text into a [`Circuit`].
pub fn parse_netlist(text: &str) -> Result<Circuit, NetlistError> {
    if text.trim().is_empty() {
        return Err(syntax(1, 1, "empty netlist"));
    }

    // Join continuation lines, remembering the line each card started on.
    let mut cards: Vec<(usize, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(';').next().unwrap_or("");
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('+') {
            match cards.last_mut() {
                Some((_, prev)) => {
                    prev.push(' ');
                    prev.push_str(rest);
                }
                None => return Err(syntax(i + 1, 1, "continuation line without a card")),
            }
            continue;
        }
        cards.push((i + 1, line.to_string()));
    }

    let mut p = Parser {
        nodes: vec!["0".to_string()],
        index: HashMap::from([("0".to_string(), 0)]),
    };
    let mut mosfets = Vec::new();
    let mut elements = Vec::new();
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut directives: Vec<(usize, Vec<(String, usize)>)> = Vec::new();

    for (lineno, card) in &cards {
        let lineno = *lineno;
        let toks = tokenize(card);
        let Some(first) = toks.first() else { continue };
        if first.text.starts_with('.') {
            let d = first.text.to_ascii_lowercase();
            if d == ".end" {
                break;
            }
            directives.push((
                lineno,
                toks.iter()
                    .map(|t| (t.text.to_string(), t.column))
                    .collect(),
            ));
            continue;
        }
        let name = first.text.to_ascii_uppercase();
        if names.insert(name.clone(), lineno).is_some() {
            return Err(NetlistError::DuplicateName { line: lineno, name });
        }
        match name.chars().next() {
            Some('M') => mosfets.push(parse_mos(&mut p, lineno, name, &toks)?),
            Some('R') | Some('C') | Some('V') | Some('I') => {
                elements.push(parse_two_terminal(&mut p, lineno, name, &toks)?)
            }
            _ => {
                return Err(syntax(
                    lineno,
                    first.column,
                    format!("unsupported element `{}`", first.text),
                ))
            }
        }
    }

    let mut supply = None;
    let mut input = None;
    let mut output = None;
    let mut gm_probe = Vec::new();
    for (lineno, toks) in directives {
        let (d, col) = (&toks[0].0, toks[0].1);
        let args = &toks[1..];
        let want = |n: usize| -> Result<(), NetlistError> {
            if args.len() != n {
                Err(syntax(lineno, col, format!("{d} expects {n} argument(s)")))
            } else {
                Ok(())
            }
        };
        let node = |name: &str| -> Result<NodeId, NetlistError> {
            p.lookup(name).ok_or_else(|| NetlistError::UnknownNode {
                line: lineno,
                node: name.to_string(),
            })
        };
        match d.to_ascii_lowercase().as_str() {
            ".supply" => {
                want(1)?;
                let src = args[0].0.to_ascii_uppercase();
                let ok = elements.iter().any(|e: &Element| {
                    e.name == src && matches!(e.kind, ElementKind::Voltage { .. })
                });
                if !ok {
                    return Err(syntax(
                        lineno,
                        args[0].1,
                        format!("supply `{src}` is not a declared voltage source"),
                    ));
                }
                if supply.replace(src).is_some() {
                    return Err(syntax(lineno, col, "more than one .supply directive"));
                }
            }
            ".input" => {
                want(2)?;
                input = Some((node(&args[0].0)?, node(&args[1].0)?));
            }
            ".output" => {
                want(1)?;
                output = Some(node(&args[0].0)?);
            }
            ".gmprobe" => {
                if args.is_empty() {
                    return Err(syntax(lineno, col, ".gmprobe expects at least one node"));
                }
                for (n, _) in args {
                    gm_probe.push(node(n)?);
                }
            }
            _ => return Err(syntax(lineno, col, format!("unknown directive `{d}`"))),
        }
    }

    Ok(Circuit {
        nodes: p.nodes,
        mosfets,
        elements,
        supply: supply.ok_or(NetlistError::MissingDirective(".supply"))?,
        input,
        output,
        gm_probe,
    })
}

fn parse_mos(
    p: &mut Parser,
    line: usize,
    name: String,
    toks: &[Token<'_>],
) -> Result<MosInstance, NetlistError> {
    if toks.len() < 6 {
        return Err(syntax(
            line,
            toks[0].column,
            "MOSFET needs d g s b and a model name",
        ));
    }
    let drain = p.node(toks[1].text);
    let gate = p.node(toks[2].text);
    let source = p.node(toks[3].text);
    let bulk = p.node(toks[4].text);
    let polarity: Polarity = toks[5]
        .text
        .parse()
        .map_err(|e: String| syntax(line, toks[5].column, e))?;

    let mut width = None;
    let mut length = None;
    let mut flavor = Flavor::Svt;
    let mut slot = ArrangementSlot::Literal(Arrangement::Bl);
    let mut fingers = 1u32;
    let mut role = None;
    for t in &toks[6..] {
        let (k, v) = t.text.split_once('=').ok_or_else(|| {
            syntax(
                line,
                t.column,
                format!("expected KEY=VALUE, got `{}`", t.text),
            )
        })?;
        let bad = |what: &str| syntax(line, t.column, format!("bad {what} `{v}`"));
        match k.to_ascii_uppercase().as_str() {
            "W" => {
                width = Some(
                    parse_value(v)
                        .filter(|x| *x > 0.0)
                        .ok_or_else(|| bad("width"))?,
                )
            }
            "L" => {
                length = Some(
                    parse_value(v)
                        .filter(|x| *x > 0.0)
                        .ok_or_else(|| bad("length"))?,
                )
            }
            "VT" => flavor = v.parse().map_err(|e: String| syntax(line, t.column, e))?,
            "ARR" => {
                slot = if let Some(g) = v.strip_prefix('@') {
                    if g.is_empty() || !g.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(bad("key group id"));
                    }
                    ArrangementSlot::Key(g.to_ascii_lowercase())
                } else {
                    ArrangementSlot::Literal(
                        v.parse().map_err(|e: String| syntax(line, t.column, e))?,
                    )
                }
            }
            "M" => {
                fingers = v
                    .parse()
                    .ok()
                    .filter(|m| *m >= 1)
                    .ok_or_else(|| bad("finger count"))?
            }
            "ROLE" => role = Some(v.to_ascii_lowercase()),
            other => {
                return Err(syntax(
                    line,
                    t.column,
                    format!("unknown MOSFET parameter `{other}`"),
                ))
            }
        }
    }
    let col = toks[0].column;
    Ok(MosInstance {
        name,
        drain,
        gate,
        source,
        bulk,
        polarity,
        flavor,
        width: width.ok_or_else(|| syntax(line, col, "missing W="))?,
        length: length.ok_or_else(|| syntax(line, col, "missing L="))?,
        fingers,
        slot,
        role,
        line,
    })
}

fn parse_two_terminal(
    p: &mut Parser,
    line: usize,
    name: String,
    toks: &[Token<'_>],
) -> Result<Element, NetlistError> {
    if toks.len() < 4 {
        return Err(syntax(
            line,
            toks[0].column,
            "element needs two nodes and a value",
        ));
    }
    let pos = p.node(toks[1].text);
    let neg = p.node(toks[2].text);
    let rest = &toks[3..];
    let num = |t: &Token<'_>| {
        parse_value(t.text).ok_or_else(|| syntax(line, t.column, format!("bad value `{}`", t.text)))
    };
    let first = name.chars().next().unwrap_or('?');
    let (kind, value) = match first {
        'R' | 'C' => {
            if rest.len() != 1 {
                return Err(syntax(line, rest[0].column, "expected a single value"));
            }
            let v = num(&rest[0])?;
            if first == 'R' {
                if v <= 0.0 {
                    return Err(syntax(line, rest[0].column, "resistance must be positive"));
                }
                (ElementKind::Resistor, v)
            } else {
                if v < 0.0 {
                    return Err(syntax(
                        line,
                        rest[0].column,
                        "capacitance must be non-negative",
                    ));
                }
                (ElementKind::Capacitor, v)
            }
        }
        _ => {
            let mut dc = None;
            let mut ac = 0.0;
            let mut i = 0;
            while i < rest.len() {
                let t = &rest[i];
                match t.text.to_ascii_uppercase().as_str() {
                    "DC" => {
                        let v = rest
                            .get(i + 1)
                            .ok_or_else(|| syntax(line, t.column, "DC needs a value"))?;
                        dc = Some(num(v)?);
                        i += 2;
                    }
                    "AC" => {
                        if first != 'V' {
                            return Err(syntax(
                                line,
                                t.column,
                                "AC excitation only on voltage sources",
                            ));
                        }
                        let v = rest
                            .get(i + 1)
                            .ok_or_else(|| syntax(line, t.column, "AC needs a value"))?;
                        ac = num(v)?;
                        i += 2;
                    }
                    _ if dc.is_none() => {
                        dc = Some(num(t)?);
                        i += 1;
                    }
                    _ => {
                        return Err(syntax(
                            line,
                            t.column,
                            format!("unexpected token `{}`", t.text),
                        ))
                    }
                }
            }
            let kind = if first == 'V' {
                ElementKind::Voltage { ac }
            } else {
                ElementKind::Current
            };
            (kind, dc.unwrap_or(0.0))
        }
    };
    Ok(Element {
        name,
        kind,
        pos,
        neg,
        value,
        line,
    })
}

/// Check circuit invariants; an empty list means the circuit is well formed.
pub fn validate_circuit(c: &Circuit) -> Vec<Diagnostic> {
    let mut diags = BTreeSet::new();
    let n = c.node_count();

    let mut seen = BTreeMap::new();
    for name in c
        .mosfets
        .iter()
        .map(|m| &m.name)
        .chain(c.elements.iter().map(|e| &e.name))
    {
        if seen.insert(name.to_ascii_uppercase(), ()).is_some() {
            diags.insert(Diagnostic::DuplicateName(name.clone()));
        }
    }

    let in_range = |id: NodeId| id.0 < n;
    let mut dc_path = vec![false; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let link = |a: NodeId, b: NodeId, adj: &mut Vec<Vec<usize>>| {
        adj[a.0].push(b.0);
        adj[b.0].push(a.0);
    };

    for m in &c.mosfets {
        let terms = [m.drain, m.gate, m.source, m.bulk];
        if let Some(bad) = terms.iter().find(|t| !in_range(**t)) {
            diags.insert(Diagnostic::UnknownNode(format!("{}:{}", m.name, bad.0)));
            continue;
        }
        if !(m.width > 0.0 && m.length > 0.0 && m.width >= 1e-8 && m.length >= 1e-8) {
            diags.insert(Diagnostic::BadGeometry(m.name.clone()));
        }
        for t in [m.drain, m.source, m.bulk] {
            dc_path[t.0] = true;
        }
        link(m.drain, m.source, &mut adj);
        link(m.gate, m.source, &mut adj);
        link(m.bulk, m.source, &mut adj);
    }
    for e in &c.elements {
        if !in_range(e.pos) || !in_range(e.neg) {
            diags.insert(Diagnostic::UnknownNode(e.name.clone()));
            continue;
        }
        match e.kind {
            ElementKind::Resistor if e.value <= 0.0 => {
                diags.insert(Diagnostic::BadValue(e.name.clone()));
            }
            ElementKind::Capacitor if e.value < 0.0 => {
                diags.insert(Diagnostic::BadValue(e.name.clone()));
            }
            _ => {}
        }
        if !matches!(e.kind, ElementKind::Capacitor) {
            dc_path[e.pos.0] = true;
            dc_path[e.neg.0] = true;
        }
        link(e.pos, e.neg, &mut adj);
    }

    for id in c
        .input
        .iter()
        .flat_map(|(a, b)| [*a, *b])
        .chain(c.output)
        .chain(c.gm_probe.iter().copied())
    {
        if !in_range(id) {
            diags.insert(Diagnostic::UnknownNode(format!("#{}", id.0)));
        }
    }

    match c.element(&c.supply) {
        Some(e) if matches!(e.kind, ElementKind::Voltage { .. }) => {}
        _ => {
            diags.insert(Diagnostic::MissingSupply(c.supply.clone()));
        }
    }

    let mut reached = vec![false; n];
    let mut stack = vec![0usize];
    reached[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !reached[w] {
                reached[w] = true;
                stack.push(w);
            }
        }
    }
    for i in 1..n {
        if !reached[i] {
            diags.insert(Diagnostic::Disconnected(c.nodes[i].clone()));
        } else if !dc_path[i] {
            diags.insert(Diagnostic::FloatingNode(c.nodes[i].clone()));
        }
    }
    diags.into_iter().collect()
}

/// Programmatic circuit construction. Nothing is validated until
/// [`validate_circuit`] runs.
#[derive(Debug, Clone)]
pub struct CircuitBuilder {
    circuit: Circuit,
}

impl CircuitBuilder {
    pub fn new(supply: &str) -> Self {
        CircuitBuilder {
            circuit: Circuit {
                nodes: vec!["0".to_string()],
                mosfets: Vec::new(),
                elements: Vec::new(),
                supply: supply.to_ascii_uppercase(),
                input: None,
                output: None,
                gm_probe: Vec::new(),
            },
        }
    }

    pub fn node(&mut self, name: &str) -> NodeId {
        let n = normalize_node(name);
        if let Some(i) = self.circuit.nodes.iter().position(|x| *x == n) {
            return NodeId(i);
        }
        self.circuit.nodes.push(n);
        NodeId(self.circuit.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn mos(
        &mut self,
        name: &str,
        d: &str,
        g: &str,
        s: &str,
        b: &str,
        polarity: Polarity,
        w: f64,
        l: f64,
        slot: ArrangementSlot,
    ) -> &mut Self {
        let (drain, gate, source, bulk) = (self.node(d), self.node(g), self.node(s), self.node(b));
        self.circuit.mosfets.push(MosInstance {
            name: name.to_ascii_uppercase(),
            drain,
            gate,
            source,
            bulk,
            polarity,
            flavor: Flavor::Svt,
            width: w,
            length: l,
            fingers: 1,
            slot,
            role: None,
            line: 0,
        });
        self
    }

    pub fn role(&mut self, role: &str) -> &mut Self {
        if let Some(m) = self.circuit.mosfets.last_mut() {
            m.role = Some(role.to_string());
        }
        self
    }

    pub fn element(
        &mut self,
        name: &str,
        kind: ElementKind,
        a: &str,
        b: &str,
        value: f64,
    ) -> &mut Self {
        let (pos, neg) = (self.node(a), self.node(b));
        self.circuit.elements.push(Element {
            name: name.to_ascii_uppercase(),
            kind,
            pos,
            neg,
            value,
            line: 0,
        });
        self
    }

    pub fn input(&mut self, p: &str, n: &str) -> &mut Self {
        self.circuit.input = Some((self.node(p), self.node(n)));
        self
    }

    pub fn output(&mut self, o: &str) -> &mut Self {
        self.circuit.output = Some(self.node(o));
        self
    }

    pub fn gm_probe(&mut self, nodes: &[&str]) -> &mut Self {
        self.circuit.gm_probe = nodes.iter().map(|n| self.node(n)).collect();
        self
    }

    pub fn build(&self) -> Circuit {
        self.circuit.clone()
    }
}

const OTA_NETLIST: &str = include_str!("data/ota.cir");

/// Bundled rail-to-rail class-AB OTA (all SVT, 1.8 V supply). Keyed
/// devices carry literal base arrangements; locking replaces them with slots.
pub fn builtin_ota() -> Circuit {
    parse_netlist(OTA_NETLIST).expect("bundled OTA netlist parses")
}

/// Source text of the bundled OTA.
pub fn builtin_ota_netlist() -> &'static str {
    OTA_NETLIST
}

/// Ring of `n_stages` CMOS inverters. PMOS device `MPi` sits in key slot
/// `@ro_pi`; NMOS devices are baseline.
pub fn builtin_ro(n_stages: usize) -> Result<Circuit, NetlistError> {
    if n_stages < 3 || n_stages % 2 == 0 {
        return Err(NetlistError::EvenStageCount(n_stages));
    }
    let mut b = CircuitBuilder::new("VDD");
    b.element("VDD", ElementKind::Voltage { ac: 0.0 }, "vdd", "0", 1.2);
    for i in 0..n_stages {
        let inp = format!("n{i}");
        let out = format!("n{}", (i + 1) % n_stages);
        b.mos(
            &format!("MP{i}"),
            &out,
            &inp,
            "vdd",
            "vdd",
            Polarity::Pmos,
            2e-6,
            60e-9,
            ArrangementSlot::Key(format!("ro_p{i}")),
        )
        .role(roles::INVERTER);
        b.mos(
            &format!("MN{i}"),
            &out,
            &inp,
            "0",
            "0",
            Polarity::Nmos,
            1e-6,
            60e-9,
            ArrangementSlot::Literal(Arrangement::Bl),
        )
        .role(roles::INVERTER);
    }
    b.output("n0");
    Ok(b.build())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HDR: &str = "VDD vdd 0 1.2\n.supply VDD\n";

    #[test]
    fn si_suffixes() {
        assert_eq!(parse_value("10u"), Some(10e-6));
        assert_eq!(parse_value("60n"), Some(60e-9));
        assert_eq!(parse_value("1.5MEG"), Some(1.5e6));
        assert_eq!(parse_value("2m"), Some(2e-3));
        assert_eq!(parse_value("1e-5"), Some(1e-5));
        assert_eq!(parse_value("3.3V"), Some(3.3));
        assert_eq!(parse_value("10k"), Some(1e4));
        assert_eq!(parse_value("4p"), Some(4e-12));
        assert_eq!(parse_value("abc"), None);
    }

    #[test]
    fn literal_arrangement_card() {
        let c =
            parse_netlist(&format!("{HDR}M1 d g 0 0 NMOS W=10u L=60n VT=SVT ARR=BL\n")).unwrap();
        assert_eq!(c.mosfets.len(), 1);
        let m = &c.mosfets[0];
        assert_eq!(m.name, "M1");
        assert_eq!(m.polarity, Polarity::Nmos);
        assert_eq!(m.flavor, Flavor::Svt);
        assert_eq!(m.slot, ArrangementSlot::Literal(Arrangement::Bl));
        assert!((m.width - 10e-6).abs() < 1e-18);
        assert!((m.length - 60e-9).abs() < 1e-20);
        assert_eq!(c.node_name(m.drain), "d");
        assert!(m.source.is_ground());
    }

    #[test]
    fn key_slot_card() {
        let c = parse_netlist(&format!(
            "{HDR}M1 d g 0 0 NMOS W=10u L=60n VT=SVT ARR=@g3\n"
        ))
        .unwrap();
        assert_eq!(c.mosfets[0].slot, ArrangementSlot::Key("g3".into()));
        assert_eq!(
            c.key_slots().into_iter().collect::<Vec<_>>(),
            vec!["g3".to_string()]
        );
    }

    #[test]
    fn missing_length_is_syntax_error() {
        let err = parse_netlist(&format!("{HDR}M1 d g 0 0 NMOS W=10u\n")).unwrap_err();
        assert!(
            matches!(err, NetlistError::Syntax { line: 3, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn rejects_unknown_arrangement() {
        let err = parse_netlist(&format!("{HDR}M1 d g 0 0 NMOS W=1u L=1u ARR=XYZ\n")).unwrap_err();
        assert!(matches!(err, NetlistError::Syntax { .. }));
        let err = parse_netlist(&format!("{HDR}M1 d g 0 0 NMOS W=1u L=1u ARR=@\n")).unwrap_err();
        assert!(matches!(err, NetlistError::Syntax { .. }));
    }

    #[test]
    fn duplicate_and_missing_directives() {
        let err = parse_netlist(&format!("{HDR}R1 a 0 1k\nr1 a 0 2k\n")).unwrap_err();
        assert!(matches!(err, NetlistError::DuplicateName { line: 4, .. }));
        let err = parse_netlist("R1 a 0 1k\n").unwrap_err();
        assert_eq!(err, NetlistError::MissingDirective(".supply"));
        let err = parse_netlist(&format!("{HDR}R1 a 0 1k\n.output zz\n")).unwrap_err();
        assert!(matches!(err, NetlistError::UnknownNode { .. }));
    }

    #[test]
    fn syntax_error_reports_column() {
        let err = parse_netlist(&format!("{HDR}R1 a 0 oops\n")).unwrap_err();
        assert_eq!(
            err,
            NetlistError::Syntax {
                line: 3,
                column: 8,
                reason: "bad value `oops`".into()
            }
        );
    }

    #[test]
    fn continuation_and_comments() {
        let c = parse_netlist(&format!(
            "* header\n{HDR}M1 d g 0 0 nmos\n+ W=1u L=1u ; trailing\nR1 vdd d 10k\n"
        ))
        .unwrap();
        assert_eq!(c.mosfets.len(), 1);
        assert_eq!(c.elements.len(), 2);
    }

    #[test]
    fn sources_dc_and_ac() {
        let c = parse_netlist("V1 in 0 DC 0.9 AC 1\nI1 vdd x 10u\nVDD vdd 0 1.8\n.supply vdd\n")
            .unwrap();
        let v1 = c.element("V1").unwrap();
        assert_eq!(v1.kind, ElementKind::Voltage { ac: 1.0 });
        assert_eq!(v1.value, 0.9);
        assert_eq!(c.element("I1").unwrap().kind, ElementKind::Current);
        assert_eq!(c.supply_voltage(), Some(1.8));
    }

    #[test]
    fn validate_reports_floating_gate() {
        let c = parse_netlist(&format!("{HDR}M1 d g7 0 0 NMOS W=1u L=1u\nR1 vdd d 1k\n")).unwrap();
        assert_eq!(
            validate_circuit(&c),
            vec![Diagnostic::FloatingNode("g7".into())]
        );
    }

    #[test]
    fn validate_reports_duplicate_from_builder() {
        let mut b = CircuitBuilder::new("VDD");
        b.element("VDD", ElementKind::Voltage { ac: 0.0 }, "vdd", "0", 1.2);
        b.mos(
            "M1",
            "vdd",
            "vdd",
            "0",
            "0",
            Polarity::Nmos,
            1e-6,
            1e-6,
            ArrangementSlot::Literal(Arrangement::Bl),
        );
        b.mos(
            "M1",
            "vdd",
            "vdd",
            "0",
            "0",
            Polarity::Nmos,
            1e-6,
            1e-6,
            ArrangementSlot::Literal(Arrangement::Bl),
        );
        assert_eq!(
            validate_circuit(&b.build()),
            vec![Diagnostic::DuplicateName("M1".into())]
        );
    }

    #[test]
    fn validate_reports_disconnected_island() {
        let c = parse_netlist(&format!("{HDR}R1 vdd 0 1k\nR2 a b 1k\n")).unwrap();
        let d = validate_circuit(&c);
        assert!(d.contains(&Diagnostic::Disconnected("a".into())));
        assert!(d.contains(&Diagnostic::Disconnected("b".into())));
    }

    #[test]
    fn ota_shape() {
        let c = builtin_ota();
        assert!((30..=36).contains(&c.mosfets.len()), "{}", c.mosfets.len());
        assert!(c.devices_with_role(roles::INPUT_PAIR).len() >= 4);
        for r in [
            roles::SUMMING,
            roles::BIAS,
            roles::CLASS_AB_OUTPUT,
            roles::CLASS_AB_CONTROL,
        ] {
            assert!(!c.devices_with_role(r).is_empty(), "{r}");
        }
        for name in [
            "P1", "P2", "N1", "N2", "P7", "P10", "N7", "N10", "N17", "N18", "P18", "P16", "N13",
        ] {
            assert!(c.device(name).is_some(), "{name}");
        }
        assert_eq!(validate_circuit(&c), vec![]);
    }

    #[test]
    fn ring_oscillator_shape() {
        let c = builtin_ro(7).unwrap();
        assert_eq!(c.mosfets.len(), 14);
        assert_eq!(builtin_ro(3).unwrap().key_slots().len(), 3);
        assert_eq!(builtin_ro(4).unwrap_err(), NetlistError::EvenStageCount(4));
        assert_eq!(builtin_ro(1).unwrap_err(), NetlistError::EvenStageCount(1));
        assert_eq!(validate_circuit(&c), vec![]);
    }

    #[test]
    fn canonical_form_reparses() {
        let c = builtin_ota();
        let text = c.to_netlist();
        let d = parse_netlist(&text).unwrap();
        assert_eq!(d.to_netlist(), text);
        assert_eq!(d.mosfets.len(), c.mosfets.len());
        for m in &c.mosfets {
            let n = d.device(&m.name).unwrap();
            assert_eq!(
                (m.width, m.length, &m.slot, &m.role),
                (n.width, n.length, &n.slot, &n.role)
            );
            assert_eq!(c.node_name(m.gate), d.node_name(n.gate));
        }
    }

    #[test]
    fn merge_fingers_folds_width() {
        let c = parse_netlist(&format!("{HDR}M1 vdd vdd 0 0 NMOS W=1u L=1u M=4\n")).unwrap();
        let m = c.merge_fingers();
        assert_eq!(m.mosfets[0].fingers, 1);
        assert!((m.mosfets[0].width - 4e-6).abs() < 1e-18);
        assert_eq!(c.mosfets[0].total_width(), m.mosfets[0].total_width());
    }
}
