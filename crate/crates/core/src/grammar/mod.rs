//! Context-free grammar of the inner level and the DSGE genotype over it.
//!
//! Grammar text is line oriented:
//!
//! ```text
//! # comment
//! <bn-position> ::= bn:pre | bn:mid | bn:post | bn:none
//! <conv-block>  ::= layer:convblock <act-position> <activation> <bn-position>
//!                   [num-filters,int,1,32,256] [filter-shape,int,1,1,5]
//! ```
//!
//! A line without `::=` continues the previous production. Symbols are
//! `<nonterminal>`, `key:value` terminals, or `[name,kind,count,min,max]`
//! parameter tuples with `kind` one of `int`, `float`, `int_power2`,
//! `int_power10`. Alternatives are chosen uniformly, so listing an
//! alternative twice doubles its weight.

mod derive;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use derive::{
    decode, derive, derive_with, mutate_choice, mutate_genotype, perturb_parameter, Chooser, RandomChooser,
    DEFAULT_MAX_DEPTH,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrammarError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: malformed parameter tuple `{tuple}`: {reason}")]
    MalformedTuple { line: usize, tuple: String, reason: String },
    #[error("line {line}: empty alternative in <{nonterminal}>")]
    EmptyAlternative { line: usize, nonterminal: String },
    #[error("<{nonterminal}> is defined more than once")]
    DuplicateProduction { nonterminal: String },
    #[error("<{name}> is referenced by <{referenced_by}> but never defined")]
    UndefinedNonterminal { name: String, referenced_by: String },
    #[error("unknown start symbol <{0}>")]
    UnknownStart(String),
    #[error("derivation exceeded the maximum depth of {0}")]
    DepthExceeded(usize),
    #[error("choice {index} of <{nonterminal}> is out of bounds ({alternatives} alternatives)")]
    ChoiceOutOfBounds { nonterminal: String, index: usize, alternatives: usize },
    #[error("genotype has no derivation choice left for <{0}>")]
    MissingChoice(String),
    #[error("genotype has unused derivation choices for <{0}>")]
    SurplusChoices(String),
    #[error("genotype has no value for parameter `{name}` (occurrence {occurrence}) of <{nonterminal}>")]
    MissingParameter { nonterminal: String, name: String, occurrence: usize },
    #[error("genotype has unused values for parameter `{name}` of <{nonterminal}>")]
    SurplusParameter { nonterminal: String, name: String },
    #[error("parameter `{name}` expects {expected} values, got {got}")]
    ParameterLength { name: String, expected: usize, got: usize },
    #[error("parameter `{name}` value {value} outside [{min}, {max}]")]
    ParameterOutOfRange { name: String, value: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Float,
    IntPower2,
    IntPower10,
}

impl ParamKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "int" => Some(ParamKind::Int),
            "float" => Some(ParamKind::Float),
            "int_power2" => Some(ParamKind::IntPower2),
            "int_power10" => Some(ParamKind::IntPower10),
            _ => None,
        }
    }

    pub fn is_integral(self) -> bool {
        self != ParamKind::Float
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Int => "int",
            ParamKind::Float => "float",
            ParamKind::IntPower2 => "int_power2",
            ParamKind::IntPower10 => "int_power10",
        })
    }
}

/// A `[name,kind,count,min,max]` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub kind: ParamKind,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl ParameterSpec {
    /// Clamps a raw (genotype-level) value into range, rounding integral kinds.
    pub fn clamp(&self, v: f64) -> f64 {
        let v = if self.kind.is_integral() { libm::round(v) } else { v };
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max && (!self.kind.is_integral() || libm::round(v) == v)
    }
}

/// Maps raw genotype values to phenotype values: identity for `int` and
/// `float`, `2^raw` for `int_power2` and `10^raw` for `int_power10`.
pub fn realize_parameter(spec: &ParameterSpec, raw: &[f64]) -> Result<Vec<f64>, GrammarError> {
    if raw.len() != spec.count {
        return Err(GrammarError::ParameterLength { name: spec.name.clone(), expected: spec.count, got: raw.len() });
    }
    raw.iter()
        .map(|&v| {
            if !spec.contains(v) {
                return Err(GrammarError::ParameterOutOfRange {
                    name: spec.name.clone(),
                    value: v,
                    min: spec.min,
                    max: spec.max,
                });
            }
            Ok(match spec.kind {
                ParamKind::Int | ParamKind::Float => v,
                ParamKind::IntPower2 => exact_power(2.0, v as i32),
                ParamKind::IntPower10 => exact_power(10.0, v as i32),
            })
        })
        .collect()
}

// Positive powers of 2 and 10 are exact in f64 over the ranges grammars use;
// negative ones go through a single correctly rounded division.
fn exact_power(base: f64, e: i32) -> f64 {
    let mut p = 1.0f64;
    for _ in 0..e.unsigned_abs() {
        p *= base;
    }
    if e < 0 {
        1.0 / p
    } else {
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Symbol {
    NonTerminal(String),
    Terminal { key: String, value: String },
    Parameter(ParameterSpec),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::NonTerminal(n) => write!(f, "<{n}>"),
            Symbol::Terminal { key, value } => write!(f, "{key}:{value}"),
            Symbol::Parameter(p) => write!(f, "[{},{},{},{},{}]", p.name, p.kind, p.count, p.min, p.max),
        }
    }
}

pub type Alternative = Vec<Symbol>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    productions: BTreeMap<String, Vec<Alternative>>,
    order: Vec<String>,
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Grammar, GrammarError> {
        parse_grammar(text)
    }

    pub fn alternatives(&self, nonterminal: &str) -> Option<&[Alternative]> {
        self.productions.get(nonterminal).map(|v| v.as_slice())
    }

    pub fn contains(&self, nonterminal: &str) -> bool {
        self.productions.contains_key(nonterminal)
    }

    /// Nonterminals in definition order.
    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for nt in &self.order {
            write!(f, "<{nt}> ::=")?;
            for (i, alt) in self.productions[nt].iter().enumerate() {
                if i > 0 {
                    f.write_str(" |")?;
                }
                for s in alt {
                    write!(f, " {s}")?;
                }
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}

/// Parses grammar source text.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    // Join continuation lines onto their production first.
    let mut joined: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some((lhs, rhs)) = line.split_once("::=") {
            let name = parse_nonterminal_name(lhs.trim())
                .ok_or_else(|| GrammarError::Syntax { line: line_no, message: format!("bad left-hand side `{}`", lhs.trim()) })?;
            joined.push((line_no, name, rhs.to_string()));
        } else {
            let last = joined.last_mut().ok_or_else(|| GrammarError::Syntax {
                line: line_no,
                message: "continuation line before any production".into(),
            })?;
            last.2.push(' ');
            last.2.push_str(line);
        }
    }

    let mut productions = BTreeMap::new();
    let mut order = Vec::new();
    for (line, name, rhs) in joined {
        if productions.contains_key(&name) {
            return Err(GrammarError::DuplicateProduction { nonterminal: name });
        }
        let alternatives = parse_rhs(line, &name, &rhs)?;
        order.push(name.clone());
        productions.insert(name, alternatives);
    }

    for (name, alts) in &productions {
        for alt in alts {
            for s in alt {
                if let Symbol::NonTerminal(r) = s {
                    if !productions.contains_key(r) {
                        return Err(GrammarError::UndefinedNonterminal { name: r.clone(), referenced_by: name.clone() });
                    }
                }
            }
        }
    }
    Ok(Grammar { productions, order })
}

fn parse_nonterminal_name(s: &str) -> Option<String> {
    let inner = s.strip_prefix('<')?.strip_suffix('>')?;
    if inner.is_empty() || inner.contains(|c: char| c.is_whitespace() || c == '<' || c == '>') {
        return None;
    }
    Some(inner.to_string())
}

fn parse_rhs(line: usize, nt: &str, rhs: &str) -> Result<Vec<Alternative>, GrammarError> {
    let mut alternatives = Vec::new();
    let mut current = Vec::new();
    let mut rest = rhs.trim_start();
    loop {
        if rest.is_empty() {
            break;
        }
        if let Some(r) = rest.strip_prefix('|') {
            if current.is_empty() {
                return Err(GrammarError::EmptyAlternative { line, nonterminal: nt.to_string() });
            }
            alternatives.push(core::mem::take(&mut current));
            rest = r.trim_start();
            continue;
        }
        let (token, r) = if rest.starts_with('[') {
            let end = rest.find(']').ok_or_else(|| GrammarError::MalformedTuple {
                line,
                tuple: rest.to_string(),
                reason: "missing `]`".into(),
            })?;
            (&rest[..=end], &rest[end + 1..])
        } else {
            let end = rest.find(|c: char| c.is_whitespace() || c == '|').unwrap_or(rest.len());
            (&rest[..end], &rest[end..])
        };
        current.push(parse_symbol(line, token)?);
        rest = r.trim_start();
    }
    if current.is_empty() {
        return Err(GrammarError::EmptyAlternative { line, nonterminal: nt.to_string() });
    }
    alternatives.push(current);
    Ok(alternatives)
}

fn parse_symbol(line: usize, token: &str) -> Result<Symbol, GrammarError> {
    if token.starts_with('<') {
        return parse_nonterminal_name(token)
            .map(Symbol::NonTerminal)
            .ok_or_else(|| GrammarError::Syntax { line, message: format!("bad nonterminal `{token}`") });
    }
    if token.starts_with('[') {
        return parse_tuple(line, token).map(Symbol::Parameter);
    }
    match token.split_once(':') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => {
            Ok(Symbol::Terminal { key: k.to_string(), value: v.to_string() })
        }
        _ => Err(GrammarError::Syntax { line, message: format!("expected `key:value` terminal, found `{token}`") }),
    }
}

fn parse_tuple(line: usize, token: &str) -> Result<ParameterSpec, GrammarError> {
    let bad = |reason: String| GrammarError::MalformedTuple { line, tuple: token.to_string(), reason };
    let inner = &token[1..token.len() - 1];
    let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(bad(format!("expected 5 fields, found {}", fields.len())));
    }
    let name = fields[0];
    if name.is_empty() {
        return Err(bad("empty name".into()));
    }
    let kind = ParamKind::parse(fields[1]).ok_or_else(|| bad(format!("unknown kind `{}`", fields[1])))?;
    let count: usize = fields[2].parse().map_err(|_| bad(format!("bad count `{}`", fields[2])))?;
    if count == 0 {
        return Err(bad("count must be at least 1".into()));
    }
    let min: f64 = fields[3].parse().map_err(|_| bad(format!("bad minimum `{}`", fields[3])))?;
    let max: f64 = fields[4].parse().map_err(|_| bad(format!("bad maximum `{}`", fields[4])))?;
    if !min.is_finite() || !max.is_finite() {
        return Err(bad("bounds must be finite".into()));
    }
    if min > max {
        return Err(bad(format!("min {min} > max {max}")));
    }
    if kind.is_integral() && (libm::round(min) != min || libm::round(max) != max) {
        return Err(bad("integer kinds need integer bounds".into()));
    }
    Ok(ParameterSpec { name: name.to_string(), kind, count, min, max })
}

/// One decoded attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttrValue {
    Text(String),
    Numbers(Vec<f64>),
}

/// Ordered key/value attributes produced by decoding a genotype.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeList(pub Vec<(String, AttrValue)>);

impl AttributeList {
    pub fn push(&mut self, key: impl Into<String>, value: AttrValue) {
        self.0.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<&AttrValue> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.get(key)? {
            AttrValue::Text(s) => Some(s),
            AttrValue::Numbers(_) => None,
        }
    }

    /// First numeric value of `key`, parsing text terminals such as `stride:1`.
    pub fn number(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            AttrValue::Text(s) => s.parse().ok(),
            AttrValue::Numbers(v) => v.first().copied(),
        }
    }

    pub fn flag(&self, key: &str) -> Option<bool> {
        match self.text(key)? {
            "True" | "true" => Some(true),
            "False" | "false" => Some(false),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, AttrValue)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for AttributeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match v {
                AttrValue::Text(s) => write!(f, "{k}:{s}")?,
                AttrValue::Numbers(n) if n.len() == 1 => write!(f, "{k}:{}", n[0])?,
                AttrValue::Numbers(n) => write!(f, "{k}:{n:?}")?,
            }
        }
        Ok(())
    }
}

/// DSGE genotype: per-nonterminal derivation choices in derivation order,
/// plus raw parameter values keyed by nonterminal, parameter name and
/// occurrence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerGenotype {
    pub choices: BTreeMap<String, Vec<usize>>,
    pub params: BTreeMap<String, BTreeMap<String, Vec<Vec<f64>>>>,
}

impl InnerGenotype {
    pub fn param(&self, nonterminal: &str, name: &str, occurrence: usize) -> Option<&[f64]> {
        self.params.get(nonterminal)?.get(name)?.get(occurrence).map(|v| v.as_slice())
    }
}
