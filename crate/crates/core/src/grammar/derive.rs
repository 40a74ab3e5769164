use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    realize_parameter, Alternative, AttrValue, AttributeList, Grammar, GrammarError, InnerGenotype, ParameterSpec,
    Symbol,
};

/// Guard against non-terminating user grammars.
pub const DEFAULT_MAX_DEPTH: usize = 50;

/// Source of derivation decisions.
pub trait Chooser {
    fn choose(&mut self, nonterminal: &str, alternatives: &[Alternative]) -> usize;
    /// Raw values for a parameter tuple; must lie within the spec's range.
    fn parameter(&mut self, nonterminal: &str, spec: &ParameterSpec) -> Vec<f64>;
}

/// Uniform alternatives, uniform parameter values.
pub struct RandomChooser<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> Chooser for RandomChooser<'_, R> {
    fn choose(&mut self, _nonterminal: &str, alternatives: &[Alternative]) -> usize {
        self.0.random_range(0..alternatives.len())
    }

    fn parameter(&mut self, _nonterminal: &str, spec: &ParameterSpec) -> Vec<f64> {
        (0..spec.count).map(|_| sample_value(self.0, spec)).collect()
    }
}

fn sample_value<R: Rng + ?Sized>(rng: &mut R, spec: &ParameterSpec) -> f64 {
    if spec.min == spec.max {
        return spec.min;
    }
    if spec.kind.is_integral() {
        rng.random_range(spec.min as i64..=spec.max as i64) as f64
    } else {
        rng.random_range(spec.min..=spec.max)
    }
}

// Derivation tree; the genotype is its flattened form.
#[derive(Debug, Clone)]
struct Node {
    nonterminal: String,
    choice: usize,
    children: Vec<Child>,
}

#[derive(Debug, Clone)]
enum Child {
    Node(Node),
    Param { spec: ParameterSpec, values: Vec<f64> },
    Terminal,
}

fn alternatives_of<'g>(grammar: &'g Grammar, nt: &str) -> Result<&'g [Alternative], GrammarError> {
    grammar.alternatives(nt).ok_or_else(|| GrammarError::UnknownStart(nt.to_string()))
}

fn grow(grammar: &Grammar, nt: &str, chooser: &mut dyn Chooser, depth: usize) -> Result<Node, GrammarError> {
    let alts = alternatives_of(grammar, nt)?;
    let choice = chooser.choose(nt, alts);
    grow_with_choice(grammar, nt, choice, chooser, depth)
}

fn grow_with_choice(
    grammar: &Grammar,
    nt: &str,
    choice: usize,
    chooser: &mut dyn Chooser,
    depth: usize,
) -> Result<Node, GrammarError> {
    if depth > DEFAULT_MAX_DEPTH {
        return Err(GrammarError::DepthExceeded(DEFAULT_MAX_DEPTH));
    }
    let alts = alternatives_of(grammar, nt)?;
    let alt = alts.get(choice).ok_or_else(|| GrammarError::ChoiceOutOfBounds {
        nonterminal: nt.to_string(),
        index: choice,
        alternatives: alts.len(),
    })?;
    let mut children = Vec::with_capacity(alt.len());
    for sym in alt {
        children.push(match sym {
            Symbol::NonTerminal(n) => Child::Node(grow(grammar, n, chooser, depth + 1)?),
            Symbol::Terminal { .. } => Child::Terminal,
            Symbol::Parameter(spec) => {
                let values: Vec<f64> = chooser.parameter(nt, spec).into_iter().map(|v| spec.clamp(v)).collect();
                Child::Param { spec: spec.clone(), values }
            }
        });
    }
    Ok(Node { nonterminal: nt.to_string(), choice, children })
}

fn flatten(root: &Node) -> InnerGenotype {
    fn walk(node: &Node, g: &mut InnerGenotype) {
        g.choices.entry(node.nonterminal.clone()).or_default().push(node.choice);
        for c in &node.children {
            match c {
                Child::Node(n) => walk(n, g),
                Child::Param { spec, values } => g
                    .params
                    .entry(node.nonterminal.clone())
                    .or_default()
                    .entry(spec.name.clone())
                    .or_default()
                    .push(values.clone()),
                Child::Terminal => {}
            }
        }
    }
    let mut g = InnerGenotype::default();
    walk(root, &mut g);
    g
}

struct Cursor<'a> {
    genotype: &'a InnerGenotype,
    choice_pos: BTreeMap<&'a str, usize>,
    param_pos: BTreeMap<(String, String), usize>,
}

fn rebuild(grammar: &Grammar, cur: &mut Cursor<'_>, nt: &str, depth: usize) -> Result<Node, GrammarError> {
    if depth > DEFAULT_MAX_DEPTH {
        return Err(GrammarError::DepthExceeded(DEFAULT_MAX_DEPTH));
    }
    let alts = alternatives_of(grammar, nt)?;
    let (key, list) =
        cur.genotype.choices.get_key_value(nt).ok_or_else(|| GrammarError::MissingChoice(nt.to_string()))?;
    let pos = cur.choice_pos.entry(key.as_str()).or_insert(0);
    let choice = *list.get(*pos).ok_or_else(|| GrammarError::MissingChoice(nt.to_string()))?;
    *pos += 1;
    let alt = alts.get(choice).ok_or_else(|| GrammarError::ChoiceOutOfBounds {
        nonterminal: nt.to_string(),
        index: choice,
        alternatives: alts.len(),
    })?;
    let mut children = Vec::with_capacity(alt.len());
    for sym in alt {
        children.push(match sym {
            Symbol::NonTerminal(n) => Child::Node(rebuild(grammar, cur, n, depth + 1)?),
            Symbol::Terminal { .. } => Child::Terminal,
            Symbol::Parameter(spec) => {
                let slot = cur.param_pos.entry((nt.to_string(), spec.name.clone())).or_insert(0);
                let occurrence = *slot;
                *slot += 1;
                let values = cur.genotype.param(nt, &spec.name, occurrence).ok_or_else(|| {
                    GrammarError::MissingParameter { nonterminal: nt.to_string(), name: spec.name.clone(), occurrence }
                })?;
                Child::Param { spec: spec.clone(), values: values.to_vec() }
            }
        });
    }
    Ok(Node { nonterminal: nt.to_string(), choice, children })
}

fn tree_of(grammar: &Grammar, genotype: &InnerGenotype, start: &str) -> Result<Node, GrammarError> {
    if !grammar.contains(start) {
        return Err(GrammarError::UnknownStart(start.to_string()));
    }
    let mut cur = Cursor { genotype, choice_pos: BTreeMap::new(), param_pos: BTreeMap::new() };
    let root = rebuild(grammar, &mut cur, start, 0)?;
    for (nt, list) in &genotype.choices {
        if cur.choice_pos.get(nt.as_str()).copied().unwrap_or(0) != list.len() {
            return Err(GrammarError::SurplusChoices(nt.clone()));
        }
    }
    for (nt, by_name) in &genotype.params {
        for (name, occ) in by_name {
            if cur.param_pos.get(&(nt.clone(), name.clone())).copied().unwrap_or(0) != occ.len() {
                return Err(GrammarError::SurplusParameter { nonterminal: nt.clone(), name: name.clone() });
            }
        }
    }
    Ok(root)
}

/// Random left-to-right derivation from `start`.
pub fn derive<R: Rng + ?Sized>(grammar: &Grammar, start: &str, rng: &mut R) -> Result<InnerGenotype, GrammarError> {
    derive_with(grammar, start, &mut RandomChooser(rng))
}

pub fn derive_with(grammar: &Grammar, start: &str, chooser: &mut dyn Chooser) -> Result<InnerGenotype, GrammarError> {
    if !grammar.contains(start) {
        return Err(GrammarError::UnknownStart(start.to_string()));
    }
    Ok(flatten(&grow(grammar, start, chooser, 0)?))
}

/// Genotype to attribute list. Terminals emit `(key, value)`; parameter
/// tuples emit `(name, realized values)`; order follows the derivation.
pub fn decode(grammar: &Grammar, genotype: &InnerGenotype, start: &str) -> Result<AttributeList, GrammarError> {
    let root = tree_of(grammar, genotype, start)?;
    let mut out = AttributeList::default();
    emit(grammar, &root, &mut out)?;
    Ok(out)
}

fn emit(grammar: &Grammar, node: &Node, out: &mut AttributeList) -> Result<(), GrammarError> {
    let alt = &grammar.alternatives(&node.nonterminal).expect("tree built from this grammar")[node.choice];
    for (sym, child) in alt.iter().zip(&node.children) {
        match (sym, child) {
            (Symbol::Terminal { key, value }, _) => out.push(key.clone(), AttrValue::Text(value.clone())),
            (Symbol::Parameter(spec), Child::Param { values, .. }) => {
                out.push(spec.name.clone(), AttrValue::Numbers(realize_parameter(spec, values)?))
            }
            (Symbol::NonTerminal(_), Child::Node(n)) => emit(grammar, n, out)?,
            _ => unreachable!("tree shape follows the grammar"),
        }
    }
    Ok(())
}

fn node_paths(node: &Node, path: &mut Vec<usize>, grammar: &Grammar, out: &mut Vec<Vec<usize>>) {
    if grammar.alternatives(&node.nonterminal).map_or(0, |a| a.len()) >= 2 {
        out.push(path.clone());
    }
    for (i, c) in node.children.iter().enumerate() {
        if let Child::Node(n) = c {
            path.push(i);
            node_paths(n, path, grammar, out);
            path.pop();
        }
    }
}

fn param_paths(node: &Node, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    for (i, c) in node.children.iter().enumerate() {
        path.push(i);
        match c {
            Child::Node(n) => param_paths(n, path, out),
            Child::Param { .. } => out.push(path.clone()),
            Child::Terminal => {}
        }
        path.pop();
    }
}

fn node_at<'a>(root: &'a mut Node, path: &[usize]) -> &'a mut Node {
    let mut node = root;
    for &i in path {
        node = match &mut node.children[i] {
            Child::Node(n) => n,
            _ => unreachable!("path points at a node"),
        };
    }
    node
}

/// Re-draws one derivation choice (among nonterminals with at least two
/// alternatives) to a different alternative and re-derives the subtree below
/// it. Returns the genotype unchanged when no choice is mutable.
pub fn mutate_choice<R: Rng + ?Sized>(
    grammar: &Grammar,
    genotype: &InnerGenotype,
    start: &str,
    rng: &mut R,
) -> Result<InnerGenotype, GrammarError> {
    let mut root = tree_of(grammar, genotype, start)?;
    let mut sites = Vec::new();
    node_paths(&root, &mut Vec::new(), grammar, &mut sites);
    if sites.is_empty() {
        return Ok(genotype.clone());
    }
    let path = &sites[rng.random_range(0..sites.len())];
    let node = node_at(&mut root, path);
    let n_alts = grammar.alternatives(&node.nonterminal).map_or(0, |a| a.len());
    let mut next = rng.random_range(0..n_alts - 1);
    if next >= node.choice {
        next += 1;
    }
    let nt = node.nonterminal.clone();
    *node = grow_with_choice(grammar, &nt, next, &mut RandomChooser(rng), path.len())?;
    Ok(flatten(&root))
}

/// Mutates one parameter tuple chosen uniformly: floats get additive
/// Gaussian noise `N(mu, sigma)` and are clamped to range; integer and power
/// kinds are re-drawn uniformly. Unchanged when there are no parameters.
pub fn perturb_parameter<R: Rng + ?Sized>(
    grammar: &Grammar,
    genotype: &InnerGenotype,
    start: &str,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<InnerGenotype, GrammarError> {
    let mut root = tree_of(grammar, genotype, start)?;
    let mut sites = Vec::new();
    param_paths(&root, &mut Vec::new(), &mut sites);
    if sites.is_empty() {
        return Ok(genotype.clone());
    }
    let path = &sites[rng.random_range(0..sites.len())];
    let (last, parent) = path.split_last().expect("non-empty path");
    let node = node_at(&mut root, parent);
    if let Child::Param { spec, values } = &mut node.children[*last] {
        if spec.kind.is_integral() {
            for v in values.iter_mut() {
                *v = sample_value(rng, spec);
            }
        } else {
            let noise = Normal::new(mu, sigma.max(0.0)).expect("finite gaussian parameters");
            for v in values.iter_mut() {
                *v = spec.clamp(*v + noise.sample(rng));
            }
        }
    }
    Ok(flatten(&root))
}

/// The grammatical mutation applied by the evolutionary operators: picks
/// uniformly between a choice mutation and a parameter perturbation, using
/// whichever are applicable.
pub fn mutate_genotype<R: Rng + ?Sized>(
    grammar: &Grammar,
    genotype: &InnerGenotype,
    start: &str,
    mu: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<InnerGenotype, GrammarError> {
    let root = tree_of(grammar, genotype, start)?;
    let mut choice_sites = Vec::new();
    node_paths(&root, &mut Vec::new(), grammar, &mut choice_sites);
    let mut param_sites = Vec::new();
    param_paths(&root, &mut Vec::new(), &mut param_sites);
    match (choice_sites.is_empty(), param_sites.is_empty()) {
        (true, true) => Ok(genotype.clone()),
        (false, true) => mutate_choice(grammar, genotype, start, rng),
        (true, false) => perturb_parameter(grammar, genotype, start, mu, sigma, rng),
        (false, false) => {
            if rng.random_bool(0.5) {
                mutate_choice(grammar, genotype, start, rng)
            } else {
                perturb_parameter(grammar, genotype, start, mu, sigma, rng)
            }
        }
    }
}
