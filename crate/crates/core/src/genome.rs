//! Outer-level representation: modules of units, explicit input
//! connections, validity checking and dead-end repair.
//!
//! Units are numbered globally in topological order; an input index of `-1`
//! is the network input. A unit's connection window is governed by its own
//! module: in skip modules any earlier unit within `levels_back` positions is
//! a legal input, otherwise the input list is exactly the predecessor.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{self, AttrValue, Chooser, Grammar, GrammarError, InnerGenotype, ParameterSpec, Symbol};

pub const LEARNING_NONTERMINAL: &str = "learning";

/// One module of the outer level: `(nonterminal, min, max, skip)` plus the
/// connection window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub nonterminal: String,
    pub min_units: usize,
    pub max_units: usize,
    pub allow_skip: bool,
    pub levels_back: usize,
}

impl ModuleSpec {
    pub fn new(nonterminal: &str, min_units: usize, max_units: usize, allow_skip: bool, levels_back: usize) -> Self {
        ModuleSpec { nonterminal: nonterminal.to_string(), min_units, max_units, allow_skip, levels_back }
    }

    pub fn is_well_formed(&self) -> bool {
        self.min_units <= self.max_units && self.max_units >= 1 && self.levels_back >= 1
    }
}

/// Layer modules of the full search space, in order. The learning unit is
/// kept apart from the layer units.
pub fn neronet_modules() -> Vec<ModuleSpec> {
    vec![
        ModuleSpec::new("stem", 0, 1, false, 1),
        ModuleSpec::new("features", 1, 30, true, 5),
        ModuleSpec::new("last-transition", 0, 1, false, 1),
        ModuleSpec::new("classification", 0, 5, false, 1),
        ModuleSpec::new("softmax", 1, 1, false, 1),
    ]
}

/// Training budget bounds, in budget units (optimizer steps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetRange {
    pub default: u64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    /// Index into [`Genome::modules`].
    pub module: usize,
    pub inner: InnerGenotype,
    pub inputs: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub modules: Vec<ModuleSpec>,
    pub units: Vec<Unit>,
    pub learning: InnerGenotype,
    pub budget: u64,
    pub budget_range: BudgetRange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoModules,
    MalformedModule { module: usize },
    UnitOrder { unit: usize },
    ModuleCount { module: String, count: usize, min: usize, max: usize },
    OutputHead,
    NoInputs { unit: usize },
    DuplicateInput { unit: usize, input: i64 },
    Window { unit: usize, input: i64 },
    Chain { unit: usize },
    DeadEnd { unit: usize },
    Budget { budget: u64, default: u64, max: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoModules => write!(f, "genome has no modules"),
            Violation::MalformedModule { module } => write!(f, "module {module}: malformed bounds"),
            Violation::UnitOrder { unit } => write!(f, "unit {unit}: modules out of order"),
            Violation::ModuleCount { module, count, min, max } => {
                write!(f, "module <{module}>: {count} units outside [{min}, {max}]")
            }
            Violation::OutputHead => write!(f, "final module must hold exactly one unit"),
            Violation::NoInputs { unit } => write!(f, "unit {unit}: no input connection"),
            Violation::DuplicateInput { unit, input } => write!(f, "unit {unit}: duplicate input {input}"),
            Violation::Window { unit, input } => write!(f, "unit {unit}: input {input} outside levels-back window"),
            Violation::Chain { unit } => write!(f, "unit {unit}: non-skip module requires the predecessor as sole input"),
            Violation::DeadEnd { unit } => write!(f, "unit {unit}: dead end (no outbound connection)"),
            Violation::Budget { budget, default, max } => write!(f, "budget {budget} outside [{default}, {max}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenomeError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("unit {0} is a dead end with no valid successor")]
    NoSuccessor(usize),
    #[error("module list is malformed")]
    BadModules,
    #[error("module <{0}> is not in the grammar")]
    MissingNonterminal(String),
}

impl Genome {
    pub fn module_of(&self, unit: usize) -> &ModuleSpec {
        &self.modules[self.units[unit].module]
    }

    /// Unit positions belonging to module `m`.
    pub fn module_range(&self, m: usize) -> Range<usize> {
        let start = self.units.iter().position(|u| u.module >= m).unwrap_or(self.units.len());
        let end = self.units.iter().position(|u| u.module > m).unwrap_or(self.units.len());
        start..end.max(start)
    }

    pub fn module_count(&self, m: usize) -> usize {
        self.units.iter().filter(|u| u.module == m).count()
    }

    /// Lowest legal input index for unit `i` (may be `-1`).
    pub fn window_start(&self, i: usize) -> i64 {
        (i as i64 - self.module_of(i).levels_back as i64).max(-1)
    }

    fn in_window(&self, i: usize, j: i64) -> bool {
        j >= self.window_start(i) && j < i as i64
    }

    /// Rewrites connections after a structural change: non-skip units get
    /// their predecessor, skip units drop inputs outside their window and get
    /// a random one if none remain.
    pub(crate) fn fix_windows<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.units.len() {
            if !self.module_of(i).allow_skip {
                self.units[i].inputs = vec![i as i64 - 1];
                continue;
            }
            let lo = self.window_start(i);
            let hi = i as i64;
            let inputs = &mut self.units[i].inputs;
            inputs.retain(|&j| j >= lo && j < hi);
            inputs.sort_unstable();
            inputs.dedup();
            if inputs.is_empty() {
                inputs.push(rng.random_range(lo..hi));
            }
        }
    }

    pub(crate) fn random_inputs<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Vec<i64> {
        if !self.module_of(i).allow_skip {
            return vec![i as i64 - 1];
        }
        let lo = self.window_start(i);
        let len = (i as i64 - lo) as usize;
        let k = rng.random_range(1..=len);
        let mut picked: Vec<i64> = sample(rng, len, k).into_iter().map(|o| lo + o as i64).collect();
        picked.sort_unstable();
        picked
    }

    /// Inserts a unit at global position `pos`, shifting later connections.
    pub(crate) fn insert_unit<R: Rng + ?Sized>(&mut self, pos: usize, module: usize, inner: InnerGenotype, rng: &mut R) {
        for u in self.units.iter_mut().skip(pos) {
            for j in u.inputs.iter_mut() {
                if *j >= pos as i64 {
                    *j += 1;
                }
            }
        }
        self.units.insert(pos, Unit { module, inner, inputs: Vec::new() });
        self.units[pos].inputs = self.random_inputs(pos, rng);
        self.fix_windows(rng);
    }

    /// Removes the unit at `pos`, dropping and renumbering connections.
    pub(crate) fn remove_unit<R: Rng + ?Sized>(&mut self, pos: usize, rng: &mut R) {
        self.units.remove(pos);
        for u in self.units.iter_mut().skip(pos) {
            u.inputs.retain(|&j| j != pos as i64);
            for j in u.inputs.iter_mut() {
                if *j > pos as i64 {
                    *j -= 1;
                }
            }
        }
        self.fix_windows(rng);
    }

    fn consumed(&self) -> Vec<bool> {
        let mut used = vec![false; self.units.len()];
        for u in &self.units {
            for &j in &u.inputs {
                if j >= 0 && (j as usize) < used.len() {
                    used[j as usize] = true;
                }
            }
        }
        used
    }

    /// Units (other than the last) that no later unit consumes.
    pub fn dead_ends(&self) -> Vec<usize> {
        let used = self.consumed();
        (0..self.units.len().saturating_sub(1)).filter(|&j| !used[j]).collect()
    }
}

/// Lists every broken invariant; empty means the genome is valid.
pub fn validate(genome: &Genome) -> Vec<Violation> {
    let mut out = Vec::new();
    if genome.modules.is_empty() {
        out.push(Violation::NoModules);
        return out;
    }
    for (m, spec) in genome.modules.iter().enumerate() {
        if !spec.is_well_formed() {
            out.push(Violation::MalformedModule { module: m });
        }
    }
    let mut prev = 0usize;
    let mut ordered = true;
    for (i, u) in genome.units.iter().enumerate() {
        if u.module >= genome.modules.len() || u.module < prev {
            out.push(Violation::UnitOrder { unit: i });
            ordered = false;
        } else {
            prev = u.module;
        }
    }
    if !ordered {
        return out;
    }
    for (m, spec) in genome.modules.iter().enumerate() {
        let count = genome.module_count(m);
        if count < spec.min_units || count > spec.max_units {
            out.push(Violation::ModuleCount {
                module: spec.nonterminal.clone(),
                count,
                min: spec.min_units,
                max: spec.max_units,
            });
        }
    }
    let last_module = genome.modules.len() - 1;
    if genome.module_count(last_module) != 1 || genome.units.last().map(|u| u.module) != Some(last_module) {
        out.push(Violation::OutputHead);
    }
    for (i, u) in genome.units.iter().enumerate() {
        if u.inputs.is_empty() {
            out.push(Violation::NoInputs { unit: i });
            continue;
        }
        let mut seen = Vec::with_capacity(u.inputs.len());
        for &j in &u.inputs {
            if seen.contains(&j) {
                out.push(Violation::DuplicateInput { unit: i, input: j });
            }
            seen.push(j);
            if !genome.in_window(i, j) {
                out.push(Violation::Window { unit: i, input: j });
            }
        }
        if !genome.module_of(i).allow_skip && u.inputs != [i as i64 - 1] {
            out.push(Violation::Chain { unit: i });
        }
    }
    for j in genome.dead_ends() {
        out.push(Violation::DeadEnd { unit: j });
    }
    let r = genome.budget_range;
    if genome.budget < r.default || genome.budget > r.max {
        out.push(Violation::Budget { budget: genome.budget, default: r.default, max: r.max });
    }
    out
}

/// Wires every dead end into one uniformly chosen valid successor: a later
/// skip-module unit whose window reaches back to it. No other connection
/// changes.
pub fn repair_dead_ends<R: Rng + ?Sized>(genome: &Genome, rng: &mut R) -> Result<Genome, GenomeError> {
    let mut g = genome.clone();
    repair_in_place(&mut g, rng)?;
    Ok(g)
}

pub(crate) fn repair_in_place<R: Rng + ?Sized>(g: &mut Genome, rng: &mut R) -> Result<(), GenomeError> {
    for j in g.dead_ends() {
        let candidates: Vec<usize> =
            ((j + 1)..g.units.len()).filter(|&i| g.module_of(i).allow_skip && g.in_window(i, j as i64)).collect();
        if candidates.is_empty() {
            return Err(GenomeError::NoSuccessor(j));
        }
        let target = candidates[rng.random_range(0..candidates.len())];
        let inputs = &mut g.units[target].inputs;
        inputs.push(j as i64);
        inputs.sort_unstable();
    }
    Ok(())
}

fn check_specs(specs: &[ModuleSpec], grammar: &Grammar) -> Result<(), GenomeError> {
    if specs.is_empty() || specs.iter().any(|s| !s.is_well_formed()) {
        return Err(GenomeError::BadModules);
    }
    let last = specs.last().expect("non-empty");
    if last.min_units != 1 || last.max_units != 1 {
        return Err(GenomeError::BadModules);
    }
    for s in specs.iter().map(|s| s.nonterminal.as_str()).chain([LEARNING_NONTERMINAL]) {
        if !grammar.contains(s) {
            return Err(GenomeError::MissingNonterminal(s.to_string()));
        }
    }
    Ok(())
}

/// Random genome: per-module unit counts uniform in `[min, max]`, inner
/// genotypes from random derivations, random connections within each skip
/// window, then dead-end repair.
pub fn random_genome<R: Rng + ?Sized>(
    specs: &[ModuleSpec],
    grammar: &Grammar,
    budget_range: BudgetRange,
    rng: &mut R,
) -> Result<Genome, GenomeError> {
    check_specs(specs, grammar)?;
    let mut units = Vec::new();
    for (m, spec) in specs.iter().enumerate() {
        let n = rng.random_range(spec.min_units..=spec.max_units);
        for _ in 0..n {
            units.push(Unit { module: m, inner: grammar::derive(grammar, &spec.nonterminal, rng)?, inputs: Vec::new() });
        }
    }
    let mut g = Genome {
        modules: specs.to_vec(),
        units,
        learning: grammar::derive(grammar, LEARNING_NONTERMINAL, rng)?,
        budget: budget_range.default,
        budget_range,
    };
    for i in 0..g.units.len() {
        g.units[i].inputs = g.random_inputs(i, rng);
    }
    // Every dead end has its immediate successor as a candidate unless that
    // successor sits in a non-skip module, which already consumes it.
    repair_in_place(&mut g, rng)?;
    Ok(g)
}

/// Derivation driven by wanted symbols: picks the alternative matching the
/// most wanted terminals (`key:value`) or nonterminal names (`<name>`), and
/// takes raw parameter values by name, clamped into range.
pub struct ScriptedChooser<'a> {
    pub wanted: &'a [&'a str],
    pub params: &'a [(&'a str, f64)],
}

impl Chooser for ScriptedChooser<'_> {
    fn choose(&mut self, _nonterminal: &str, alternatives: &[grammar::Alternative]) -> usize {
        let score = |alt: &grammar::Alternative| {
            alt.iter()
                .filter(|s| {
                    let text = match s {
                        Symbol::NonTerminal(n) => alloc::format!("<{n}>"),
                        Symbol::Terminal { key, value } => alloc::format!("{key}:{value}"),
                        Symbol::Parameter(_) => return false,
                    };
                    self.wanted.contains(&text.as_str())
                })
                .count()
        };
        let mut best = 0;
        for (i, alt) in alternatives.iter().enumerate() {
            if score(alt) > score(&alternatives[best]) {
                best = i;
            }
        }
        best
    }

    fn parameter(&mut self, _nonterminal: &str, spec: &ParameterSpec) -> Vec<f64> {
        let v = self.params.iter().find(|(n, _)| *n == spec.name).map_or(spec.min, |&(_, v)| v);
        vec![spec.clamp(v); spec.count]
    }
}

/// Filter counts and input size for the seed architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedOptions {
    /// Spatial size of the (square) network input.
    pub input_size: usize,
    pub stem_filters: f64,
    pub node_filters: f64,
    pub transition_filters: f64,
}

impl SeedOptions {
    /// 32x32 inputs with the full grammar.
    pub fn cifar() -> Self {
        SeedOptions { input_size: 32, stem_filters: 32.0, node_filters: 32.0, transition_filters: 64.0 }
    }

    /// 8x8 inputs with the reduced grammar.
    pub fn desk() -> Self {
        SeedOptions { input_size: 8, stem_filters: 8.0, node_filters: 4.0, transition_filters: 8.0 }
    }
}

/// Connection bits of the three seed phases. Entry `k` of a phase lists,
/// for node `k + 2`, which of nodes `1..=k+1` feed it; nodes without inputs
/// read the phase input and nodes without consumers feed the phase output.
const SEED_PHASES: [[&[u8]; 5]; 3] = [
    [&[1], &[0, 0], &[0, 1, 0], &[0, 1, 1, 1], &[1, 0, 0, 1, 1]],
    [&[0], &[0, 1], &[1, 0, 0], &[1, 1, 0, 0], &[0, 0, 1, 1, 0]],
    [&[0], &[1, 1], &[0, 1, 0], &[0, 0, 0, 1], &[1, 1, 0, 1, 1]],
];
const SEED_NODES_PER_PHASE: usize = 6;

/// Hand-built genome reproducing the macro-search seed architecture inside
/// this search space: a 3x3 stem, three phases of six bottleneck macro-nodes
/// separated by stride-2 average-pooling transition blocks, a global pooling
/// transition and the softmax head. Filter counts come from `opts`, clamped
/// to the grammar's ranges. The learning unit is a fixed SGD setting; callers
/// that want a random one re-derive it.
pub fn seed_genome(
    grammar: &Grammar,
    specs: &[ModuleSpec],
    budget_range: BudgetRange,
    opts: SeedOptions,
) -> Result<Genome, GenomeError> {
    check_specs(specs, grammar)?;
    let module = |name: &str| specs.iter().position(|s| s.nonterminal == name).ok_or(GenomeError::BadModules);
    let (stem_m, feat_m, last_m, soft_m) =
        (module("stem")?, module("features")?, module("last-transition")?, module("softmax")?);

    let scripted = |nt: &str, wanted: &[&str], params: &[(&str, f64)]| {
        grammar::derive_with(grammar, nt, &mut ScriptedChooser { wanted, params })
    };

    let mut units = Vec::new();
    let stem = scripted("stem", &["padding:same"], &[("num-filters", opts.stem_filters)])?;
    units.push(Unit { module: stem_m, inner: stem, inputs: vec![-1] });

    let node = scripted("features", &["<macro-node>", "act:relu"], &[("num-filters", opts.node_filters)])?;
    let transition = scripted(
        "features",
        &["<transition-block>", "act:relu", "pooling:avg"],
        &[("num-filters", opts.transition_filters)],
    )?;

    let mut spatial = opts.input_size;
    for (p, phase) in SEED_PHASES.iter().enumerate() {
        let phase_input = units.len() as i64 - 1;
        let first = units.len();
        for k in 0..SEED_NODES_PER_PHASE {
            let mut inputs: Vec<i64> = if k == 0 {
                Vec::new()
            } else {
                phase[k - 1].iter().enumerate().filter(|(_, &b)| b == 1).map(|(s, _)| (first + s) as i64).collect()
            };
            if inputs.is_empty() {
                inputs.push(phase_input);
            }
            units.push(Unit { module: feat_m, inner: node.clone(), inputs });
        }
        if p + 1 < SEED_PHASES.len() {
            units.push(Unit { module: feat_m, inner: transition.clone(), inputs: Vec::new() });
            spatial /= 2;
        }
    }

    // Last-transition: global pooling over what remains, if the grammar's
    // kernel range allows it.
    let kernel_spec = grammar.alternatives("last-transition").and_then(|alts| {
        alts[0].iter().find_map(|s| match s {
            Symbol::Parameter(p) if p.name == "pool-kernel-size" => Some(p.clone()),
            _ => None,
        })
    });
    let with_last = matches!(&kernel_spec, Some(p) if spatial as f64 >= p.min);
    if with_last {
        let k = kernel_spec.map_or(2.0, |p| p.clamp(spatial as f64));
        let inner = scripted(
            "last-transition",
            &["act:relu", "pooling:avg"],
            &[("num-filters", opts.transition_filters), ("pool-kernel-size", k)],
        )?;
        units.push(Unit { module: last_m, inner, inputs: Vec::new() });
    }
    units.push(Unit { module: soft_m, inner: scripted("softmax", &[], &[])?, inputs: Vec::new() });

    let learning = scripted(
        LEARNING_NONTERMINAL,
        &["<gradient-descent>", "nesterov:True"],
        &[("lr", -2.0), ("decay", -4.0), ("momentum", 0.9), ("early_stop", 10.0), ("batch_size", 5.0)],
    )?;

    let mut g = Genome { modules: specs.to_vec(), units, learning, budget: budget_range.default, budget_range };

    // Transition blocks and everything after the features read from the
    // preceding phase: every node without a consumer that is still inside
    // the window, else the immediate predecessor.
    for i in 0..g.units.len() {
        if !g.units[i].inputs.is_empty() {
            continue;
        }
        if !g.module_of(i).allow_skip {
            g.units[i].inputs = vec![i as i64 - 1];
            continue;
        }
        let used = g.consumed();
        let lo = g.window_start(i).max(0) as usize;
        let mut inputs: Vec<i64> = (lo..i).filter(|&j| !used[j]).map(|j| j as i64).collect();
        if !inputs.contains(&(i as i64 - 1)) {
            inputs.push(i as i64 - 1);
        }
        inputs.sort_unstable();
        g.units[i].inputs = inputs;
    }
    // Windows are five units wide, so remaining dead ends go to the next unit.
    for j in g.dead_ends() {
        let target = ((j + 1)..g.units.len())
            .find(|&i| g.module_of(i).allow_skip && g.in_window(i, j as i64))
            .ok_or(GenomeError::NoSuccessor(j))?;
        g.units[target].inputs.push(j as i64);
        g.units[target].inputs.sort_unstable();
    }
    debug_assert!(validate(&g).is_empty(), "{:?}", validate(&g));
    Ok(g)
}

/// Number of numeric attributes decoded for `key` in a unit, for summaries.
pub fn unit_attr(grammar: &Grammar, genome: &Genome, unit: usize, key: &str) -> Option<AttrValue> {
    let spec = genome.module_of(unit);
    grammar::decode(grammar, &genome.units[unit].inner, &spec.nonterminal).ok()?.get(key).cloned()
}
