//! (1+λ) evolutionary strategy over genomes: mutation operators, the
//! training-time gene, selection with budget-fair comparison, the warm-up
//! latch and a resumable generation loop.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attacks::NetworkModel;
use crate::data::Dataset;
use crate::engine::{OptimizerConfig, StepBudget, TrainConfig, TrainReport};
use crate::fitness::{evaluate_individual, FitnessConfig, FitnessReport, IllFitted, Regime, WarmupController};
use crate::genome::{self, repair_in_place, validate, BudgetRange, Genome, GenomeError, ModuleSpec, SeedOptions};
use crate::grammar::{self, Grammar};
use crate::hash::content_hash;
use crate::netbuilder::NetworkPlan;
use crate::engine::{Budget, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationRates {
    pub add_layer: f64,
    pub replicate_layer: f64,
    pub remove_layer: f64,
    pub add_connection: f64,
    pub remove_connection: f64,
    pub dsge_layer: f64,
    pub dsge_learning: f64,
    pub train_time: f64,
}

impl Default for MutationRates {
    fn default() -> Self {
        MutationRates {
            add_layer: 0.25,
            replicate_layer: 0.35,
            remove_layer: 0.25,
            add_connection: 0.15,
            remove_connection: 0.15,
            dsge_layer: 0.15,
            dsge_learning: 0.30,
            train_time: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub default: u64,
    pub max: u64,
    pub increment: u64,
}

impl BudgetConfig {
    pub fn range(&self) -> BudgetRange {
        BudgetRange { default: self.default, max: self.max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedMode {
    Random,
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub lambda: usize,
    pub generations: usize,
    pub rates: MutationRates,
    pub gaussian: Gaussian,
    pub budget: BudgetConfig,
    pub tau: f64,
    pub beta: f64,
    pub seed_mode: SeedMode,
    pub seed: u64,
    /// Extend a cheaper-trained winning challenger to the incumbent's budget
    /// before the final comparison.
    pub fair_comparison: bool,
    /// Re-score the parent under `F_beta` when the warm-up latch flips.
    pub rescore_parent_on_flip: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            lambda: 4,
            generations: 100,
            rates: MutationRates::default(),
            gaussian: Gaussian { mu: 0.0, sigma: 0.15 },
            budget: BudgetConfig { default: 2000, max: 6000, increment: 2000 },
            tau: 0.80,
            beta: 4.0,
            seed_mode: SeedMode::Seeded,
            seed: 0,
            fair_comparison: true,
            rescore_parent_on_flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    /// `None` when the genome does not compile to a network.
    pub plan_hash: Option<String>,
    pub fitness: FitnessReport,
    pub evaluated_budget: u64,
    /// Seed of the training run behind `fitness`.
    pub eval_seed: u64,
}

/// One training-and-scoring request.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalJob {
    pub genome: Genome,
    pub seed: u64,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub fitness: FitnessReport,
    pub train: Option<TrainReport>,
}

/// Scores genomes. Implementations may run jobs concurrently but must
/// return results in job order.
pub trait Evaluator {
    fn evaluate(&self, jobs: &[EvalJob]) -> Vec<EvalOutcome>;
}

/// Trains each genome from scratch on the evolutionary training set (early
/// stopping on the control set) and scores it on the fitness set.
pub struct TrainingEvaluator<'a> {
    pub grammar: &'a Grammar,
    pub input_shape: Shape,
    pub n_classes: usize,
    pub train: &'a Dataset,
    pub control: &'a Dataset,
    pub fitness_set: &'a Dataset,
    pub fitness: FitnessConfig,
    /// Settings not carried by the learning unit: L2, clipping,
    /// augmentation. Batch size, patience and seed are overwritten.
    pub train_template: TrainConfig,
}

impl TrainingEvaluator<'_> {
    /// Evaluates one job under an explicit budget.
    pub fn evaluate_with(&self, job: &EvalJob, budget: &mut dyn Budget) -> EvalOutcome {
        let invalid = || EvalOutcome { fitness: FitnessReport::penalized(IllFitted::InvalidPlan, job.regime), train: None };
        let Ok(plan) = NetworkPlan::from_genome(self.grammar, &job.genome, self.input_shape, self.n_classes) else {
            return invalid();
        };
        let mut rng = crate::Rng::seed_from_u64(job.seed);
        let Ok(mut net) = plan.build::<f32, _>(&mut rng) else { return invalid() };
        let (Ok(oc), Some(from_unit)) =
            (OptimizerConfig::from_attributes(&plan.learning), TrainConfig::from_attributes(&plan.learning))
        else {
            return invalid();
        };
        let tc = TrainConfig {
            batch_size: from_unit.batch_size,
            epochs_cap: from_unit.epochs_cap,
            patience: from_unit.patience,
            seed: job.seed,
            ..self.train_template.clone()
        };
        let mut opt = crate::engine::Optimizer::new(oc, &net);
        let report = crate::engine::train(&mut net, &mut opt, self.train, self.control, &tc, budget, None);
        let cfg = FitnessConfig { seed: job.seed, ..self.fitness.clone() };
        let fitness = evaluate_individual(&NetworkModel::inference(&net), self.fitness_set, &cfg, job.regime, Some(&report));
        EvalOutcome { fitness, train: Some(report) }
    }

    pub fn evaluate_one(&self, job: &EvalJob) -> EvalOutcome {
        self.evaluate_with(job, &mut StepBudget(job.genome.budget))
    }
}

impl Evaluator for TrainingEvaluator<'_> {
    fn evaluate(&self, jobs: &[EvalJob]) -> Vec<EvalOutcome> {
        jobs.iter().map(|j| self.evaluate_one(j)).collect()
    }
}

/// One offspring row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub generation: usize,
    pub individual: usize,
    pub c: f64,
    pub a: Option<f64>,
    pub f: f64,
    pub regime: Regime,
    pub ill_fitted: Option<IllFitted>,
    pub budget: u64,
    /// Fitness copied from an identical parent instead of retraining.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    /// Regime the generation was scored under.
    pub regime: Regime,
    /// Parent after selection.
    pub best_f: f64,
    pub best_c: f64,
    pub best_a: Option<f64>,
    /// Mean over the incumbent and all offspring, penalties included.
    pub mean_f: f64,
    pub parent_budget: u64,
    /// The warm-up latch flipped at the end of this generation.
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainReason {
    FairComparison,
    RegimeFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRow {
    pub generation: usize,
    pub individual: usize,
    pub reason: RetrainReason,
    pub from_budget: u64,
    pub to_budget: u64,
    pub f_before: f64,
    pub f_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub summaries: Vec<GenerationSummary>,
    pub retrains: Vec<RetrainRow>,
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: EvolutionConfig,
    /// Generations completed.
    pub generation: usize,
    pub parent: Option<Individual>,
    pub warmup: WarmupController,
    pub rng: crate::Rng,
    pub log: RunLog,
}

impl RunState {
    pub fn finished(&self) -> bool {
        self.generation >= self.config.generations
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvolutionError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("checkpoint was written with a different configuration")]
    ConfigMismatch,
    #[error("configuration is invalid: {0}")]
    BadConfig(&'static str),
}

/// Training seed of individual `index` in `generation`.
pub fn evaluation_seed(run_seed: u64, generation: usize, index: usize) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&run_seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(generation as u64).to_le_bytes());
    bytes[16..].copy_from_slice(&(index as u64).to_le_bytes());
    content_hash(&bytes)
}

/// The search: configuration plus the grammar, module layout and the
/// network input it builds for.
pub struct Evolution<'g> {
    pub config: EvolutionConfig,
    pub grammar: &'g Grammar,
    pub specs: Vec<ModuleSpec>,
    pub seed_options: SeedOptions,
    pub input_shape: Shape,
    pub n_classes: usize,
}

impl Evolution<'_> {
    pub fn check_config(&self) -> Result<(), EvolutionError> {
        let c = &self.config;
        let r = &c.rates;
        let rates = [
            r.add_layer,
            r.replicate_layer,
            r.remove_layer,
            r.add_connection,
            r.remove_connection,
            r.dsge_layer,
            r.dsge_learning,
            r.train_time,
        ];
        if rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EvolutionError::BadConfig("rates must lie in [0, 1]"));
        }
        if c.budget.default > c.budget.max || c.budget.increment == 0 {
            return Err(EvolutionError::BadConfig("budget needs default <= max and increment > 0"));
        }
        if c.lambda == 0 {
            return Err(EvolutionError::BadConfig("lambda must be positive"));
        }
        if !(c.gaussian.sigma >= 0.0) {
            return Err(EvolutionError::BadConfig("sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn new_state(&self) -> Result<RunState, EvolutionError> {
        self.check_config()?;
        Ok(RunState {
            config: self.config.clone(),
            generation: 0,
            parent: None,
            warmup: WarmupController::new(self.config.tau),
            rng: crate::Rng::seed_from_u64(self.config.seed),
            log: RunLog::default(),
        })
    }

    /// Accepts a checkpointed state only if it was produced by this
    /// configuration.
    pub fn resume(&self, state: RunState) -> Result<RunState, EvolutionError> {
        if state.config != self.config {
            return Err(EvolutionError::ConfigMismatch);
        }
        Ok(state)
    }

    pub fn plan_hash(&self, g: &Genome) -> Option<String> {
        NetworkPlan::from_genome(self.grammar, g, self.input_shape, self.n_classes).ok()?.hash().ok()
    }

    /// First generation: λ random genomes, or the seed plus λ - 1 of its
    /// mutants. Learning units are drawn at random in both modes.
    pub fn initial_genomes<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Genome>, EvolutionError> {
        let c = &self.config;
        let range = c.budget.range();
        let mut out = Vec::with_capacity(c.lambda);
        match c.seed_mode {
            SeedMode::Random => {
                for _ in 0..c.lambda {
                    out.push(genome::random_genome(&self.specs, self.grammar, range, rng)?);
                }
            }
            SeedMode::Seeded => {
                let mut seed = genome::seed_genome(self.grammar, &self.specs, range, self.seed_options)?;
                seed.learning = grammar::derive(self.grammar, genome::LEARNING_NONTERMINAL, rng).map_err(GenomeError::from)?;
                out.push(seed.clone());
                for _ in 1..c.lambda {
                    let mut m = self.mutate(&seed, rng);
                    m.learning =
                        grammar::derive(self.grammar, genome::LEARNING_NONTERMINAL, rng).map_err(GenomeError::from)?;
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    /// One offspring. A training-time mutation below the cap only extends
    /// the budget and leaves the architecture untouched; at the cap the
    /// budget falls back to the default and the other operators run. The
    /// others fire independently in a fixed order: per module add,
    /// replicate, remove; per skip unit add and remove connection; per
    /// unit grammatical mutation; learning-unit grammatical mutation.
    pub fn mutate<R: Rng + ?Sized>(&self, parent: &Genome, rng: &mut R) -> Genome {
        let r = &self.config.rates;
        let b = &self.config.budget;
        let mut g = parent.clone();
        if rng.random_bool(r.train_time) {
            if g.budget < b.max {
                g.budget = (g.budget + b.increment).min(b.max);
                return g;
            }
            g.budget = b.default;
        }

        for m in 0..g.modules.len() {
            let spec = g.modules[m].clone();
            if rng.random_bool(r.add_layer) && g.module_count(m) < spec.max_units {
                if let Ok(inner) = grammar::derive(self.grammar, &spec.nonterminal, rng) {
                    let range = g.module_range(m);
                    let pos = rng.random_range(range.start..=range.end);
                    structural(&mut g, rng, |g, rng| g.insert_unit(pos, m, inner, rng));
                }
            }
            if rng.random_bool(r.replicate_layer) && g.module_count(m) < spec.max_units && g.module_count(m) > 0 {
                let range = g.module_range(m);
                let src = rng.random_range(range.clone());
                let inner = g.units[src].inner.clone();
                let pos = rng.random_range(range.start..=range.end);
                structural(&mut g, rng, |g, rng| g.insert_unit(pos, m, inner, rng));
            }
            if rng.random_bool(r.remove_layer) && g.module_count(m) > spec.min_units {
                let pos = rng.random_range(g.module_range(m));
                structural(&mut g, rng, |g, rng| g.remove_unit(pos, rng));
            }
        }

        for i in 0..g.units.len() {
            if !g.module_of(i).allow_skip {
                continue;
            }
            if rng.random_bool(r.add_connection) {
                let lo = g.window_start(i);
                let free: Vec<i64> = (lo..i as i64).filter(|j| !g.units[i].inputs.contains(j)).collect();
                if !free.is_empty() {
                    let j = free[rng.random_range(0..free.len())];
                    g.units[i].inputs.push(j);
                    g.units[i].inputs.sort_unstable();
                }
            }
            if rng.random_bool(r.remove_connection) && g.units[i].inputs.len() > 1 {
                let k = rng.random_range(0..g.units[i].inputs.len());
                let before = g.clone();
                g.units[i].inputs.remove(k);
                if repair_in_place(&mut g, rng).is_err() {
                    g = before;
                }
            }
        }

        let (mu, sigma) = (self.config.gaussian.mu, self.config.gaussian.sigma);
        for i in 0..g.units.len() {
            if rng.random_bool(r.dsge_layer) {
                let nt = g.module_of(i).nonterminal.clone();
                if let Ok(inner) = grammar::mutate_genotype(self.grammar, &g.units[i].inner, &nt, mu, sigma, rng) {
                    g.units[i].inner = inner;
                }
            }
        }
        if rng.random_bool(r.dsge_learning) {
            if let Ok(l) =
                grammar::mutate_genotype(self.grammar, &g.learning, genome::LEARNING_NONTERMINAL, mu, sigma, rng)
            {
                g.learning = l;
            }
        }
        if !validate(&g).is_empty() {
            // every operator above preserves validity; keep the parent otherwise
            debug_assert!(false, "mutation produced {:?}", validate(&g));
            return parent.clone();
        }
        g
    }

    fn evaluate_batch(&self, ev: &dyn Evaluator, genomes: Vec<Genome>, seeds: &[u64], regime: Regime) -> Vec<Individual> {
        let jobs: Vec<EvalJob> =
            genomes.into_iter().zip(seeds).map(|(genome, &seed)| EvalJob { genome, seed, regime }).collect();
        let outcomes = ev.evaluate(&jobs);
        jobs.into_iter()
            .zip(outcomes)
            .map(|(j, o)| Individual {
                plan_hash: self.plan_hash(&j.genome),
                evaluated_budget: j.genome.budget,
                genome: j.genome,
                fitness: o.fitness,
                eval_seed: j.seed,
            })
            .collect()
    }

    /// Runs one generation and appends to the log.
    pub fn step(&self, st: &mut RunState, ev: &dyn Evaluator) -> Result<(), EvolutionError> {
        let gen = st.generation;
        let lambda = self.config.lambda;
        let regime = st.warmup.regime();
        let seeds: Vec<u64> = (0..lambda).map(|i| evaluation_seed(self.config.seed, gen, i + 1)).collect();

        let (offspring, cached) = match &st.parent {
            None => {
                let genomes = self.initial_genomes(&mut st.rng)?;
                (self.evaluate_batch(ev, genomes, &seeds, regime), alloc::vec![false; lambda])
            }
            Some(parent) => {
                let genomes: Vec<Genome> = (0..lambda).map(|_| self.mutate(&parent.genome, &mut st.rng)).collect();
                let mut slots: Vec<Option<Individual>> = alloc::vec![None; lambda];
                let mut todo = Vec::new();
                let mut todo_seeds = Vec::new();
                let mut todo_at = Vec::new();
                for (i, g) in genomes.into_iter().enumerate() {
                    let hash = self.plan_hash(&g);
                    let same = hash.is_some()
                        && hash == parent.plan_hash
                        && g.learning == parent.genome.learning
                        && g.budget == parent.evaluated_budget
                        && parent.fitness.regime == regime;
                    if same {
                        slots[i] = Some(Individual { genome: g, plan_hash: hash, ..parent.clone() });
                    } else {
                        todo.push(g);
                        todo_seeds.push(seeds[i]);
                        todo_at.push(i);
                    }
                }
                let cached = slots.iter().map(Option::is_some).collect();
                for (i, ind) in todo_at.into_iter().zip(self.evaluate_batch(ev, todo, &todo_seeds, regime)) {
                    slots[i] = Some(ind);
                }
                (slots.into_iter().map(|s| s.expect("filled")).collect(), cached)
            }
        };

        for (i, (o, &c)) in offspring.iter().zip(&cached).enumerate() {
            st.log.rows.push(LogRow {
                generation: gen,
                individual: i + 1,
                c: o.fitness.c,
                a: o.fitness.a,
                f: o.fitness.f,
                regime: o.fitness.regime,
                ill_fitted: o.fitness.ill_fitted,
                budget: o.evaluated_budget,
                cached: c,
            });
        }

        let mut scores: Vec<f64> = offspring.iter().map(|o| o.fitness.f).collect();
        if let Some(p) = &st.parent {
            scores.push(p.fitness.f);
        }
        let mean_f = scores.iter().sum::<f64>() / scores.len() as f64;

        let next = self.select(st.parent.take(), offspring, gen, ev, regime, &mut st.log.retrains);
        let flipped = st.warmup.update(&scores);
        st.log.summaries.push(GenerationSummary {
            generation: gen,
            regime,
            best_f: next.fitness.f,
            best_c: next.fitness.c,
            best_a: next.fitness.a,
            mean_f,
            parent_budget: next.evaluated_budget,
            flipped,
        });
        let next = if flipped && self.config.rescore_parent_on_flip {
            let job = EvalJob { genome: next.genome.clone(), seed: next.eval_seed, regime: Regime::Fbeta };
            let out = ev.evaluate(core::slice::from_ref(&job)).pop().expect("one outcome");
            st.log.retrains.push(RetrainRow {
                generation: gen,
                individual: 0,
                reason: RetrainReason::RegimeFlip,
                from_budget: next.evaluated_budget,
                to_budget: next.evaluated_budget,
                f_before: next.fitness.f,
                f_after: out.fitness.f,
                accepted: true,
            });
            Individual { fitness: out.fitness, ..next }
        } else {
            next
        };
        st.parent = Some(next);
        st.generation += 1;
        Ok(())
    }

    /// Best of incumbent and offspring; ties keep the incumbent, then the
    /// lowest offspring index. A winning challenger trained on a smaller
    /// budget is retrained at the incumbent's budget and must win again.
    fn select(
        &self,
        parent: Option<Individual>,
        offspring: Vec<Individual>,
        gen: usize,
        ev: &dyn Evaluator,
        regime: Regime,
        retrains: &mut Vec<RetrainRow>,
    ) -> Individual {
        let mut best: Option<usize> = None;
        for (i, o) in offspring.iter().enumerate() {
            if best.is_none_or(|b| o.fitness.f > offspring[b].fitness.f) {
                best = Some(i);
            }
        }
        let b = best.expect("lambda > 0");
        let Some(parent) = parent else {
            return offspring.into_iter().nth(b).expect("index in range");
        };
        let challenger = &offspring[b];
        if challenger.fitness.f <= parent.fitness.f {
            return parent;
        }
        if !self.config.fair_comparison || challenger.evaluated_budget >= parent.evaluated_budget {
            return offspring.into_iter().nth(b).expect("index in range");
        }
        let mut genome = challenger.genome.clone();
        genome.budget = parent.evaluated_budget;
        let job = EvalJob { genome, seed: challenger.eval_seed, regime };
        let out = ev.evaluate(core::slice::from_ref(&job)).pop().expect("one outcome");
        let accepted = out.fitness.f > parent.fitness.f;
        retrains.push(RetrainRow {
            generation: gen,
            individual: b + 1,
            reason: RetrainReason::FairComparison,
            from_budget: challenger.evaluated_budget,
            to_budget: job.genome.budget,
            f_before: challenger.fitness.f,
            f_after: out.fitness.f,
            accepted,
        });
        if accepted {
            Individual {
                plan_hash: challenger.plan_hash.clone(),
                evaluated_budget: job.genome.budget,
                genome: job.genome,
                fitness: out.fitness,
                eval_seed: job.seed,
            }
        } else {
            parent
        }
    }

    /// Runs to the configured generation count, calling `after_generation`
    /// (e.g. to checkpoint) after every generation.
    pub fn run(
        &self,
        st: &mut RunState,
        ev: &dyn Evaluator,
        after_generation: &mut dyn FnMut(&RunState),
    ) -> Result<(), EvolutionError> {
        if st.config != self.config {
            return Err(EvolutionError::ConfigMismatch);
        }
        while !st.finished() {
            self.step(st, ev)?;
            after_generation(st);
        }
        Ok(())
    }
}

/// Applies a structural change, then wires any dead ends it left; reverts
/// the change when they cannot be wired.
fn structural<R: Rng + ?Sized>(g: &mut Genome, rng: &mut R, op: impl FnOnce(&mut Genome, &mut R)) {
    let before = g.clone();
    op(g, rng);
    if repair_in_place(g, rng).is_err() || !validate(g).is_empty() {
        *g = before;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::neronet_modules;
    use crate::grammar::parse_grammar;
    use core::cell::RefCell;

    fn evo(grammar: &Grammar, cfg: EvolutionConfig) -> Evolution<'_> {
        Evolution {
            config: cfg,
            grammar,
            specs: neronet_modules(),
            seed_options: SeedOptions::desk(),
            input_shape: [8, 8, 3],
            n_classes: 3,
        }
    }

    fn desk_cfg() -> EvolutionConfig {
        EvolutionConfig {
            generations: 6,
            budget: BudgetConfig { default: 300, max: 900, increment: 300 },
            seed: 11,
            ..EvolutionConfig::default()
        }
    }

    /// Scores a genome by a hash of its structure; records every job.
    struct Scripted {
        jobs: RefCell<Vec<(u64, Regime, u64)>>,
    }

    impl Evaluator for Scripted {
        fn evaluate(&self, jobs: &[EvalJob]) -> Vec<EvalOutcome> {
            jobs.iter()
                .map(|j| {
                    self.jobs.borrow_mut().push((j.seed, j.regime, j.genome.budget));
                    let units = j.genome.units.len() as f64;
                    let c = 0.5 + 0.4 * (1.0 - 1.0 / units) + j.genome.budget as f64 * 1e-5;
                    let (a, f) = match j.regime {
                        Regime::Warmup => (None, c),
                        Regime::Fbeta => (Some(0.1), crate::fitness::f_beta(c, 0.1, 4.0)),
                    };
                    EvalOutcome {
                        fitness: FitnessReport { c, a, f, n: 10, n_correct: 9, ill_fitted: None, regime: j.regime },
                        train: None,
                    }
                })
                .collect()
        }
    }

    #[test]
    fn training_time_gene() {
        let g = parse_grammar(crate::DESK_GRAMMAR).unwrap();
        let mut cfg = desk_cfg();
        cfg.rates = MutationRates {
            add_layer: 0.0,
            replicate_layer: 0.0,
            remove_layer: 0.0,
            add_connection: 0.0,
            remove_connection: 0.0,
            dsge_layer: 0.0,
            dsge_learning: 0.0,
            train_time: 1.0,
        };
        let e = evo(&g, cfg);
        let mut rng = crate::Rng::seed_from_u64(0);
        let mut parent = genome::seed_genome(&g, &e.specs, e.config.budget.range(), SeedOptions::desk()).unwrap();
        let child = e.mutate(&parent, &mut rng);
        assert_eq!(child.budget, 600);
        assert_eq!(child.units, parent.units);
        parent.budget = 900;
        let child = e.mutate(&parent, &mut rng);
        assert_eq!(child.budget, 300);
    }

    #[test]
    fn mutations_stay_valid() {
        let g = parse_grammar(crate::DESK_GRAMMAR).unwrap();
        let e = evo(&g, desk_cfg());
        let mut rng = crate::Rng::seed_from_u64(5);
        let mut cur = genome::random_genome(&e.specs, &g, e.config.budget.range(), &mut rng).unwrap();
        for k in 0..500 {
            cur = e.mutate(&cur, &mut rng);
            assert!(validate(&cur).is_empty(), "step {k}: {:?}", validate(&cur));
            assert!((300..=900).contains(&cur.budget));
        }
    }

    #[test]
    fn initial_population_arity_and_determinism() {
        let g = parse_grammar(crate::DESK_GRAMMAR).unwrap();
        let e = evo(&g, desk_cfg());
        let a = e.initial_genomes(&mut crate::Rng::seed_from_u64(1)).unwrap();
        let b = e.initial_genomes(&mut crate::Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        let seed = genome::seed_genome(&g, &e.specs, e.config.budget.range(), SeedOptions::desk()).unwrap();
        assert_eq!(a[0].units, seed.units);
        let r = evo(&g, EvolutionConfig { seed_mode: SeedMode::Random, ..desk_cfg() });
        for gnm in r.initial_genomes(&mut crate::Rng::seed_from_u64(2)).unwrap() {
            assert!(validate(&gnm).is_empty());
        }
    }

    #[test]
    fn run_is_elitist_and_resumable() {
        let g = parse_grammar(crate::DESK_GRAMMAR).unwrap();
        let mut cfg = desk_cfg();
        cfg.tau = 0.85;
        let e = evo(&g, cfg);
        let ev = Scripted { jobs: RefCell::new(Vec::new()) };
        let mut st = e.new_state().unwrap();
        let mut mid = None;
        e.run(&mut st, &ev, &mut |s| {
            if s.generation == 3 {
                mid = Some(s.clone())
            }
        })
        .unwrap();
        assert_eq!(st.log.rows.len(), 4 * 6);
        for w in st.log.summaries.windows(2) {
            if w[0].regime == w[1].regime && !w[0].flipped {
                assert!(w[1].best_f >= w[0].best_f);
            }
        }
        let mut resumed = e.resume(mid.unwrap()).unwrap();
        e.run(&mut resumed, &Scripted { jobs: RefCell::new(Vec::new()) }, &mut |_| {}).unwrap();
        assert_eq!(resumed, st);

        let other = evo(&g, EvolutionConfig { lambda: 3, ..e.config.clone() });
        assert_eq!(other.resume(st.clone()), Err(EvolutionError::ConfigMismatch));
    }

    #[test]
    fn fair_comparison_retrains_at_incumbent_budget() {
        let g = parse_grammar(crate::DESK_GRAMMAR).unwrap();
        let e = evo(&g, desk_cfg());
        let ev = Scripted { jobs: RefCell::new(Vec::new()) };
        let mut rng = crate::Rng::seed_from_u64(0);
        let mk = |units: usize, budget: u64, f: f64, rng: &mut crate::Rng| {
            let mut gn = genome::random_genome(&e.specs, &g, e.config.budget.range(), rng).unwrap();
            gn.units.truncate(units);
            gn.budget = budget;
            Individual {
                genome: gn,
                plan_hash: None,
                fitness: FitnessReport { c: f, a: None, f, n: 1, n_correct: 1, ill_fitted: None, regime: Regime::Warmup },
                evaluated_budget: budget,
                eval_seed: 9,
            }
        };
        let parent = mk(3, 600, 0.5, &mut rng);
        let kids = alloc::vec![mk(3, 300, 0.4, &mut rng), mk(4, 300, 0.9, &mut rng)];
        let mut log = Vec::new();
        let won = e.select(Some(parent.clone()), kids.clone(), 1, &ev, Regime::Warmup, &mut log);
        assert_eq!(log.len(), 1);
        assert_eq!((log[0].individual, log[0].from_budget, log[0].to_budget), (2, 300, 600));
        assert_eq!(won.evaluated_budget, 600);
        assert_eq!(ev.jobs.borrow()[0], (9, Regime::Warmup, 600));
        // exact tie keeps the incumbent
        let tie = alloc::vec![mk(3, 600, 0.5, &mut rng)];
        assert_eq!(e.select(Some(parent.clone()), tie, 1, &ev, Regime::Warmup, &mut log), parent);
    }

    #[test]
    fn seeds_differ_per_slot() {
        let a = evaluation_seed(1, 2, 3);
        assert_ne!(a, evaluation_seed(1, 3, 2));
        assert_ne!(a, evaluation_seed(2, 2, 3));
        assert_eq!(a, evaluation_seed(1, 2, 3));
    }
}
