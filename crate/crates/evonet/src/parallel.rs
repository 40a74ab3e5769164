//! Offspring evaluation on a thread pool.
//!
//! Each job trains from its own seed, so results do not depend on the
//! number of threads in step-budget mode. Wall-clock budgets are
//! inherently machine- and load-dependent.

use evonet_core::engine::StepBudget;
use evonet_core::evolution::{EvalJob, EvalOutcome, Evaluator, TrainingEvaluator};
use rayon::prelude::*;

use crate::budget::WallClockBudget;
use crate::config::{BudgetMode, BudgetSection};

pub struct PoolEvaluator<'a> {
    pub inner: TrainingEvaluator<'a>,
    pub budget: BudgetSection,
    /// Step budget that maps to `budget.seconds_per_default`.
    pub default_steps: u64,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> PoolEvaluator<'a> {
    /// `jobs <= 1` evaluates on the calling thread.
    pub fn new(inner: TrainingEvaluator<'a>, budget: BudgetSection, default_steps: u64, jobs: usize) -> Self {
        let pool = (jobs > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool"));
        PoolEvaluator { inner, budget, default_steps, pool }
    }

    fn one(&self, job: &EvalJob) -> EvalOutcome {
        match self.budget.mode {
            BudgetMode::Steps => self.inner.evaluate_with(job, &mut StepBudget(job.genome.budget)),
            BudgetMode::WallClock => {
                let mut b =
                    WallClockBudget::scaled(job.genome.budget, self.default_steps, self.budget.seconds_per_default);
                self.inner.evaluate_with(job, &mut b)
            }
        }
    }
}

impl Evaluator for PoolEvaluator<'_> {
    fn evaluate(&self, jobs: &[EvalJob]) -> Vec<EvalOutcome> {
        match &self.pool {
            Some(pool) => pool.install(|| jobs.par_iter().map(|j| self.one(j)).collect()),
            None => jobs.iter().map(|j| self.one(j)).collect(),
        }
    }
}
