//! Wall-clock training budgets.

use std::time::{Duration, Instant};

use evonet_core::engine::Budget;

/// Allows updates until a deadline passes.
#[derive(Debug, Clone, Copy)]
pub struct WallClockBudget {
    deadline: Instant,
}

impl WallClockBudget {
    pub fn new(limit: Duration) -> Self {
        WallClockBudget { deadline: Instant::now() + limit }
    }

    /// Converts a step budget at `seconds_per_default` seconds per
    /// `default_steps` steps, so larger budgets keep their ratio.
    pub fn scaled(steps: u64, default_steps: u64, seconds_per_default: f64) -> Self {
        let secs = seconds_per_default * steps as f64 / default_steps.max(1) as f64;
        Self::new(Duration::from_secs_f64(secs.max(0.0)))
    }
}

impl Budget for WallClockBudget {
    fn allows_step(&mut self, _steps_done: u64) -> bool {
        Instant::now() < self.deadline
    }
}
