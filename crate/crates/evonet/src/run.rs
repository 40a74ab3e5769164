//! Evolution runs on disk.
//!
//! A run directory holds:
//!
//! - `config.toml`: the effective configuration
//! - `state.json`: the run state after the last finished generation,
//!   tagged with the configuration hash
//! - `runlog.csv`, `summary.csv`, `retrains.csv`: see [`crate::runlog`]
//! - `best_genome.json`: the current parent
//!
//! Every file is rewritten after each generation, so an interrupted run
//! resumes from its last finished generation.

use std::fs;
use std::path::Path;

use evonet_core::evolution::{Evolution, RunState, TrainingEvaluator};
use evonet_core::genome::neronet_modules;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{format_err, IoContext, Result};
use crate::genome_io::{write_atomic, GenomeDocument};
use crate::parallel::PoolEvaluator;
use crate::runlog;

pub const CONFIG_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.json";
pub const BEST_FILE: &str = "best_genome.json";
pub const STATE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub format: u32,
    pub config_hash: String,
    pub state: RunState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvolveOptions {
    pub resume: bool,
    pub jobs: usize,
    /// Stop after this many generations in total, as if interrupted.
    pub stop_after: Option<usize>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { resume: false, jobs: 1, stop_after: None }
    }
}

pub fn read_state(dir: &Path) -> Result<StateFile> {
    let path = dir.join(STATE_FILE);
    let file: StateFile = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    if file.format != STATE_FORMAT {
        return Err(format_err(format!("unsupported state format {}", file.format)));
    }
    Ok(file)
}

fn save(dir: &Path, cfg: &RunConfig, hash: &str, st: &RunState) -> Result<()> {
    let file = StateFile { format: STATE_FORMAT, config_hash: hash.to_string(), state: st.clone() };
    write_atomic(&dir.join(STATE_FILE), &serde_json::to_vec(&file)?)?;
    runlog::write_all(dir, &st.log)?;
    if let Some(p) = &st.parent {
        GenomeDocument::new(cfg.grammar, p.genome.clone()).write(&dir.join(BEST_FILE))?;
    }
    Ok(())
}

/// Runs (or resumes) an evolution into `out`, checkpointing every
/// generation. `progress` sees the state after each generation.
pub fn evolve(
    cfg: &RunConfig,
    out: &Path,
    opts: EvolveOptions,
    progress: &mut dyn FnMut(&RunState),
) -> Result<RunState> {
    let hash = cfg.hash();
    let grammar = cfg.grammar.grammar()?;
    let evo = Evolution {
        config: cfg.evolution.clone(),
        grammar: &grammar,
        specs: neronet_modules(),
        seed_options: cfg.grammar.seed_options(),
        input_shape: cfg.data.input_shape(),
        n_classes: cfg.data.n_classes(),
    };
    evo.check_config()?;

    let mut st = if opts.resume {
        let file = read_state(out)?;
        if file.config_hash != hash {
            return Err(evonet_core::evolution::EvolutionError::ConfigMismatch.into());
        }
        evo.resume(file.state)?
    } else {
        fs::create_dir_all(out).at(out)?;
        if out.join(STATE_FILE).exists() {
            return Err(format_err(format!("{} already holds a run; pass --resume to continue it", out.display())));
        }
        evo.new_state()?
    };
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;

    let data = cfg.data.load()?;
    let (train, control, fitness_set) = cfg.data.evolution_sets(&data.train)?;
    let inner = TrainingEvaluator {
        grammar: &grammar,
        input_shape: cfg.data.input_shape(),
        n_classes: cfg.data.n_classes(),
        train: &train,
        control: &control,
        fitness_set: &fitness_set,
        fitness: cfg.fitness_config(),
        train_template: cfg.train_template(),
    };
    let ev = PoolEvaluator::new(inner, cfg.budget.clone(), cfg.evolution.budget.default, opts.jobs);

    let limit = opts.stop_after.unwrap_or(usize::MAX);
    while !st.finished() && st.generation < limit {
        evo.step(&mut st, &ev)?;
        save(out, cfg, &hash, &st)?;
        progress(&st);
    }
    Ok(st)
}
