//! Shared fixtures: a tiny synthetic run configuration and the desk seed
//! genome.

#![allow(dead_code)]

use std::path::Path;

use evonet::config::RunConfig;
use evonet::genome_io::{GenomeDocument, GrammarName};
use evonet_core::genome::{neronet_modules, seed_genome, BudgetRange};

/// Three generations of two offspring on a few dozen 8x8 images.
pub const TINY_RUN: &str = r#"
grammar = "desk"

[evolution]
lambda = 2
generations = 3
seed = 5

[evolution.budget]
default = 20
max = 60
increment = 20

[data]
source = "synthetic"
classes = 3
size = 8
train_per_class = 30
test_per_class = 10
evo_train = 54
control = 18
fitness = 18

[training]
augment = false

[fitness]
epsilon = 0.1
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_RUN).expect("fixture parses")
}

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_RUN).expect("temp dir is writable");
    p
}

pub fn desk_seed() -> GenomeDocument {
    let name = GrammarName::Desk;
    let g = seed_genome(&name.grammar().unwrap(), &neronet_modules(), BudgetRange { default: 20, max: 60 }, name.seed_options())
        .expect("seed genome builds");
    GenomeDocument::new(name, g)
}
