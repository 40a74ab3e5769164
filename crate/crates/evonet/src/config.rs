//! Run configuration: a TOML document whose tables mirror the evolution,
//! data, fitness, training and budget settings. Every key is optional and
//! unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use evonet_core::attacks::{Norm, PgdConfig, ThreatModel};
use evonet_core::data::{split, synth_dataset, Dataset, SplitSpec};
use evonet_core::engine::{Shape, TrainConfig};
use evonet_core::evolution::EvolutionConfig;
use evonet_core::fitness::{FitnessAttack, FitnessConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::cifar;
use crate::error::{format_err, IoContext, Result};
use crate::genome_io::GrammarName;

/// Parses `"8/255"`, `"0.03"` or `"3e-2"`.
pub fn parse_fraction(s: &str) -> Option<f64> {
    let v = match s.split_once('/') {
        Some((n, d)) => n.trim().parse::<f64>().ok()? / d.trim().parse::<f64>().ok()?,
        None => s.trim().parse().ok()?,
    };
    v.is_finite().then_some(v)
}

/// A perturbation radius written either as a number or as a fraction string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let v = match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Text(t) => parse_fraction(&t).ok_or_else(|| serde::de::Error::custom(format!("bad epsilon `{t}`")))?,
        };
        if v < 0.0 {
            return Err(serde::de::Error::custom("epsilon must be non-negative"));
        }
        Ok(Epsilon(v))
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 directory; falls back to `CIFAR10_DIR`.
    pub dir: Option<PathBuf>,
    /// Synthetic data only.
    pub classes: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub synth_seed: u64,
    /// Evolutionary training / control / fitness split of the training set.
    pub evo_train: usize,
    pub control: usize,
    pub fitness: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SplitSpec::cifar10(0);
        DataConfig {
            source: DataSource::Cifar10,
            dir: None,
            classes: 3,
            size: 8,
            train_per_class: 200,
            test_per_class: 100,
            synth_seed: 0,
            evo_train: s.evo_train,
            control: s.control,
            fitness: s.fitness,
            split_seed: s.seed,
        }
    }
}

/// Training and test sets.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    /// Small synthetic problem for CPU-only runs.
    pub fn desk() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            classes: 3,
            size: 8,
            train_per_class: 200,
            test_per_class: 100,
            evo_train: 360,
            control: 120,
            fitness: 120,
            ..DataConfig::default()
        }
    }

    pub fn input_shape(&self) -> Shape {
        match self.source {
            DataSource::Cifar10 => [cifar::SIDE, cifar::SIDE, 3],
            DataSource::Synthetic => [self.size, self.size, 3],
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.source {
            DataSource::Cifar10 => cifar::CLASSES,
            DataSource::Synthetic => self.classes,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { evo_train: self.evo_train, control: self.control, fitness: self.fitness, seed: self.split_seed }
    }

    pub fn load(&self) -> Result<LoadedData> {
        match self.source {
            DataSource::Cifar10 => {
                let dir = self
                    .dir
                    .clone()
                    .or_else(cifar::dir_from_env)
                    .ok_or_else(|| format_err(format!("no CIFAR-10 directory: set data.dir or {}", cifar::ENV_DIR)))?;
                let (train, test) = cifar::load_cifar10(&dir)?;
                Ok(LoadedData { train, test })
            }
            DataSource::Synthetic => {
                let train = synth_dataset(self.train_per_class, self.classes, self.size, self.synth_seed)?;
                // the test set comes from an independent stream
                let test = synth_dataset(self.test_per_class, self.classes, self.size, self.synth_seed ^ 0x7e57)?;
                Ok(LoadedData { train, test })
            }
        }
    }

    /// Evolutionary training, control and fitness sets.
    pub fn evolution_sets(&self, train: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        Ok(split(train, &self.split_spec())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormName {
    Linf,
    L2,
}

impl NormName {
    pub fn norm(self) -> Norm {
        match self {
            NormName::Linf => Norm::Linf,
            NormName::L2 => Norm::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitnessAttackName {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessSection {
    pub attack: FitnessAttackName,
    pub norm: NormName,
    pub epsilon: Epsilon,
    /// PGD only; the step is a quarter of epsilon.
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for FitnessSection {
    fn default() -> Self {
        FitnessSection {
            attack: FitnessAttackName::Fgsm,
            norm: NormName::Linf,
            epsilon: Epsilon(8.0 / 255.0),
            steps: 7,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub l2: f64,
    pub grad_clip: Option<f64>,
    pub augment: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection { l2: 0.0, grad_clip: None, augment: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Budgets count parameter updates; runs are reproducible.
    Steps,
    /// Budgets are converted to wall-clock time; runs are not reproducible.
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub mode: BudgetMode,
    /// Wall-clock seconds granted to the default step budget.
    pub seconds_per_default: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection { mode: BudgetMode::Steps, seconds_per_default: 600.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grammar: GrammarName,
    pub evolution: EvolutionConfig,
    pub data: DataConfig,
    pub fitness: FitnessSection,
    pub training: TrainingSection,
    pub budget: BudgetSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    /// SHA-256 of the canonical serialization; a resumed run must match it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn threat(&self) -> ThreatModel {
        ThreatModel { norm: self.fitness.norm.norm(), epsilon: self.fitness.epsilon.0 }
    }

    pub fn fitness_config(&self) -> FitnessConfig {
        let threat = self.threat();
        let attack = match self.fitness.attack {
            FitnessAttackName::Fgsm => FitnessAttack::Fgsm,
            FitnessAttackName::Pgd => FitnessAttack::Pgd(PgdConfig::standard(self.fitness.steps, threat.epsilon)),
        };
        FitnessConfig { beta: self.evolution.beta, threat, attack, batch_size: self.fitness.batch_size, seed: 0 }
    }

    /// Training settings the learning unit does not carry.
    pub fn train_template(&self) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs_cap: usize::MAX,
            patience: None,
            l2: self.training.l2,
            grad_clip: self.training.grad_clip,
            augment: self.training.augment,
            seed: 0,
        }
    }
}
