//! The work behind each subcommand, independent of argument parsing.

use std::fmt::Write as _;
use std::path::Path;

use evonet_core::attacks::{
    aa_lite, apgd, fgm, fgsm, pgd, AaConfig, ApgdConfig, AttackLoss, NetworkModel, PgdConfig, ThreatModel,
};
use evonet_core::data::{split, Dataset, SplitSpec};
use evonet_core::engine::{
    evaluate, train, AdvTraining, Evaluation, LrSchedule, Network, Optimizer, OptimizerConfig, OptimizerKind,
    StepBudget, TrainConfig,
};
use evonet_core::netbuilder::NetworkPlan;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::DataConfig;
use crate::error::{format_err, Result};
use crate::genome_io::{write_atomic, GenomeDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Standard,
    Adversarial,
}

/// Fixed final-training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// SGD with momentum 0.9 for 350 epochs, batch 128, lr 0.025 with
    /// cosine decay to zero, L2 3e-4, clipping at 5.0.
    #[value(name = "std-350")]
    Std350,
    /// SGD with momentum 0.9 for 200 epochs, batch 64, lr 0.1 divided by
    /// 10 at epochs 100 and 150, L2 1e-4, clipping at 5.0.
    #[value(name = "adv-200")]
    Adv200,
}

impl Preset {
    pub fn default_mode(self) -> TrainMode {
        match self {
            Preset::Std350 => TrainMode::Standard,
            Preset::Adv200 => TrainMode::Adversarial,
        }
    }

    fn epochs(self) -> usize {
        match self {
            Preset::Std350 => 350,
            Preset::Adv200 => 200,
        }
    }

    /// Optimizer and training settings; `epochs` overrides the recipe's
    /// length (the step schedule scales with it).
    fn settings(self, epochs: usize, batches_per_epoch: usize) -> (OptimizerConfig, TrainConfig) {
        let sgd = OptimizerKind::GradientDescent { momentum: 0.9, nesterov: false };
        let (lr, batch, l2, schedule) = match self {
            Preset::Std350 => {
                (0.025, 128, 3e-4, LrSchedule::Cosine { total_steps: (epochs * batches_per_epoch) as u64 })
            }
            Preset::Adv200 => {
                let at = |e: usize| e * epochs / 200;
                (0.1, 64, 1e-4, LrSchedule::Step { factor: 0.1, epochs: vec![at(100), at(150)] })
            }
        };
        let tc = TrainConfig {
            batch_size: batch,
            epochs_cap: epochs,
            patience: None,
            l2,
            grad_clip: Some(5.0),
            augment: true,
            seed: 0,
        };
        (OptimizerConfig { kind: sgd, lr, schedule }, tc)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub preset: Option<Preset>,
    /// Step cap; defaults to the genome's budget without a preset and to
    /// no cap with one.
    pub budget: Option<u64>,
    pub epochs: Option<usize>,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub test: Evaluation,
}

/// Held-out control set for early stopping plus the remaining training data.
fn train_control(train_set: &Dataset, control: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let control = control.min(train_set.len() / 5);
    let spec = SplitSpec { evo_train: train_set.len() - control, control, fitness: 0, seed };
    let (a, b, _) = split(train_set, &spec)?;
    Ok((a, b))
}

/// Trains a genome from scratch and evaluates it on the test set.
pub fn train_genome(doc: &GenomeDocument, data: &DataConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let grammar = doc.grammar.grammar()?;
    let plan = NetworkPlan::from_genome(&grammar, &doc.genome, data.input_shape(), data.n_classes())?;
    let loaded = data.load()?;
    let (train_set, control) = train_control(&loaded.train, data.control, data.split_seed)?;
    let mut rng = evonet_core::Rng::seed_from_u64(opts.seed);
    let mut net: Network<f32> = plan.build(&mut rng)?;

    let (oc, mut tc) = match opts.preset {
        Some(p) => {
            let epochs = opts.epochs.unwrap_or(p.epochs());
            let probe = p.settings(epochs, 1).1.batch_size;
            p.settings(epochs, train_set.len().div_ceil(probe))
        }
        None => {
            let oc = OptimizerConfig::from_attributes(&plan.learning)
                .map_err(|e| format_err(format!("learning unit: {e}")))?;
            let mut tc = TrainConfig::from_attributes(&plan.learning)
                .ok_or_else(|| format_err("learning unit lacks a batch size"))?;
            tc.augment = true;
            if let Some(e) = opts.epochs {
                tc.epochs_cap = e;
            }
            (oc, tc)
        }
    };
    tc.seed = opts.seed;
    let cap = opts.budget.or(opts.preset.is_none().then_some(doc.genome.budget));
    let mut budget = StepBudget(cap.unwrap_or(u64::MAX));
    let adv = (opts.mode == TrainMode::Adversarial).then(|| AdvTraining::pgd7(opts.epsilon));
    let mut opt = Optimizer::new(oc, &net);
    let report = train(&mut net, &mut opt, &train_set, &control, &tc, &mut budget, adv.as_ref());
    let test = evaluate(&net, &loaded.test, 256);
    let checkpoint = Checkpoint {
        grammar: doc.grammar,
        genome: doc.genome.clone(),
        plan,
        data: data.clone(),
        net,
        optimizer: opt,
        report,
        adversarial: adv.is_some(),
    };
    Ok(TrainOutcome { checkpoint, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackName {
    Fgsm,
    Fgm,
    Pgd,
    Apgd,
    #[value(name = "aa-lite")]
    AaLite,
}

impl AttackName {
    pub fn label(self) -> &'static str {
        match self {
            AttackName::Fgsm => "fgsm",
            AttackName::Fgm => "fgm",
            AttackName::Pgd => "pgd",
            AttackName::Apgd => "apgd",
            AttackName::AaLite => "aa-lite",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOptions {
    pub attacks: Vec<AttackName>,
    pub threat: ThreatModel,
    pub steps: usize,
    /// Attack only the first `limit` test images.
    pub limit: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-sample attack results over the evaluated images.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub labels: Vec<usize>,
    pub clean_correct: Vec<bool>,
    pub flipped: Vec<(AttackName, Vec<bool>)>,
}

impl AttackReport {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_correct(&self) -> usize {
        self.clean_correct.iter().filter(|&&c| c).count()
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.n_correct() as f64 / self.n().max(1) as f64
    }

    /// Fraction of clean-correct samples the attack leaves correct.
    pub fn adversarial_accuracy(&self, k: usize) -> f64 {
        let flipped = self.flipped[k].1.iter().filter(|&&f| f).count();
        if self.n_correct() == 0 {
            return 0.0;
        }
        (self.n_correct() - flipped) as f64 / self.n_correct() as f64
    }

    /// Correct on the clean image and not flipped by any attack.
    pub fn robust(&self) -> Vec<bool> {
        (0..self.n()).map(|i| self.clean_correct[i] && self.flipped.iter().all(|(_, f)| !f[i])).collect()
    }

    /// Robust samples over all samples, i.e. `C * A` across every attack.
    pub fn overall(&self) -> f64 {
        self.robust().iter().filter(|&&r| r).count() as f64 / self.n().max(1) as f64
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.n());
        let _ = writeln!(s, "clean accuracy C: {:.4}", self.clean_accuracy());
        for (k, (name, _)) in self.flipped.iter().enumerate() {
            let a = self.adversarial_accuracy(k);
            let _ = writeln!(s, "{}: A = {:.4}, post-attack accuracy = {:.4}", name.label(), a, a * self.clean_accuracy());
        }
        let _ = writeln!(s, "overall post-attack accuracy: {:.4}", self.overall());
        s
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["index".to_string(), "label".into(), "clean_correct".into()];
        header.extend(self.flipped.iter().map(|(n, _)| format!("{}_flipped", n.label())));
        header.push("robust".into());
        w.write_record(&header)?;
        let robust = self.robust();
        for i in 0..self.n() {
            let mut rec = vec![i.to_string(), self.labels[i].to_string(), self.clean_correct[i].to_string()];
            rec.extend(self.flipped.iter().map(|(_, f)| f[i].to_string()));
            rec.push(robust[i].to_string());
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| format_err(e.to_string()))
    }
}

/// Runs each attack on the clean-correct images of `ds`.
pub fn attack_dataset(net: &Network<f32>, ds: &Dataset, opts: &AttackOptions) -> AttackReport {
    let model = NetworkModel::inference(net);
    let n = opts.limit.map_or(ds.len(), |l| l.min(ds.len()));
    let rows: Vec<usize> = (0..n).collect();
    let labels = ds.labels_at(&rows);
    let mut clean_correct = Vec::with_capacity(n);
    let mut flipped: Vec<(AttackName, Vec<bool>)> = opts.attacks.iter().map(|&a| (a, Vec::with_capacity(n))).collect();
    let tm = &opts.threat;
    for (bi, chunk) in rows.chunks(opts.batch_size.max(1)).enumerate() {
        let x = ds.images::<f32>(chunk);
        let y = ds.labels_at(chunk);
        let pred = net.predict(&x).argmax_rows();
        let correct: Vec<bool> = pred.iter().zip(&y).map(|(p, t)| p == t).collect();
        for (k, &attack) in opts.attacks.iter().enumerate() {
            let mut rng = evonet_core::Rng::seed_from_u64(opts.seed ^ ((bi as u64) << 16) ^ k as u64);
            let adv = match attack {
                AttackName::Fgsm => fgsm(&model, &x, &y, tm),
                AttackName::Fgm => fgm(&model, &x, &y, tm.epsilon),
                AttackName::Pgd => pgd(&model, &x, &y, tm, &PgdConfig::standard(opts.steps, tm.epsilon), None, &mut rng),
                AttackName::Apgd => {
                    apgd(&model, &x, &y, tm, &ApgdConfig::new(opts.steps, AttackLoss::Ce), None, &mut rng).x_adv
                }
                AttackName::AaLite => {
                    aa_lite(&model, &x, &y, tm, &AaConfig { steps: opts.steps, ..AaConfig::default() }, &mut rng).x_adv
                }
            };
            let adv_pred = net.predict(&adv).argmax_rows();
            for i in 0..chunk.len() {
                flipped[k].1.push(correct[i] && adv_pred[i] != y[i]);
            }
        }
        clean_correct.extend(correct);
    }
    AttackReport { labels, clean_correct, flipped }
}

/// Test-set accuracy and the predicted-class histogram.
pub fn eval_text(ev: &Evaluation) -> String {
    let hist: Vec<String> = ev.histogram.iter().map(|h| h.to_string()).collect();
    format!("accuracy: {:.4} ({} / {})\npredicted-class histogram: {}\n", ev.accuracy, ev.n_correct, ev.correct.len(), hist.join(" "))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
