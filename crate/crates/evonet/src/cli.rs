//! Argument parsing and dispatch. Usage errors exit with 2, runtime
//! failures with 1.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evonet_core::attacks::ThreatModel;

use crate::checkpoint::Checkpoint;
use crate::commands::{self, AttackName, AttackOptions, Preset, TrainMode, TrainOptions};
use crate::config::{parse_fraction, DataConfig, NormName, RunConfig};
use crate::error::{format_err, Result};
use crate::genome_io::{GenomeDocument, GrammarName};
use crate::plot;
use crate::run::{evolve, EvolveOptions};
use crate::runlog;

#[derive(Debug, Parser)]
#[command(name = "evonet", version, about = "Evolve, train and attack convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run or resume an evolutionary search
    Evolve(EvolveArgs),
    /// Train a genome from scratch and save a checkpoint
    Train(TrainArgs),
    /// Test-set accuracy of a checkpoint
    Eval(EvalArgs),
    /// Attack a checkpoint on the test set
    Attack(AttackArgs),
    /// Per-generation series of a run as CSV or SVG
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    /// TOML run configuration; defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `evolution.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run stored in `--out`
    #[arg(long)]
    pub resume: bool,
    /// Offspring trained in parallel
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataName {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset; defaults to the one the genome's grammar is sized for
    #[arg(long)]
    pub data: Option<DataName>,
    /// CIFAR-10 directory (else `CIFAR10_DIR`)
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Take the data table from this run configuration instead
    #[arg(long, conflicts_with = "data")]
    pub config: Option<PathBuf>,
}

impl DataArgs {
    fn resolve(&self, grammar: GrammarName) -> Result<DataConfig> {
        let mut d = match (&self.config, self.data) {
            (Some(path), _) => RunConfig::read(path)?.data,
            (None, Some(DataName::Synthetic)) => DataConfig::desk(),
            (None, Some(DataName::Cifar10)) => DataConfig::default(),
            (None, None) => match grammar {
                GrammarName::Desk => DataConfig::desk(),
                GrammarName::Neronet => DataConfig::default(),
            },
        };
        if self.data_dir.is_some() {
            d.dir.clone_from(&self.data_dir);
        }
        Ok(d)
    }
}

fn fraction(s: &str) -> std::result::Result<f64, String> {
    parse_fraction(s).filter(|v| *v >= 0.0).ok_or_else(|| format!("`{s}` is not a non-negative number or fraction"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub genome: PathBuf,
    /// Defaults to adversarial with `--preset adv-200`, else standard
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Cap on parameter updates
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Overrides the epoch count of the preset or learning unit
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Radius of the training adversary
    #[arg(long, default_value = "8/255", value_parser = fraction)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// CIFAR-10 directory, if it moved since training
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One or more attacks, comma-separated or repeated
    #[arg(long, required = true, value_delimiter = ',')]
    pub attack: Vec<AttackName>,
    #[arg(long, default_value = "linf")]
    pub norm: NormName,
    #[arg(long, default_value = "8/255", value_parser = fraction)]
    pub eps: f64,
    /// Iterations of PGD, APGD and the ensemble
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Per-sample CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attack only the first N test images
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory, `runlog.csv` or `summary.csv`
    #[arg(long)]
    pub runlog: PathBuf,
    /// Output path ending in `.svg` or `.csv`
    #[arg(long)]
    pub out: PathBuf,
}

impl ValueEnum for NormName {
    fn value_variants<'a>() -> &'a [Self] {
        &[NormName::Linf, NormName::L2]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            NormName::Linf => "linf",
            NormName::L2 => "l2",
        }))
    }
}

fn load_checkpoint(path: &std::path::Path, data_dir: &Option<PathBuf>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::read(path)?;
    if data_dir.is_some() {
        ck.data.dir.clone_from(data_dir);
    }
    Ok(ck)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let print = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| format_err(e.to_string()));
    match cmd {
        Command::Evolve(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::read(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.evolution.seed = s;
            }
            let opts = EvolveOptions { resume: a.resume, jobs: a.jobs as usize, stop_after: None };
            let st = evolve(&cfg, &a.out, opts, &mut |st| {
                if let Some(s) = st.log.summaries.last() {
                    let _ = writeln!(
                        out,
                        "generation {:>3} [{}] best F {:.4} C {:.4} mean F {:.4}",
                        s.generation, s.regime, s.best_f, s.best_c, s.mean_f
                    );
                    let _ = out.flush();
                }
            })?;
            print(out, &format!("finished {} generations in {}\n", st.generation, a.out.display()))
        }
        Command::Train(a) => {
            let doc = GenomeDocument::read(&a.genome)?;
            let data = a.data.resolve(doc.grammar)?;
            let mode = a.mode.or(a.preset.map(Preset::default_mode)).unwrap_or(TrainMode::Standard);
            let opts = TrainOptions { mode, preset: a.preset, budget: a.budget, epochs: a.epochs, epsilon: a.eps, seed: a.seed };
            let r = commands::train_genome(&doc, &data, &opts)?;
            r.checkpoint.write(&a.out)?;
            let rep = &r.checkpoint.report;
            print(out, &format!("trained {} steps over {} epochs ({:?})\n", rep.steps, rep.epochs_run, rep.stop_reason))?;
            print(out, &commands::eval_text(&r.test))
        }
        Command::Eval(a) => {
            let ck = load_checkpoint(&a.ckpt, &a.data_dir)?;
            let test = ck.data.load()?.test;
            print(out, &commands::eval_text(&evonet_core::engine::evaluate(&ck.net, &test, 256)))
        }
        Command::Attack(a) => {
            let ck = load_checkpoint(&a.ckpt, &a.data_dir)?;
            let test = ck.data.load()?.test;
            let opts = AttackOptions {
                attacks: a.attack,
                threat: ThreatModel { norm: a.norm.norm(), epsilon: a.eps },
                steps: a.steps,
                limit: a.limit,
                batch_size: a.batch_size,
                seed: a.seed,
            };
            let report = commands::attack_dataset(&ck.net, &test, &opts);
            if let Some(p) = &a.out {
                commands::write_bytes(p, &report.csv()?)?;
            }
            print(out, &report.text())
        }
        Command::Plot(a) => {
            let rows = runlog::read_summary(&a.runlog)?;
            let bytes = match a.out.extension().and_then(|e| e.to_str()) {
                Some("svg") => plot::svg(&rows).into_bytes(),
                Some("csv") => plot::series_csv(&rows)?,
                _ => return Err(format_err("--out must end in .svg or .csv")),
            };
            commands::write_bytes(&a.out, &bytes)?;
            print(out, &format!("{} generations written to {}\n", rows.len(), a.out.display()))
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

