//! `rcl` — experiment runner CLI.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rcl_core::data::write_dataset;
use rcl_core::harness::{
    compare_embeddings, evaluate, export_embeddings, make_splits, run_ablation, run_single,
    Combination, ExperimentConfig, CHECKPOINT_FILE, CONFIG_FILE,
};
use rcl_core::model::{load_checkpoint, ModelParams};
use rcl_core::Result;

#[derive(Parser)]
#[command(name = "rcl", version, about = "Rebalanced contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Literal 1/|B_y| normalizer and compression of under-threshold classes.
    #[arg(long)]
    strict_paper: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.experiment.strict_paper |= self.strict_paper;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits for one seed as dataset files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train and evaluate one seed of every configured combination (or just `--combination`).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        combination: Option<Combination>,
        /// Root directory for run artifacts; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Re-evaluate a finished run from its config snapshot and checkpoint.
    Eval {
        /// Run directory.
        run: PathBuf,
    },
    /// Run the combination x seed grid and write the ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        overwrite: bool,
    },
    /// CHI/DBI of two runs' embedding dumps and their differences (b - a).
    Compare { run_a: PathBuf, run_b: PathBuf },
    /// Dump contrastive embeddings of a run's model on one split.
    ExportEmbeddings {
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_run(run: &Path) -> Result<(ExperimentConfig, Combination, u64, ModelParams)> {
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
    let combo = cfg.experiment.combinations[0];
    let seed = cfg.experiment.first_seed;
    let ckpt = load_checkpoint(&run.join(CHECKPOINT_FILE))?;
    let mut params = ModelParams::init(ckpt.shape, 0)?;
    params.set_flat(&ckpt.params)?;
    Ok((cfg, combo, seed, params))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            seed,
            out,
            overwrite,
        } => {
            let cfg = common.load()?;
            rcl_core::harness::prepare_dir(&out, overwrite)?;
            let s = make_splits(&cfg, seed)?;
            write_dataset(&s.train, &out.join("train.txt"))?;
            write_dataset(&s.val, &out.join("val.txt"))?;
            write_dataset(&s.test, &out.join("test.txt"))?;
            println!("class counts: {:?}", s.train.class_counts());
        }
        Command::Train {
            common,
            seed,
            combination,
            out,
            overwrite,
        } => {
            let cfg = common.load()?;
            let seed = seed.unwrap_or(cfg.experiment.first_seed);
            let root = out.unwrap_or_else(|| cfg.experiment.out_dir.clone());
            let combos = combination.map_or_else(|| cfg.experiment.combinations.clone(), |c| vec![c]);
            for combo in combos {
                let r = run_single(&cfg, combo, seed, &root, overwrite)?;
                println!(
                    "{combo} seed {seed}: arithmetic {:.4} harmonic {:.4} ({:.1}s) -> {}",
                    r.metrics.arithmetic_mean,
                    r.metrics.harmonic_mean,
                    r.seconds,
                    r.dir.display()
                );
            }
        }
        Command::Eval { run } => {
            let (cfg, _, seed, params) = load_run(&run)?;
            let (report, _) = evaluate(&params, &make_splits(&cfg, seed)?.test)?;
            print!("{}", report.to_text());
        }
        Command::Ablate {
            common,
            out,
            threads,
            overwrite,
        } => {
            let cfg = common.load()?;
            let root = out.unwrap_or_else(|| cfg.experiment.out_dir.clone());
            let report = run_ablation(&cfg, &root, threads, overwrite)?;
            print!("{}", report.table_text());
            for c in report.cells.iter().filter(|c| c.outcome.is_err()) {
                eprintln!(
                    "{} seed {} failed: {}",
                    c.combination,
                    c.seed,
                    c.outcome.as_ref().unwrap_err()
                );
            }
        }
        Command::Compare { run_a, run_b } => {
            print!("{}", compare_embeddings(&run_a, &run_b)?.to_text());
        }
        Command::ExportEmbeddings { run, split, out } => {
            let (cfg, _, seed, params) = load_run(&run)?;
            let s = make_splits(&cfg, seed)?;
            let data = match split {
                Split::Train => &s.train,
                Split::Val => &s.val,
                Split::Test => &s.test,
            };
            export_embeddings(&params, data, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
