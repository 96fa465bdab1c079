mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dynvfl::data::{generate_synthetic, kfold_split, write_csv, SyntheticSpec};
use dynvfl::federation::report::{rows_for_run, rows_for_static, ResultRow};
use dynvfl::federation::{run_dynamic, run_static, Scenario, Strategy, StreamMode};
use dynvfl::training::derive_seed;
use dynvfl::Error;

use config::{resolve, DataArgs, Overrides};
use output::RunDir;

/// Two-party vertical federated learning experiments.
#[derive(Debug, Parser)]
#[command(name = "dynvfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// k-fold cross-validation with every row present from the start, plus
    /// the party-A-only and plaintext-concatenation baselines.
    Static {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Party B's data arrives over several timestamps; every strategy
    /// updates the classifier at each one.
    Dynamic {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum, default_value = "random")]
        mode: ModeArg,
        /// Last timestamp; arrivals are numbered 0..=T.
        #[arg(long = "t-max", default_value_t = 5)]
        t_max: usize,
        /// Strategies to compare, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["distill", "retrain", "finetune", "joint"])]
        strategies: Vec<StrategyArg>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Runs a self-check suite; exits nonzero when any check fails.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        /// Trials for the gradient and encryption suites.
        #[arg(long)]
        trials: Option<usize>,
        /// Paillier modulus size in bits.
        #[arg(long, default_value_t = 512)]
        bits: u64,
        /// Batches for the protocol suite.
        #[arg(long, default_value_t = 20)]
        batches: usize,
        /// Batch size and representation width for the parameter-count report.
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 200)]
        rep_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a Gaussian-mixture binary dataset as CSV.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        features: usize,
        #[arg(long, default_value_t = 0.5)]
        pos_fraction: f64,
        #[arg(long, default_value_t = 1.5)]
        separation: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Random,
    AscVsDes,
    Parallel,
    Uniform,
}

impl From<ModeArg> for StreamMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => StreamMode::Random,
            ModeArg::AscVsDes => StreamMode::AscVsDes,
            ModeArg::Parallel => StreamMode::Parallel,
            ModeArg::Uniform => StreamMode::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Distill,
    Retrain,
    Finetune,
    Joint,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Distill => Strategy::Distill,
            StrategyArg::Retrain => Strategy::Retrain,
            StrategyArg::Finetune => Strategy::Finetune,
            StrategyArg::Joint => Strategy::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    He,
    Protocol,
    Claim1,
}

/// Process exit statuses.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const DIVERGENCE: u8 = 5;
    pub const VERIFICATION: u8 = 6;
    pub const PRIVACY: u8 = 7;
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } | Error::InvalidArgument(_) => exit::CONFIG,
        Error::Ingestion { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Split(_)
        | Error::Infeasible(_)
        | Error::Alignment(_) => exit::DATA,
        Error::Divergence { .. } => exit::DIVERGENCE,
        Error::Privacy(_) | Error::Protocol(_) => exit::PRIVACY,
        _ => exit::FAILURE,
    }
}

fn print_table(rows: &[ResultRow]) {
    println!(
        "{:<10} {:>4} {:>3} {:<10} {:>8} {:>8} {:>8}  class ratio",
        "dataset", "fold", "t", "strategy", "macro_p", "macro_r", "macro_f1"
    );
    for r in rows {
        println!(
            "{:<10} {:>4} {:>3} {:<10} {:>8.4} {:>8.4} {:>8.4}  {}",
            r.dataset, r.fold, r.timestamp, r.strategy, r.macro_p, r.macro_r, r.macro_f1, r.class_ratio
        );
    }
}

fn print_summary(rows: &[ResultRow]) {
    println!("\nmacro-F1 by strategy (mean ± std over runs):");
    for (name, mean, std) in dynvfl::federation::report::f1_summary(rows) {
        println!("  {name:<10} {mean:.4} ± {std:.4}");
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Static {
            data,
            overrides,
            folds,
            seeds,
            out_dir,
        } => {
            let base = resolve(data.dataset.into(), &overrides)?;
            let dataset = data.load(base.seed)?;
            let dir = RunDir::create(&out_dir)?;
            dir.write_json("config.json", &base)?;
            let mut rows = Vec::new();
            let mut outcomes = Vec::new();
            for s in 0..seeds {
                let cfg = dynvfl::federation::PipelineConfig {
                    seed: base.seed + s,
                    ..base.clone()
                };
                let split = kfold_split(&dataset.labels, dataset.class_count, folds, derive_seed(cfg.seed, "folds"))?;
                for (k, fold) in split.iter().enumerate() {
                    let scenario = Scenario::static_fold(&dataset, fold, k)?;
                    let out = run_static(&cfg, &scenario)?;
                    let fold_rows = rows_for_static(&out);
                    eprintln!(
                        "seed {} fold {k}: without_b {:.4}  with_b {:.4}  distill {:.4}",
                        cfg.seed, fold_rows[0].macro_f1, fold_rows[1].macro_f1, fold_rows[2].macro_f1
                    );
                    dir.append_messages(&format!("seed{}/fold{k}", cfg.seed), &out.federated.messages)?;
                    rows.extend(fold_rows);
                    outcomes.push(out);
                }
            }
            dir.write_json("report.json", &outcomes)?;
            dir.write_rows("report.csv", &rows)?;
            print_table(&rows);
            print_summary(&rows);
            println!("\nresults written to {}", dir.path().display());
            Ok(0)
        }
        Command::Dynamic {
            data,
            overrides,
            mode,
            t_max,
            strategies,
            seeds,
            out_dir,
        } => {
            let base = resolve(data.dataset.into(), &overrides)?;
            let dataset = data.load(base.seed)?;
            let strategies: Vec<Strategy> = strategies.into_iter().map(Strategy::from).collect();
            let dir = RunDir::create(&out_dir)?;
            dir.write_json("config.json", &base)?;
            let mut rows = Vec::new();
            let mut outcomes = Vec::new();
            for s in 0..seeds {
                let cfg = dynvfl::federation::PipelineConfig {
                    seed: base.seed + s,
                    ..base.clone()
                };
                let scenario = Scenario::dynamic(&dataset, mode.into(), t_max, &cfg)?;
                let out = run_dynamic(&cfg, &scenario, &strategies)?;
                dir.append_messages(&format!("seed{}", cfg.seed), &out.messages)?;
                rows.extend(rows_for_run(&out));
                outcomes.push(out);
            }
            dir.write_json("report.json", &outcomes)?;
            dir.write_rows("report.csv", &rows)?;
            print_table(&rows);
            print_summary(&rows);
            println!("\nresults written to {}", dir.path().display());
            Ok(0)
        }
        Command::Verify {
            suite,
            trials,
            bits,
            batches,
            batch_size,
            rep_dim,
            seed,
        } => {
            let report = match suite {
                SuiteArg::Gradcheck => verify::gradcheck(trials.unwrap_or(100), seed)?,
                SuiteArg::He => verify::he(trials.unwrap_or(1000), bits, seed)?,
                SuiteArg::Protocol => verify::protocol(batches, bits, seed)?,
                SuiteArg::Claim1 => {
                    let (report, counts) = verify::claim1(batch_size, rep_dim, seed)?;
                    println!(
                        "default estimator: K = {}, m*d = {}, underdetermined = {}, nullspace dimension >= {}",
                        counts.equations,
                        counts.unknowns,
                        counts.underdetermined(),
                        counts.lower_bound
                    );
                    report
                }
            };
            for c in &report.checks {
                println!(
                    "{} {:<45} value {:.3e} threshold {:.3e}  ({})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold,
                    c.detail
                );
            }
            Ok(if report.passed() { 0 } else { exit::VERIFICATION })
        }
        Command::GenSynth {
            out,
            samples,
            features,
            pos_fraction,
            separation,
            noise,
            seed,
        } => {
            let d = generate_synthetic(&SyntheticSpec {
                samples,
                features,
                pos_fraction,
                separation,
                noise,
                seed,
                ..SyntheticSpec::default()
            })?;
            write_csv(&d, &out)?;
            println!("wrote {} rows x {} features to {}", d.len(), features, out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let config = Error::Config {
            field: "lambda".into(),
            reason: String::new(),
        };
        let data = Error::Infeasible(String::new()).in_stage("timeline");
        let diverged = Error::Divergence {
            stage: "estimator",
            epoch: 0,
            loss: f64::NAN,
        }
        .in_stage("estimator");
        let codes = [exit_code(&config), exit_code(&data), exit_code(&diverged), exit::VERIFICATION];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, 0);
            for b in &codes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
