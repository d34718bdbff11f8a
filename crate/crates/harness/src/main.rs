use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use taililc::policies::Source;
use taililc_harness::{verdict, ExperimentConfig, HarnessError, Pipeline, Stage, Student};

#[derive(Parser)]
#[command(name = "taililc", version, about = "TAIL-ILC experiment pipeline")]
struct Cli {
    /// Experiment config (JSON); the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-trajectory work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite outputs that belong to another config or fail checksums.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the trajectory class.
    Gen,
    /// Run the ILC expert on every trajectory.
    Label,
    /// Train one student.
    Train {
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Simulate every trajectory under each feedforward source.
    Eval {
        /// Subset of zero, mass_ff, expert, tail, nn_ilc, tail_mass_ff, nn_ilc_mass_ff.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        sources: Vec<String>,
    },
    /// Run all stages and print the verdicts.
    Repro {
        /// First stage to run; earlier ones must be complete.
        #[arg(long, value_enum, default_value_t = StageArg::Gen)]
        stage: StageArg,
    },
    /// Print the desk config as JSON.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Tail,
    Nnilc,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Gen,
    Label,
    TrainTail,
    TrainNnilc,
    Eval,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    let pipeline = Pipeline::new(cfg, cli.jobs, cli.force);
    match cli.cmd {
        Cmd::Gen => {
            pipeline.gen()?;
        }
        Cmd::Label => {
            pipeline.label()?;
        }
        Cmd::Train { which } => {
            pipeline.train(match which {
                Which::Tail => Student::Tail,
                Which::Nnilc => Student::NnIlc,
            })?;
        }
        Cmd::Eval { sources } => {
            let sources = if sources.is_empty() {
                Source::ALL.to_vec()
            } else {
                sources
                    .iter()
                    .map(|s| Source::parse(s).ok_or_else(|| HarnessError::Config(format!("unknown source `{s}`"))))
                    .collect::<Result<Vec<_>, _>>()?
            };
            pipeline.eval(&sources)?;
        }
        Cmd::Repro { stage } => {
            let from = match stage {
                StageArg::Gen => Stage::Gen,
                StageArg::Label => Stage::Label,
                StageArg::TrainTail => Stage::TrainTail,
                StageArg::TrainNnilc => Stage::TrainNnIlc,
                StageArg::Eval => Stage::Eval,
            };
            pipeline.repro(from)?;
            let verdicts = verdict::all(&pipeline.summary()?, &pipeline.timings()?);
            for v in &verdicts {
                println!("{v}");
            }
            let failed: Vec<_> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
            if !failed.is_empty() {
                return Err(HarnessError::Acceptance(failed.join(", ")));
            }
        }
        Cmd::Config => println!("{}", serde_json::to_string_pretty(&pipeline.cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
