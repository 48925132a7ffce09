//! `auxinfer` — run original-form vs auxiliary-form inference experiments.

use auxinfer::data::{generate_dbn_data, write_dbn_csv};
use auxinfer::experiment::{
    check_gradients, prepare, report_path, run_comparison, run_slot, trace_path, DataSource,
    ExperimentConfig, GRAD_CHECK_TOL,
};
use auxinfer::{Error, Result};
use auxinfer_core::{Fit, Form};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "auxinfer",
    version,
    about = "Compare original-form and auxiliary-form inference on layered Gaussian latent-variable models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment, writing trace CSVs and (for `both`)
    /// a comparison report.
    Run {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Which slot to run.
        #[arg(long, value_enum, default_value_t = SlotArg::Both)]
        form: SlotArg,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the learning seed of both slots.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the synthetic dynamical-network dataset of an experiment
    /// config and write it as CSV.
    GenDbn {
        /// Experiment config JSON with a dbn-synthetic data source.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spot-check both gradient routes against finite differences.
    CheckGrads {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SlotArg {
    Original,
    Auxiliary,
    Both,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn summarize(slot: Form, fit: &Fit, out_dir: &std::path::Path) {
    let name = match slot {
        Form::Original => "original",
        Form::Auxiliary => "auxiliary",
    };
    match fit.trace.rows.last() {
        Some(last) => println!(
            "{name}: {} iterations in {:.1}s, final log-joint {:.4} -> {}",
            last.iter,
            last.wall_s,
            last.log_joint,
            trace_path(out_dir, slot).display()
        ),
        None => println!("{name}: no iterations recorded"),
    }
    if let Some(iter) = fit.aborted_at {
        println!("{name}: aborted by numerical failure at iteration {iter}");
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            form,
            out,
            seed,
        } => {
            let (mut cfg, base) = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.learn.original.seed = seed;
                cfg.learn.auxiliary.seed = seed;
            }
            let mut exp = prepare(&cfg, &base)?;
            if let Some(out) = out {
                exp.out_dir = out;
            }
            println!(
                "dataset: {} rows from {}; output -> {}",
                exp.dataset.rows,
                exp.dataset.source,
                exp.out_dir.display()
            );
            match form {
                SlotArg::Original => {
                    let fit = run_slot(&exp, Form::Original)?;
                    summarize(Form::Original, &fit, &exp.out_dir);
                }
                SlotArg::Auxiliary => {
                    let fit = run_slot(&exp, Form::Auxiliary)?;
                    summarize(Form::Auxiliary, &fit, &exp.out_dir);
                }
                SlotArg::Both => {
                    let (report, orig, aux) = run_comparison(&exp)?;
                    summarize(Form::Original, &orig, &exp.out_dir);
                    summarize(Form::Auxiliary, &aux, &exp.out_dir);
                    println!(
                        "plateaus: original {:.4} at iteration {}, auxiliary {:.4} at iteration {}",
                        report.original.plateau,
                        report.original.iters_to_plateau,
                        report.auxiliary.plateau,
                        report.auxiliary.iters_to_plateau
                    );
                    println!(
                        "speedup ratio {:.2} -> {}",
                        report.speedup_ratio,
                        report_path(&exp.out_dir).display()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenDbn { config, out } => {
            let (cfg, _) = ExperimentConfig::load(&config)?;
            let DataSource::DbnSynthetic(spec) = &cfg.data else {
                return Err(Error::Config(
                    "gen-dbn needs a dbn-synthetic data source".into(),
                ));
            };
            let (dataset, _) = generate_dbn_data(spec)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let file = BufWriter::new(fs::File::create(&out)?);
            write_dbn_csv(&dataset, spec, file)?;
            println!(
                "wrote {} rows x {} columns -> {}",
                dataset.rows,
                spec.length * spec.obs_dim,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGrads { config } => {
            let (cfg, base) = ExperimentConfig::load(&config)?;
            let exp = prepare(&cfg, &base)?;
            let rep = check_gradients(&exp, 5, 200)?;
            println!(
                "worst relative gradient error over {} coordinates: original {:.3e}, auxiliary {:.3e} (tolerance {GRAD_CHECK_TOL:.0e})",
                rep.coords, rep.original, rep.auxiliary
            );
            if rep.passed() {
                println!("gradient check passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
