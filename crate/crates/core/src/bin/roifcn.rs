use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roifcn::config::RunConfig;
use roifcn::harness::{self, exit_code, parse_size, parse_usize_list};
use roifcn::Error;

#[derive(Parser)]
#[command(
    name = "roifcn",
    version,
    about = "ROI-convolution segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        /// HxW, e.g. 64x64
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on DIR/train.manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segmentation loss only, full-image mask.
        #[arg(long)]
        no_detection: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on DIR/test.manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        curve: PathBuf,
    },
    /// Finite-difference check of every parameter gradient (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Image-wise vs region-wise ROI convolution timing.
    Bench {
        #[arg(long, default_value = "16,32,64")]
        sizes: String,
        #[arg(long, default_value = "1,4,8")]
        rois: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("[{}] {}", r.level(), r.args());
        }
    }

    fn flush(&self) {}
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            out,
            train,
            test,
            size,
            seed,
        } => {
            harness::cmd_gen_data(&out, train, test, parse_size(&size)?, seed)?;
            println!(
                "wrote {train} train and {test} test samples to {}",
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            no_detection,
            seed,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            for kv in &overrides {
                cfg.apply_override(kv)?;
            }
            if no_detection {
                cfg.network.detection_enabled = false;
            }
            if let Some(s) = seed {
                cfg.network.seed = s;
            }
            let outcome = harness::cmd_train(&data, &cfg, &out)?;
            println!(
                "trained {} iterations, checkpoint {}",
                outcome.state.iteration,
                out.display()
            );
        }
        Command::Eval {
            data,
            model,
            report,
            curve,
        } => {
            let r = harness::cmd_eval(&data, &model, &report, &curve)?;
            println!(
                "mean precision {:.4} recall {:.4} dice {:.4} over {} slices",
                r.mean.precision,
                r.mean.recall,
                r.mean.dice,
                r.slices.len()
            );
        }
        Command::Gradcheck { seed } => {
            let entries = harness::cmd_gradcheck(seed)?;
            let mut ok = true;
            for e in &entries {
                println!(
                    "{:<20} n={:<5} max_rel_err={:.3e} {}",
                    e.name,
                    e.elements,
                    e.max_rel_error,
                    if e.passed() { "ok" } else { "FAIL" }
                );
                ok &= e.passed();
            }
            if !ok {
                return Err(Error::Config("gradient check failed".into()));
            }
        }
        Command::Bench {
            sizes,
            rois,
            reps,
            out,
            seed,
        } => {
            let rows = harness::cmd_bench(
                &parse_usize_list(&sizes)?,
                &parse_usize_list(&rois)?,
                reps,
                seed,
            )?;
            let csv = harness::bench_csv(&rows);
            std::fs::write(&out, &csv).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let _ = log::set_logger(&StderrLogger).map(|()| log::set_max_level(log::LevelFilter::Info));
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
