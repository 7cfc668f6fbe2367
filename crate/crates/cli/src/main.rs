//! `mhgan`: train, evaluate, gradient-check, and plot.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhgan::data::sample_latent;
use mhgan::gradcheck::{format_table, run_suite};
use mhgan::nn::BnMode;
use mhgan::rng::LabRng;
use mhgan::train::{self, Trainer, TrainConfig};
use mhgan::{Error, Result};

#[derive(Parser)]
#[command(name = "mhgan", version, about = "Conditional GAN training lab")]
struct Cli {
    /// Print every config default as JSON and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file plus key=value overrides.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint; the CSV is truncated to its step.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// key=value; nested keys use dots, e.g. dataset.kind.k=4.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint and print the metrics report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        eval_seed: Option<u64>,
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Scatter real and generated samples into an SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Samples of each kind.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        overrides: Vec<String>,
    },
    /// Same as --print-defaults.
    PrintDefaults,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Data(_) => 2,
        _ => 1,
    }
}

fn config_near(checkpoint: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        let p = checkpoint.parent()?.join("config.json");
        p.exists().then_some(p)
    })
}

fn cmd_train(config: Option<&Path>, resume: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = config::load(config, overrides)?;
    let root = std::env::var(config::OUTPUT_ROOT_ENV).ok();
    cfg.output_dir = config::resolve_output(&cfg.output_dir, root.as_deref());
    let trainer = match resume {
        Some(p) => Trainer::resume(&cfg, p)?,
        None => Trainer::new(&cfg)?,
    };
    let out = cfg.output_dir.clone();
    let outcome = train::run_with(trainer, Some(&out), &mut |_, _| {})?;
    if let Some((step, fid)) = outcome.best {
        eprintln!("best toy-FID {fid} at step {step}");
    }
    eprintln!("finished {} steps; artifacts in {}", outcome.final_step, out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, cfg: TrainConfig) -> Result<()> {
    let t = Trainer::resume(&cfg, checkpoint)?;
    let report = t.evaluate();
    if report.intra_fid.is_none() {
        eprintln!("warning: too few samples per class for intra-FID; those fields are null");
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_plot(checkpoint: &Path, cfg: TrainConfig, out: &Path, n: usize, seed: u64) -> Result<()> {
    let t = Trainer::resume(&cfg, checkpoint)?;
    let mut rng = LabRng::seed(seed);
    let real = t.dataset().sample_real(n, &mut rng);
    let (z, y) = sample_latent(n, t.g.z_dim, t.g.classes, &mut rng);
    let fake = t.g.generate(&z, &y, BnMode::Eval);
    let svg = plot::scatter_svg((&real.x, &real.y), (&fake, &y), t.g.classes);
    std::fs::write(out, svg).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<bool> {
    if cli.print_defaults {
        println!("{}", config::defaults_json());
        return Ok(true);
    }
    match cli.command {
        None | Some(Command::PrintDefaults) => println!("{}", config::defaults_json()),
        Some(Command::Train { config, resume, overrides }) => cmd_train(config.as_deref(), resume.as_deref(), &overrides)?,
        Some(Command::Eval { checkpoint, config, n_samples, eval_seed, mut overrides }) => {
            overrides.extend(n_samples.map(|n| format!("n_eval={n}")));
            overrides.extend(eval_seed.map(|s| format!("eval_seed={s}")));
            let cfg = config::load(config_near(&checkpoint, config.as_deref()).as_deref(), &overrides)?;
            cmd_eval(&checkpoint, cfg)?
        }
        Some(Command::Gradcheck) => {
            let rows = run_suite(None);
            print!("{}", format_table(&rows));
            return Ok(rows.iter().all(|r| r.passed));
        }
        Some(Command::Plot { checkpoint, config, out, n, seed, overrides }) => {
            let cfg = config::load(config_near(&checkpoint, config.as_deref()).as_deref(), &overrides)?;
            cmd_plot(&checkpoint, cfg, &out, n, seed)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
