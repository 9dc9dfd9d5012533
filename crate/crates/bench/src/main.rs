//! Command line interface: benchmark runs, dataset auditing, data
//! collection and standalone learning.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use qreg_bench::{render_audit, run_suite, BenchConfig};
use qreg_core::datagen::IoDataset;
use qreg_core::nonmin;
use qreg_core::qlearn::{self, RunOptions};
use qreg_plant::collect::{collect, CollectConfig, DataLength, X0Policy};
use qreg_plant::lti::LtiSystem;

#[derive(Parser)]
#[command(
    name = "qreg",
    about = "Q-learning for optimal output regulation from input-output data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark suite and dataset audits.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Collect input-output data from a system description.
    Collect(CollectArgs),
    /// Learn an output-feedback gain from a dataset.
    Learn(LearnArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a benchmark config and write summary.csv and instances.jsonl.
    Run {
        /// Benchmark config (JSON). Omit to use the desk-scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed when no config file is given.
        #[arg(long, default_value_t = 20260809)]
        seed: u64,
    },
    /// Audit a dataset: excitation order and rank conditions.
    Verify {
        /// Dataset file (JSON).
        #[arg(long)]
        data: PathBuf,
        /// Optionally dump the constructed basis (JSON) for offline study.
        #[arg(long)]
        basis_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CollectArgs {
    /// System description (JSON with n, p, m, a, b, c).
    #[arg(long)]
    system: PathBuf,
    /// Collection seed.
    #[arg(long)]
    seed: u64,
    /// Output dataset path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Additionally export the dataset as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the usable sample count (default: the lower bound).
    #[arg(long)]
    samples: Option<usize>,
    /// Episode length cap for unstable plants.
    #[arg(long, default_value_t = 30)]
    episode_cap: usize,
    /// Draw initial states uniformly at this scale instead of starting at 0.
    #[arg(long)]
    x0_scale: Option<f64>,
}

#[derive(Args)]
struct LearnArgs {
    /// Dataset file (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Output weight: Qy = qy * I.
    #[arg(long, default_value_t = 100.0)]
    qy: f64,
    /// Input weight: R = r * I.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Stopping threshold on the gain update.
    #[arg(long, default_value_t = 1e-10)]
    eps: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Bench { command } => match command {
            BenchCommand::Run { config, out, seed } => bench_run(config, out, seed),
            BenchCommand::Verify { data, basis_out } => bench_verify(data, basis_out),
        },
        Command::Collect(args) => do_collect(args),
        Command::Learn(args) => do_learn(args),
    }
}

fn bench_run(config: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading config {}", path.display()))?;
            BenchConfig::from_json_str(&text).context("parsing config")?
        }
        None => BenchConfig::desk_default(seed),
    };
    let result = run_suite(&cfg)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let summary = out.join("summary.csv");
    result
        .write_summary_csv(File::create(&summary)?)
        .context("writing summary.csv")?;
    let jsonl = out.join("instances.jsonl");
    result
        .write_instances_jsonl(File::create(&jsonl)?)
        .context("writing instances.jsonl")?;
    fs::write(out.join("config.json"), cfg.to_json_string())?;

    print!("{}", result.render_table());
    let failures: usize = result.rows.iter().map(|r| r.failures.len()).sum();
    if failures > 0 {
        println!("{failures} instance(s) failed; see {}", jsonl.display());
    }
    println!("wrote {} and {}", summary.display(), jsonl.display());
    // Per-instance failures do not fail the suite.
    Ok(())
}

fn bench_verify(data: PathBuf, basis_out: Option<PathBuf>) -> Result<()> {
    let file = File::open(&data).with_context(|| format!("opening {}", data.display()))?;
    let dataset = IoDataset::read_json(BufReader::new(file))
        .with_context(|| format!("parsing dataset {}", data.display()))?;
    let audit = nonmin::audit(&dataset);
    print!("{}", render_audit(&audit));
    if let Some(path) = basis_out {
        let gamma = nonmin::compute_gamma(&dataset, dataset.lag(), dataset.state_order())
            .context("constructing Gamma for the basis dump")?;
        let z = nonmin::build_z(&dataset, &gamma, dataset.lag())?;
        let basis = nonmin::build_basis(&dataset, &z)?;
        fs::write(&path, basis.to_json_string())?;
        println!("basis written to {}", path.display());
    }
    Ok(())
}

fn do_collect(args: CollectArgs) -> Result<()> {
    let file = File::open(&args.system)
        .with_context(|| format!("opening {}", args.system.display()))?;
    let sys = LtiSystem::read_json(BufReader::new(file))
        .with_context(|| format!("parsing system {}", args.system.display()))?;
    let cfg = CollectConfig {
        data_length: match args.samples {
            Some(s) => DataLength::Samples(s),
            None => DataLength::LowerBound,
        },
        episode_cap: args.episode_cap,
        x0: match args.x0_scale {
            Some(scale) => X0Policy::Uniform { scale },
            None => X0Policy::Zero,
        },
        ..Default::default()
    };
    let out = collect(&sys, &cfg, args.seed).context("collecting data")?;
    out.dataset
        .write_json(File::create(&args.out)?)
        .context("writing dataset")?;
    if let Some(csv_path) = &args.csv {
        out.dataset
            .write_csv(File::create(csv_path)?)
            .context("writing csv")?;
    }
    println!(
        "collected {} episode(s), {} usable samples -> {}",
        out.dataset.episodes().len(),
        out.dataset.usable_len(),
        args.out.display()
    );
    Ok(())
}

fn do_learn(args: LearnArgs) -> Result<()> {
    let file = File::open(&args.data).with_context(|| format!("opening {}", args.data.display()))?;
    let dataset = IoDataset::read_json(BufReader::new(file))
        .with_context(|| format!("parsing dataset {}", args.data.display()))?;
    let qy = DMatrix::identity(dataset.output_dim(), dataset.output_dim()) * args.qy;
    let r = DMatrix::identity(dataset.input_dim(), dataset.input_dim()) * args.r;
    let opts = RunOptions {
        epsilon: args.eps,
        max_iters: args.iters,
        initial_gain: None,
    };
    let report = qlearn::run(&dataset, &qy, &r, &opts).context("learning failed")?;
    report
        .write_json(File::create(&args.out)?)
        .context("writing report")?;
    println!(
        "{} after {} iteration(s) in {:.6} s; final gain update {:.3e} -> {}",
        if report.converged { "converged" } else { "stopped at the iteration cap" },
        report.iters_used,
        report.learn_secs,
        report.iterations.last().map(|i| i.gain_update).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}
