use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use distill_lab::config::ExperimentName;
use distill_lab::{parse_config, prepare_output, report, resolve_output, run_experiment, train_model, ExperimentSpec, OUT_ENV};

#[derive(Parser)]
#[command(name = "distill-lab", version, about = "Score-distillation experiments on analytic diffusion priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the named experiment of a config.
    Run(RunArgs),
    /// Train an MLP denoiser on the configured prior.
    Train(RunArgs),
    /// Draw DDIM chains and compare them with the prior.
    Sample(RunArgs),
    /// Regenerate SVG charts from the CSVs in a run directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    /// Worker threads for sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn output(args: &RunArgs, spec: &ExperimentSpec, label: &str) -> Result<PathBuf> {
    let env = std::env::var(OUT_ENV).ok();
    let out = resolve_output(args.out.as_deref(), spec, label, env.as_deref());
    prepare_output(&out, args.overwrite)?;
    Ok(out)
}

fn run(args: &RunArgs) -> Result<bool> {
    let spec = load(args)?;
    let name = spec
        .name
        .ok_or_else(|| anyhow::anyhow!("{} does not name an experiment", args.config.display()))?;
    let out = output(args, &spec, name.as_str())?;
    let report = run_experiment(&spec, &out, args.jobs)?;
    for (id, err) in &report.failed {
        eprintln!("run {id} failed: {err}");
    }
    println!(
        "{}: {} run(s) complete, {} failed; artifacts in {}",
        name.as_str(),
        report.completed.len(),
        report.failed.len(),
        out.display()
    );
    Ok(report.failed.is_empty())
}

fn train(args: &RunArgs) -> Result<bool> {
    let spec = load(args)?;
    let out = output(args, &spec, "train")?;
    let r = train_model(&spec, &out)?;
    println!(
        "held-out eps MSE {:.6} (oracle {:.6}); model written to {}",
        r.heldout_mse,
        r.oracle_mse,
        r.model_path.display()
    );
    Ok(true)
}

fn sample(args: &RunArgs) -> Result<bool> {
    let mut spec = load(args)?;
    spec.name = Some(ExperimentName::ChainCheck);
    let out = output(args, &spec, "sample")?;
    let report = run_experiment(&spec, &out, args.jobs)?;
    for (id, err) in &report.failed {
        eprintln!("run {id} failed: {err}");
    }
    println!("samples written to {}", out.display());
    Ok(report.failed.is_empty())
}

fn report_dir(dir: &Path) -> Result<bool> {
    let written = report::write_reports(dir)?;
    println!("{} chart(s) written", written.len());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Report { dir } => report_dir(dir),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
