use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepfact::harness::{run_to_output, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "deepfact", about = "Deep linear factorization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fig2-depth-width, fig3-svd, fig4-compress-mf, fig5-compress-mc,
    /// fig7-narrow-ablation or fig8-relu-spectrum
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    d: Option<String>,
    /// Depth, or a comma-separated list for sweeps.
    #[arg(long = "L")]
    depth: Option<String>,
    /// Compression rank or width, or a comma-separated list for sweeps.
    #[arg(long)]
    r: Option<String>,
    #[arg(long = "r-star")]
    r_star: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    /// Fraction of observed entries.
    #[arg(long)]
    observed: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    /// Output CSV path; stdout if absent.
    #[arg(long)]
    out: Option<String>,
    /// Shrink the default d for quick runs.
    #[arg(long = "ci-scale")]
    ci_scale: bool,
}

impl RunArgs {
    fn overrides(&self) -> deepfact::Result<Overrides> {
        let mut o = Overrides::default();
        let pairs = [
            ("experiment", &self.experiment),
            ("d", &self.d),
            ("L", &self.depth),
            ("r", &self.r),
            ("r-star", &self.r_star),
            ("eps", &self.eps),
            ("eta", &self.eta),
            ("lambda", &self.lambda),
            ("gamma", &self.gamma),
            ("observed", &self.observed),
            ("iters", &self.iters),
            ("tol", &self.tol),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("stride", &self.stride),
            ("out", &self.out),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                o.set(key, v)?;
            }
        }
        if self.ci_scale {
            o.ci_scale = Some(true);
        }
        Ok(o)
    }
}

fn run(args: &RunArgs) -> deepfact::Result<()> {
    let file = match &args.config {
        Some(path) => Overrides::from_file(path)?,
        None => Overrides::default(),
    };
    let cfg = ExperimentConfig::resolve(&file.merged_with(args.overrides()?))?;
    let table = run_to_output(&cfg)?;
    if let Some(path) = &cfg.output_path {
        eprintln!("{}: {} rows -> {}", cfg.experiment, table.rows().len(), path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
