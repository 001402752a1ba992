use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bgrass::engine::Schedule;
use bgrass::ontology::Epsilon;
use bgrass::simgen::{FitSettings, Sim1Design, Sim2Design};
use bgrass_cli::config::RunConfig;
use bgrass_cli::fit::run_fit;
use bgrass_cli::simulate::{run_simulate, Design, GraphSpec, SimulateOptions};
use bgrass_cli::validate::run_validate;
use clap::{Args, Parser, Subcommand};

/// Exit status when chains fail the R̂ check.
const EXIT_NONCONVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "bgrass", version, about = "Graph-regularized spike-and-slab signal detection for adverse-event reports")]
struct Cli {
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model to a reports file and write a run directory.
    Fit(FitArgs),
    /// Generate simulated replicates and compare BGrass with Bss.
    Simulate(SimArgs),
    /// Parse inputs and print graph and conditioning statistics.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Fixed ε (a positive number or `inf`); skips the grid search.
    #[arg(long)]
    epsilon: Option<Epsilon>,
    /// Exit zero even when max R̂ exceeds the threshold.
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, value_enum)]
    design: Design,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "bgrass-sim")]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 10_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 2)]
    thin: usize,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    /// Comma-separated ε grid for BGrass, e.g. `0.01,0.1,1,inf`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<Epsilon>>,
    #[arg(long, default_value_t = 0.05)]
    fdr_alpha: f64,
    #[arg(long)]
    n_reports: Option<usize>,
    /// True ε for the second design.
    #[arg(long, default_value = "0.1")]
    eps_true: Epsilon,
    #[arg(long, default_value_t = 0.5)]
    signal_frac: f64,
    #[arg(long, default_value_t = 60)]
    n_aes: usize,
    #[arg(long, default_value_t = 10)]
    n_groups: usize,
    #[arg(long, default_value_t = 6)]
    n_isolated: usize,
    #[arg(long, default_value_t = 0.1)]
    overlap: f64,
    #[arg(long, default_value_t = 7)]
    graph_seed: u64,
    /// Ontology file supplying the graph for the second design.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// 50,000 reports; 346 AEs in 78 groups for the second design.
    #[arg(long)]
    full_scale: bool,
    /// Also write replicate 0 as reports and ontology files.
    #[arg(long)]
    export_data: bool,
}

fn fit(args: FitArgs, command_line: &str) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(o) = args.output {
        cfg.output_dir = o;
    }
    if let Some(s) = args.seed {
        cfg.mcmc.seed = s;
        cfg.mcmc.seeds = None;
    }
    if let Some(v) = args.iters {
        cfg.mcmc.iters = v;
    }
    if let Some(v) = args.burn_in {
        cfg.mcmc.burn_in = v;
    }
    if let Some(v) = args.thin {
        cfg.mcmc.thin = v;
    }
    if let Some(v) = args.chains {
        cfg.mcmc.chains = v;
        cfg.mcmc.seeds = None;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon.fixed = Some(e);
    }
    let out = run_fit(&cfg, command_line)?;
    eprintln!(
        "wrote {} (epsilon {}, max R-hat {:.3})",
        out.run_dir.display(),
        out.epsilon,
        out.max_r_hat
    );
    if !out.converged {
        if args.allow_nonconverged {
            log::warn!("max R-hat {:.3} exceeds {}", out.max_r_hat, cfg.report.rhat_threshold);
        } else {
            log::error!(
                "max R-hat {:.3} exceeds {}; rerun with more iterations or pass --allow-nonconverged",
                out.max_r_hat,
                cfg.report.rhat_threshold
            );
            return Ok(ExitCode::from(EXIT_NONCONVERGED));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimArgs) -> Result<ExitCode> {
    let mut sim1 = Sim1Design::default();
    let mut sim2 = Sim2Design {
        eps_true: a.eps_true,
        signal_frac: a.signal_frac,
        ..Default::default()
    };
    let (mut n_aes, mut n_groups) = (a.n_aes, a.n_groups);
    if a.full_scale {
        sim1.n_reports = 50_000;
        sim2.n_reports = 50_000;
        n_aes = 346;
        n_groups = 78;
    }
    if let Some(n) = a.n_reports {
        sim1.n_reports = n;
        sim2.n_reports = n;
    }
    let graph = match a.ontology {
        Some(p) => GraphSpec::File(p),
        None => GraphSpec::Random {
            n_aes,
            n_groups,
            n_isolated: a.n_isolated,
            overlap: a.overlap,
            seed: a.graph_seed,
        },
    };
    let opts = SimulateOptions {
        design: a.design,
        replicates: a.replicates,
        seed: a.seed,
        out_dir: a.out,
        settings: FitSettings {
            schedule: Schedule {
                iters: a.iters,
                burn_in: a.burn_in,
                thin: a.thin,
            },
            chains: a.chains,
            grid: a.grid.unwrap_or_else(Epsilon::default_grid),
            fdr_alpha: a.fdr_alpha,
            ..Default::default()
        },
        sim1,
        sim2,
        graph,
        export_data: a.export_data,
    };
    let out = run_simulate(&opts)?;
    for (model, metric, mean) in &out.means {
        eprintln!("{model:>6} {metric:<13} {mean:.4}");
    }
    eprintln!("wrote {}", opts.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli, command_line: &str) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Fit(args) => fit(args, command_line),
        Command::Simulate(args) => simulate(args),
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_validate(&cfg)?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    match run(cli, &command_line) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
