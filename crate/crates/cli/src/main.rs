use std::path::PathBuf;
use std::process::ExitCode;

use baycann::pipeline::{self, Pipeline, PipelineConfig, Scale};
use baycann::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "baycann", version, about = "Bayesian calibration of a cancer natural-history model with a neural-network surrogate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Size preset applied on top of the configuration.
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate calibration targets at the base-case parameters.
    GenTargets,
    /// Latin hypercube design evaluated on the cohort model.
    Doe,
    /// Train and validate the surrogate on the design.
    Train,
    /// Sample the surrogate posterior with HMC.
    Calibrate,
    /// Sample the simulator posterior with IMIS.
    Imis,
    /// Compare the two posteriors against the truth.
    Compare {
        /// Surrogate posterior CSV (default: the output directory's).
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// IMIS posterior CSV (default: the output directory's).
        #[arg(long)]
        imis: Option<PathBuf>,
        /// Truth CSV with `parameter,value` rows.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(scale) = common.scale {
        cfg.apply_scale(match scale {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        });
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    if let Command::Compare {
        surrogate: Some(a),
        imis: Some(b),
        truth: Some(t),
    } = &cli.command
    {
        let rep = pipeline::compare_files(a, b, t)?;
        print!("{}", rep.render_table());
        return Ok(());
    }
    let p = Pipeline::open(&cfg)?;
    match cli.command {
        Command::GenTargets => {
            let ts = p.gen_targets()?;
            println!("{} targets written to {}", ts.len(), p.path(pipeline::TARGETS_CSV).display());
        }
        Command::Doe => {
            let d = p.doe()?;
            println!("{} design rows ({} dropped) written to {}", d.len(), d.dropped.len(), p.path(pipeline::DESIGN_CSV).display());
        }
        Command::Train => {
            let (_, rep) = p.train()?;
            println!("validation R2 {:.5} after {} epochs (best {})", rep.aggregate_r2, rep.epochs, rep.best_epoch);
        }
        Command::Calibrate => {
            let post = p.calibrate()?;
            print_summary(&post);
        }
        Command::Imis => {
            let post = p.imis()?;
            print_summary(&post);
        }
        Command::Compare { surrogate, imis, truth } => {
            let rep = pipeline::compare_files(
                &surrogate.unwrap_or_else(|| p.path(pipeline::BAYCANN_CSV)),
                &imis.unwrap_or_else(|| p.path(pipeline::IMIS_CSV)),
                &truth.unwrap_or_else(|| p.path(pipeline::TRUTH_CSV)),
            )?;
            print!("{}", rep.render_table());
        }
        Command::Pipeline => {
            let rep = p.run_all()?;
            print!("{}", rep.render_table());
        }
    }
    Ok(())
}

fn print_summary(post: &baycann::calibrate::Posterior) {
    println!("{} draws, {} evaluations, {:.2} s", post.n_draws(), post.evaluations, post.wall_clock_secs);
    for s in &post.summary {
        let rhat = s.rhat.map_or_else(|| "NA".to_string(), |r| format!("{r:.3}"));
        println!("{:<8} mean {:.5e} 95% [{:.5e}, {:.5e}] rhat {rhat} ess {:.0}", s.name, s.mean, s.q025, s.q975, s.ess);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
