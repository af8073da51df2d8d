use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ranctx::config::KvConfig;
use ranctx::pipeline::{self, PipelineConfig};
use ranctx::Result;

/// Contextual anomaly detection for RAN cell KPIs.
///
/// Log verbosity is read from RANCTX_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "ranctx", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for scenario generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deployment, telemetry, splits and labels.
    Generate,
    /// Train the predictor.
    Train {
        /// Continue from the checkpoint next to the model file.
        #[arg(long)]
        resume: bool,
    },
    /// Export entropy, historical-error and score distributions.
    Calibrate,
    /// Detect anomalies and write verdicts and anomaly reports.
    Detect,
    /// Compute prediction metrics per split and detection recall.
    Evaluate,
}

fn load_config(cli: &Cli) -> Result<KvConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for s in &cli.set {
        kv.set(s)?;
    }
    if let Some(seed) = cli.seed {
        kv.set(&format!("rng_seed={seed}"))?;
    }
    Ok(kv)
}

fn run(cli: &Cli) -> Result<()> {
    let kv = load_config(cli)?;
    let cfg = PipelineConfig::from_kv(&kv, cli.out.as_deref())?;
    let out = cfg.paths.out_dir.display();
    match &cli.command {
        Command::Generate => {
            let g = pipeline::cmd_generate(&kv, &cfg)?;
            println!(
                "generated {} cells x {} h, {} injections, {} labelled hours in {out}",
                g.cells, g.hours, g.injections, g.labels
            );
        }
        Command::Train { resume } => {
            let s = pipeline::cmd_train(&cfg, *resume)?;
            match s.best_epoch {
                Some(e) => println!(
                    "trained {} for {} epochs; best validation norm_mae {:.4} at epoch {e}; model {}",
                    s.params.variant,
                    s.epochs_done,
                    s.best_norm_mae,
                    cfg.paths.model.display()
                ),
                None => println!("nothing to train; checkpoint already at {} epochs", s.epochs_done),
            }
            if s.skipped_samples > 0 {
                println!("skipped {} degenerate or unobserved samples", s.skipped_samples);
            }
        }
        Command::Calibrate => {
            let f = pipeline::cmd_calibrate(&cfg)?;
            for p in [f.entropy, f.h_err, f.scores] {
                println!("wrote {}", p.display());
            }
        }
        Command::Detect => {
            let d = pipeline::cmd_detect(&cfg)?;
            for (k, v) in d.summary() {
                println!("{k}: {v}");
            }
        }
        Command::Evaluate => {
            let e = pipeline::cmd_evaluate(&cfg)?;
            for (split, m) in &e.splits {
                println!(
                    "{split}: norm_mae {:.4} r2 {} nll {:.4}",
                    m.norm_mae,
                    m.r2.map_or("-".into(), |r| format!("{r:.4}")),
                    m.nll
                );
            }
            if let Some(d) = &e.detection {
                for (k, v) in d.rows() {
                    println!("{k}: {v}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RANCTX_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
