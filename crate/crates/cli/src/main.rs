use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metainfluence_cli::{
    cmd_experiment, cmd_gen, cmd_hessian, cmd_influence, cmd_report, cmd_train, exit_code, run_all, RunConfig,
};

#[derive(Parser)]
#[command(name = "metainfluence", version, about = "Task-level influence analysis for meta-learning")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's initialization seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and test tasksets.
    Gen,
    /// Meta-train on the training taskset.
    Train,
    /// Build the meta-Hessian.
    Hessian,
    /// Compute influence records and the score table.
    Influence,
    /// Run the configured experiments.
    Experiment,
    /// Summarize the experiment report.
    Report,
    /// All stages from gen through experiment.
    Run,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = (|| -> anyhow::Result<Vec<String>> {
        if let Command::Report = cli.command {
            let out = match (&cli.out, &cli.config) {
                (Some(o), _) => o.clone(),
                (None, Some(c)) => RunConfig::load(c)?.out_dir,
                (None, None) => PathBuf::from("out"),
            };
            return Ok(vec![cmd_report(&out)?]);
        }
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| metainfluence_cli::UsageError("--config is required".into()))?;
        let mut config = RunConfig::load(path)?;
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        if let Some(o) = &cli.out {
            config.out_dir = o.clone();
        }
        let out = config.out_dir.clone();
        Ok(match cli.command {
            Command::Gen => vec![cmd_gen(&config, &out)?],
            Command::Train => vec![cmd_train(&config, &out)?],
            Command::Hessian => vec![cmd_hessian(&config, &out)?],
            Command::Influence => vec![cmd_influence(&config, &out)?],
            Command::Experiment => vec![cmd_experiment(&config, &out)?],
            Command::Run => run_all(&config, &out)?,
            Command::Report => unreachable!("handled above"),
        })
    })();
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
