use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poetx::error::PoetError;
use poetx::layer::MergeMode;
use poetx::trainer::{self, ProfilePath, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "poetx", version, about = "Train and inspect orthogonally reparameterized linear layers")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Floating-point width: 32 or 64
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a regression or byte-level language model
    Train(Overrides),
    /// Simulate update coverage of block- and fully-stochastic factors
    Coverage(Overrides),
    /// Track singular values of a single layer across repeated merges
    SpectrumAudit(Overrides),
    /// Count matmuls, allocations and saved bytes of each layer implementation
    Profile(Overrides),
    /// Print the contents of a checkpoint file
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct Overrides {
    /// Configuration overrides as `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, PoetError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(PoetError::Config(format!("expected --key, got '{a}'")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| PoetError::Config(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn build_config(cli: &Cli, rest: &[String]) -> Result<TrainConfig, PoetError> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for (k, v) in parse_overrides(rest)? {
        cfg.set(&k, &v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(p) = &cli.precision {
        cfg.set("precision", p)?;
    }
    Ok(cfg)
}

fn exit_code(e: &PoetError) -> u8 {
    match e {
        PoetError::Io { .. } | PoetError::Format(_) => 3,
        PoetError::NonFinite(_) | PoetError::NonConvergence { .. } | PoetError::Singular(_) => 4,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), PoetError> {
    match &cli.command {
        Command::Train(o) => {
            let cfg = build_config(cli, &o.rest)?;
            let s = trainer::run_train(&cfg)?;
            println!("steps={} merges={} trainable_params={}", s.steps, s.merges, s.trainable_params);
            println!("initial_val_loss={:.6} final_val_loss={:.6} final_train_loss={:.6}", s.initial_val_loss, s.final_val_loss, s.final_train_loss);
            if let Some(h) = s.unigram_entropy {
                println!("unigram_entropy={h:.6}");
            }
            println!("sv_drift={:.3e}", s.sv_drift);
            println!("metrics: {}", s.metrics_path.display());
            println!("checkpoint: {}", s.final_checkpoint.display());
        }
        Command::Coverage(o) => {
            let cfg = build_config(cli, &o.rest)?;
            let res = trainer::run_coverage(&cfg)?;
            print!("{}", trainer::coverage_summary(&res, cfg.coverage_fraction));
        }
        Command::SpectrumAudit(o) => {
            let cfg = build_config(cli, &o.rest)?;
            let rep = trainer::run_spectrum_audit(&cfg)?;
            print!("{}", rep.to_csv());
            for mode in [MergeMode::Cnp, MergeMode::ExactCayley] {
                if rep.rows.iter().any(|r| r.mode == mode) {
                    println!("# {mode:?}: max per-merge drift {:.3e}, max cumulative drift {:.3e}", rep.max_step_drift(mode), rep.max_cum_drift(mode));
                }
            }
        }
        Command::Profile(o) => {
            let cfg = build_config(cli, &o.rest)?;
            let rep = trainer::run_profile(&cfg)?;
            print!("{}", rep.to_csv());
            let fast = rep.row(ProfilePath::Fast).saved_act_bytes.unwrap_or(0);
            let mem = rep.row(ProfilePath::Mem).saved_act_bytes.unwrap_or(0);
            println!("# fast - mem saved bytes = {}", fast as i64 - mem as i64);
        }
        Command::InspectCheckpoint { path } => {
            let ckpt = trainer::load_checkpoint(path)?;
            print!("{}", trainer::describe(&ckpt));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
