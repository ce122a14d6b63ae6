use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsam_lab::config::parse_config_with;
use bsam_lab::formats::{parse_checkpoint, read_text, report_text, write_file};
use bsam_lab::run;
use bsam_lab::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "bsam", version, about = "Train and probe SGD, SAM and BSAM at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "BSAM_OUT_DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set opt.variant=sam`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed; write metrics, checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Log one metrics row per step instead of per epoch.
        #[arg(long)]
        trace: bool,
    },
    /// Train several configs on shared seeds and tabulate mean ± std.
    Compare {
        /// Configuration files; give at least two.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, env = "BSAM_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sharpness report for a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// 2-D loss slice around a checkpoint, as TSV.
    Slice {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Average squared gradient norm against horizon on a quadratic.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    parse_config_with(&read_text(path)?, overrides)
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { common, trace } => {
            let cfg = load(&common.config, &common.overrides)?;
            let out = out_dir(common.out, &cfg);
            for r in run::run_training(&cfg, &out, trace)? {
                let dir = run::seed_dir(&out, &cfg.train.run_id, r.seed);
                println!("seed {} -> {}", r.seed, dir.display());
            }
        }
        Command::Compare { configs, out, overrides } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, &overrides))
                .collect::<Result<Vec<_>>>()?;
            let out = out_dir(out, &cfgs[0]);
            run::compare(&cfgs, &out)?;
            println!("{}", out.join("compare.csv").display());
        }
        Command::Probe { common, checkpoint } => {
            let cfg = load(&common.config, &common.overrides)?;
            let ckpt = parse_checkpoint(&read_text(&checkpoint)?, &checkpoint)?;
            let report = run::probe_checkpoint(&cfg, &ckpt)?;
            let out = out_dir(common.out, &cfg);
            let path = out.join("report.txt");
            let text = report_text(&ckpt.run_id, ckpt.seed, cfg.opt.variant.as_str(), &report, &[]);
            write_file(&path, text.as_bytes())?;
            println!("{}", path.display());
        }
        Command::Slice { common, checkpoint } => {
            let cfg = load(&common.config, &common.overrides)?;
            let ckpt = parse_checkpoint(&read_text(&checkpoint)?, &checkpoint)?;
            let slice = run::emit_slice(&cfg, &ckpt)?;
            println!("{}", run::write_slice(&out_dir(common.out, &cfg), &slice)?.display());
        }
        Command::Convergence { common } => {
            let cfg = load(&common.config, &common.overrides)?;
            let r = run::convergence_check(&cfg)?;
            let out = out_dir(common.out, &cfg);
            write_file(&out.join("convergence.csv"), run::convergence_csv(&r).as_bytes())?;
            println!("slope = {}", r.slope);
        }
        Command::GenData { common } => {
            let cfg = load(&common.config, &common.overrides)?;
            println!("{}", run::gen_data(&cfg, &out_dir(common.out, &cfg))?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
