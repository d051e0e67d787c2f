use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use svpipe::config::Config;
use svpipe::pipeline::Settings;
use svpipe::stages::{self, Context, System};
use svpipe::{Error, Result};

#[derive(Parser)]
#[command(name = "svpipe", version, about = "Speaker verification pipeline")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides a configuration key, e.g. --set ubm.components=16.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and the dev/eval trial lists.
    SynthData,
    /// Diagonal GMM-UBM on frames of the train split.
    TrainUbm,
    /// UBM statistics of every utterance.
    ExtractStats,
    /// Total-variability matrix.
    TrainTv,
    /// Raw i-vectors of every split and the LDA transform.
    ExtractIvec,
    /// Two-covariance PLDA on train i-vectors.
    TrainPlda,
    /// Discriminative PLDA initialized from PLDA, L2 weight picked on dev.
    TrainDplda,
    /// Frame-to-posterior network mimicking the UBM.
    TrainF2s,
    /// Supervector-to-i-vector network.
    TrainS2i,
    /// PCA of the MAP supervectors.
    FitPca,
    /// Joint s2i and DPLDA training of the assembled system.
    TrainJoint,
    /// Training of all modules through the statistics layer.
    TrainE2e,
    /// Scores a trial list with plda, dplda, joint or e2e.
    Score {
        #[arg(long, value_parser = parse_system)]
        system: System,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER, minimum DCFs and C_primary of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Text report path; the key-value form goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_system(s: &str) -> std::result::Result<System, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim());
    }
    if config.raw("seed").is_none() {
        config.set("seed", cli.seed);
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = load_config(&cli)?;
    let seed = config.get("seed", cli.seed)?;
    let ctx = Context::new(Settings::from_config(&config)?, seed);
    match &cli.command {
        Command::SynthData => {
            stages::synth_data(&ctx)?;
        }
        Command::TrainUbm => {
            stages::train_ubm_stage(&ctx)?;
        }
        Command::ExtractStats => stages::extract_stats_stage(&ctx)?,
        Command::TrainTv => {
            stages::train_tv_stage(&ctx)?;
        }
        Command::ExtractIvec => {
            stages::extract_ivec_stage(&ctx)?;
        }
        Command::TrainPlda => {
            stages::train_plda_stage(&ctx)?;
        }
        Command::TrainDplda => {
            stages::train_dplda_stage(&ctx)?;
        }
        Command::TrainF2s => {
            stages::train_f2s_stage(&ctx)?;
        }
        Command::TrainS2i => {
            stages::train_s2i_stage(&ctx)?;
        }
        Command::FitPca => {
            stages::fit_pca_stage(&ctx)?;
        }
        Command::TrainJoint | Command::TrainE2e => {
            let out = if matches!(cli.command, Command::TrainJoint) {
                stages::train_joint_stage(&ctx)?
            } else {
                stages::train_e2e_stage(&ctx)?
            };
            println!("epoch\ttrain_loss\tdev_eer\tdev_c_primary\tlr");
            for l in &out.logs {
                println!("{l}");
            }
            println!("best epoch {}", out.best_epoch);
        }
        Command::Score {
            system,
            trials,
            out,
        } => {
            stages::score_stage(&ctx, *system, trials, out.as_deref())?;
        }
        Command::Eval {
            scores,
            trials,
            out,
        } => {
            let report = stages::eval_stage(scores, trials, out.as_deref())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
