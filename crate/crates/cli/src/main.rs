//! `jcas`: train, evaluate and tabulate the joint communication and sensing link.

mod baseline;
mod config;
mod eval;
mod figure;
mod output;
mod train;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use baseline::{Baseline, BaselineArgs};
use config::{Overrides, Preset};
use eval::{EvalArgs, TargetMode};
use figure::FigureArgs;
use output::resolve_out_dir;
use train::TrainArgs;

#[derive(Parser)]
#[command(name = "jcas", version, about = "Learned joint communication and sensing: training, sweeps and CSV tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train, fine-tune and limit from a TOML config; writes a checkpoint and loss tables.
    Train(TrainCmd),
    /// Sweep one axis for a trained checkpoint, with classical baselines on the same draws.
    Eval(EvalCmd),
    /// Tables behind a figure: beam, tradeoff, kurtosis or constellation.
    Figure(FigureCmd),
    /// Classical references without a trained model: crb, esprit or np.
    Baseline(BaselineCmd),
}

#[derive(Args)]
struct TrainCmd {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory [default: config output_dir, then $JCAS_OUT_DIR, then ./jcas-out].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sensing weight in [0, 1].
    #[arg(long)]
    sensing_weight: Option<f64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Divides the training budgets of the preset.
    #[arg(long)]
    divisor: Option<u64>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// snr_c, snr_s or n_win.
    #[arg(long)]
    axis: String,
    /// start:stop:step, a comma list, or empty.
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    /// Windows per grid point.
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    /// Fixed communication SNR in dB; drawn from the scenario if absent.
    #[arg(long, allow_hyphen_values = true)]
    snr_c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    snr_s: Option<f64>,
    #[arg(long)]
    n_win: Option<usize>,
    #[arg(long, value_enum, default_value_t = TargetMode::Random)]
    target: TargetMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV [default: <out dir>/eval_<axis>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accept a checkpoint whose training did not finish.
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Args)]
struct FigureCmd {
    name: String,
    /// Repeat for several checkpoints.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Output directory [default: $JCAS_OUT_DIR, then ./jcas-out].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Windows per evaluated point.
    #[arg(long, default_value_t = 20_000)]
    trials: usize,
    #[arg(long, default_value_t = 20.8, allow_hyphen_values = true)]
    snr_c: f64,
    #[arg(long, default_value_t = 2.6, allow_hyphen_values = true)]
    snr_s: f64,
    #[arg(long, default_value_t = 1)]
    n_win: usize,
    /// Communication SNR grid for per-UE BER of a multi-user checkpoint.
    #[arg(long, default_value = "0:30:1", allow_hyphen_values = true)]
    ber_grid: String,
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Args)]
struct BaselineCmd {
    #[arg(value_enum)]
    which: Baseline,
    #[arg(long, default_value_t = 16)]
    antennas: usize,
    #[arg(long, default_value_t = 1)]
    n_win: usize,
    #[arg(long, default_value = "-10:20:1", allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0.01)]
    false_alarm: f64,
    /// Target angle interval in degrees.
    #[arg(long, num_args = 2, default_values_t = [-20.0, 20.0], allow_hyphen_values = true)]
    angle: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV [default: <out dir>/baseline_<name>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(c) => {
            train::run(TrainArgs {
                config: c.config,
                out: c.out,
                overrides: Overrides {
                    seed: c.seed,
                    sensing_weight: c.sensing_weight,
                    preset: c.preset,
                    divisor: c.divisor,
                    output_dir: None,
                },
            })?;
        }
        Command::Eval(c) => {
            let out = c
                .out
                .unwrap_or_else(|| resolve_out_dir(None, None).join(format!("eval_{}.csv", c.axis)));
            eval::run(&EvalArgs {
                checkpoint: c.checkpoint,
                axis: c.axis,
                grid: c.grid,
                trials: c.trials,
                snr_c_db: c.snr_c,
                snr_s_db: c.snr_s,
                window: c.n_win,
                target: c.target,
                seed: c.seed,
                out,
                allow_partial: c.allow_partial,
            })?;
        }
        Command::Figure(c) => {
            figure::run(&FigureArgs {
                name: c.name,
                checkpoints: c.checkpoints,
                out_dir: resolve_out_dir(c.out.as_deref(), None),
                seed: c.seed,
                trials: c.trials,
                snr_c_db: c.snr_c,
                snr_s_db: c.snr_s,
                window: c.n_win,
                ber_grid: c.ber_grid,
                allow_partial: c.allow_partial,
            })?;
        }
        Command::Baseline(c) => {
            let name = format!("{:?}", c.which).to_lowercase();
            let out = c
                .out
                .unwrap_or_else(|| resolve_out_dir(None, None).join(format!("baseline_{name}.csv")));
            baseline::run(&BaselineArgs {
                which: c.which,
                antennas: c.antennas,
                window: c.n_win,
                grid: c.grid,
                trials: c.trials,
                false_alarm: c.false_alarm,
                angle_deg: [c.angle[0], c.angle[1]],
                seed: c.seed,
                out,
            })?;
        }
    }
    Ok(())
}
