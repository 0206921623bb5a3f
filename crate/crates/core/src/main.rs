use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wsaflow::commands;
use wsaflow::config::RunConfig;
use wsaflow::flownet::ModelConfig;

#[derive(Parser)]
#[command(name = "wsaflow", version, about = "Point-cloud scene flow with weight-sharing upsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rigid scenes as WSAF samples plus a manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        /// Scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model, writing train.log and checkpoints into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sample files or directories; overrides train.data in the config.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print EPE3D, Acc3DS, Acc3DR and Outliers3D of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
    },
    /// Predict the flow between two clouds (WSAF samples or PLY files).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// WSAF file whose flow field holds the prediction.
        #[arg(long)]
        out_flow: Option<PathBuf>,
        /// Coloured PLY: source in blue, warped points green when accurate, red otherwise.
        #[arg(long)]
        out_ply: Option<PathBuf>,
    },
    /// Check the rigidity identity of shared aggregation weights.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shift the claimed centre by x,y,z; the residual must equal ‖(R - I) e‖.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, value_name = "X,Y,Z")]
        violate_barycentric: Option<Vec<f64>>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Preset::Tiny)]
        preset: Preset,
        /// Random inputs per operation.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the four module variants with one budget and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-variant training logs and checkpoints.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
}

fn run(cli: Cli) -> wsaflow::Result<bool> {
    match cli.command {
        Command::Gen {
            config,
            out_dir,
            count,
            seed,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let paths = commands::generate(&cfg.scene, &out_dir, count, seed)?;
            println!("wrote {} samples to {}", paths.len(), out_dir.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let logs = commands::train_run(&cfg, &data, &out, resume.as_deref())?;
            if let Some(last) = logs.last() {
                println!("{}\n{last}", wsaflow::trainer::EpochLog::HEADER);
            }
        }
        Command::Eval { ckpt, data } => print!("{}", commands::eval(&ckpt, &data)?),
        Command::Infer {
            ckpt,
            src,
            tgt,
            out_flow,
            out_ply,
        } => {
            let r = commands::infer(&ckpt, &src, &tgt, out_flow.as_deref(), out_ply.as_deref())?;
            match r.metrics {
                Some(m) => println!("{}\n{}", commands::metric_header(), commands::metric_row(&m)),
                None => println!("predicted {} flow vectors", r.flow.len()),
            }
        }
        Command::Verify {
            trials,
            seed,
            violate_barycentric,
        } => {
            if trials == 0 {
                return Err(wsaflow::Error::Argument("--trials must be at least 1".into()));
            }
            let e = match violate_barycentric.as_deref() {
                None => None,
                Some(&[x, y, z]) => Some([x, y, z]),
                Some(v) => {
                    return Err(wsaflow::Error::Argument(format!(
                        "--violate-barycentric takes 3 components, got {}",
                        v.len()
                    )))
                }
            };
            let r = wsaflow::checks::rigidity_suite(trials, seed, e)?;
            print!("{}", commands::verify_report(&r));
            return Ok(r.max_residual < wsaflow::checks::RIGIDITY_TOLERANCE);
        }
        Command::Gradcheck { preset, trials, seed } => {
            let model = match preset {
                Preset::Tiny => ModelConfig::tiny(),
            };
            let r = commands::gradcheck(&model, trials, seed)?;
            print!("{}", r.report());
            return Ok(r.passed());
        }
        Command::Ablate { config, log_dir } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let r = commands::ablate(&cfg, log_dir.as_deref())?;
            log::info!("zero-flow baseline {}", commands::metric_row(&r.baseline));
            print!("{}", r.table());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
