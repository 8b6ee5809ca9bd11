use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevnet::commands::{self, EvalInputs, Protocol, TrainPaths};
use bevnet::config::RunConfig;
use bevnet::{verify, Error};

#[derive(Parser)]
#[command(name = "bevnet", version, about = "BEV local features, overlap estimation, registration and loop closure")]
struct Cli {
    /// TOML configuration file; defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Root seed; every section seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `section.key=value` overrides, applied in order.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate scans and a pair manifest (`train`, `test`) or a loop sequence (`loop`).
    Gen {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every pair of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Continue from this checkpoint, appending to the log.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Register scan Q onto scan P.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        p: PathBuf,
        q: PathBuf,
        /// Select keypoints from every cell instead of the predicted overlap.
        #[arg(long)]
        no_overlap_filter: bool,
        /// Ground truth as 12 row-major values of the 3×4 matrix mapping Q into P.
        #[arg(long, num_args = 12, allow_negative_numbers = true)]
        gt: Option<Vec<f64>>,
    },
    /// Evaluate a checkpoint under one protocol.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pair manifest, or a sequence directory for `loopclosure`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Inject ground-truth overlap and transforms instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the property suites.
    Verify {
        #[arg(long, hide = true)]
        inject_conv_grad_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    for o in &cli.overrides {
        cfg = commands::apply_override(&cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml_string()),
        Command::Gen { split, out } => {
            let path = commands::cmd_gen(&cfg, split, out)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            manifest,
            checkpoint,
            log,
            resume,
        } => {
            let paths = TrainPaths {
                log: log.clone(),
                checkpoint: checkpoint.clone(),
                resume: resume.clone(),
            };
            let s = commands::cmd_train(&cfg, manifest, &paths)?;
            if let (Some(a), Some(b)) = (s.first, s.last) {
                println!("steps {}..{}: total {:.6} -> {:.6}", s.start, s.end, a.total, b.total);
            }
            println!("checkpoint {}", checkpoint.display());
        }
        Command::Register {
            checkpoint,
            p,
            q,
            no_overlap_filter,
            gt,
        } => {
            let gt = match gt {
                Some(v) => Some(bevnet::bev::RigidTransform::from_row_major(&v[..].try_into().expect("12 values"))?),
                None => None,
            };
            let r = commands::cmd_register(&cfg, checkpoint, p, q, !no_overlap_filter)?;
            print!("{}", commands::registration_report(&r, gt.as_ref()));
            if !r.result.success {
                eprintln!("registration failed");
                return Ok(3);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            out,
            oracle,
        } => {
            let inputs = EvalInputs {
                checkpoint: checkpoint.clone(),
                data: data.clone(),
                protocol: protocol.parse::<Protocol>()?,
                out: out.clone(),
                oracle: *oracle,
            };
            print!("{}", commands::cmd_eval(&cfg, &inputs)?);
        }
        Command::Verify { inject_conv_grad_fault } => {
            let reports = verify::run_all(&cfg, *inject_conv_grad_fault)?;
            let mut ok = true;
            for r in &reports {
                println!("{}", r.line());
                ok &= r.passed;
            }
            if !ok {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
