use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peftlab::gradcheck::tiny_config;
use peftlab::tensor::OpKind;
use peftlab_cli::{commands, config, CliError, Result};

#[derive(Parser)]
#[command(name = "peftlab", version, about = "Parameter-efficient cross-lingual transfer experiments")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset splits and a manifest.
    GenerateCorpus(Common),
    /// Train one run; writes checkpoint, freeze plan and metrics.csv.
    Train(Common),
    /// Score a trained run directory on dev and test.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-seed stability score.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// One training per pseudo-data ratio.
    AugmentSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Seeds to average; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare tape gradients of the full objective with finite differences.
    Gradcheck {
        /// Config with model_dim <= 16; a built-in tiny config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scale one op's backward rule by 1.01 (checker self-test).
        #[arg(long, hide = true)]
        fault_op: Option<String>,
    },
}

fn parse_fault(name: &str) -> Result<(OpKind, f64)> {
    let kind = match name {
        "layer_norm" => OpKind::LayerNorm,
        "softmax_rows" => OpKind::SoftmaxRows,
        "matmul" => OpKind::MatMul,
        "matmul_bt" => OpKind::MatMulBt,
        "relu" => OpKind::Relu,
        other => {
            return Err(peftlab::Error::Config(format!("unknown fault op `{other}`")).into());
        }
    };
    Ok((kind, 1.01))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCorpus(c) => {
            let cfg = config::load_config(c.config.as_deref())?;
            let m = commands::generate_corpus(&cfg, &c.out)?;
            log::info!(
                "wrote {} source / {} target-train examples to {}",
                m.sizes.source_train,
                m.sizes.target_train,
                c.out.display()
            );
        }
        Command::Train(c) => {
            let cfg = config::load_config(c.config.as_deref())?;
            let run = commands::train(&cfg, &c.out)?;
            let kind = cfg.data.kind;
            log::info!(
                "{}: dev {:.4} test {:.4}",
                cfg.run_id(),
                run.final_dev().primary(kind),
                run.test().primary(kind)
            );
        }
        Command::Evaluate { out } => {
            let report = commands::evaluate(&out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
        Command::Stability { common, seeds } => {
            let cfg = config::load_config(common.config.as_deref())?;
            let r = commands::stability(&cfg, &seeds, &common.out)?;
            log::info!("stability {:.4} (mean {:.4}, std {:.4})", r.score, r.mean, r.std);
        }
        Command::AugmentSweep {
            common,
            ratios,
            delta,
            seeds,
        } => {
            let cfg = config::load_config(common.config.as_deref())?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let points = commands::augment_sweep(&cfg, &ratios, delta, &seeds, &common.out)?;
            for p in points {
                log::info!("ratio {:.2}: {:.4}", p.ratio, p.metrics.primary(cfg.data.kind));
            }
        }
        Command::Gradcheck { config: path, fault_op } => {
            let cfg = match path {
                Some(p) => config::load_config(Some(&p))?,
                None => {
                    let mut c = tiny_config();
                    if let Some(seed) = config::load_config(None).ok().map(|d| d.seed) {
                        c.seed = seed;
                    }
                    c
                }
            };
            let fault = fault_op.as_deref().map(parse_fault).transpose()?;
            let report = commands::gradcheck(&cfg, fault)?;
            println!(
                "gradcheck ok: max relative error {:.3e} over {} elements ({} kinks skipped)",
                report.max_rel_error,
                report.elements(),
                report.kinks()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
