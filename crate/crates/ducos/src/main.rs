use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ducos::error::{AppError, Result};
use ducos::eval::EvalSpec;
use ducos::runconfig::RunConfig;
use ducos::{export, run};
use ducos_core::scene::Regime;

#[derive(Parser)]
#[command(name = "ducos", about = "Depth super-resolution toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with a checksummed manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Scene resolution as HxW, e.g. 56x56.
        #[arg(long, default_value = "56x56")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint over a scale/regime grid.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated upsampling factors, e.g. 2,4.
        #[arg(long, default_value = "2,4")]
        scales: String,
        /// Comma-separated regimes out of {clean, noisy}.
        #[arg(long, default_value = "clean,noisy")]
        regimes: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value = "56x56")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV destination.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Directory for per-sample 8-bit error maps.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Pack raw prompt arrays into DPF prompt files.
    ExportPrompts {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| AppError::Config(format!("size must be HxW, got {s:?}")))?;
    let parse = |t: &str| -> Result<usize> {
        t.trim()
            .parse()
            .map_err(|_| AppError::Config(format!("bad size component {t:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn parse_scales(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| AppError::Config(format!("bad scale {t:?}")))
        })
        .collect()
}

fn parse_regimes(s: &str) -> Result<Vec<Regime>> {
    s.split(',')
        .map(|t| match t.trim() {
            "clean" => Ok(Regime::Clean),
            "noisy" => Ok(Regime::Noisy),
            other => Err(AppError::Config(format!(
                "regime must be clean or noisy, got {other:?}"
            ))),
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, n, size, seed } => {
            let (h, w) = parse_size(&size)?;
            run::run_gen(&out, n, h, w, seed)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let art = run::run_training(&cfg)?;
            let last = art.history.last().expect("nonempty history");
            println!(
                "trained {} epochs: l_rec {:.6}, lambda {:.6}, mu {:.6}",
                art.history.len(),
                last.l_rec,
                last.lambda,
                last.mu
            );
            println!("checkpoint: {}", art.checkpoint.display());
            println!("history: {}", art.history_csv.display());
        }
        Command::Eval {
            ckpt,
            scales,
            regimes,
            n,
            size,
            seed,
            out,
            error_maps,
        } => {
            let (h, w) = parse_size(&size)?;
            let mut spec = EvalSpec::new(n, h, w, seed);
            spec.scales = parse_scales(&scales)?;
            spec.regimes = parse_regimes(&regimes)?;
            let rows = run::run_eval(&ckpt, &spec, &out, error_maps.as_deref())?;
            for r in &rows {
                println!(
                    "x{} {}: rmse {:.4} mae {:.4}",
                    r.scale, r.regime, r.report.rmse, r.report.mae
                );
            }
            println!("metrics: {}", out.display());
        }
        Command::ExportPrompts { raw, out } => {
            let n = export::export_prompts(&raw, &out)?;
            println!("exported {n} prompt files to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ducos: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
