use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gliomaseg::cli;
use gliomaseg::config::{RunConfig, DATA_ROOT_ENV};
use gliomaseg::phantoms::PhantomSpec;
use gliomaseg::training::format_log_row;
use gliomaseg::triplanar::Plane;

/// Triplanar glioma segmentation and survival regression.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set segmentation.axial.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel per-case workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Clip, normalize and crop raw cases.
    Preprocess { cases: Vec<String> },
    /// Train one planar segmentation model.
    TrainSeg {
        #[arg(long)]
        plane: Plane,
        /// Continue from the plane's existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) after this iteration.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train the survival feature heads and regressor.
    TrainSurv,
    /// Segment preprocessed cases with the trained planar models.
    Infer {
        cases: Vec<String>,
        /// Fuse only these planes.
        #[arg(long, value_delimiter = ',')]
        planes: Vec<Plane>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// Write a FLAIR overlay per case for each listed plane.
        #[arg(long, value_delimiter = ',')]
        overlay: Vec<Plane>,
    },
    /// Predict survival days.
    PredictSurv {
        cases: Vec<String>,
        /// Also score against known survival days.
        #[arg(long)]
        evaluate: bool,
    },
    /// Write synthetic phantom cases in the BraTS layout.
    MakePhantoms {
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Destination; defaults to the configured data root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> gliomaseg::Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    let quote = |p: &PathBuf| format!("{:?}", p.to_string_lossy());
    if let Some(p) = &common.data_root {
        overrides.push(format!("data_root={}", quote(p)));
    }
    if let Some(p) = &common.output_dir {
        overrides.push(format!("output_dir={}", quote(p)));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    overrides.extend(extra);
    let env = std::env::var(DATA_ROOT_ENV).ok();
    RunConfig::resolve(common.config.as_deref(), env.as_deref(), &overrides)
}

fn run(cli: Cli) -> gliomaseg::Result<bool> {
    let extra = match &cli.command {
        Command::Infer { planes, .. } if !planes.is_empty() => {
            let list: Vec<String> = planes.iter().map(|p| format!("{:?}", p.name())).collect();
            vec![format!("inference.planes=[{}]", list.join(","))]
        }
        _ => Vec::new(),
    };
    let cfg = resolve(&cli.common, extra)?;
    match cli.command {
        Command::Preprocess { cases } => {
            let out = cli::cmd_preprocess(&cfg, &cases)?;
            println!(
                "preprocessed {} cases, {} up to date",
                out.written.len(),
                out.skipped.len()
            );
        }
        Command::TrainSeg {
            plane,
            resume,
            stop_after,
        } => {
            let out = cli::cmd_train_seg(&cfg, plane, resume, stop_after)?;
            if let Some(last) = out.log.last() {
                println!("{plane}: {}", format_log_row(last));
            }
        }
        Command::TrainSurv => {
            let r = cli::cmd_train_surv(&cfg)?;
            println!(
                "train mse {:.1} spearman {:.3} acc {:.3} | held-out mse {:.1} spearman {:.3} acc {:.3}",
                r.train.mse, r.train.spearman_r, r.train.accuracy, r.test.mse, r.test.spearman_r, r.test.accuracy
            );
        }
        Command::Infer { cases, .. } => {
            for p in cli::cmd_infer(&cfg, &cases)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            pred_dir,
            gt_dir,
            overlay,
        } => {
            let pred = pred_dir.unwrap_or_else(|| cfg.layout().predictions());
            let gt = gt_dir.unwrap_or_else(|| cfg.data_root.clone());
            let out = cli::cmd_evaluate(&cfg, &pred, &gt, &overlay)?;
            print!("{}", gliomaseg::report::format_summary(&out.summary));
        }
        Command::PredictSurv { cases, evaluate } => {
            let out = cli::cmd_predict_surv(&cfg, &cases, evaluate)?;
            for r in &out.rows {
                match (&r.predicted_days, &r.error) {
                    (Some(d), _) => println!(
                        "{}\t{d:.1}\t{}",
                        r.case_id,
                        r.class.map(|c| c.to_string()).unwrap_or_default()
                    ),
                    (None, Some(e)) => eprintln!("{}: {e}", r.case_id),
                    (None, None) => {}
                }
            }
            if let Some(m) = out.metrics {
                println!(
                    "mse {:.1} spearman {:.3} accuracy {:.3}",
                    m.mse, m.spearman_r, m.accuracy
                );
            }
            return Ok(out.all_ok());
        }
        Command::MakePhantoms { count, out } => {
            let root = out.unwrap_or_else(|| cfg.data_root.clone());
            let spec = PhantomSpec {
                seed: cfg.seed,
                ..Default::default()
            };
            let ids = cli::cmd_make_phantoms(&root, count, &spec)?;
            println!("wrote {} phantoms to {}", ids.len(), root.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
