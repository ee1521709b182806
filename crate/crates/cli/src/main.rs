use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cfdseg::data::phantom::{make_phantom_cohort, PhantomConfig};
use cfdseg::metrics::{summary_table, write_metrics_csv};
use cfdseg::trainer::evaluate::{evaluate_directory, evaluate_with_threshold, write_subjects};
use cfdseg::trainer::plot::bar_plot;
use cfdseg::trainer::{prepare_split, run_ablation, train_on, AblationAxis, Checkpoint, ExperimentConfig, TrainOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfdseg", version, about = "Semi-supervised T1/FA segmentation with feature decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write logs, audits, plots and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on `<data>/<subject>/{t1,fa,label}.nii[.gz]`.
    /// Without `--data`, the held-out subjects of the checkpoint's own split are used.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Refuse the checkpoint unless it was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value along an ablation axis (M, thres, alpha_beta, components, input_combo).
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `1,3,5` or `model1,model2,model3,ours`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Write a synthetic phantom cohort as NIfTI volumes.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::from_toml_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, resume, stop_after } => {
            let cfg = load_config(Some(&config))?;
            let resume = resume.map(|p| Checkpoint::load(&p, Some(&cfg), false)).transpose()?;
            let split = prepare_split(&cfg)?;
            std::fs::create_dir_all(&out)?;
            split.write_manifest(&out.join("split.jsonl"))?;
            let outcome = train_on(&cfg, &split, &TrainOptions { output_dir: Some(out.clone()), resume, stop_after })?;
            let last = outcome.epochs.last();
            println!(
                "trained {} epochs; final total loss {}; checkpoint {}",
                outcome.checkpoint.epoch,
                last.map_or("n/a".into(), |e| format!("{:.5}", e.total)),
                out.join("checkpoint.json").display()
            );
        }
        Command::Evaluate { checkpoint, data, config, force, threshold, out } => {
            let expected = config.map(|p| load_config(Some(&p))).transpose()?;
            let ck = Checkpoint::load(&checkpoint, expected.as_ref(), force)?;
            let report = match (data, threshold) {
                (Some(dir), None) => evaluate_directory(&ck, &dir)?,
                (Some(_), Some(_)) => bail!("--threshold is only supported on the checkpoint's own test split"),
                (None, t) => {
                    let split = prepare_split(&ck.config)?;
                    evaluate_with_threshold(&ck, &split.test, t.unwrap_or(ck.config.binarize_threshold))
                }
            };
            for (subject, reason) in &report.failures {
                eprintln!("failed {subject}: {reason}");
            }
            println!("{}", summary_table(&[("checkpoint".into(), report.results.clone())]));
            for r in &report.results {
                println!("{}: DSC {:.4} HD95 {:.3} ASD {:.3}", r.subject, r.dsc, r.hd95, r.asd);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_metrics_csv(&dir.join("metrics.csv"), &report.results)?;
                bar_plot(&dir.join("dsc.png"), &report.results.iter().map(|r| r.dsc).collect::<Vec<_>>())?;
            }
            if report.results.is_empty() {
                bail!("no subject could be evaluated");
            }
        }
        Command::Ablate { axis, values, config, out } => {
            let axis: AblationAxis = axis.parse()?;
            if values.is_empty() {
                bail!("--values is empty");
            }
            let cfg = load_config(config.as_ref())?;
            std::fs::create_dir_all(&out)?;
            let table = run_ablation(&cfg, axis, &values, Some(&out))?;
            println!("{}", table.render());
        }
        Command::Phantom { out, subjects, seed } => {
            let cohort = make_phantom_cohort(subjects, &PhantomConfig::default(), seed)?;
            write_subjects(&out, &cohort)?;
            println!("wrote {} subjects to {}", cohort.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
