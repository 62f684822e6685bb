use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cianet::config::ExperimentConfig;
use cianet::data::corpus::read_manifest;
use cianet::data::{Corpus, Split};
use cianet::losses::{loss_cdf, NucleiLoss};
use cianet::metrics::{evaluate_corpus, MetricsReport};
use cianet::tensor::{nmap, Tensor};
use cianet::train::infer::{foreground_pixel_losses, infer_corpus, load_model};
use cianet::train::{evaluate_model, predict_instances, run_training_with, write_log_csv};

/// Contour-aware nuclei instance segmentation.
#[derive(Parser, Debug)]
#[command(name = "cianet", version)]
struct Cli {
    /// Experiment config (JSON); missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for corpus generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print per-epoch progress.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset: cianet, no-iam, bce, bootstrapped, truncated, smooth_truncated.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long)]
        no_iam: bool,
    },
    /// Write probability maps (NMAP) and 16-bit instance PNGs.
    Infer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions (or a checkpoint) against corpus labels.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory of `<id>.png` instance maps.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sorted cumulative distribution of per-pixel nuclei loss for a checkpoint.
    AnalyzeLoss {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        loss: LossArgs,
        /// Maximum CSV rows (evenly thinned).
        #[arg(long, default_value_t = 1000)]
        rows: usize,
    },
}

#[derive(Args, Debug)]
struct LossArgs {
    /// bce, bootstrapped, truncated or smooth_truncated.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
}

/// Usage problems map to exit 1, data problems to 2, numeric failures to 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cianet::Error>() {
        Some(cianet::Error::Config(_)) | None => 1,
        Some(cianet::Error::Numeric(_)) => 3,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        match part {
            "test" => out.extend([Split::TestSeen, Split::TestUnseen]),
            "all" => out.extend(Split::ALL),
            name => out.push(name.parse().map_err(|_| {
                cianet::Error::Config(format!(
                    "unknown split {name:?} (train, test-seen, test-unseen, test or all)"
                ))
            })?),
        }
    }
    out.dedup();
    Ok(out)
}

fn apply_loss(cfg: &mut ExperimentConfig, args: &LossArgs) -> Result<()> {
    if let Some(name) = &args.loss {
        cfg.train.loss.nuclei_loss = name.parse::<NucleiLoss>()?;
    }
    if let Some(g) = args.gamma {
        cfg.train.loss.gamma = g;
    }
    cfg.validate()?;
    Ok(())
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = out.join("metrics.csv");
    let mut f = std::fs::File::create(&csv).map_err(|e| cianet::Error::Io { path: csv.clone(), source: e })?;
    report.write_csv(&mut f).map_err(|e| cianet::Error::Io { path: csv, source: e })?;
    let json = out.join("metrics.json");
    std::fs::write(&json, cianet::canonical::canonical_json_pretty(&report.summary_json()))
        .map_err(|e| cianet::Error::Io { path: json, source: e })?;
    println!("{}", report.summary_json());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.corpus_seed = seed;
        cfg.train.seed = seed;
    }
    let expected_model = (cli.config.is_some() || !cli.overrides.is_empty()).then(|| cfg.train.model.clone());

    match cli.command {
        Command::Gen { out } => {
            let corpus = Corpus::generate(&cfg.corpus, cfg.corpus_seed)?;
            corpus.write(&out)?;
            println!(
                "wrote {} samples to {} (digest {})",
                corpus.manifest.samples.len(),
                out.display(),
                corpus.manifest.generator_digest
            );
        }
        Command::Train {
            corpus,
            out,
            preset,
            loss,
            no_iam,
        } => {
            if let Some(p) = preset {
                cfg = cfg.with_preset(&p)?;
            }
            if no_iam {
                cfg.train.model.use_iam = false;
            }
            apply_loss(&mut cfg, &loss)?;
            let corpus = Corpus::read(&corpus)?;
            let verbose = cli.verbose;
            let outcome = run_training_with(&cfg.train, &corpus, &cfg.post, Some(&out), &mut |s| {
                if verbose > 0 {
                    eprintln!(
                        "epoch {:>4}  loss {:.5}  skipped {}{}",
                        s.epoch,
                        s.mean_loss,
                        s.skipped_steps,
                        s.validation_aji.map(|a| format!("  val-aji {a:.4}")).unwrap_or_default()
                    );
                }
            })?;
            let first = outcome.log.first().map_or(f64::NAN, |r| r.loss);
            let last = outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            let skipped = outcome.log.iter().filter(|r| !r.accepted).count();
            println!(
                "trained {} steps ({skipped} skipped); first loss {first:.5}, last epoch mean {last:.5}; outputs in {}",
                outcome.log.len(),
                out.display()
            );
            if verbose > 1 {
                write_log_csv(&outcome.log, std::io::stderr().lock())?;
            }
        }
        Command::Infer {
            corpus,
            checkpoint,
            out,
            split,
        } => {
            let splits = parse_splits(&split)?;
            let corpus = Corpus::read(&corpus)?;
            let model = load_model(&checkpoint, expected_model.as_ref())?;
            let written = infer_corpus(&model, &corpus, &splits, &cfg.post, &cfg.eval, &out)?;
            for (entry, rec) in splits.iter().flat_map(|&s| corpus.split(s)) {
                let (_, pn, pc) = predict_instances(&model, &rec.image, &cfg.post, &cfg.eval)?;
                let maps = Tensor::stack(&[pn.to_tensor::<f32>(), pc.to_tensor()])?;
                let maps = Tensor::from_vec(
                    cianet::tensor::Shape::new(1, 2, pn.height(), pn.width()),
                    maps.into_data(),
                )?;
                nmap::save(&maps, &out.join(format!("{}.nmap", entry.id())))?;
            }
            println!("wrote {} instance maps and probability maps to {}", written.len(), out.display());
        }
        Command::Eval {
            corpus,
            pred,
            checkpoint,
            out,
            split,
        } => {
            let splits = parse_splits(&split)?;
            let report = match (pred, checkpoint) {
                (Some(pred), _) => {
                    let manifest = read_manifest(&corpus)?;
                    evaluate_corpus(&corpus, &pred, &manifest, &splits, cfg.eval.aji_variant)?
                }
                (None, Some(ckpt)) => {
                    let corpus = Corpus::read(&corpus)?;
                    let model = load_model(&ckpt, expected_model.as_ref())?;
                    evaluate_model(&model, &corpus, &splits, &cfg.post, &cfg.eval)?
                }
                (None, None) => bail!(cianet::Error::Config("eval needs --pred or --checkpoint".into())),
            };
            write_report(&report, &out)?;
            if !report.missing.is_empty() {
                let names: Vec<String> = report.missing.iter().map(|p| p.display().to_string()).collect();
                bail!(cianet::Error::Missing(PathBuf::from(names.join(", "))));
            }
        }
        Command::AnalyzeLoss {
            corpus,
            checkpoint,
            out,
            split,
            loss,
            rows,
        } => {
            apply_loss(&mut cfg, &loss)?;
            let splits = parse_splits(&split)?;
            let corpus = Corpus::read(&corpus)?;
            let model = load_model(&checkpoint, None)?;
            let losses =
                foreground_pixel_losses(&model, &corpus, &splits, &cfg.train.loss, cfg.train.contour_radius, &cfg.eval)?;
            let cdf = loss_cdf(&losses)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let name = serde_json::to_value(cfg.train.loss.nuclei_loss)?;
            let path = out.join(format!("loss_cdf_{}.csv", name.as_str().unwrap_or("loss")));
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| cianet::Error::Io { path: path.clone(), source: e })?,
            );
            cdf.write_csv(&mut f, rows)?;
            f.flush()?;
            println!(
                "{} pixels; top 10% carry {:.4} of the loss{}; curve in {}",
                losses.len(),
                cdf.top_share(0.1),
                if cdf.degenerate { " (all losses zero)" } else { "" },
                path.display()
            );
        }
    }
    Ok(())
}
