use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use comen_core::data::{
    generate_benchmark, leave_one_domain_out, read_bundle, write_bundle, BenchmarkSpec, ImageShape,
};
use comen_core::pipeline::batch::gather_rows;
use comen_core::pipeline::report::{self, MetricsRecord};
use comen_core::pipeline::run::stage1_quality;
use comen_core::pipeline::train::{self, random_domain_assignments, Stage2Inputs};
use comen_core::pipeline::{
    evaluate, latent_domains, run_ablation, Checkpoint, Switches, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "comen",
    version,
    about = "Compound domain generalization on a synthetic multi-domain benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark bundle.
    Generate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_cell: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover latent domains and write the stage-1 checkpoint and assignments.
    TrainStage1 {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_assignments: PathBuf,
        /// Directory for loss and entropy curves.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train with prototype losses on frozen stage-1 assignments.
    TrainStage2 {
        #[command(flatten)]
        fold: FoldArgs,
        /// Stage-1 checkpoint; required when normalization is domain-specific.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out domain.
    Evaluate {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the eight-row component ablation over all folds and seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed list; may be repeated.
        #[arg(long)]
        seed: Vec<u64>,
        /// Restrict to these rows, by label (e.g. `deepall,sdnorm+protogr+protoccl`).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize a metrics file written by `ablate` or `evaluate`.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    held_out: usize,
    /// Seed for the split and training; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl FoldArgs {
    fn config(&self) -> Result<TrainConfig> {
        load_config(self.config.as_deref())
    }

    fn seed(&self, cfg: &TrainConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds.0[0])
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn write_curves(dir: &Path, name: &str, log: &[train::EpochLog]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let loss: Vec<f64> = log.iter().map(|e| e.loss).collect();
    report::write_curve_csv(&loss, dir.join(format!("{name}_loss.csv")))?;
    let ent: Vec<f64> = log.iter().map(|e| e.entropy).collect();
    report::write_curve_csv(&ent, dir.join(format!("{name}_entropy.csv")))?;
    let val: Vec<f64> = log.iter().map(|e| e.val_accuracy).collect();
    report::write_curve_csv(&val, dir.join(format!("{name}_val_accuracy.csv")))?;
    Ok(())
}

fn fold_tag(ck: &mut Checkpoint, held_out: usize, seed: u64, stage: &str) {
    ck.extra.insert("held_out".into(), held_out.to_string());
    ck.extra.insert("seed".into(), seed.to_string());
    ck.extra.insert("stage".into(), stage.into());
}

fn check_fold(ck: &Checkpoint, held_out: usize, seed: u64) -> Result<()> {
    for (key, want) in [
        ("held_out", held_out.to_string()),
        ("seed", seed.to_string()),
    ] {
        if let Some(v) = ck.extra.get(key) {
            if *v != want {
                bail!("checkpoint was trained with {key}={v}, but {key}={want} was requested");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            seed,
            domains,
            classes,
            per_cell,
            channels,
            size,
            out,
        } => {
            let spec = BenchmarkSpec {
                seed,
                domains,
                classes,
                per_cell,
                shape: ImageShape::new(channels, size, size),
            };
            let bundle = generate_benchmark(&spec)?;
            write_bundle(&bundle, &out)?;
            println!(
                "wrote {} samples ({domains} domains, {classes} classes) to {}",
                bundle.len(),
                out.display()
            );
        }
        Command::TrainStage1 {
            fold,
            out_checkpoint,
            out_assignments,
            out_dir,
        } => {
            let cfg = fold.config()?;
            let seed = fold.seed(&cfg);
            let bundle = read_bundle(&fold.data)?;
            let split = leave_one_domain_out(&bundle, fold.held_out, seed)?;
            let domains = latent_domains(&bundle, &cfg);
            let s1 =
                train::train_stage1(&split, bundle.shape, bundle.classes, domains, &cfg, seed)?;
            let (boot, frozen) = stage1_quality(&bundle, &split, &s1)?;
            let mut ck = Checkpoint::new(s1.model.clone());
            fold_tag(&mut ck, fold.held_out, seed, "stage1");
            ck.save(&out_checkpoint)?;
            report::write_assignments(&s1.assignments, &out_assignments)?;
            if let Some(dir) = out_dir {
                write_curves(&dir, "stage1", &s1.log)?;
            }
            println!(
                "stage 1: predictor fit {:.3}, bootstrap matched accuracy {:.3} (NMI {:.3}), assignment matched accuracy {:.3} (NMI {:.3})",
                s1.pretrain_fit, boot.matched_accuracy, boot.nmi, frozen.matched_accuracy, frozen.nmi
            );
        }
        Command::TrainStage2 {
            fold,
            checkpoint,
            assignments,
            out_checkpoint,
            out_dir,
        } => {
            let cfg = fold.config()?;
            let seed = fold.seed(&cfg);
            let bundle = read_bundle(&fold.data)?;
            let split = leave_one_domain_out(&bundle, fold.held_out, seed)?;
            let domains = latent_domains(&bundle, &cfg);
            let n_train = split.train.len();
            let inputs = if cfg.switches.sdnorm {
                let (Some(ckp), Some(ap)) = (checkpoint, assignments) else {
                    bail!("domain-specific normalization needs --checkpoint and --assignments from train-stage1");
                };
                let ck = Checkpoint::load(&ckp)?;
                check_fold(&ck, fold.held_out, seed)?;
                let all = report::read_assignments(&ap)?;
                if all.shape()[0] != split.source().count() {
                    bail!(
                        "assignment file has {} rows, the fold has {} source samples",
                        all.shape()[0],
                        split.source().count()
                    );
                }
                let rows: Vec<usize> = (0..n_train).collect();
                let p = gather_rows(&all, &rows);
                Stage2Inputs {
                    model: ck.model,
                    norm_assignments: Some(p.clone()),
                    proto_assignments: p,
                }
            } else {
                Stage2Inputs {
                    model: train::new_model(bundle.shape, bundle.classes, 1, &cfg, seed)?,
                    norm_assignments: None,
                    proto_assignments: random_domain_assignments(n_train, domains, seed),
                }
            };
            let s2 = train::train_stage2(inputs, &split, bundle.shape, bundle.classes, &cfg, seed)?;
            let mut ck = Checkpoint::new(s2.model);
            fold_tag(&mut ck, fold.held_out, seed, "stage2");
            ck.save(&out_checkpoint)?;
            if let Some(dir) = out_dir {
                write_curves(&dir, "stage2", &s2.log)?;
            }
            println!(
                "stage 2: best validation accuracy {:.4} at epoch {}",
                s2.log[s2.best_epoch].val_accuracy, s2.best_epoch
            );
        }
        Command::Evaluate {
            fold,
            checkpoint,
            out_dir,
        } => {
            let cfg = fold.config()?;
            let seed = fold.seed(&cfg);
            let bundle = read_bundle(&fold.data)?;
            let split = leave_one_domain_out(&bundle, fold.held_out, seed)?;
            let ck = Checkpoint::load(&checkpoint)?;
            check_fold(&ck, fold.held_out, seed)?;
            let metrics = evaluate(&ck.model, &split.test, bundle.shape, bundle.classes)?;
            fs::create_dir_all(&out_dir)?;
            let switches = Switches {
                sdnorm: ck.model.predictor.is_some(),
                protogr: ck.model.protogr.is_some(),
                protoccl: cfg.switches.protoccl && ck.model.bank.is_some(),
            };
            let record = MetricsRecord {
                config: switches.label(),
                seed,
                held_out: fold.held_out,
                accuracy: metrics.accuracy,
                best_epoch: 0,
                bootstrap_nmi: None,
                bootstrap_matched_accuracy: None,
                assignment_nmi: None,
                assignment_matched_accuracy: None,
            };
            report::write_jsonl(&[record], out_dir.join("metrics.jsonl"))?;
            report::write_confusion_csv(
                &metrics.confusion,
                out_dir.join(format!("confusion_fold{}.csv", fold.held_out)),
            )?;
            println!(
                "held-out domain {}: accuracy {:.4}",
                fold.held_out, metrics.accuracy
            );
        }
        Command::Ablate {
            data,
            config,
            seed,
            rows,
            out_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if !seed.is_empty() {
                cfg.seeds.0 = seed;
            }
            let bundle = read_bundle(&data)?;
            let mut grid = Switches::grid();
            if !rows.is_empty() {
                grid.retain(|s| rows.contains(&s.label()));
                if grid.is_empty() {
                    bail!("no ablation row matches {rows:?}");
                }
            }
            let report = run_ablation(&bundle, &cfg, &grid)?;
            report::write_ablation(&report, &out_dir)?;
            print!("{}", report::ablation_table(&report));
            println!("finished in {:.1}s", report.elapsed.as_secs_f64());
        }
        Command::Report { metrics, out } => {
            let records: Vec<MetricsRecord> = report::read_jsonl(&metrics)?;
            let summary = report::summarize(&records);
            match out {
                Some(path) => fs::write(path, &summary)?,
                None => print!("{summary}"),
            }
        }
    }
    Ok(())
}
