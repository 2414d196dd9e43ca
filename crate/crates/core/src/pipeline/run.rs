//! Leave-one-domain-out runs, evaluation and the component ablation grid.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::{Switches, TrainConfig};
use super::train::{
    new_model, predict_classes, random_domain_assignments, train_stage1, train_stage2, EpochLog,
    Stage1Result, Stage2Inputs,
};
use crate::data::{leave_one_domain_out, DatasetBundle, FoldSplit, ImageShape, LabeledImage};
use crate::error::Result;
use crate::metrics::{argmax, matched_accuracy, nmi, ConfusionMatrix};
use crate::model::Model;

/// Test-domain metrics of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Accuracy and confusion matrix on `test` with inference-mode
/// normalization.
pub fn evaluate(
    model: &Model,
    test: &[LabeledImage],
    shape: ImageShape,
    classes: usize,
) -> Result<FoldMetrics> {
    let predicted = predict_classes(model, test, shape)?;
    let truth: Vec<usize> = test.iter().map(|s| s.class_label).collect();
    let confusion = ConfusionMatrix::from_predictions(classes, &truth, &predicted)?;
    Ok(FoldMetrics {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Recovered-domain quality against the hidden domain ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryQuality {
    pub nmi: f64,
    pub matched_accuracy: f64,
}

pub fn discovery_quality(truth: &[usize], recovered: &[usize]) -> Result<DiscoveryQuality> {
    Ok(DiscoveryQuality {
        nmi: nmi(truth, recovered),
        matched_accuracy: matched_accuracy(truth, recovered)?,
    })
}

/// Quality of the bootstrap clusters and of the frozen stage-1 assignments.
/// Reads hidden domain ids; evaluation only.
pub fn stage1_quality(
    bundle: &DatasetBundle,
    split: &FoldSplit,
    stage1: &Stage1Result,
) -> Result<(DiscoveryQuality, DiscoveryQuality)> {
    let train_idx: Vec<usize> = split.train.iter().map(|s| s.index).collect();
    let bootstrap = discovery_quality(&bundle.true_domains(&train_idx), &stage1.pseudo_labels)?;
    let a = &stage1.assignments;
    let recovered: Vec<usize> = (0..a.shape()[0]).map(|i| argmax(a.row(i))).collect();
    let frozen = discovery_quality(&bundle.true_domains(&split.source_indices()), &recovered)?;
    Ok((bootstrap, frozen))
}

/// Latent domain count for a bundle: configured, else the source-domain count.
pub fn latent_domains(bundle: &DatasetBundle, cfg: &TrainConfig) -> usize {
    cfg.model
        .domains
        .unwrap_or(bundle.domains.saturating_sub(1).max(1))
}

/// Everything produced by one (configuration, seed, fold) run.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub switches: Switches,
    pub seed: u64,
    pub held_out: usize,
    pub metrics: FoldMetrics,
    pub best_epoch: usize,
    pub stage1_log: Vec<EpochLog>,
    pub stage2_log: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    pub bootstrap_quality: Option<DiscoveryQuality>,
    pub assignment_quality: Option<DiscoveryQuality>,
    pub model: Model,
}

/// Trains and evaluates one fold under `cfg.switches`. A stage-1 result for
/// the same split and seed may be supplied to skip discovery.
pub fn run_fold(
    bundle: &DatasetBundle,
    split: &FoldSplit,
    seed: u64,
    cfg: &TrainConfig,
    stage1: Option<&Stage1Result>,
) -> Result<FoldOutcome> {
    let shape = bundle.shape;
    let classes = bundle.classes;
    let domains = latent_domains(bundle, cfg);
    let switches = cfg.switches;
    let (inputs, stage1_log, quality) = if switches.sdnorm {
        let owned;
        let s1 = match stage1 {
            Some(s) => s,
            None => {
                owned = train_stage1(split, shape, classes, domains, cfg, seed)?;
                &owned
            }
        };
        let train_p = s1.train_assignments(split.train.len());
        let mut model = s1.model.clone();
        if cfg.stage2.restart {
            let fresh = new_model(shape, classes, domains, cfg, seed ^ 0x5EED)?;
            model.encoder = fresh.encoder;
            model.classifier = fresh.classifier;
        }
        let quality = stage1_quality(bundle, split, s1)?;
        (
            Stage2Inputs {
                model,
                norm_assignments: Some(train_p.clone()),
                proto_assignments: train_p,
            },
            s1.log.clone(),
            Some(quality),
        )
    } else {
        let model = new_model(shape, classes, 1, cfg, seed)?;
        (
            Stage2Inputs {
                model,
                norm_assignments: None,
                proto_assignments: random_domain_assignments(split.train.len(), domains, seed),
            },
            Vec::new(),
            None,
        )
    };
    let s2 = train_stage2(inputs, split, shape, classes, cfg, seed)?;
    let metrics = evaluate(&s2.model, &split.test, shape, classes)?;
    Ok(FoldOutcome {
        switches,
        seed,
        held_out: split.held_out,
        metrics,
        best_epoch: s2.best_epoch,
        stage1_log,
        stage2_log: s2.log,
        step_losses: s2.step_losses,
        bootstrap_quality: quality.map(|q| q.0),
        assignment_quality: quality.map(|q| q.1),
        model: s2.model,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: Switches,
    /// `accuracy[s][f]`: seed `s`, held-out domain `f`.
    pub accuracy: Vec<Vec<f64>>,
}

impl AblationRow {
    /// Seed-averaged accuracy per fold.
    pub fn fold_means(&self) -> Vec<f64> {
        let folds = self.accuracy.first().map_or(0, Vec::len);
        (0..folds)
            .map(|f| self.accuracy.iter().map(|s| s[f]).sum::<f64>() / self.accuracy.len() as f64)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        let m = self.fold_means();
        m.iter().sum::<f64>() / m.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub rows: Vec<AblationRow>,
    pub outcomes: Vec<FoldOutcome>,
    pub elapsed: Duration,
}

impl AblationReport {
    pub fn row(&self, switches: Switches) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.switches == switches)
    }
}

/// Runs every configuration in `grid` on every fold for every seed in
/// `cfg.seeds`. Discovery runs once per (seed, fold) and is shared by all
/// rows that use it.
pub fn run_ablation(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    grid: &[Switches],
) -> Result<AblationReport> {
    let start = Instant::now();
    let seeds = cfg.seeds.0.clone();
    let folds: Vec<usize> = (0..bundle.domains).collect();
    let mut rows: Vec<AblationRow> = grid
        .iter()
        .map(|&switches| AblationRow {
            switches,
            accuracy: vec![vec![0.0; folds.len()]; seeds.len()],
        })
        .collect();
    let mut outcomes = Vec::new();
    let domains = latent_domains(bundle, cfg);
    for (si, &seed) in seeds.iter().enumerate() {
        for (fi, &held_out) in folds.iter().enumerate() {
            let split = leave_one_domain_out(bundle, held_out, seed)?;
            let stage1 = if grid.iter().any(|s| s.sdnorm) {
                Some(train_stage1(
                    &split,
                    bundle.shape,
                    bundle.classes,
                    domains,
                    cfg,
                    seed,
                )?)
            } else {
                None
            };
            for (ri, &switches) in grid.iter().enumerate() {
                let mut row_cfg = cfg.clone();
                row_cfg.switches = switches;
                let outcome = run_fold(bundle, &split, seed, &row_cfg, stage1.as_ref())?;
                rows[ri].accuracy[si][fi] = outcome.metrics.accuracy;
                outcomes.push(outcome);
            }
        }
    }
    Ok(AblationReport {
        seeds,
        folds,
        rows,
        outcomes,
        elapsed: start.elapsed(),
    })
}
