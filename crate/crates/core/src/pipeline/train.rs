//! The two training stages and batched inference.

use comen_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::{self, batch_ranges, epoch_order, gather_rows, labels_of, stack_images, stream};
use super::config::TrainConfig;
use crate::data::{FoldSplit, ImageShape, LabeledImage};
use crate::discovery::{
    self, balance_penalty, collapse_detected, entropy_loss, DomainPredictor, Standardizer,
};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax};
use crate::model::{cross_entropy, Assignments, Binder, Encoder, EncoderSpec, Linear, Model, Sgd};
use crate::proto_contrast::{protoccl, ContrastOptions};
use crate::proto_graph::ProtoGr;
use crate::prototype::{pooling_weights, LocalPrototypes, PrototypeBank};
use crate::style_norm::{self, NormMode};

const EVAL_BATCH: usize = 128;

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub classification: f64,
    pub protogr: f64,
    pub protoccl: f64,
    /// Mean assignment entropy over the epoch's batches.
    pub entropy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// Fresh encoder and classifier; COMEN heads are attached by the stages.
pub fn new_model(
    shape: ImageShape,
    classes: usize,
    branches: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Model> {
    let mut rng = batch::rng(seed, stream::INIT);
    let spec = EncoderSpec {
        image: shape,
        conv1: cfg.model.conv1,
        conv2: cfg.model.conv2,
        embed: cfg.model.embed,
        branches,
    };
    let mut encoder = Encoder::new(spec, &mut rng)?;
    encoder.norm1.eps = cfg.loss.eps;
    encoder.norm2.eps = cfg.loss.eps;
    let classifier = Linear::new(&mut rng, cfg.model.embed, classes);
    Ok(Model {
        encoder,
        classifier,
        predictor: None,
        bank: None,
        protogr: None,
    })
}

/// Style vectors `N×2C` of the first conv output, from `weights` (a
/// `C1×C×3×3` kernel).
pub fn style_vectors(
    images: &[LabeledImage],
    shape: ImageShape,
    weights: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut rows = Vec::new();
    let all: Vec<usize> = (0..images.len()).collect();
    for r in batch_ranges(all.len(), EVAL_BATCH) {
        let mut g = Graph::new();
        let x = g.constant(stack_images(images, &all[r], shape));
        let w = g.constant(weights.clone());
        let f = g.conv2d(x, w, 1)?;
        let m = style_norm::sample_moments(&mut g, f)?;
        let s = style_norm::style_from_moments(&mut g, &m, eps)?;
        rows.extend_from_slice(g.value(s).data());
    }
    let width = 2 * weights.shape()[0];
    Ok(Tensor::new(&[images.len(), width], rows)?)
}

/// Inference-mode logits of every image.
pub fn predict_logits(model: &Model, images: &[LabeledImage], shape: ImageShape) -> Result<Tensor> {
    let all: Vec<usize> = (0..images.len()).collect();
    let assign = model.inference_assignments();
    let mut data = Vec::new();
    let mut k = 0;
    for r in batch_ranges(all.len(), EVAL_BATCH) {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let x = g.constant(stack_images(images, &all[r], shape));
        let out = model.forward(&mut g, &mut binder, x, &assign, NormMode::Infer)?;
        k = g.shape(out.logits)[1];
        data.extend_from_slice(g.value(out.logits).data());
    }
    Ok(Tensor::new(&[images.len(), k], data)?)
}

pub fn predict_classes(
    model: &Model,
    images: &[LabeledImage],
    shape: ImageShape,
) -> Result<Vec<usize>> {
    let logits = predict_logits(model, images, shape)?;
    Ok((0..images.len()).map(|i| argmax(logits.row(i))).collect())
}

pub fn split_accuracy(model: &Model, images: &[LabeledImage], shape: ImageShape) -> Result<f64> {
    Ok(split_scores(model, images, shape)?.0)
}

/// Inference-mode accuracy and mean cross-entropy.
pub fn split_scores(
    model: &Model,
    images: &[LabeledImage],
    shape: ImageShape,
) -> Result<(f64, f64)> {
    let logits = predict_logits(model, images, shape)?;
    let truth: Vec<usize> = images.iter().map(|s| s.class_label).collect();
    let predicted: Vec<usize> = (0..images.len()).map(|i| argmax(logits.row(i))).collect();
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = cross_entropy(&mut g, l, &truth)?;
    Ok((accuracy(&truth, &predicted), g.value(ce).item()))
}

fn check_finite(value: f64, what: &'static str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { what, value, epoch })
    }
}

/// `l_cls + λ·l_protogr + γ·l_protoccl` on plain numbers.
pub fn total_loss(
    l_cls: f64,
    l_protogr: f64,
    l_protoccl: f64,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    for (v, what) in [
        (l_cls, "classification loss"),
        (l_protogr, "graph loss"),
        (l_protoccl, "contrastive loss"),
    ] {
        check_finite(v, what, 0)?;
    }
    Ok(l_cls + lambda * l_protogr + gamma * l_protoccl)
}

/// Graph form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_graph(
    g: &mut Graph,
    l_cls: Var,
    l_protogr: Option<Var>,
    l_protoccl: Option<Var>,
    lambda: f64,
    gamma: f64,
) -> Result<Var> {
    let mut total = l_cls;
    if let Some(l) = l_protogr {
        let s = g.scale(l, lambda);
        total = g.add(total, s)?;
    }
    if let Some(l) = l_protoccl {
        let s = g.scale(l, gamma);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Stage-1 outputs.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub model: Model,
    /// k-means labels of the training split.
    pub pseudo_labels: Vec<usize>,
    /// Predictor agreement with the pseudo labels on its pretraining portion.
    pub pretrain_fit: f64,
    /// Frozen assignments of every source sample, train then val order.
    pub assignments: Tensor,
    pub log: Vec<EpochLog>,
}

impl Stage1Result {
    pub fn train_assignments(&self, train_len: usize) -> Tensor {
        let rows: Vec<usize> = (0..train_len).collect();
        gather_rows(&self.assignments, &rows)
    }
}

/// Latent-domain discovery: k-means bootstrap on initial style vectors,
/// predictor pretraining, joint classification + entropy training, then
/// frozen assignments for all source samples.
pub fn train_stage1(
    split: &FoldSplit,
    shape: ImageShape,
    classes: usize,
    domains: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage1Result> {
    let mut model = new_model(shape, classes, domains, cfg, seed)?;
    let eps = cfg.loss.eps;
    let train = &split.train;
    let styles = style_vectors(train, shape, &model.encoder.conv1, eps)?;
    let standardizer = Standardizer::fit(&styles);
    let pseudo_labels = discovery::kmeans(
        &standardizer.apply(&styles),
        domains,
        batch::derive_seed(seed, stream::KMEANS),
    )?;

    let mut prng = batch::rng(seed, stream::PRETRAIN);
    let mut predictor = DomainPredictor::new(
        &mut prng,
        model.encoder.spec.style_dim(),
        cfg.model.predictor_hidden,
        domains,
    );
    predictor.set_standardizer(&standardizer);
    // the predictor reads styles through a frozen copy of the initial first conv
    predictor.stem = Some(model.encoder.conv1.clone());
    let mut portion: Vec<usize> = (0..train.len()).collect();
    portion.shuffle(&mut prng);
    let keep = ((cfg.stage1.pretrain_fraction * train.len() as f64).round() as usize)
        .clamp(1, train.len());
    portion.truncate(keep);
    portion.sort_unstable();
    model.predictor = Some(predictor);

    // predictor pretraining on constant style vectors
    let mut sgd = Sgd::new(
        cfg.stage1.pretrain_lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
    );
    let pre_seed = batch::derive_seed(seed, stream::PRETRAIN_SHUFFLE);
    for epoch in 0..cfg.stage1.pretrain_epochs {
        let order = epoch_order(portion.len(), pre_seed, epoch);
        for r in batch_ranges(order.len(), cfg.optim.batch_size) {
            let rows: Vec<usize> = order[r].iter().map(|&o| portion[o]).collect();
            let labels: Vec<usize> = rows.iter().map(|&i| pseudo_labels[i]).collect();
            let mut g = Graph::new();
            let mut binder = Binder::training();
            let s = g.constant(gather_rows(&styles, &rows));
            let predictor = model.predictor.as_ref().expect("attached");
            let logits = predictor.logits(&mut g, &mut binder, s)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            check_finite(g.value(loss).item(), "predictor pretraining loss", epoch)?;
            g.backward(loss)?;
            sgd.step(&mut model, &binder.gradients(&g));
        }
    }
    let fitted = model
        .predictor
        .as_ref()
        .expect("attached")
        .predict(&gather_rows(&styles, &portion))?;
    let fit_pred: Vec<usize> = (0..portion.len()).map(|i| argmax(fitted.row(i))).collect();
    let fit_truth: Vec<usize> = portion.iter().map(|&i| pseudo_labels[i]).collect();
    let pretrain_fit = accuracy(&fit_truth, &fit_pred);

    // joint classification + entropy training
    let mut sgd = Sgd::new(cfg.stage1.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let shuffle = batch::derive_seed(seed, stream::SHUFFLE);
    let mut log = Vec::with_capacity(cfg.stage1.epochs);
    for epoch in 0..cfg.stage1.epochs {
        sgd.lr = cfg.lr_stage1(epoch);
        let order = epoch_order(train.len(), shuffle, epoch);
        let ranges = batch_ranges(order.len(), cfg.optim.batch_size);
        let (mut loss_sum, mut cls_sum, mut ent_sum) = (0.0, 0.0, 0.0);
        for r in &ranges {
            let rows = &order[r.clone()];
            let labels = labels_of(train, rows);
            let mut g = Graph::new();
            let mut binder = Binder::training();
            let x = g.constant(stack_images(train, rows, shape));
            let out = model.forward(
                &mut g,
                &mut binder,
                x,
                &Assignments::Predicted,
                NormMode::Train,
            )?;
            let cls = cross_entropy(&mut g, out.logits, &labels)?;
            let ent = entropy_loss(&mut g, out.assignments)?;
            let mut total = g.add(cls, ent)?;
            if cfg.stage1.balance_weight > 0.0 && collapse_detected(g.value(out.assignments)) {
                let pen = balance_penalty(&mut g, out.assignments)?;
                let pen = g.scale(pen, cfg.stage1.balance_weight);
                total = g.add(total, pen)?;
            }
            let value = g.value(total).item();
            check_finite(value, "stage-1 loss", epoch)?;
            loss_sum += value;
            cls_sum += g.value(cls).item();
            ent_sum += g.value(ent).item();
            g.backward(total)?;
            sgd.step(&mut model, &binder.gradients(&g));
            model.encoder.update_running(&out.stats, rows.len());
        }
        let n = ranges.len() as f64;
        let (val_accuracy, val_loss) = split_scores(&model, &split.val, shape)?;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            classification: cls_sum / n,
            protogr: 0.0,
            protoccl: 0.0,
            entropy: ent_sum / n,
            val_accuracy,
            val_loss,
        });
    }

    let source: Vec<LabeledImage> = split.source().cloned().collect();
    let predictor = model.predictor.as_ref().expect("attached");
    let stem = predictor.stem.as_ref().expect("attached");
    let source_styles = style_vectors(&source, shape, stem, eps)?;
    let assignments = predictor.predict(&source_styles)?;
    Ok(Stage1Result {
        model,
        pseudo_labels,
        pretrain_fit,
        assignments,
        log,
    })
}

/// Uniformly random one-hot domain assignments, used for prototype pooling
/// when no discovered domains are available.
pub fn random_domain_assignments(n: usize, domains: usize, seed: u64) -> Tensor {
    let mut rng = batch::rng(seed, stream::RANDOM_DOMAINS);
    let mut t = Tensor::zeros(&[n, domains]);
    for i in 0..n {
        let d = rng.gen_range(0..domains);
        t.set(&[i, d], 1.0);
    }
    t
}

/// What stage 2 starts from.
#[derive(Debug, Clone)]
pub struct Stage2Inputs {
    pub model: Model,
    /// Training-split assignments for the normalization layers; `None`
    /// means single-branch normalization.
    pub norm_assignments: Option<Tensor>,
    /// Training-split domain weights for prototype pooling.
    pub proto_assignments: Tensor,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    /// Model of the epoch with the highest validation accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Total loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
}

/// Whether `(accuracy, loss)` beats `best`: higher accuracy, ties broken
/// by strictly lower loss.
fn improves(accuracy: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((a, l)) => accuracy > a || (accuracy == a && loss < l),
    }
}

/// Epoch with the highest validation accuracy; ties go to the lower
/// validation loss, then to the earlier epoch.
pub fn best_epoch(log: &[EpochLog]) -> usize {
    let mut best = None;
    let mut index = 0;
    for (i, e) in log.iter().enumerate() {
        if improves(e.val_accuracy, e.val_loss, best) {
            best = Some((e.val_accuracy, e.val_loss));
            index = i;
        }
    }
    index
}

/// Fills every bank cell from one pass over the training split: each cell
/// becomes the assignment-weighted class mean over the whole split.
fn initialize_bank(
    model: &Model,
    bank: &mut PrototypeBank,
    train: &[LabeledImage],
    shape: ImageShape,
    norm: Option<&Tensor>,
    proto: &Tensor,
    classes: usize,
) -> Result<()> {
    let d = bank.dim();
    let mut sums = vec![0.0; bank.cells() * d];
    let mut mass = vec![0.0; bank.cells()];
    let all: Vec<usize> = (0..train.len()).collect();
    for r in batch_ranges(all.len(), EVAL_BATCH) {
        let rows = &all[r];
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let x = g.constant(stack_images(train, rows, shape));
        let assign = match norm {
            Some(p) => Assignments::Fixed(gather_rows(p, rows)),
            None => Assignments::Single,
        };
        let out = model.forward(&mut g, &mut binder, x, &assign, NormMode::Train)?;
        let emb = g.value(out.embedding);
        let q = gather_rows(proto, rows);
        let m = q.shape()[1];
        for (bi, &row) in rows.iter().enumerate() {
            let k = train[row].class_label;
            for dom in 0..m {
                let w = q.at(&[bi, dom]);
                let cell = dom * classes + k;
                mass[cell] += w;
                for (s, e) in sums[cell * d..(cell + 1) * d].iter_mut().zip(emb.row(bi)) {
                    *s += w * e;
                }
            }
        }
    }
    let present: Vec<bool> = mass
        .iter()
        .map(|&v| v >= crate::prototype::ABSENT_MASS)
        .collect();
    let values = Tensor::from_fn(&[bank.cells(), d], |i| {
        if present[i / d] {
            sums[i] / mass[i / d]
        } else {
            0.0
        }
    });
    bank.ema_update(&LocalPrototypes {
        values,
        mass,
        present,
    });
    Ok(())
}

/// Stage 2: classification plus prototype graph and contrastive losses on
/// frozen assignments, keeping the model with the best validation accuracy.
pub fn train_stage2(
    inputs: Stage2Inputs,
    split: &FoldSplit,
    shape: ImageShape,
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage2Result> {
    let Stage2Inputs {
        mut model,
        norm_assignments,
        proto_assignments,
    } = inputs;
    let train = &split.train;
    if proto_assignments.shape()[0] != train.len() {
        return Err(Error::DimensionMismatch {
            expected: train.len(),
            found: proto_assignments.shape()[0],
        });
    }
    let switches = cfg.switches;
    let refine =
        cfg.stage2.refine_predictor && model.predictor.is_some() && norm_assignments.is_some();
    if switches.uses_prototypes() {
        let mut rng = batch::rng(seed, stream::HEADS);
        let m = proto_assignments.shape()[1];
        let mut bank = PrototypeBank::new(m, classes, cfg.model.embed, cfg.loss.rho)?;
        initialize_bank(
            &model,
            &mut bank,
            train,
            shape,
            norm_assignments.as_ref(),
            &proto_assignments,
            classes,
        )?;
        model.bank = Some(bank);
        if switches.protogr {
            model.protogr = Some(ProtoGr::new(
                &mut rng,
                cfg.model.embed,
                classes,
                cfg.loss.delta,
            ));
        }
    }
    let contrast = ContrastOptions {
        tau: cfg.loss.tau,
        normalize: cfg.loss.normalize_prototypes,
    };
    let mut sgd = Sgd::new(cfg.stage2.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let shuffle = batch::derive_seed(seed, stream::SHUFFLE);
    let mut log = Vec::with_capacity(cfg.stage2.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    for epoch in 0..cfg.stage2.epochs {
        sgd.lr = cfg.lr_stage2(epoch);
        let order = epoch_order(train.len(), shuffle, epoch);
        let ranges = batch_ranges(order.len(), cfg.optim.batch_size);
        let mut sums = [0.0f64; 5];
        for r in &ranges {
            let rows = &order[r.clone()];
            let labels = labels_of(train, rows);
            let mut g = Graph::new();
            let mut binder = Binder::training();
            let x = g.constant(stack_images(train, rows, shape));
            let assign = match (&norm_assignments, refine) {
                (Some(_), true) => Assignments::Predicted,
                (Some(p), false) => Assignments::Fixed(gather_rows(p, rows)),
                (None, _) => Assignments::Single,
            };
            let out = model.forward(&mut g, &mut binder, x, &assign, NormMode::Train)?;
            let cls = cross_entropy(&mut g, out.logits, &labels)?;
            let mut extra = None;
            if refine {
                extra = Some(entropy_loss(&mut g, out.assignments)?);
            }
            let (mut gr, mut ccl, mut local) = (None, None, None);
            if let Some(bank) = &model.bank {
                let q = if refine {
                    g.value(out.assignments).clone()
                } else {
                    gather_rows(&proto_assignments, rows)
                };
                let (w, mass, present) = pooling_weights(&labels, &q, classes)?;
                let (protos, usable) = bank.blended(&mut g, out.embedding, &w, &present)?;
                if let Some(head) = &model.protogr {
                    gr = head.loss(&mut g, &mut binder, protos, &usable, classes)?;
                }
                if switches.protoccl {
                    ccl = protoccl(&mut g, protos, &usable, classes, contrast)?;
                }
                let wv = g.constant(w);
                let lv = g.matmul(wv, out.embedding)?;
                local = Some(LocalPrototypes {
                    values: g.value(lv).clone(),
                    mass,
                    present,
                });
            }
            let mut total =
                total_loss_graph(&mut g, cls, gr, ccl, cfg.loss.lambda, cfg.loss.gamma)?;
            if let Some(e) = extra {
                total = g.add(total, e)?;
            }
            let value = g.value(total).item();
            check_finite(value, "stage-2 loss", epoch)?;
            step_losses.push(value);
            sums[0] += value;
            sums[1] += g.value(cls).item();
            sums[2] += gr.map_or(0.0, |v| g.value(v).item());
            sums[3] += ccl.map_or(0.0, |v| g.value(v).item());
            sums[4] += discovery::mean_entropy(g.value(out.assignments));
            g.backward(total)?;
            let grads = binder.gradients(&g);
            sgd.step(&mut model, &grads);
            model.encoder.update_running(&out.stats, rows.len());
            if let (Some(bank), Some(local)) = (model.bank.as_mut(), local) {
                bank.ema_update(&local);
            }
        }
        let n = ranges.len() as f64;
        let (val_accuracy, val_loss) = split_scores(&model, &split.val, shape)?;
        log.push(EpochLog {
            epoch,
            loss: sums[0] / n,
            classification: sums[1] / n,
            protogr: sums[2] / n,
            protoccl: sums[3] / n,
            entropy: sums[4] / n,
            val_accuracy,
            val_loss,
        });
        if improves(
            val_accuracy,
            val_loss,
            best.as_ref().map(|(a, l, _, _)| (*a, *l)),
        ) {
            best = Some((val_accuracy, val_loss, epoch, model.clone()));
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, _, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(Stage2Result {
        model: best_model,
        best_epoch,
        log,
        step_losses,
    })
}
