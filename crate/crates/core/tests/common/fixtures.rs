//! Small datasets, configurations and models shared by the tests and the
//! acceptance harness.

use super::uniform;
use comen_core::data::{generate_benchmark, BenchmarkSpec, DatasetBundle, FoldSplit, ImageShape};
use comen_core::discovery::DomainPredictor;
use comen_core::model::{cross_entropy, Assignments, Binder, Model, Module, Sgd};
use comen_core::pipeline::batch::{
    batch_ranges, derive_seed, epoch_order, labels_of, stack_images, stream,
};
use comen_core::pipeline::train::new_model;
use comen_core::pipeline::{Switches, TrainConfig};
use comen_core::proto_graph::ProtoGr;
use comen_core::prototype::PrototypeBank;
use comen_core::style_norm::NormMode;
use comen_core::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_bundle() -> DatasetBundle {
    generate_benchmark(&BenchmarkSpec {
        seed: 7,
        domains: 3,
        classes: 3,
        per_cell: 8,
        shape: ImageShape::new(3, 8, 8),
    })
    .unwrap()
}

pub fn tiny_config(switches: Switches) -> TrainConfig {
    let mut cfg = TrainConfig { switches, ..Default::default() };
    cfg.model.conv1 = 4;
    cfg.model.conv2 = 6;
    cfg.model.embed = 12;
    cfg.model.predictor_hidden = 8;
    cfg.optim.batch_size = 10;
    cfg.stage1.epochs = 3;
    cfg.stage1.pretrain_epochs = 3;
    cfg.stage2.epochs = 4;
    cfg.stage2.decay_epoch = 2;
    cfg
}

/// Plain mini-batch SGD on cross-entropy with single-branch batch norm,
/// written against the public building blocks only.
pub fn plain_cross_entropy_losses(
    bundle: &DatasetBundle,
    split: &FoldSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Vec<f64> {
    let shape = bundle.shape;
    let mut model = new_model(shape, bundle.classes, 1, cfg, seed).unwrap();
    let mut sgd = Sgd::new(cfg.stage2.lr, cfg.optim.momentum, cfg.optim.weight_decay);
    let shuffle = derive_seed(seed, stream::SHUFFLE);
    let mut losses = Vec::new();
    for epoch in 0..cfg.stage2.epochs {
        sgd.lr = if epoch < cfg.stage2.decay_epoch {
            cfg.stage2.lr
        } else {
            cfg.stage2.lr * cfg.stage2.decay
        };
        let order = epoch_order(split.train.len(), shuffle, epoch);
        for r in batch_ranges(order.len(), cfg.optim.batch_size) {
            let rows = &order[r];
            let mut g = Graph::new();
            let mut binder = Binder::training();
            let x = g.constant(stack_images(&split.train, rows, shape));
            let out = model
                .forward(
                    &mut g,
                    &mut binder,
                    x,
                    &Assignments::Single,
                    NormMode::Train,
                )
                .unwrap();
            let loss = cross_entropy(&mut g, out.logits, &labels_of(&split.train, rows)).unwrap();
            losses.push(g.value(loss).item());
            g.backward(loss).unwrap();
            sgd.step(&mut model, &binder.gradients(&g));
            model.encoder.update_running(&out.stats, rows.len());
        }
    }
    losses
}

/// A model with every optional head present (as selected by `switches`) and
/// every tensor, state included, filled with random values.
pub fn populated_model(switches: Switches, seed: u64) -> Model {
    let cfg = TrainConfig::default();
    let (m, k) = (3, 4);
    let mut model = new_model(
        ImageShape::new(2, 8, 8),
        k,
        if switches.sdnorm { m } else { 1 },
        &cfg,
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = cfg.model.embed;
    if switches.sdnorm {
        let mut predictor = DomainPredictor::new(&mut rng, model.encoder.spec.style_dim(), 7, m);
        predictor.stem = Some(model.encoder.conv1.clone());
        model.predictor = Some(predictor);
    }
    if switches.uses_prototypes() {
        let mut bank = PrototypeBank::new(m, k, embed, 0.7).unwrap();
        bank.initialized = (0..m * k).map(|i| i % 3 != 0).collect();
        model.bank = Some(bank);
    }
    if switches.protogr {
        model.protogr = Some(ProtoGr::new(&mut rng, embed, k, 0.5));
    }
    model.visit_params_mut("", &mut |_, t| *t = uniform(&mut rng, t.shape(), -1.0, 1.0));
    model.visit_state_mut("", &mut |name, t| {
        if !name.ends_with("initialized") {
            *t = uniform(&mut rng, t.shape(), 0.1, 2.0);
        }
    });
    model
}
