//! Finite-difference gradient checks on random micro-instances of every
//! trained loss and of the soft domain normalization forward pass.
//!
//! Errors use the engine's definition `max |analytic − numeric| / max(1, |analytic|)`.

use super::{grad_error, labels, soft_assignments, uniform};
use comen_core::data::ImageShape;
use comen_core::discovery::entropy_loss;
use comen_core::model::{cross_entropy, Assignments, Binder, Linear, Model, Module};
use comen_core::pipeline::train::{new_model, total_loss_graph};
use comen_core::pipeline::TrainConfig;
use comen_core::proto_contrast::{protoccl, ContrastOptions};
use comen_core::proto_graph::ProtoGr;
use comen_core::prototype::{pooling_weights, PrototypeBank};
use comen_core::style_norm::{sample_moments, NormMode, SdNormLayer};
use comen_core::tensor::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Gradient error of `loss` with respect to every parameter of `module`,
/// perturbing parameters in place by name. Binder names must equal the
/// names `visit_params(prefix, ..)` reports.
pub fn module_grad_error<M, F>(module: &M, prefix: &str, loss: F) -> f64
where
    M: Module + Clone,
    F: Fn(&mut Graph, &mut Binder, &M) -> comen_core::Result<Var>,
{
    let mut g = Graph::new();
    let mut binder = Binder::training();
    let l = loss(&mut g, &mut binder, module).expect("valid instance");
    g.backward(l).unwrap();
    let grads = binder.gradients(&g);
    let eval = |m: &M| {
        let mut g = Graph::new();
        let l = loss(&mut g, &mut Binder::frozen(), m).expect("valid instance");
        g.value(l).item()
    };
    let mut names = Vec::new();
    module.visit_params(prefix, &mut |n, t| names.push((n.to_string(), t.numel())));
    let mut work = module.clone();
    let mut worst = 0.0f64;
    for (name, numel) in names {
        for i in 0..numel {
            let nudge = |m: &mut M, delta: f64| {
                m.visit_params_mut(prefix, &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                })
            };
            nudge(&mut work, STEP);
            let up = eval(&work);
            nudge(&mut work, -2.0 * STEP);
            let down = eval(&work);
            nudge(&mut work, STEP);
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    worst
}

/// Assignment entropy through a softmax, with respect to the logits.
pub fn entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (rng.gen_range(2..8), rng.gen_range(2..5));
    let logits = uniform(&mut rng, &[n, m], -2.0, 2.0);
    grad_error(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            entropy_loss(g, p)
        },
        &[logits],
        STEP,
    )
}

/// Classifier cross-entropy, with respect to the embeddings and to the
/// classifier weights.
pub fn classification(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (
        rng.gen_range(2..8),
        rng.gen_range(2..9),
        rng.gen_range(2..6),
    );
    let e = uniform(&mut rng, &[n, d], -1.0, 1.0);
    let y = labels(&mut rng, n, k);
    let classifier = Linear::new(&mut rng, d, k);
    let wrt_input = grad_error(
        |g, v| {
            let logits = classifier.forward(g, &mut Binder::frozen(), "classifier", v[0])?;
            cross_entropy(g, logits, &y)
        },
        std::slice::from_ref(&e),
        STEP,
    );
    let wrt_weights = module_grad_error(&classifier, "classifier", |g, binder, c| {
        let x = g.constant(e.clone());
        let logits = c.forward(g, binder, "classifier", x)?;
        cross_entropy(g, logits, &y)
    });
    wrt_input.max(wrt_weights)
}

/// Node classification over the prototype graph, with respect to the
/// prototypes and to the attention and classifier parameters.
pub fn prototype_graph(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, d) = (
        rng.gen_range(1..4),
        rng.gen_range(2..5),
        rng.gen_range(2..7),
    );
    let head = ProtoGr::new(&mut rng, d, k, 0.2);
    let protos = uniform(&mut rng, &[m * k, d], -1.0, 1.0);
    let usable = vec![true; m * k];
    let wrt_input = grad_error(
        |g, v| {
            Ok(head
                .loss(g, &mut Binder::frozen(), v[0], &usable, k)?
                .expect("usable rows"))
        },
        std::slice::from_ref(&protos),
        STEP,
    );
    let wrt_weights = module_grad_error(&head, "protogr", |g, binder, h| {
        let x = g.constant(protos.clone());
        Ok(h.loss(g, binder, x, &usable, k)?.expect("usable rows"))
    });
    wrt_input.max(wrt_weights)
}

/// Supervised prototype contrastive loss, with respect to the prototypes;
/// alternates normalized and raw dot products.
pub fn prototype_contrast(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, d) = (
        rng.gen_range(2..4),
        rng.gen_range(2..5),
        rng.gen_range(2..7),
    );
    let protos = uniform(&mut rng, &[m * k, d], -1.0, 1.0);
    let opts = ContrastOptions {
        tau: rng.gen_range(0.2..1.0),
        normalize: seed % 2 == 0,
    };
    let usable = vec![true; m * k];
    grad_error(
        |g, v| Ok(protoccl(g, v[0], &usable, k, opts)?.expect("queries")),
        &[protos],
        STEP,
    )
}

/// Soft domain normalization in training mode; the scalar is a random
/// projection of the output. Checked with respect to the feature map, the
/// assignment matrix, gains and biases.
pub fn soft_normalization(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, m) = (
        rng.gen_range(2..6),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
    );
    let layer = SdNormLayer::new(c, m);
    let z = uniform(&mut rng, &[b, c, 2, 3], -2.0, 2.0);
    let p = soft_assignments(&mut rng, b, m);
    let gain = uniform(&mut rng, &[m, c], 0.5, 1.5);
    let bias = uniform(&mut rng, &[m, c], -0.5, 0.5);
    let proj = uniform(&mut rng, &[b, c, 2, 3], -1.0, 1.0);
    grad_error(
        |g, v| {
            let moments = sample_moments(g, v[0])?;
            let (y, _) =
                layer.forward_graph(g, v[0], &moments, v[1], v[2], v[3], NormMode::Train)?;
            let r = g.constant(proj.clone());
            let s = g.mul(y, r)?;
            Ok(g.sum_all(s))
        },
        &[z, p, gain, bias],
        STEP,
    )
}

/// Full training objective on an 8-sample batch (M=2, K=3, d=8) through a
/// small encoder with soft normalization, a partly initialized prototype
/// bank and the graph head; checked with respect to every parameter.
pub fn full_objective(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, k) = (8, 2, 3);
    let mut cfg = TrainConfig::default();
    cfg.model.conv1 = 3;
    cfg.model.conv2 = 4;
    cfg.model.embed = 8;
    let shape = ImageShape::new(2, 8, 8);
    let mut model = new_model(shape, k, m, &cfg, seed).unwrap();
    model.protogr = Some(ProtoGr::new(&mut rng, cfg.model.embed, k, cfg.loss.delta));
    let mut bank = PrototypeBank::new(m, k, cfg.model.embed, cfg.loss.rho).unwrap();
    bank.prototypes = uniform(&mut rng, &[m * k, cfg.model.embed], -1.0, 1.0);
    bank.initialized = (0..m * k).map(|_| rng.gen_bool(0.5)).collect();
    let x = uniform(&mut rng, &[n, 2, 8, 8], 0.0, 1.0);
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let p = soft_assignments(&mut rng, n, m);
    let (w, _, present) = pooling_weights(&y, &p, k).unwrap();
    let contrast = ContrastOptions::default();
    module_grad_error(&model, "", |g, binder, model: &Model| {
        let xv = g.constant(x.clone());
        let out = model.forward(
            g,
            binder,
            xv,
            &Assignments::Fixed(p.clone()),
            NormMode::Train,
        )?;
        let cls = cross_entropy(g, out.logits, &y)?;
        let (protos, usable) = bank.blended(g, out.embedding, &w, &present)?;
        let gr = model
            .protogr
            .as_ref()
            .expect("head")
            .loss(g, binder, protos, &usable, k)?;
        let ccl = protoccl(g, protos, &usable, k, contrast)?;
        total_loss_graph(g, cls, gr, ccl, cfg.loss.lambda, cfg.loss.gamma)
    })
}

/// Every check with its instance count; each instance seed is distinct.
pub const SUITE: [(&str, fn(u64) -> f64); 6] = [
    ("assignment entropy", entropy),
    ("classification", classification),
    ("prototype graph", prototype_graph),
    ("prototype contrast", prototype_contrast),
    ("full objective", full_objective),
    ("soft normalization forward", soft_normalization),
];

/// Worst error per check over `instances` seeds.
pub fn run_suite(instances: u64) -> Vec<(&'static str, f64)> {
    SUITE
        .iter()
        .map(|(name, check)| {
            (
                *name,
                (0..instances).map(|s| check(1000 + s)).fold(0.0, f64::max),
            )
        })
        .collect()
}
