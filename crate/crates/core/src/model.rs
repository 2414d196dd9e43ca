//! Parameter plumbing, the convolutional encoder and the optimizer.

use std::collections::BTreeMap;

use comen_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::ImageShape;
use crate::discovery::DomainPredictor;
use crate::error::{Error, Result};
use crate::proto_graph::ProtoGr;
use crate::prototype::PrototypeBank;
use crate::style_norm::{self, DomainStats, NormMode, SampleMoments, SdNormLayer};

/// Named access to learnable parameters and to non-learned state.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
    fn visit_state(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor)) {}
    fn visit_state_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Binds parameters into a graph and remembers them by name.
#[derive(Debug)]
pub struct Binder {
    trainable: bool,
    vars: Vec<(String, Var)>,
}

impl Binder {
    /// A binder whose parameters receive gradients.
    pub fn training() -> Self {
        Self {
            trainable: true,
            vars: Vec::new(),
        }
    }

    /// A binder that inserts parameters as constants.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph, name: String, value: &Tensor) -> Var {
        let v = if self.trainable {
            g.param(value.clone())
        } else {
            g.constant(value.clone())
        };
        self.vars.push((name, v));
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| g.grad(*v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}

/// Fully-connected layer `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[inputs, outputs], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::from_fn(&[1, outputs], |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let w = binder.bind(g, join(prefix, "weight"), &self.weight);
        let b = binder.bind(g, join(prefix, "bias"), &self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Module for SdNormLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Architecture of the encoder `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub image: ImageShape,
    pub conv1: usize,
    pub conv2: usize,
    pub embed: usize,
    /// Normalization branches; 1 is plain batch normalization.
    pub branches: usize,
}

impl EncoderSpec {
    pub fn flat_features(&self) -> usize {
        self.conv2 * (self.image.height / 4) * (self.image.width / 4)
    }

    /// Style vector width fed to the domain predictor.
    pub fn style_dim(&self) -> usize {
        2 * self.conv1
    }
}

/// Two conv blocks (3×3 conv, SDNorm, ReLU, 2×2 average pool) and a linear
/// projection to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub conv1: Tensor,
    pub norm1: SdNormLayer,
    pub conv2: Tensor,
    pub norm2: SdNormLayer,
    pub fc: Linear,
}

/// First conv output, its per-sample moments and the derived style vectors.
#[derive(Debug, Clone, Copy)]
pub struct Stem {
    pub features: Var,
    pub moments: SampleMoments,
    pub style: Var,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Encoder {
    pub fn new(spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.image.height % 4 != 0 || spec.image.width % 4 != 0 {
            return Err(Error::InvalidDimension(format!(
                "encoder needs H and W divisible by 4, got {:?}",
                spec.image
            )));
        }
        let c = spec.image.channels;
        Ok(Self {
            spec,
            conv1: he_normal(rng, &[spec.conv1, c, 3, 3]),
            norm1: SdNormLayer::new(spec.conv1, spec.branches),
            conv2: he_normal(rng, &[spec.conv2, spec.conv1, 3, 3]),
            norm2: SdNormLayer::new(spec.conv2, spec.branches),
            fc: Linear::new(rng, spec.flat_features(), spec.embed),
        })
    }

    pub fn stem(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Stem> {
        let w = binder.bind(g, "encoder.conv1".into(), &self.conv1);
        let features = g.conv2d(x, w, 1)?;
        let moments = style_norm::sample_moments(g, features)?;
        let style = style_norm::style_from_moments(g, &moments, self.norm1.eps)?;
        Ok(Stem {
            features,
            moments,
            style,
        })
    }

    /// Remaining layers after [`stem`](Self::stem); `p` is `B×branches`.
    pub fn head(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        stem: &Stem,
        p: Var,
        mode: NormMode,
    ) -> Result<(Var, [Option<DomainStats>; 2])> {
        let gain1 = binder.bind(g, "encoder.norm1.gain".into(), &self.norm1.gain);
        let bias1 = binder.bind(g, "encoder.norm1.bias".into(), &self.norm1.bias);
        let (h, s1) =
            self.norm1
                .forward_graph(g, stem.features, &stem.moments, p, gain1, bias1, mode)?;
        let h = g.relu(h);
        let h = g.avg_pool2(h)?;
        let w2 = binder.bind(g, "encoder.conv2".into(), &self.conv2);
        let z2 = g.conv2d(h, w2, 1)?;
        let m2 = style_norm::sample_moments(g, z2)?;
        let gain2 = binder.bind(g, "encoder.norm2.gain".into(), &self.norm2.gain);
        let bias2 = binder.bind(g, "encoder.norm2.bias".into(), &self.norm2.bias);
        let (h, s2) = self
            .norm2
            .forward_graph(g, z2, &m2, p, gain2, bias2, mode)?;
        let h = g.relu(h);
        let h = g.avg_pool2(h)?;
        let b = g.shape(h)[0];
        let flat = g.reshape(h, &[b, self.spec.flat_features()])?;
        let emb = self.fc.forward(g, binder, "encoder.fc", flat)?;
        Ok((emb, [s1, s2]))
    }

    pub fn update_running(&mut self, stats: &[Option<DomainStats>; 2], batch: usize) {
        if let Some(s) = &stats[0] {
            self.norm1.update_running(s, batch);
        }
        if let Some(s) = &stats[1] {
            self.norm2.update_running(s, batch);
        }
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "conv1"), &self.conv1);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        f(&join(prefix, "conv2"), &self.conv2);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "conv1"), &mut self.conv1);
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        f(&join(prefix, "conv2"), &mut self.conv2);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit_state(&join(prefix, "norm1"), f);
        self.norm2.visit_state(&join(prefix, "norm2"), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm1.visit_state_mut(&join(prefix, "norm1"), f);
        self.norm2.visit_state_mut(&join(prefix, "norm2"), f);
    }
}

/// Where the normalization layers take their per-sample assignments from.
#[derive(Debug, Clone)]
pub enum Assignments {
    /// Single branch, plain batch normalization.
    Single,
    /// Given `B×M` rows (frozen stage-1 output).
    Fixed(Tensor),
    /// The domain predictor applied to the stem's style vectors.
    Predicted,
}

/// Encoder `G`, class head `F_c` and the optional COMEN parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Linear,
    pub predictor: Option<DomainPredictor>,
    pub bank: Option<PrototypeBank>,
    pub protogr: Option<ProtoGr>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub style: Var,
    /// Assignments used by the normalization layers.
    pub assignments: Var,
    pub embedding: Var,
    pub logits: Var,
    pub stats: [Option<DomainStats>; 2],
}

impl Model {
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        assignments: &Assignments,
        mode: NormMode,
    ) -> Result<ForwardOut> {
        let stem = self.encoder.stem(g, binder, x)?;
        let b = g.shape(x)[0];
        let p = match assignments {
            Assignments::Single => g.constant(Tensor::ones(&[b, 1])),
            Assignments::Fixed(t) => g.constant(t.clone()),
            Assignments::Predicted => {
                let predictor = self.predictor.as_ref().ok_or_else(|| {
                    Error::Config("predicted assignments need a domain predictor".into())
                })?;
                predictor.assign(g, binder, x, stem.style, self.encoder.norm1.eps)?
            }
        };
        let (embedding, stats) = self.encoder.head(g, binder, &stem, p, mode)?;
        let logits = self
            .classifier
            .forward(g, binder, "classifier", embedding)?;
        Ok(ForwardOut {
            style: stem.style,
            assignments: p,
            embedding,
            logits,
            stats,
        })
    }

    /// Assignment source for inference: the predictor when present.
    pub fn inference_assignments(&self) -> Assignments {
        if self.predictor.is_some() {
            Assignments::Predicted
        } else {
            Assignments::Single
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

impl Module for Model {
    fn visit_params(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params("encoder", f);
        self.classifier.visit_params("classifier", f);
        if let Some(p) = &self.predictor {
            p.visit_params("predictor", f);
        }
        if let Some(p) = &self.protogr {
            p.visit_params("protogr", f);
        }
    }

    fn visit_params_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut("encoder", f);
        self.classifier.visit_params_mut("classifier", f);
        if let Some(p) = &mut self.predictor {
            p.visit_params_mut("predictor", f);
        }
        if let Some(p) = &mut self.protogr {
            p.visit_params_mut("protogr", f);
        }
    }

    fn visit_state(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_state("encoder", f);
        if let Some(p) = &self.predictor {
            p.visit_state("predictor", f);
        }
        if let Some(b) = &self.bank {
            b.visit_state("bank", f);
        }
    }

    fn visit_state_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_state_mut("encoder", f);
        if let Some(p) = &mut self.predictor {
            p.visit_state_mut("predictor", f);
        }
        if let Some(b) = &mut self.bank {
            b.visit_state_mut("bank", f);
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `module` that has an entry in `grads`.
    pub fn step(&mut self, module: &mut dyn Module, grads: &BTreeMap<String, Tensor>) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        module.visit_params_mut("", &mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; w.numel()]);
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + wd * *wi;
                *vi = mu * *vi + d;
                *wi -= lr * *vi;
            }
        });
    }
}

/// Mean cross-entropy of `logits` (`B×K`) against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: shape[0],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let logp = g.log_softmax(logits, 1)?;
    let picks = Tensor::from_fn(&[b, k], |i| {
        if labels[i / k] == i % k {
            -1.0 / b as f64
        } else {
            0.0
        }
    });
    let picks = g.constant(picks);
    let weighted = g.mul(logp, picks)?;
    Ok(g.sum_all(weighted))
}
