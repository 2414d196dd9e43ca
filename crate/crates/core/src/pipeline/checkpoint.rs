//! Versioned binary model checkpoints.
//!
//! Layout: magic `COMENCK1`, then little-endian `u32` version, `u32` length
//! and JSON architecture header, `u32` tensor count, and per tensor `u32`
//! name length, UTF-8 name, `u32` rank, `u32` dims and `f64` values;
//! finally the CRC32 of every byte after the magic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use comen_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::discovery::DomainPredictor;
use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderSpec, Linear, Model, Module};
use crate::proto_graph::ProtoGr;
use crate::prototype::PrototypeBank;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COMENCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictorMeta {
    hidden: usize,
    domains: usize,
    stem: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    domains: usize,
    classes: usize,
    rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    image: [usize; 3],
    conv1: usize,
    conv2: usize,
    embed: usize,
    branches: usize,
    classes: usize,
    eps: f64,
    momentum: f64,
    predictor: Option<PredictorMeta>,
    bank: Option<BankMeta>,
    graph_delta: Option<f64>,
    extra: BTreeMap<String, String>,
}

/// A model plus free-form string annotations (fold, seed, stage).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: BTreeMap<String, String>,
}

fn meta_of(model: &Model, extra: &BTreeMap<String, String>) -> ModelMeta {
    let spec = model.encoder.spec;
    ModelMeta {
        image: [spec.image.channels, spec.image.height, spec.image.width],
        conv1: spec.conv1,
        conv2: spec.conv2,
        embed: spec.embed,
        branches: spec.branches,
        classes: model.classifier.outputs(),
        eps: model.encoder.norm1.eps,
        momentum: model.encoder.norm1.momentum,
        predictor: model.predictor.as_ref().map(|p| PredictorMeta {
            hidden: p.hidden.outputs(),
            domains: p.domains(),
            stem: p.stem.is_some(),
        }),
        bank: model.bank.as_ref().map(|b| BankMeta {
            domains: b.domains,
            classes: b.classes,
            rho: b.rho,
        }),
        graph_delta: model.protogr.as_ref().map(|g| g.delta),
        extra: extra.clone(),
    }
}

fn skeleton(meta: &ModelMeta) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = EncoderSpec {
        image: ImageShape::new(meta.image[0], meta.image[1], meta.image[2]),
        conv1: meta.conv1,
        conv2: meta.conv2,
        embed: meta.embed,
        branches: meta.branches,
    };
    let mut encoder = Encoder::new(spec, &mut rng)?;
    for norm in [&mut encoder.norm1, &mut encoder.norm2] {
        norm.eps = meta.eps;
        norm.momentum = meta.momentum;
    }
    let predictor = meta.predictor.as_ref().map(|p| {
        let mut f = DomainPredictor::new(&mut rng, spec.style_dim(), p.hidden, p.domains);
        if p.stem {
            f.stem = Some(encoder.conv1.clone());
        }
        f
    });
    let bank = match &meta.bank {
        Some(b) => Some(PrototypeBank::new(b.domains, b.classes, meta.embed, b.rho)?),
        None => None,
    };
    Ok(Model {
        classifier: Linear::new(&mut rng, meta.embed, meta.classes),
        protogr: meta
            .graph_delta
            .map(|d| ProtoGr::new(&mut rng, meta.embed, meta.classes, d)),
        encoder,
        predictor,
        bank,
    })
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |n, t| out.push((n.to_string(), t.clone())));
    model.visit_state("", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&meta_of(&self.model, &self.extra)).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let tensors = named_tensors(&self.model);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[CHECKPOINT_MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len()
            || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
        {
            return Err(Error::MalformedHeader("missing checkpoint magic".into()));
        }
        let min = CHECKPOINT_MAGIC.len() + 4 + 4 + 4 + 4;
        if bytes.len() < min {
            return Err(Error::TruncatedPayload {
                expected: min,
                found: bytes.len(),
            });
        }
        let body = &bytes[CHECKPOINT_MAGIC.len()..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::MalformedHeader(format!("architecture header: {e}")))?;
        let mut model = skeleton(&meta)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        let mut problem = None;
        let mut fill = |name: &str, slot: &mut Tensor| match tensors.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem.get_or_insert(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        };
        model.visit_params_mut("", &mut fill);
        model.visit_state_mut("", &mut fill);
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            model,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
