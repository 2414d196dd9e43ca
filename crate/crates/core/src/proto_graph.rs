//! Graph reasoning over the prototype bank: thresholded cosine adjacency,
//! two graph attention layers, a residual connection and node
//! classification.

use comen_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{cross_entropy, join, Binder, Linear, Module};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const ATTENTION_SLOPE: f64 = 0.2;
/// Rows with a smaller L2 norm are left out of the graph.
const MIN_NORM: f64 = 1e-12;

/// `k×n` 0/1 matrix picking the rows flagged in `keep`.
pub fn selection_matrix(keep: &[bool]) -> Option<Tensor> {
    let rows: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let n = keep.len();
    Some(Tensor::from_fn(&[rows.len(), n], |i| {
        if rows[i / n] == i % n {
            1.0
        } else {
            0.0
        }
    }))
}

/// Flags rows whose norm is usable for cosine similarity.
pub fn nonzero_rows(x: &Tensor) -> Vec<bool> {
    (0..x.shape()[0])
        .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() > MIN_NORM)
        .collect()
}

/// `A_ij = cos(x_i, x_j)` where that exceeds `delta`, else 0, with an exact
/// unit diagonal. All rows of `x` must have nonzero norm. Differentiable
/// through the off-diagonal cosine values; the threshold mask is fixed at
/// the current point.
pub fn adjacency(g: &mut Graph, x: Var, delta: f64) -> Result<Var> {
    let n = g.shape(x)[0];
    let sq = g.square(x);
    let norms = g.sum(sq, 1)?;
    let norms = g.sqrt(norms)?;
    let unit = g.div(x, norms)?;
    let ut = g.transpose(unit)?;
    let cos = g.matmul(unit, ut)?;
    let mask = Tensor::from_fn(&[n, n], |i| {
        if i / n != i % n && g.value(cos).data()[i] > delta {
            1.0
        } else {
            0.0
        }
    });
    let mask = g.constant(mask);
    let off = g.mul(cos, mask)?;
    let eye = g.constant(Tensor::identity(n));
    Ok(g.add(off, eye)?)
}

/// Adjacency over all rows of `x`; zero rows become isolated with no
/// entries at all.
pub fn build_adjacency(x: &Tensor, delta: f64) -> Result<Tensor> {
    let n = x.shape()[0];
    let keep = nonzero_rows(x);
    let mut out = Tensor::zeros(&[n, n]);
    let Some(sel) = selection_matrix(&keep) else {
        return Ok(out);
    };
    let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut g = Graph::new();
    let s = g.constant(sel);
    let xv = g.constant(x.clone());
    let sub = g.matmul(s, xv)?;
    let a = adjacency(&mut g, sub, delta)?;
    let a = g.value(a);
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            out.set(&[i, j], a.at(&[r, c]));
        }
    }
    Ok(out)
}

/// One attention layer: `W: d×d'`, attention vector `a: 2d'×1` split into
/// source and target halves.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub weight: Tensor,
    pub attention: Tensor,
}

impl GatLayer {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let wb = (6.0 / (inputs + outputs) as f64).sqrt();
        let ab = (6.0 / (2 * outputs + 1) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[inputs, outputs], |_| rng.gen_range(-wb..wb)),
            attention: Tensor::from_fn(&[2 * outputs, 1], |_| rng.gen_range(-ab..ab)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            attention: Tensor::zeros(&[2 * outputs, 1]),
        }
    }
}

/// Attention coefficients and layer output.
#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub alpha: Var,
    pub output: Var,
}

/// `α_ij = A_ij·exp(e_ij) / Σ_l A_il·exp(e_il)` with
/// `e_ij = LReLU(a_srcᵀ W x_i + a_dstᵀ W x_j)`, and `x'_i = σ(Σ_j α_ij W x_j)`.
pub fn gat_forward(
    g: &mut Graph,
    weight: Var,
    attention: Var,
    x: Var,
    adj: Var,
    relu: bool,
) -> Result<GatOutput> {
    let h = g.matmul(x, weight)?;
    let dout = g.shape(h)[1];
    let a_src = g.slice(attention, 0, 0, dout)?;
    let a_dst = g.slice(attention, 0, dout, 2 * dout)?;
    let s_src = g.matmul(h, a_src)?;
    let s_dst = g.matmul(h, a_dst)?;
    let s_dst = g.transpose(s_dst)?;
    let e = g.add(s_src, s_dst)?;
    let e = g.leaky_relu(e, ATTENTION_SLOPE);
    // shift each row by its largest neighbour logit; constant, so α is unchanged
    let n = g.shape(e)[0];
    let (ev, av) = (g.value(e), g.value(adj));
    let shift = Tensor::from_fn(&[n, 1], |i| {
        (0..n)
            .filter(|&j| av.at(&[i, j]) > 0.0)
            .map(|j| ev.at(&[i, j]))
            .fold(f64::NEG_INFINITY, f64::max)
            .max(-1e300)
    });
    let shift = g.constant(shift);
    let centred = g.sub(e, shift)?;
    let ex = g.exp(centred);
    let weighted = g.mul(ex, adj)?;
    let denom = g.sum(weighted, 1)?;
    let alpha = g.div(weighted, denom)?;
    let agg = g.matmul(alpha, h)?;
    let output = if relu { g.relu(agg) } else { agg };
    Ok(GatOutput { alpha, output })
}

/// Numeric evaluation of one layer; returns `(x', α)`.
pub fn gat_layer(
    layer: &GatLayer,
    x: &Tensor,
    adj: &Tensor,
    relu: bool,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let w = g.constant(layer.weight.clone());
    let a = g.constant(layer.attention.clone());
    let xv = g.constant(x.clone());
    let av = g.constant(adj.clone());
    let out = gat_forward(&mut g, w, a, xv, av, relu)?;
    Ok((g.value(out.output).clone(), g.value(out.alpha).clone()))
}

/// Two stacked attention layers (ReLU, then identity), residual to the
/// input and a shared linear node classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoGr {
    pub layers: [GatLayer; 2],
    pub fc: Linear,
    pub delta: f64,
}

impl ProtoGr {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, classes: usize, delta: f64) -> Self {
        Self {
            layers: [GatLayer::new(rng, dim, dim), GatLayer::new(rng, dim, dim)],
            fc: Linear::new(rng, dim, classes),
            delta,
        }
    }

    /// Node logits for node features `x` (all rows nonzero).
    pub fn logits(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Var> {
        let d = g.shape(x)[1];
        for layer in &self.layers {
            let ws = layer.weight.shape();
            if ws[0] != d || ws[1] != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ws[1],
                });
            }
        }
        let adj = adjacency(g, x, self.delta)?;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = format!("protogr.layer{l}");
            let w = binder.bind(g, join(&prefix, "weight"), &layer.weight);
            let a = binder.bind(g, join(&prefix, "attention"), &layer.attention);
            h = gat_forward(g, w, a, h, adj, l == 0)?.output;
        }
        let combined = g.add(h, x)?;
        self.fc.forward(g, binder, "protogr.fc", combined)
    }

    /// Mean node-classification cross-entropy over the usable rows of the
    /// `(M·K)×d` prototype matrix; node `m·K + k` has label `k`. Returns
    /// `None` when no row is usable.
    pub fn loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        prototypes: Var,
        usable: &[bool],
        classes: usize,
    ) -> Result<Option<Var>> {
        let nonzero = nonzero_rows(g.value(prototypes));
        let keep: Vec<bool> = usable.iter().zip(&nonzero).map(|(&u, &z)| u && z).collect();
        let Some(sel) = selection_matrix(&keep) else {
            return Ok(None);
        };
        let labels: Vec<usize> = (0..keep.len())
            .filter(|&i| keep[i])
            .map(|i| i % classes)
            .collect();
        let s = g.constant(sel);
        let x = g.matmul(s, prototypes)?;
        let logits = self.logits(g, binder, x)?;
        Ok(Some(cross_entropy(g, logits, &labels)?))
    }
}

impl Module for ProtoGr {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{l}"));
            f(&join(&p, "weight"), &layer.weight);
            f(&join(&p, "attention"), &layer.attention);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{l}"));
            f(&join(&p, "weight"), &mut layer.weight);
            f(&join(&p, "attention"), &mut layer.attention);
        }
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }
}
