//! Supervised contrastive loss over the prototype bank.
//!
//! A prototype of class `k` is a query; the same-class prototypes of the
//! other domains are its positives and every prototype of another class is
//! a negative.

use comen_tensor::{Graph, Tensor, Var};

use crate::error::Result;
use crate::proto_graph::{nonzero_rows, selection_matrix};

pub const DEFAULT_TAU: f64 = 0.5;

/// `−log(exp(v·v⁺/τ) / (exp(v·v⁺/τ) + Σ_n exp(v·v⁻_n/τ)))`.
pub fn info_nce(v: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let sp = dot(v, positive);
    let sn: Vec<f64> = negatives.iter().map(|n| dot(v, n)).collect();
    let shift = sn.iter().copied().fold(sp, f64::max);
    let denom = (sp - shift).exp() + sn.iter().map(|s| (s - shift).exp()).sum::<f64>();
    denom.ln() - (sp - shift)
}

/// Loss settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastOptions {
    pub tau: f64,
    /// L2-normalize prototypes before taking dot products.
    pub normalize: bool,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            normalize: true,
        }
    }
}

/// Graph form over an `(M·K)×d` prototype matrix; cell `m·K + k` has class
/// `k`. Every usable prototype with at least one positive is a query; the
/// result is the mean over queries of the mean over their positives.
/// `None` when no query has a positive.
pub fn protoccl(
    g: &mut Graph,
    prototypes: Var,
    usable: &[bool],
    classes: usize,
    opts: ContrastOptions,
) -> Result<Option<Var>> {
    let keep: Vec<bool> = if opts.normalize {
        let nz = nonzero_rows(g.value(prototypes));
        usable.iter().zip(nz).map(|(&u, z)| u && z).collect()
    } else {
        usable.to_vec()
    };
    let cells: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let n = cells.len();
    let class_of = |r: usize| cells[r] % classes;
    let positives: Vec<usize> = (0..n)
        .map(|q| {
            (0..n)
                .filter(|&p| p != q && class_of(p) == class_of(q))
                .count()
        })
        .collect();
    let queries = positives.iter().filter(|&&c| c > 0).count();
    if queries == 0 {
        return Ok(None);
    }
    let sel = selection_matrix(&keep).expect("at least one query");
    let s = g.constant(sel);
    let mut x = g.matmul(s, prototypes)?;
    if opts.normalize {
        let sq = g.square(x);
        let norms = g.sum(sq, 1)?;
        let norms = g.sqrt(norms)?;
        x = g.div(x, norms)?;
    }
    let xt = g.transpose(x)?;
    let sim = g.matmul(x, xt)?;
    let sim = g.scale(sim, 1.0 / opts.tau);
    let sv = g.value(sim).clone();
    let shift = Tensor::from_fn(&[n, 1], |q| {
        (0..n)
            .filter(|&j| j != q)
            .map(|j| sv.at(&[q, j]))
            .fold(f64::NEG_INFINITY, f64::max)
            .max(-1e300)
    });
    let negative = Tensor::from_fn(&[n, n], |i| {
        if class_of(i / n) != class_of(i % n) {
            1.0
        } else {
            0.0
        }
    });
    let weight = Tensor::from_fn(&[n, n], |i| {
        let (q, p) = (i / n, i % n);
        if p != q && class_of(p) == class_of(q) {
            1.0 / (positives[q] * queries) as f64
        } else {
            0.0
        }
    });
    let shift = g.constant(shift);
    let centred = g.sub(sim, shift)?;
    let ex = g.exp(centred);
    let negative = g.constant(negative);
    let neg = g.mul(ex, negative)?;
    let negsum = g.sum(neg, 1)?;
    let denom = g.add(ex, negsum)?;
    let denom = g.clamp_min(denom, 1e-300);
    let log_denom = g.log(denom)?;
    let terms = g.sub(log_denom, centred)?;
    let weight = g.constant(weight);
    let weighted = g.mul(terms, weight)?;
    Ok(Some(g.sum_all(weighted)))
}

/// Numeric value of [`protoccl`]; 0 when no query has a positive.
pub fn protoccl_loss(
    prototypes: &Tensor,
    usable: &[bool],
    classes: usize,
    opts: ContrastOptions,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(prototypes.clone());
    Ok(match protoccl(&mut g, p, usable, classes, opts)? {
        Some(l) => g.value(l).item(),
        None => 0.0,
    })
}
