//! Per-domain class prototypes with exponential-moving-average updates.
//!
//! Cells are stored row-major as `(m, k) → m·K + k`.

use comen_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{join, Module};

pub const DEFAULT_RHO: f64 = 0.7;
/// Cells with less assigned mass than this are absent from a batch.
pub const ABSENT_MASS: f64 = 1e-8;

/// Batch-local prototypes `ĉ`, `(M·K)×d`, with the per-cell mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPrototypes {
    pub values: Tensor,
    pub mass: Vec<f64>,
    pub present: Vec<bool>,
}

/// Pooling weights `W[(m,k), i] = p_im·[y_i = k] / mass_mk`, so that the
/// local prototypes are `W · embeddings`. Rows of absent cells are zero.
pub fn pooling_weights(
    labels: &[usize],
    p: &Tensor,
    classes: usize,
) -> Result<(Tensor, Vec<f64>, Vec<bool>)> {
    if p.ndim() != 2 || p.shape()[0] != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: p.shape()[0],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let (b, m) = (labels.len(), p.shape()[1]);
    let cells = m * classes;
    let mut mass = vec![0.0; cells];
    for (i, &y) in labels.iter().enumerate() {
        for d in 0..m {
            mass[d * classes + y] += p.data()[i * m + d];
        }
    }
    let present: Vec<bool> = mass.iter().map(|&s| s >= ABSENT_MASS).collect();
    let w = Tensor::from_fn(&[cells, b], |idx| {
        let (cell, i) = (idx / b, idx % b);
        let (d, k) = (cell / classes, cell % classes);
        if present[cell] && labels[i] == k {
            p.data()[i * m + d] / mass[cell]
        } else {
            0.0
        }
    });
    Ok((w, mass, present))
}

/// Assignment-weighted class means per domain.
pub fn local_prototypes(
    embeddings: &Tensor,
    labels: &[usize],
    p: &Tensor,
    classes: usize,
) -> Result<LocalPrototypes> {
    let (w, mass, present) = pooling_weights(labels, p, classes)?;
    let mut g = Graph::new();
    let wv = g.constant(w);
    let e = g.constant(embeddings.clone());
    let values = g.matmul(wv, e)?;
    Ok(LocalPrototypes {
        values: g.value(values).clone(),
        mass,
        present,
    })
}

/// The `M×K` global prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub domains: usize,
    pub classes: usize,
    pub rho: f64,
    /// `(M·K)×d`
    pub prototypes: Tensor,
    pub initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(domains: usize, classes: usize, dim: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!(
                "prototype decay must lie in (0, 1), got {rho}"
            )));
        }
        Ok(Self {
            domains,
            classes,
            rho,
            prototypes: Tensor::zeros(&[domains * classes, dim]),
            initialized: vec![false; domains * classes],
        })
    }

    pub fn cells(&self) -> usize {
        self.domains * self.classes
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn cell(&self, domain: usize, class: usize) -> &[f64] {
        self.prototypes.row(domain * self.classes + class)
    }

    pub fn fully_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    /// `c ← ρ·c + (1−ρ)·ĉ` on present cells; uninitialized present cells
    /// take `ĉ` directly; absent cells are untouched.
    pub fn ema_update(&mut self, local: &LocalPrototypes) {
        let d = self.dim();
        for cell in 0..self.cells() {
            if !local.present[cell] {
                continue;
            }
            let src = local.values.row(cell);
            let dst = &mut self.prototypes.data_mut()[cell * d..(cell + 1) * d];
            if self.initialized[cell] {
                for (c, &h) in dst.iter_mut().zip(src) {
                    *c = self.rho * *c + (1.0 - self.rho) * h;
                }
            } else {
                dst.copy_from_slice(src);
                self.initialized[cell] = true;
            }
        }
    }

    /// Prototypes entering the losses for this step:
    /// `ρ·c_prev + (1−ρ)·ĉ` where both exist, `ĉ` for new cells and the
    /// constant `c_prev` for cells absent from the batch. Gradient reaches
    /// `embeddings` only through `ĉ`. Returns the `(M·K)×d` matrix and the
    /// cells that hold a prototype.
    pub fn blended(
        &self,
        g: &mut Graph,
        embeddings: Var,
        pooling: &Tensor,
        present: &[bool],
    ) -> Result<(Var, Vec<bool>)> {
        let d = self.dim();
        let cells = self.cells();
        let mut coef_local = vec![0.0; cells];
        let mut coef_prev = vec![0.0; cells];
        let mut usable = vec![false; cells];
        for c in 0..cells {
            match (present[c], self.initialized[c]) {
                (true, true) => {
                    coef_local[c] = 1.0 - self.rho;
                    coef_prev[c] = self.rho;
                }
                (true, false) => coef_local[c] = 1.0,
                (false, true) => coef_prev[c] = 1.0,
                (false, false) => {}
            }
            usable[c] = present[c] || self.initialized[c];
        }
        let prev = Tensor::from_fn(&[cells, d], |i| {
            coef_prev[i / d] * self.prototypes.data()[i]
        });
        let scaled = Tensor::from_fn(pooling.shape(), |i| {
            coef_local[i / pooling.shape()[1]] * pooling.data()[i]
        });
        let w = g.constant(scaled);
        let local = g.matmul(w, embeddings)?;
        let prev = g.constant(prev);
        Ok((g.add(local, prev)?, usable))
    }
}

impl Module for PrototypeBank {
    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {}

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "prototypes"), &self.prototypes);
        let flags = Tensor::from_fn(
            &[self.cells()],
            |i| if self.initialized[i] { 1.0 } else { 0.0 },
        );
        f(&join(prefix, "initialized"), &flags);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "prototypes"), &mut self.prototypes);
        let mut flags =
            Tensor::from_fn(
                &[self.cells()],
                |i| if self.initialized[i] { 1.0 } else { 0.0 },
            );
        f(&join(prefix, "initialized"), &mut flags);
        self.initialized = flags.data().iter().map(|&v| v != 0.0).collect();
    }
}
