//! Channel style statistics and style-induced domain-specific normalization.
//!
//! A batch `z` of shape `B×C×H×W` is normalized once per latent domain `m`
//! with that domain's weighted statistics, and each sample's output is the
//! mixture of the branch outputs under its soft assignment `p_i`:
//!
//! ```text
//! y_i = Σ_m p_im · (λ_m · (z_i − μ_m) / sqrt(σ²_m + ε) + β_m)
//! ```
//!
//! The weights inside `μ_m` and `σ²_m` are the column-normalized
//! assignments `ŵ_im = p_im / Σ_j p_jm`, applied over batch and spatial
//! positions.

use comen_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Columns of the assignment matrix lighter than this fall back to the
/// running statistics.
pub const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Spatial mean and `sqrt(variance + eps)` of each channel of a `C×H×W` map.
pub fn channel_stats(f: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if f.ndim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: f.ndim(),
        });
    }
    let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    if hw == 0 {
        return Err(Error::EmptySpatialExtent);
    }
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for plane in f.data().chunks_exact(hw) {
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
        mu.push(m);
        sigma.push((v + eps).sqrt());
    }
    Ok((mu, sigma))
}

/// `concat(μ, σ)`, length `2C`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn channels(&self) -> usize {
        self.0.len() / 2
    }
}

pub fn style_vector(f: &Tensor, eps: f64) -> Result<StyleVector> {
    let (mut mu, sigma) = channel_stats(f, eps)?;
    mu.extend(sigma);
    Ok(StyleVector(mu))
}

/// Per-sample channel moments of a `B×C×H×W` batch, both `B×C`.
#[derive(Debug, Clone, Copy)]
pub struct SampleMoments {
    pub mean: Var,
    pub var: Var,
}

pub fn sample_moments(g: &mut Graph, z: Var) -> Result<SampleMoments> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            found: shape.len(),
        });
    }
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = g.reshape(z, &[b, c, hw])?;
    let mean3 = g.mean(flat, 2)?;
    let centered = g.sub(flat, mean3)?;
    let sq = g.square(centered);
    let var3 = g.mean(sq, 2)?;
    Ok(SampleMoments {
        mean: g.reshape(mean3, &[b, c])?,
        var: g.reshape(var3, &[b, c])?,
    })
}

/// Style vectors `B×2C` from per-sample moments.
pub fn style_from_moments(g: &mut Graph, m: &SampleMoments, eps: f64) -> Result<Var> {
    let shifted = g.add_scalar(m.var, eps);
    let sigma = g.sqrt(shifted)?;
    Ok(g.concat(&[m.mean, sigma], 1)?)
}

/// Weighted per-branch statistics, each `M×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub mean: Tensor,
    pub var: Tensor,
    /// Column sums `Σ_i p_im`.
    pub mass: Vec<f64>,
    pub degenerate: Vec<bool>,
}

struct BranchVars {
    mean: Var,
    var: Var,
    stats: DomainStats,
}

fn check_assignment_shape(g: &Graph, p: Var, batch: usize) -> Result<usize> {
    let ps = g.shape(p);
    if ps.len() != 2 || ps[0] != batch {
        return Err(Error::DimensionMismatch {
            expected: batch,
            found: ps[0],
        });
    }
    Ok(ps[1])
}

/// Weighted moments per branch. Degenerate columns are reported, their
/// entries are meaningless and must be replaced by the caller.
fn branch_stats(g: &mut Graph, moments: &SampleMoments, p: Var) -> Result<BranchVars> {
    let b = g.shape(moments.mean)[0];
    let c = g.shape(moments.mean)[1];
    let m = check_assignment_shape(g, p, b)?;
    let mass_var = g.sum(p, 0)?;
    let mass: Vec<f64> = g.value(mass_var).data().to_vec();
    let degenerate: Vec<bool> = mass.iter().map(|&s| s < DEGENERATE_MASS).collect();
    let pad = g.constant(Tensor::new(
        &[1, m],
        degenerate
            .iter()
            .map(|&d| if d { 1.0 } else { 0.0 })
            .collect(),
    )?);
    let safe_mass = g.add(mass_var, pad)?;
    let w = g.div(p, safe_mass)?;
    let wt = g.transpose(w)?;
    let mu = g.matmul(wt, moments.mean)?;
    let within = g.matmul(wt, moments.var)?;
    // between-sample spread: Σ_i ŵ_im (mean_i − μ_m)²
    let mean3 = g.reshape(moments.mean, &[b, 1, c])?;
    let mu3 = g.reshape(mu, &[1, m, c])?;
    let diff = g.sub(mean3, mu3)?;
    let sq = g.square(diff);
    let w3 = g.reshape(w, &[b, m, 1])?;
    let weighted = g.mul(sq, w3)?;
    let between = g.sum(weighted, 0)?;
    let between = g.reshape(between, &[m, c])?;
    let var = g.add(within, between)?;
    let stats = DomainStats {
        mean: g.value(mu).clone(),
        var: g.value(var).clone(),
        mass,
        degenerate,
    };
    Ok(BranchVars {
        mean: mu,
        var,
        stats,
    })
}

/// Weighted per-domain statistics of `batch` (`B×C×H×W`) under assignments
/// `p` (`B×M`, rows summing to one).
pub fn weighted_domain_stats(batch: &Tensor, p: &Tensor) -> Result<DomainStats> {
    validate_assignments(p, batch.shape().first().copied().unwrap_or(0))?;
    let mut g = Graph::new();
    let z = g.constant(batch.clone());
    let p = g.constant(p.clone());
    let moments = sample_moments(&mut g, z)?;
    Ok(branch_stats(&mut g, &moments, p)?.stats)
}

fn validate_assignments(p: &Tensor, batch: usize) -> Result<()> {
    if p.ndim() != 2 || p.shape()[0] != batch {
        return Err(Error::DimensionMismatch {
            expected: batch,
            found: p.shape()[0],
        });
    }
    for r in 0..batch {
        let row = p.row(r);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDimension(format!(
                "assignment row {r} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Per-domain affine parameters and running statistics of one SDNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SdNormLayer {
    /// `λ`, `M×C`
    pub gain: Tensor,
    /// `β`, `M×C`
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl SdNormLayer {
    pub fn new(channels: usize, branches: usize) -> Self {
        Self {
            gain: Tensor::ones(&[branches, channels]),
            bias: Tensor::zeros(&[branches, channels]),
            running_mean: Tensor::zeros(&[branches, channels]),
            running_var: Tensor::ones(&[branches, channels]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn branches(&self) -> usize {
        self.gain.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.gain.shape()[1]
    }

    /// Graph-level forward. `gain` and `bias` are this layer's parameters
    /// bound into `g`; `moments` must come from `z`. Returns the batch
    /// statistics in train mode so the caller can update running state.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        z: Var,
        moments: &SampleMoments,
        p: Var,
        gain: Var,
        bias: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<DomainStats>)> {
        let shape = g.shape(z).to_vec();
        let (b, c) = (shape[0], shape[1]);
        if c != self.channels() {
            return Err(Error::DimensionMismatch {
                expected: self.channels(),
                found: c,
            });
        }
        let m = check_assignment_shape(g, p, b)?;
        if m != self.branches() {
            return Err(Error::DimensionMismatch {
                expected: self.branches(),
                found: m,
            });
        }
        let (mu, var, stats) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(Error::InsufficientBatch(b));
                }
                let bv = branch_stats(g, moments, p)?;
                if bv.stats.degenerate.iter().any(|&d| d) {
                    let keep = Tensor::from_fn(&[m, c], |i| {
                        if bv.stats.degenerate[i / c] {
                            0.0
                        } else {
                            1.0
                        }
                    });
                    let fill = |run: &Tensor| {
                        Tensor::from_fn(&[m, c], |i| {
                            if bv.stats.degenerate[i / c] {
                                run.data()[i]
                            } else {
                                0.0
                            }
                        })
                    };
                    let keep = g.constant(keep);
                    let fm = g.constant(fill(&self.running_mean));
                    let fv = g.constant(fill(&self.running_var));
                    let mu = g.mul(bv.mean, keep)?;
                    let mu = g.add(mu, fm)?;
                    let var = g.mul(bv.var, keep)?;
                    let var = g.add(var, fv)?;
                    (mu, var, Some(bv.stats))
                } else {
                    (bv.mean, bv.var, Some(bv.stats))
                }
            }
            NormMode::Infer => (
                g.constant(self.running_mean.clone()),
                g.constant(self.running_var.clone()),
                None,
            ),
        };
        // Σ_m p_im λ_m (z − μ_m)/s_m + β_m  ==  z·A_i + B_i  with
        // A = p·(λ/s), B = p·(β − λ μ / s)
        let shifted = g.add_scalar(var, self.eps);
        let std = g.sqrt(shifted)?;
        let scale = g.div(gain, std)?;
        let scaled_mu = g.mul(scale, mu)?;
        let offset = g.sub(bias, scaled_mu)?;
        let a = g.matmul(p, scale)?;
        let o = g.matmul(p, offset)?;
        let a = g.reshape(a, &[b, c, 1, 1])?;
        let o = g.reshape(o, &[b, c, 1, 1])?;
        let y = g.mul(z, a)?;
        Ok((g.add(y, o)?, stats))
    }

    /// Momentum update of the running statistics. The step of branch `m` is
    /// `(1 − momentum) · M · mass_m / B`, capped at 1, so balanced branches
    /// move like ordinary batch norm; degenerate branches stay put.
    pub fn update_running(&mut self, stats: &DomainStats, batch: usize) {
        let (m, c) = (self.branches(), self.channels());
        for k in 0..m {
            if stats.degenerate[k] {
                continue;
            }
            let eta = ((1.0 - self.momentum) * m as f64 * stats.mass[k] / batch as f64).min(1.0);
            for ch in 0..c {
                let i = k * c + ch;
                let rm = &mut self.running_mean.data_mut()[i];
                *rm += eta * (stats.mean.data()[i] - *rm);
                let rv = &mut self.running_var.data_mut()[i];
                *rv += eta * (stats.var.data()[i] - *rv);
            }
        }
    }

    /// Stand-alone forward on plain tensors; updates running statistics in
    /// train mode.
    pub fn forward(&mut self, batch: &Tensor, p: &Tensor, mode: NormMode) -> Result<Tensor> {
        let b = batch.shape().first().copied().unwrap_or(0);
        validate_assignments(p, b)?;
        let mut g = Graph::new();
        let z = g.constant(batch.clone());
        let pv = g.constant(p.clone());
        let gain = g.constant(self.gain.clone());
        let bias = g.constant(self.bias.clone());
        let moments = sample_moments(&mut g, z)?;
        let (y, stats) = self.forward_graph(&mut g, z, &moments, pv, gain, bias, mode)?;
        let out = g.value(y).clone();
        if let Some(stats) = stats {
            self.update_running(&stats, b);
        }
        Ok(out)
    }
}
