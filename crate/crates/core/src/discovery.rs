//! Latent domain discovery: k-means pseudo labels on style vectors, the
//! domain predictor `F_d` and the assignment entropy objective.

use comen_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{join, Binder, Linear, Module};
use crate::style_norm;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const KMEANS_ATTEMPTS: u64 = 10;
const LOG_FLOOR: f64 = 1e-12;

/// Column-wise standardization parameters (`(x − shift) / scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(points: &Tensor) -> Self {
        let (n, d) = (points.shape()[0], points.shape()[1]);
        let mut shift = vec![0.0; d];
        for r in 0..n {
            for (s, v) in shift.iter_mut().zip(points.row(r)) {
                *s += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(points.row(r)).zip(&shift) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(1e-8);
        }
        Self { shift, scale }
    }

    pub fn apply(&self, points: &Tensor) -> Tensor {
        let d = self.shift.len();
        Tensor::from_fn(points.shape(), |i| {
            (points.data()[i] - self.shift[i % d]) / self.scale[i % d]
        })
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let n = points.shape()[0];
    let mut centroids = vec![points.row(rng.gen_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in dist.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points.row(pick).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), &c));
        }
        centroids.push(c);
    }
    Some(centroids)
}

/// Lloyd iterations from one initialization; `None` when a cluster empties.
fn lloyd(points: &Tensor, mut centroids: Vec<Vec<f64>>) -> Option<Vec<usize>> {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let k = centroids.len();
    let mut labels: Vec<usize> = (0..n)
        .map(|i| nearest(points.row(i), &centroids).0)
        .collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(squared_distance(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        labels = (0..n)
            .map(|i| nearest(points.row(i), &centroids).0)
            .collect();
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    (!counts.contains(&0)).then_some(labels)
}

/// Within-cluster sum of squared distances to the cluster means.
fn inertia(points: &Tensor, labels: &[usize], k: usize) -> f64 {
    let d = points.shape()[1];
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(points.row(i), &means[l]))
        .sum()
}

/// k-means with k-means++ seeding, restarted [`KMEANS_ATTEMPTS`] times with
/// derived seeds; the clustering with the lowest within-cluster sum of
/// squares wins, earlier restarts winning ties. Restarts that leave a
/// cluster empty are discarded.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.ndim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: points.ndim(),
        });
    }
    let n = points.shape()[0];
    if k == 0 || n < k {
        return Err(Error::InvalidDimension(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for attempt in 0..KMEANS_ATTEMPTS {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        let Some(init) = kmeans_plus_plus(points, k, &mut rng) else {
            continue;
        };
        if let Some(labels) = lloyd(points, init) {
            let cost = inertia(points, &labels, k);
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, labels));
            }
        }
    }
    best.map(|(_, labels)| labels).ok_or(Error::EmptyCluster(k))
}

/// Hard pseudo domain labels from k-means on standardized style vectors.
pub fn bootstrap_pseudo_domains(styles: &Tensor, domains: usize, seed: u64) -> Result<Vec<usize>> {
    if styles.ndim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: styles.ndim(),
        });
    }
    let standardized = Standardizer::fit(styles).apply(styles);
    kmeans(&standardized, domains, seed)
}

/// `F_d`: standardize → linear → leaky ReLU → linear → softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPredictor {
    pub hidden: Linear,
    pub output: Linear,
    /// Input standardization, `1×2C` each.
    pub shift: Tensor,
    pub scale: Tensor,
    /// Frozen first-conv kernel the style vectors are computed with; fixed
    /// at bootstrap so the predictor's input does not drift with the encoder.
    pub stem: Option<Tensor>,
}

impl DomainPredictor {
    pub fn new(rng: &mut ChaCha8Rng, style_dim: usize, hidden: usize, domains: usize) -> Self {
        Self {
            hidden: Linear::new(rng, style_dim, hidden),
            output: Linear::new(rng, hidden, domains),
            shift: Tensor::zeros(&[1, style_dim]),
            scale: Tensor::ones(&[1, style_dim]),
            stem: None,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn domains(&self) -> usize {
        self.output.outputs()
    }

    pub fn set_standardizer(&mut self, s: &Standardizer) {
        let d = self.style_dim();
        self.shift = Tensor::new(&[1, d], s.shift.clone()).expect("standardizer width");
        self.scale = Tensor::new(&[1, d], s.scale.clone()).expect("standardizer width");
    }

    pub fn logits(&self, g: &mut Graph, binder: &mut Binder, style: Var) -> Result<Var> {
        let width = g.shape(style)[1];
        if width != self.style_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.style_dim(),
                found: width,
            });
        }
        let shift = g.constant(self.shift.clone());
        let scale = g.constant(self.scale.clone());
        let x = g.sub(style, shift)?;
        let x = g.div(x, scale)?;
        let h = self.hidden.forward(g, binder, "predictor.hidden", x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.output.forward(g, binder, "predictor.output", h)
    }

    /// Assignment probabilities `B×M` for a batch of style vectors.
    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, style: Var) -> Result<Var> {
        let logits = self.logits(g, binder, style)?;
        Ok(g.softmax(logits, 1)?)
    }

    /// Assignments for raw images `x`. Uses the frozen stem when present,
    /// otherwise `encoder_style`.
    pub fn assign(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        encoder_style: Var,
        eps: f64,
    ) -> Result<Var> {
        let style = match &self.stem {
            Some(w) => {
                let w = g.constant(w.clone());
                let f = g.conv2d(x, w, 1)?;
                let m = style_norm::sample_moments(g, f)?;
                style_norm::style_from_moments(g, &m, eps)?
            }
            None => encoder_style,
        };
        self.forward(g, binder, style)
    }

    /// Pure evaluation on an `N×2C` matrix of style vectors.
    pub fn predict(&self, styles: &Tensor) -> Result<Tensor> {
        if styles.ndim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: styles.ndim(),
            });
        }
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let s = g.constant(styles.clone());
        let p = self.forward(&mut g, &mut binder, s)?;
        Ok(g.value(p).clone())
    }
}

impl Module for DomainPredictor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "scale"), &self.scale);
        if let Some(stem) = &self.stem {
            f(&join(prefix, "stem"), stem);
        }
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "scale"), &mut self.scale);
        if let Some(stem) = &mut self.stem {
            f(&join(prefix, "stem"), stem);
        }
    }
}

/// `−(1/B) Σ_i Σ_m p_im log p_im`, log argument clamped at 1e-12.
pub fn entropy_loss(g: &mut Graph, p: Var) -> Result<Var> {
    let b = g.shape(p)[0] as f64;
    let clamped = g.clamp_min(p, LOG_FLOOR);
    let logp = g.log(clamped)?;
    let plogp = g.mul(p, logp)?;
    let total = g.sum_all(plogp);
    Ok(g.scale(total, -1.0 / b))
}

/// Mean per-row entropy of an assignment matrix.
pub fn mean_entropy(p: &Tensor) -> f64 {
    let b = p.shape()[0] as f64;
    -p.data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v * v.max(LOG_FLOOR).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / b
}

/// Batch balancing penalty `KL(mean_i p_i ‖ uniform)`.
pub fn balance_penalty(g: &mut Graph, p: Var) -> Result<Var> {
    let m = g.shape(p)[1] as f64;
    let q = g.mean(p, 0)?;
    let clamped = g.clamp_min(q, LOG_FLOOR);
    let logq = g.log(clamped)?;
    let shifted = g.add_scalar(logq, m.ln());
    let terms = g.mul(q, shifted)?;
    Ok(g.sum_all(terms))
}

/// True when some domain's mean assigned mass falls below `1/(4M)`.
pub fn collapse_detected(p: &Tensor) -> bool {
    let (b, m) = (p.shape()[0], p.shape()[1]);
    (0..m).any(|j| {
        (0..b).map(|i| p.data()[i * m + j]).sum::<f64>() / (b as f64) < 1.0 / (4.0 * m as f64)
    })
}
