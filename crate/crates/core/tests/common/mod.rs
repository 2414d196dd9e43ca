//! Random instances and brute-force reference implementations shared by the
//! integration tests. The references use explicit loops over plain slices
//! and never call into the graph engine.

#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;

use comen_core::tensor::{finite_difference_check_many, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `n×m` rows drawn from a softmax of random logits.
pub fn soft_assignments(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            t.set(&[i, j], l.exp() / z);
        }
    }
    t
}

pub fn one_hot(labels: &[usize], m: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), m], |i| {
        if labels[i / m] == i % m {
            1.0
        } else {
            0.0
        }
    })
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn at4(z: &Tensor, b: usize, c: usize, i: usize) -> f64 {
    let s = z.shape();
    z.data()[(b * s[1] + c) * s[2] * s[3] + i]
}

/// Per-domain weighted mean and (biased) variance over batch and spatial
/// positions: weight of sample `i` in domain `m` is `p_im / Σ_j p_jm`.
pub fn weighted_stats_oracle(z: &Tensor, p: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (b, c, hw) = (z.shape()[0], z.shape()[1], z.shape()[2] * z.shape()[3]);
    let m = p.shape()[1];
    let mut means = vec![vec![0.0; c]; m];
    let mut vars = vec![vec![0.0; c]; m];
    for d in 0..m {
        let mass: f64 = (0..b).map(|i| p.at(&[i, d])).sum();
        for ch in 0..c {
            let mut mu = 0.0;
            for i in 0..b {
                for s in 0..hw {
                    mu += p.at(&[i, d]) / mass * at4(z, i, ch, s) / hw as f64;
                }
            }
            let mut var = 0.0;
            for i in 0..b {
                for s in 0..hw {
                    let e = at4(z, i, ch, s) - mu;
                    var += p.at(&[i, d]) / mass * e * e / hw as f64;
                }
            }
            means[d][ch] = mu;
            vars[d][ch] = var;
        }
    }
    (means, vars)
}

/// Soft mixture of per-domain normalizations, computed pixel by pixel.
pub fn sdnorm_oracle(z: &Tensor, p: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (means, vars) = weighted_stats_oracle(z, p);
    let (b, c, hw) = (z.shape()[0], z.shape()[1], z.shape()[2] * z.shape()[3]);
    let m = p.shape()[1];
    let mut out = Tensor::zeros(z.shape());
    for i in 0..b {
        for ch in 0..c {
            for s in 0..hw {
                let x = at4(z, i, ch, s);
                let mut y = 0.0;
                for d in 0..m {
                    let n = (x - means[d][ch]) / (vars[d][ch] + eps).sqrt();
                    y += p.at(&[i, d]) * (gain.at(&[d, ch]) * n + bias.at(&[d, ch]));
                }
                out.data_mut()[(i * c + ch) * hw + s] = y;
            }
        }
    }
    out
}

/// Textbook batch normalization over batch and spatial positions.
pub fn batch_norm_oracle(z: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Tensor {
    let (b, c, hw) = (z.shape()[0], z.shape()[1], z.shape()[2] * z.shape()[3]);
    let mut out = Tensor::zeros(z.shape());
    for ch in 0..c {
        let n = (b * hw) as f64;
        let mut mu = 0.0;
        for i in 0..b {
            for s in 0..hw {
                mu += at4(z, i, ch, s);
            }
        }
        mu /= n;
        let mut var = 0.0;
        for i in 0..b {
            for s in 0..hw {
                var += (at4(z, i, ch, s) - mu).powi(2);
            }
        }
        var /= n;
        for i in 0..b {
            for s in 0..hw {
                out.data_mut()[(i * c + ch) * hw + s] =
                    gain[ch] * (at4(z, i, ch, s) - mu) / (var + eps).sqrt() + bias[ch];
            }
        }
    }
    out
}

/// Cell `m·K + k` is `Σ_i p_im [y_i = k] e_i / Σ_i p_im [y_i = k]`; cells
/// without mass are `None`.
pub fn local_prototypes_oracle(
    e: &Tensor,
    labels: &[usize],
    p: &Tensor,
    classes: usize,
) -> Vec<Option<Vec<f64>>> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let m = p.shape()[1];
    let mut out = Vec::new();
    for dom in 0..m {
        for k in 0..classes {
            let mut mass = 0.0;
            let mut sum = vec![0.0; d];
            for i in 0..n {
                if labels[i] == k {
                    let w = p.at(&[i, dom]);
                    mass += w;
                    for j in 0..d {
                        sum[j] += w * e.at(&[i, j]);
                    }
                }
            }
            out.push(if mass >= 1e-8 {
                Some(sum.iter().map(|s| s / mass).collect())
            } else {
                None
            });
        }
    }
    out
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// One attention layer: `h = xW`, `e_ij = LReLU(a_srcᵀh_i + a_dstᵀh_j)`,
/// `α_ij ∝ A_ij exp(e_ij)`, output `σ(Σ_j α_ij h_j)`. Returns `(x', α)`.
pub fn gat_oracle(
    w: &Tensor,
    a: &Tensor,
    x: &Tensor,
    adj: &Tensor,
    relu: bool,
    slope: f64,
) -> (Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let mut h = vec![vec![0.0; dout]; n];
    for i in 0..n {
        for o in 0..dout {
            for k in 0..din {
                h[i][o] += x.at(&[i, k]) * w.at(&[k, o]);
            }
        }
    }
    let mut alpha = Tensor::zeros(&[n, n]);
    let mut out = Tensor::zeros(&[n, dout]);
    for i in 0..n {
        let mut e = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for o in 0..dout {
                s += a.at(&[o, 0]) * h[i][o] + a.at(&[dout + o, 0]) * h[j][o];
            }
            e[j] = leaky(s, slope);
        }
        let mut z = 0.0;
        for j in 0..n {
            z += adj.at(&[i, j]) * e[j].exp();
        }
        for j in 0..n {
            alpha.set(&[i, j], adj.at(&[i, j]) * e[j].exp() / z);
        }
        for o in 0..dout {
            let mut v = 0.0;
            for j in 0..n {
                v += alpha.at(&[i, j]) * h[j][o];
            }
            out.set(&[i, o], if relu { v.max(0.0) } else { v });
        }
    }
    (out, alpha)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−log(exp(v·p/τ) / (exp(v·p/τ) + Σ_n exp(v·n/τ)))`, no shifting.
pub fn info_nce_oracle(v: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(v, positive) / tau).exp();
    let mut denom = pos;
    for n in negatives {
        denom += (dot(v, n) / tau).exp();
    }
    -(pos / denom).ln()
}

/// Mean over queries (cells with a same-class partner) of the mean over
/// their positives of InfoNCE against all other-class cells.
pub fn protoccl_oracle(
    protos: &Tensor,
    usable: &[bool],
    classes: usize,
    tau: f64,
    normalize: bool,
) -> f64 {
    let n = protos.shape()[0];
    let rows: Vec<(usize, Vec<f64>)> = (0..n)
        .filter(|&i| usable[i])
        .map(|i| {
            let r = protos.row(i).to_vec();
            if normalize {
                let norm = dot(&r, &r).sqrt();
                (i % classes, r.iter().map(|v| v / norm).collect())
            } else {
                (i % classes, r)
            }
        })
        .collect();
    let mut total = 0.0;
    let mut queries = 0;
    for (q, (kq, vq)) in rows.iter().enumerate() {
        let negatives: Vec<Vec<f64>> = rows
            .iter()
            .filter(|(k, _)| k != kq)
            .map(|(_, v)| v.clone())
            .collect();
        let mut sum = 0.0;
        let mut count = 0;
        for (p, (kp, vp)) in rows.iter().enumerate() {
            if p != q && kp == kq {
                sum += info_nce_oracle(vq, vp, &negatives, tau);
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
            queries += 1;
        }
    }
    if queries == 0 {
        0.0
    } else {
        total / queries as f64
    }
}

/// `−(1/B) Σ_i log softmax(logits_i)[y_i]`.
pub fn cross_entropy_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for i in 0..b {
        let z: f64 = (0..k).map(|j| logits.at(&[i, j]).exp()).sum();
        total -= (logits.at(&[i, labels[i]]).exp() / z).ln();
    }
    total / b as f64
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Finite-difference relative error of a core scalar loss with respect to
/// every tensor in `points`.
pub fn grad_error<F>(f: F, points: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> comen_core::Result<Var>,
{
    finite_difference_check_many(
        |g, vars| Ok(f(g, vars).expect("valid instance")),
        points,
        step,
    )
    .unwrap()
}
