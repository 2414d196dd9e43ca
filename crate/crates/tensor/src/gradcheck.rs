//! Central finite-difference gradient checks.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of scalar `f` at `point` against
/// central differences and returns
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// Multi-input variant of [`finite_difference_check`]: every tensor in
/// `points` becomes a parameter and every coordinate is perturbed.
pub fn finite_difference_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let analytic = analytic_gradients(&f, points)?;
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..points[p].numel() {
            let orig = points[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn analytic_gradients<F>(f: &F, points: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(TensorError::NonScalarLoss(g.value(out).shape().to_vec()));
    }
    if !g.requires_grad(out) {
        // constant function of the inputs
        return Ok(points.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}
