use adaperf_autograd::{Graph, PNorm, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking a sample against its budget.
pub const BUDGET_SLACK: f32 = 1e-6;

/// L2 projections land this fraction inside the ball so that rounding in
/// `x + delta` can never push a stored sample outside it.
const L2_SHRINK: f32 = 1.0 - 1e-6;

/// Norm order and radius of the allowed perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub norm: PNorm,
    pub epsilon: f32,
}

impl PerturbationBudget {
    pub fn new(norm: PNorm, epsilon: f32) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("perturbation radius must be positive, got {epsilon}")));
        }
        Ok(Self { norm, epsilon })
    }

    pub fn linf(epsilon: f32) -> Result<Self> {
        Self::new(PNorm::Linf, epsilon)
    }

    pub fn l2(epsilon: f32) -> Result<Self> {
        Self::new(PNorm::L2, epsilon)
    }

    /// Largest per-entry magnitude a generator head may emit for `dim`-sized
    /// inputs while staying inside the ball.
    pub fn entry_scale(&self, dim: usize) -> f32 {
        match self.norm {
            PNorm::Linf => self.epsilon,
            PNorm::L2 => self.epsilon / (dim as f32).sqrt(),
        }
    }

    /// Whether `generated` is a valid test sample for `seed`.
    pub fn admits(&self, seed: &[f32], generated: &[f32]) -> bool {
        if seed.len() != generated.len() || generated.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return false;
        }
        perturbation_norm(seed, generated, self.norm) <= f64::from(self.epsilon) + f64::from(BUDGET_SLACK)
    }

    pub fn norm_name(&self) -> &'static str {
        match self.norm {
            PNorm::L2 => "l2",
            PNorm::Linf => "linf",
        }
    }

    /// Radius used by the L2 projection step.
    fn l2_radius(&self) -> f32 {
        self.epsilon * L2_SHRINK
    }
}

/// `||generated - seed||_p` computed in f64 from the stored f32 values.
pub fn perturbation_norm(seed: &[f32], generated: &[f32], norm: PNorm) -> f64 {
    let d = seed.iter().zip(generated).map(|(&a, &b)| f64::from(b) - f64::from(a));
    match norm {
        PNorm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
        PNorm::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Projection of `x_perturbed - x` onto the budget ball followed by clamping
/// into `[0, 1]`, as graph operations. Works per sample on batches.
pub fn clip_graph(g: &mut Graph, x: Var, x_perturbed: Var, budget: &PerturbationBudget) -> Var {
    let delta = g.sub(x_perturbed, x);
    let delta = match budget.norm {
        PNorm::Linf => g.clamp(delta, -budget.epsilon, budget.epsilon),
        PNorm::L2 => g.project_l2(delta, budget.l2_radius()),
    };
    let out = g.add(x, delta);
    g.clamp(out, 0.0, 1.0)
}

/// [`clip_graph`] on plain tensors; `x` and `x_perturbed` are one sample or a batch.
pub fn clip_sample(x: &Tensor, x_perturbed: &Tensor, budget: &PerturbationBudget) -> Result<Tensor> {
    if x.shape() != x_perturbed.shape() {
        return Err(Error::Shape(format!(
            "clip: {:?} vs {:?}",
            x.shape(),
            x_perturbed.shape()
        )));
    }
    let shape = x.shape().to_vec();
    let batched = |t: &Tensor| -> Result<Tensor> {
        if t.shape().len() == 4 {
            Ok(t.clone())
        } else {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok(t.clone().reshape(&s)?)
        }
    };
    let mut g = Graph::inference();
    let xv = g.constant(batched(x)?);
    let pv = g.constant(batched(x_perturbed)?);
    let out = clip_graph(&mut g, xv, pv, budget);
    Ok(g.value(out).clone().reshape(&shape)?)
}

/// Mean per-sample p-norm of a `[B, ...]` perturbation batch.
pub fn per_loss(perturbations: &Tensor, norm: PNorm) -> f32 {
    let b = perturbations.batch();
    if b == 0 {
        return 0.0;
    }
    let n = perturbations.item_len();
    perturbations.data().chunks(n).map(|c| norm.of(c)).sum::<f32>() / b as f32
}
