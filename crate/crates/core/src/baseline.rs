//! Per-sample iterative optimization baseline: projected gradient ascent on
//! the soft cost with a small perturbation-norm penalty.

use std::time::Instant;

use adaperf_autograd::{Graph, PNorm, Tensor};
use serde::{Deserialize, Serialize};

use crate::adnn::AdnnModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Producer, SuiteEntry, TestSuite};
use crate::flops::hard_cost_of;
use crate::gan::{clip_sample, PerturbationBudget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    pub max_iterations: usize,
    /// Weight of the perturbation-norm penalty.
    pub balance_weight: f32,
    /// Step length; `None` means `epsilon / 10`.
    pub step_size: Option<f32>,
    pub temperature: f32,
    pub budget: PerturbationBudget,
}

impl IterConfig {
    pub fn new(budget: PerturbationBudget) -> Self {
        Self {
            max_iterations: 300,
            balance_weight: 1e-6,
            step_size: None,
            temperature: 0.1,
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.balance_weight >= 0.0) {
            return Err(Error::Config("balance_weight must be non-negative".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config("step_size must be positive".into()));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f32 {
        self.step_size.unwrap_or(self.budget.epsilon / 10.0)
    }
}

#[derive(Debug, Clone)]
pub struct IterOutcome {
    /// Best iterate by hard cost, same shape as the input.
    pub sample: Tensor,
    pub best_cost: f64,
    /// Best cost seen after each completed iteration.
    pub best_so_far: Vec<f64>,
    pub iterations: usize,
    pub time_seconds: f64,
    /// Why the loop stopped early, if it did.
    pub warning: Option<String>,
}

/// Gradient of the penalized soft-cost objective at `current`.
fn objective_grad(model: &AdnnModel, x: &Tensor, current: &Tensor, config: &IterConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let cv = g.param(current.clone());
    let fwd = model.forward_graph(&mut g, &p, cv)?;
    let cost = model.soft_cost_of(&mut g, &fwd, config.temperature)?;
    let delta = g.sub(cv, xv);
    let norm = g.norm_per_sample(delta, config.budget.norm);
    let penalty = g.scale(norm, config.balance_weight);
    let obj = g.sub(cost, penalty);
    let obj = g.sum_all(obj);
    let mut grads = g.backward(obj);
    Ok(grads.take(cv).unwrap_or_else(|| Tensor::zeros(current.shape())))
}

/// Projected gradient ascent from `x` (one sample, `[C, H, W]` or `[1, C, H, W]`).
pub fn iterative_attack(model: &AdnnModel, x: &Tensor, config: &IterConfig) -> Result<IterOutcome> {
    config.validate()?;
    let shape = x.shape().to_vec();
    let [c, h, w] = model.spec().input_shape;
    let x = x.clone().reshape(&[1, c, h, w]).map_err(|_| {
        Error::Shape(format!("baseline input {shape:?} does not match {:?}", model.spec().input_shape))
    })?;
    let profile = model.cost_profile();
    let start = Instant::now();
    let step = config.step();
    let mut current = x.clone();
    let mut best: Option<(f64, Tensor)> = None;
    let mut best_so_far = Vec::with_capacity(config.max_iterations);
    let mut warning = None;
    for it in 0..config.max_iterations {
        let grad = objective_grad(model, &x, &current, config)?;
        if !grad.all_finite() {
            warning = Some(format!("non-finite gradient at iteration {it}"));
            break;
        }
        let stepped = match config.budget.norm {
            PNorm::Linf => current.zip_map(&grad, |v, g| v + step * g.signum() * f32::from(g != 0.0)),
            PNorm::L2 => {
                let n = PNorm::L2.of(grad.data());
                if n > 0.0 {
                    current.zip_map(&grad, |v, g| v + step * g / n)
                } else {
                    current.clone()
                }
            }
        };
        current = clip_sample(&x, &stepped, &config.budget)?;
        let trace = model.forward_batch_with_trace(&current)?;
        let cost = hard_cost_of(&trace[0].activated, &profile)?;
        if best.as_ref().map_or(true, |(b, _)| cost > *b) {
            best = Some((cost, current.clone()));
        }
        best_so_far.push(best.as_ref().map(|(b, _)| *b).expect("set above"));
    }
    let iterations = best_so_far.len();
    let (best_cost, sample) = match best {
        Some((c, s)) => (c, s),
        // Failed on the first iteration: fall back to the unmodified seed.
        None => (hard_cost_of(&model.forward_batch_with_trace(&x)?[0].activated, &profile)?, x),
    };
    Ok(IterOutcome {
        sample: sample.reshape(&shape)?,
        best_cost,
        best_so_far,
        iterations,
        time_seconds: start.elapsed().as_secs_f64(),
        warning,
    })
}

/// Runs the baseline on each seed in order. With a `time_budget_s`, no new
/// seed is started once the accumulated per-sample time reaches the budget;
/// the sample in flight when it runs out is kept.
pub fn baseline_suite(
    model: &AdnnModel,
    seeds: &Dataset,
    seed_ids: &[usize],
    config: &IterConfig,
    time_budget_s: Option<f64>,
) -> Result<TestSuite> {
    let mut suite = TestSuite::new(Producer::IterativeBaseline, config.budget, model.spec().hash());
    let mut spent = 0.0;
    for &id in seed_ids {
        if time_budget_s.is_some_and(|b| spent >= b) {
            break;
        }
        if id >= seeds.len() {
            return Err(Error::Invalid(format!("seed id {id} out of range for {} seeds", seeds.len())));
        }
        let seed = seeds.images.item(id).reshape(&model.spec().input_shape)?;
        let out = iterative_attack(model, &seed, config)?;
        spent += out.time_seconds;
        let mut entry = SuiteEntry::measure(model, id, Some(seeds.labels[id]), seed, out.sample, out.time_seconds)?;
        entry.warning = out.warning;
        suite.entries.push(entry);
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{build_skip_model, AdnnSpec, Mechanism};
    use crate::dataset::synthetic;

    fn setup() -> (AdnnModel, Dataset) {
        let spec = AdnnSpec::uniform(Mechanism::ConditionalSkipping, [3, 16, 16], 4, 8, 4, 2, 0.5).unwrap();
        let m = build_skip_model(&spec, 3).unwrap().with_thresholds(&[0.6, 0.65, 0.62, 0.7]).unwrap();
        (m, synthetic(4, [3, 16, 16], 6, 1).unwrap())
    }

    #[test]
    fn iteration_count_contract() {
        let (m, data) = setup();
        let mut cfg = IterConfig::new(PerturbationBudget::linf(0.03).unwrap());
        cfg.max_iterations = 0;
        assert!(matches!(iterative_attack(&m, &data.images.item(0), &cfg), Err(Error::Config(_))));
        cfg.max_iterations = 1;
        let out = iterative_attack(&m, &data.images.item(0), &cfg).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.best_so_far.len(), 1);
        assert_eq!(out.sample.shape(), data.images.item(0).shape());
    }

    #[test]
    fn output_respects_budget_and_best_is_monotone() {
        let (m, data) = setup();
        for budget in [PerturbationBudget::linf(0.03).unwrap(), PerturbationBudget::l2(2.0).unwrap()] {
            let mut cfg = IterConfig::new(budget);
            cfg.max_iterations = 15;
            let suite = baseline_suite(&m, &data, &[0, 1, 2], &cfg, None).unwrap();
            assert_eq!(suite.budget_violations(), 0);
            suite.validate(&m.cost_profile()).unwrap();
            let out = iterative_attack(&m, &data.images.item(4), &cfg).unwrap();
            assert!(out.best_so_far.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(*out.best_so_far.last().unwrap(), out.best_cost);
        }
    }

    #[test]
    fn time_budget_limits_suite() {
        let (m, data) = setup();
        let mut cfg = IterConfig::new(PerturbationBudget::linf(0.03).unwrap());
        cfg.max_iterations = 5;
        let suite = baseline_suite(&m, &data, &[0, 1, 2, 3], &cfg, Some(0.0)).unwrap();
        assert!(suite.is_empty());
    }
}
