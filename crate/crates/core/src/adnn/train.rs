use adaperf_autograd::{Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AdnnModel, GraphForward};
use super::spec::Mechanism;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Weight of the computation-sparsity penalty (see [`train_adnn`]).
    pub sparsity_weight: f32,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for AdnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            sparsity_weight: 0.1,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl AdnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) || !(self.sparsity_weight >= 0.0) {
            return Err(Error::Config(
                "learning_rate and temperature must be positive, sparsity_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f32,
    pub cost_loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdnnTrainReport {
    /// Top-1 accuracy on the held-out split.
    pub accuracy: f64,
    /// Mean fraction of gated blocks executed on the held-out split.
    pub mean_activation: f64,
    pub history: Vec<EpochStats>,
}

/// Splits `0..n` into shuffled minibatches.
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Supervised training with a computation-sparsity penalty on the gates.
/// Each minibatch minimizes the task loss (mean cross-entropy over all heads)
/// plus `sparsity_weight` times the mean soft cost of the executed blocks,
/// measured in mean-block units.
pub fn train_adnn(
    mut model: AdnnModel,
    train: &Dataset,
    heldout: &Dataset,
    config: &AdnnTrainConfig,
) -> Result<(AdnnModel, AdnnTrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set".into()));
    }
    train.check_against(model.spec())?;
    heldout.check_against(model.spec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut task_sum, mut cost_sum, mut batches) = (0.0f32, 0.0f32, 0usize);
        for (bi, idx) in minibatches(train.len(), config.batch_size, &mut rng).into_iter().enumerate() {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let x = g.constant(train.images.select(&idx));
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let fwd = model.forward_graph(&mut g, &p, x)?;
            let task = task_loss(&mut g, &fwd, &labels);
            let cost = sparsity_penalty(&mut g, &model, &fwd, config.temperature)?;
            let cost = g.mean_all(cost);
            let weighted = g.scale(cost, config.sparsity_weight);
            let loss = g.add(task, weighted);
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    stage: "train-adnn",
                    epoch,
                    batch: bi,
                });
            }
            task_sum += g.value(task).data()[0];
            cost_sum += g.value(cost).data()[0];
            batches += 1;
            let grads = g.backward(loss);
            adam.step(model.params_mut(), &p, &grads);
        }
        history.push(EpochStats {
            epoch,
            task_loss: task_sum / batches as f32,
            cost_loss: cost_sum / batches as f32,
        });
    }
    let (accuracy, mean_activation) = evaluate_accuracy(&model, heldout)?;
    Ok((
        model,
        AdnnTrainReport {
            accuracy,
            mean_activation,
            history,
        },
    ))
}

/// Mean cross-entropy over all classification heads of `fwd`.
pub(crate) fn task_loss(g: &mut Graph, fwd: &GraphForward, labels: &[usize]) -> Var {
    let mut task = None;
    for &head in &fwd.heads {
        let ce = g.softmax_cross_entropy(head, labels);
        let ce = g.mean_all(ce);
        task = Some(match task {
            Some(t) => g.add(t, ce),
            None => ce,
        });
    }
    let task = task.expect("at least one head");
    g.scale(task, 1.0 / fwd.heads.len() as f32)
}

/// Per-sample soft cost of the executed blocks in units of the mean block
/// cost (`[B]`). For skipping models a closed gate contributes nothing, so the
/// penalty stops pushing on it once the block is skipped.
fn sparsity_penalty(g: &mut Graph, model: &AdnnModel, fwd: &GraphForward, temperature: f32) -> Result<Var> {
    let n = model.num_blocks() as f32;
    if !model.is_skipping() {
        let c = model.soft_cost_of(g, fwd, temperature)?;
        return Ok(g.scale(c, n));
    }
    let profile = model.cost_profile();
    let mean_w = profile.gated_total() / profile.num_blocks() as f64;
    let taus = model.thresholds();
    let mut acc: Option<Var> = None;
    for (i, &s) in fwd.gate_scores.iter().enumerate() {
        let executed: Vec<f32> = fwd.activated.iter().map(|row| if row[i] { 1.0 } else { 0.0 }).collect();
        let executed = g.constant(Tensor::from_slice(&executed));
        let z = g.add_scalar(s, -taus[i]);
        let z = g.scale(z, 1.0 / temperature);
        let p = g.sigmoid(z);
        let p = g.mul(p, executed);
        let term = g.scale(p, (profile.block_weights()[i] / mean_w) as f32);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Empty("model has no blocks".into()))
}

/// Top-1 accuracy and mean executed-block fraction under real adaptive inference.
pub fn evaluate_accuracy(model: &AdnnModel, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut active = 0usize;
    for i in 0..data.len() {
        let t = model.forward_with_trace(&data.images.item(i))?;
        correct += usize::from(t.predicted_class() == data.labels[i]);
        active += t.num_activated();
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, active as f64 / (n * model.num_blocks() as f64)))
}

impl AdnnModel {
    /// Differentiable normalized soft cost `[B]` of a graph forward pass.
    pub fn soft_cost_of(&self, g: &mut Graph, fwd: &GraphForward, temperature: f32) -> Result<Var> {
        crate::flops::soft_cost_graph(
            g,
            self.mechanism(),
            &fwd.gate_scores,
            &self.thresholds(),
            &self.cost_profile(),
            temperature,
        )
    }

    pub fn is_skipping(&self) -> bool {
        self.mechanism() == Mechanism::ConditionalSkipping
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{build_skip_model, AdnnSpec};
    use crate::dataset::synthetic;

    fn small_spec() -> AdnnSpec {
        AdnnSpec::uniform(Mechanism::ConditionalSkipping, [3, 16, 16], 2, 8, 4, 2, 0.5).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let spec = small_spec();
        let model = build_skip_model(&spec, 4).unwrap();
        let data = synthetic(2, [3, 16, 16], 16, 1).unwrap();
        let cfg = AdnnTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (trained, report) = train_adnn(model.clone(), &data, &data, &cfg).unwrap();
        assert!(trained.params().bit_eq(model.params()));
        assert!(report.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_spec();
        let data = synthetic(2, [3, 16, 16], 64, 1).unwrap();
        let cfg = AdnnTrainConfig {
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        let run = || train_adnn(build_skip_model(&spec, 4).unwrap(), &data, &data, &cfg).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert!(a.params().bit_eq(b.params()));
        assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
    }

    #[test]
    fn empty_or_mismatched_data_is_rejected() {
        let spec = small_spec();
        let model = build_skip_model(&spec, 0).unwrap();
        let data = synthetic(2, [3, 16, 16], 4, 1).unwrap();
        let empty = data.take(0);
        assert!(matches!(
            train_adnn(model.clone(), &empty, &data, &AdnnTrainConfig::default()),
            Err(Error::Empty(_))
        ));
        let wrong = synthetic(2, [3, 8, 8], 4, 1).unwrap();
        assert!(train_adnn(model, &wrong, &wrong, &AdnnTrainConfig::default()).is_err());
    }
}
