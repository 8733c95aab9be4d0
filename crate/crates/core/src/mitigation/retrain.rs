use adaperf_autograd::{Adam, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adnn::{evaluate_accuracy, minibatches, task_loss, AdnnModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{i_flops, SuiteEntry, TestSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Weight of the two cross-entropy terms relative to the cost term.
    pub beta: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.temperature > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(
                "retraining needs positive batch_size, learning_rate, temperature and non-negative beta".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Mean I-FLOPs of the suite's samples on the original model.
    pub suite_i_flops_before: f64,
    /// Mean I-FLOPs of the same samples on the retrained model.
    pub suite_i_flops_after: f64,
    pub cost_loss: Vec<f32>,
    pub task_loss: Vec<f32>,
}

fn mean_i_flops(model: &AdnnModel, suite: &TestSuite) -> Result<f64> {
    let mut sum = 0.0;
    for e in &suite.entries {
        let m = SuiteEntry::measure(model, e.seed_id, e.label, e.seed.clone(), e.generated.clone(), 0.0)?;
        sum += i_flops(&m)?;
    }
    Ok(sum / suite.len() as f64)
}

fn stack(entries: &[&SuiteEntry], f: fn(&SuiteEntry) -> &Tensor, shape: [usize; 3]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(entries.len() * shape.iter().product::<usize>());
    for e in entries {
        data.extend_from_slice(f(e).data());
    }
    Ok(Tensor::new(&[entries.len(), shape[0], shape[1], shape[2]], data)?)
}

/// Fine-tunes `model` on seed/generated pairs. Each minibatch minimizes the
/// squared gap between the soft costs of the generated sample and its seed,
/// both measured in mean-block units, plus `beta` times the cross-entropy on
/// both inputs with the seed's label.
pub fn retrain_adnn(
    model: &AdnnModel,
    suite: &TestSuite,
    heldout: &Dataset,
    config: &RetrainConfig,
) -> Result<(AdnnModel, RetrainReport)> {
    config.validate()?;
    if suite.is_empty() {
        return Err(Error::Empty("retraining suite".into()));
    }
    let labels: Vec<usize> = suite
        .entries
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::Invalid(format!("suite entry {} has no label", e.seed_id))))
        .collect::<Result<_>>()?;
    let shape = model.spec().input_shape;
    let (accuracy_before, _) = evaluate_accuracy(model, heldout)?;
    let suite_i_flops_before = mean_i_flops(model, suite)?;
    let blocks = model.num_blocks() as f32;
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let (mut cost_hist, mut task_hist) = (Vec::new(), Vec::new());
    for epoch in 0..config.epochs {
        let (mut cs, mut ts, mut nb) = (0.0f32, 0.0f32, 0usize);
        for (bi, idx) in minibatches(suite.len(), config.batch_size, &mut rng).into_iter().enumerate() {
            let batch: Vec<&SuiteEntry> = idx.iter().map(|&i| &suite.entries[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, true);
            let x = g.constant(stack(&batch, |e| &e.seed, shape)?);
            let xp = g.constant(stack(&batch, |e| &e.generated, shape)?);
            let fx = m.forward_graph(&mut g, &p, x)?;
            let fxp = m.forward_graph(&mut g, &p, xp)?;
            let target = m.soft_cost_of(&mut g, &fx, config.temperature)?;
            let cost = m.soft_cost_of(&mut g, &fxp, config.temperature)?;
            let gap = g.sub(cost, target);
            let gap = g.scale(gap, blocks);
            let gap = g.square(gap);
            let cost_term = g.mean_all(gap);
            let ce_x = task_loss(&mut g, &fx, &y);
            let ce_xp = task_loss(&mut g, &fxp, &y);
            let task = g.add(ce_x, ce_xp);
            let weighted = g.scale(task, config.beta);
            let loss = g.add(cost_term, weighted);
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    stage: "mitigate-retrain",
                    epoch,
                    batch: bi,
                });
            }
            cs += g.value(cost_term).data()[0];
            ts += g.value(task).data()[0];
            nb += 1;
            let grads = g.backward(loss);
            adam.step(m.params_mut(), &p, &grads);
        }
        cost_hist.push(cs / nb as f32);
        task_hist.push(ts / nb as f32);
    }
    let (accuracy_after, _) = evaluate_accuracy(&m, heldout)?;
    let suite_i_flops_after = mean_i_flops(&m, suite)?;
    Ok((
        m,
        RetrainReport {
            accuracy_before,
            accuracy_after,
            suite_i_flops_before,
            suite_i_flops_after,
            cost_loss: cost_hist,
            task_loss: task_hist,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{build_skip_model, AdnnSpec, Mechanism};
    use crate::dataset::synthetic;
    use crate::eval::Producer;
    use crate::gan::PerturbationBudget;

    fn setup() -> (AdnnModel, TestSuite, Dataset) {
        let spec = AdnnSpec::uniform(Mechanism::ConditionalSkipping, [3, 16, 16], 4, 8, 4, 2, 0.5).unwrap();
        let model = build_skip_model(&spec, 2).unwrap();
        let data = synthetic(2, [3, 16, 16], 12, 5).unwrap();
        let mut suite = TestSuite::new(Producer::Deepperform, PerturbationBudget::linf(0.03).unwrap(), spec.hash());
        for i in 0..8 {
            let seed = data.images.item(i).reshape(&[3, 16, 16]).unwrap();
            let gen = seed.map(|v| (v + 0.02).min(1.0));
            suite.entries.push(SuiteEntry::measure(&model, i, Some(data.labels[i]), seed, gen, 0.0).unwrap());
        }
        (model, suite, data)
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (model, suite, data) = setup();
        let cfg = RetrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (m, r) = retrain_adnn(&model, &suite, &data, &cfg).unwrap();
        assert!(m.params().bit_eq(model.params()));
        assert_eq!(r.accuracy_before, r.accuracy_after);
        assert_eq!(r.suite_i_flops_before, r.suite_i_flops_after);
    }

    #[test]
    fn retraining_updates_a_copy_and_reports() {
        let (model, suite, data) = setup();
        let before = model.clone();
        let cfg = RetrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (m, r) = retrain_adnn(&model, &suite, &data, &cfg).unwrap();
        assert!(model.params().bit_eq(before.params()));
        assert!(!m.params().bit_eq(model.params()));
        assert_eq!(r.cost_loss.len(), 2);
        assert!(r.task_loss.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unlabeled_suite_is_rejected() {
        let (model, mut suite, data) = setup();
        suite.entries[3].label = None;
        assert!(matches!(
            retrain_adnn(&model, &suite, &data, &RetrainConfig::default()),
            Err(Error::Invalid(_))
        ));
    }
}
