use std::fmt::Write as _;
use std::time::Instant;

use adaperf_autograd::{Adam, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::budget::PerturbationBudget;
use super::losses::{adv_loss_graph, gan_loss_graph};
use super::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Mode};
use crate::adnn::{minibatches, AdnnModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    /// Weight of the adversarial (cost) loss.
    pub alpha: f32,
    /// Weight of the perturbation-norm loss.
    pub beta: f32,
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Temperature of the soft cost inside the adversarial loss.
    pub temperature: f32,
    /// Fraction of the training data held out for early stopping.
    pub validation_fraction: f32,
    pub budget: PerturbationBudget,
    pub seed: u64,
}

impl GanTrainConfig {
    pub fn new(budget: PerturbationBudget) -> Self {
        Self {
            alpha: 1.0,
            beta: 0.001,
            learning_rate: 1e-4,
            max_epochs: 100,
            early_stop_patience: 10,
            batch_size: 64,
            temperature: 0.1,
            validation_fraction: 0.1,
            budget,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.learning_rate > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("alpha, beta, learning_rate and temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size and early_stop_patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        PerturbationBudget::new(self.budget.norm, self.budget.epsilon)?;
        Ok(())
    }
}

/// Per-epoch means of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_gan: f64,
    pub l_adv: f64,
    pub l_per: f64,
    /// Mean of the generator objective actually minimized.
    pub total: f64,
    /// Validation `L_adv + beta * L_per` (early-stopping monitor).
    pub val_objective: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    /// Epoch whose generator was kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub training_time_s: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_gan,l_adv,l_per,total,val_objective,wall_clock_s\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.l_gan, r.l_adv, r.l_per, r.total, r.val_objective, r.wall_clock_s
            );
        }
        s
    }
}

/// Validation `(L_adv, L_per)` of a generator in inference mode.
pub fn validation_losses(
    generator: &Generator,
    model: &AdnnModel,
    data: &Tensor,
    batch_size: usize,
    temperature: f32,
) -> Result<(f64, f64)> {
    let n = data.batch();
    if n == 0 {
        return Err(Error::Empty("validation set".into()));
    }
    let (mut adv, mut per) = (0.0f64, 0.0f64);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let mut g = Graph::inference();
        let gp = generator.params().bind(&mut g, false);
        let ap = model.params().bind(&mut g, false);
        let x = g.constant(data.select(&idx));
        let (xbar, _) = generator.generate_graph(&mut g, &gp, x, Mode::Eval);
        let fwd = model.forward_graph(&mut g, &ap, xbar)?;
        let cost = model.soft_cost_of(&mut g, &fwd, temperature)?;
        let l_adv = adv_loss_graph(&mut g, cost);
        let delta = g.sub(xbar, x);
        let norms = g.norm_per_sample(delta, generator.budget().norm);
        let l_per = g.mean_all(norms);
        let w = idx.len() as f64;
        adv += f64::from(g.value(l_adv).data()[0]) * w;
        per += f64::from(g.value(l_per).data()[0]) * w;
    }
    Ok((adv / n as f64, per / n as f64))
}

/// Adversarial training of a perturbation generator against a frozen model.
///
/// Each minibatch forms `x' = clip(x + G(x))`; the generator descends
/// `L_GAN + alpha * L_adv + beta * L_per` while the discriminator descends
/// `-L_GAN`. The generator with the best validation `L_adv + beta * L_per` is
/// returned; training stops after `early_stop_patience` epochs without improvement.
pub fn train_generator(
    model: &AdnnModel,
    data: &Dataset,
    config: &GanTrainConfig,
) -> Result<(Generator, Discriminator, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("generator training set".into()));
    }
    data.check_against(model.spec())?;
    let input_shape = model.spec().input_shape;
    let mut generator = Generator::new(GeneratorSpec::for_input(input_shape), config.budget, config.seed)?;
    let mut disc = Discriminator::new(DiscriminatorSpec::for_input(input_shape), config.seed.wrapping_add(1))?;

    let n_val = ((data.len() as f32 * config.validation_fraction) as usize).min(data.len() - 1);
    let n_train = data.len() - n_val;
    let train_x = data.images.select(&(0..n_train).collect::<Vec<_>>());
    let val_x = if n_val > 0 {
        data.images.select(&(n_train..data.len()).collect::<Vec<_>>())
    } else {
        train_x.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam_g = Adam::new(config.learning_rate).with_betas(0.5, 0.999);
    let mut adam_d = Adam::new(config.learning_rate).with_betas(0.5, 0.999);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Generator)> = None;
    let mut since_best = 0usize;
    let start = Instant::now();
    for epoch in 0..config.max_epochs {
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for (bi, idx) in minibatches(n_train, config.batch_size, &mut rng).into_iter().enumerate() {
            let batch = train_x.select(&idx);
            let nonfinite = || Error::NonFinite {
                stage: "train-generator",
                epoch,
                batch: bi,
            };

            let mut g = Graph::new();
            let gp = generator.params().bind(&mut g, true);
            let dp = disc.params().bind(&mut g, false);
            let ap = model.params().bind(&mut g, false);
            let x = g.constant(batch.clone());
            let (xbar, stats) = generator.generate_graph(&mut g, &gp, x, Mode::Train);
            let real = disc.scores(&mut g, &dp, x);
            let fake = disc.scores(&mut g, &dp, xbar);
            let l_gan = gan_loss_graph(&mut g, real, fake);
            let fwd = model.forward_graph(&mut g, &ap, xbar)?;
            let cost = model.soft_cost_of(&mut g, &fwd, config.temperature)?;
            let l_adv = adv_loss_graph(&mut g, cost);
            let delta = g.sub(xbar, x);
            let norms = g.norm_per_sample(delta, config.budget.norm);
            let l_per = g.mean_all(norms);
            let wa = g.scale(l_adv, config.alpha);
            let wp = g.scale(l_per, config.beta);
            let total = g.add(l_gan, wa);
            let total = g.add(total, wp);
            let tv = g.value(total).data()[0];
            if !tv.is_finite() {
                return Err(nonfinite());
            }
            for (s, v) in sums.iter_mut().zip([l_gan, l_adv, l_per, total]) {
                *s += f64::from(g.value(v).data()[0]);
            }
            count += 1;
            let grads = g.backward(total);
            let fake_x = g.value(xbar).clone();

            // Discriminator step on the same batch, generator output held fixed.
            let mut gd = Graph::new();
            let dp = disc.params().bind(&mut gd, true);
            let xr = gd.constant(batch);
            let xf = gd.constant(fake_x);
            let real = disc.scores(&mut gd, &dp, xr);
            let fake = disc.scores(&mut gd, &dp, xf);
            let l = gan_loss_graph(&mut gd, real, fake);
            let neg = gd.scale(l, -1.0);
            if !gd.value(neg).data()[0].is_finite() {
                return Err(nonfinite());
            }
            let dgrads = gd.backward(neg);

            adam_g.step(generator.params_mut(), &gp, &grads);
            generator.update_running_stats(&stats);
            adam_d.step(disc.params_mut(), &dp, &dgrads);
        }
        let (v_adv, v_per) = validation_losses(&generator, model, &val_x, config.batch_size, config.temperature)?;
        let val_objective = v_adv + f64::from(config.beta) * v_per;
        if !val_objective.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-generator",
                epoch,
                batch: count,
            });
        }
        let c = count.max(1) as f64;
        history.rows.push(HistoryRow {
            epoch,
            l_gan: sums[0] / c,
            l_adv: sums[1] / c,
            l_per: sums[2] / c,
            total: sums[3] / c,
            val_objective,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _)| val_objective < *b) {
            best = Some((val_objective, generator.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.training_time_s = start.elapsed().as_secs_f64();
    let generator = best.map_or(generator, |(_, g)| g);
    Ok((generator, disc, history))
}
