use adaperf_autograd::{softplus, Graph, Tensor, Var};

use crate::adnn::AdnnModel;
use crate::error::{Error, Result};

/// `mean[log D(x) + log(1 - D(x'))]` with `D = sigmoid(score)`, evaluated as
/// `-softplus(-real) - softplus(fake)` to stay finite for any score.
pub fn gan_loss(real_scores: &[f32], fake_scores: &[f32]) -> Result<f32> {
    if real_scores.is_empty() || real_scores.len() != fake_scores.len() {
        return Err(Error::Length {
            expected: real_scores.len().max(1),
            actual: fake_scores.len(),
        });
    }
    if real_scores.iter().chain(fake_scores).any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite discriminator score".into()));
    }
    let n = real_scores.len() as f64;
    let total: f64 = real_scores
        .iter()
        .zip(fake_scores)
        .map(|(&r, &f)| -f64::from(softplus(-r)) - f64::from(softplus(f)))
        .sum();
    Ok((total / n).min(0.0) as f32)
}

/// Graph form of [`gan_loss`]; `real` and `fake` are `[B]` score vectors.
pub fn gan_loss_graph(g: &mut Graph, real: Var, fake: Var) -> Var {
    let neg_real = g.scale(real, -1.0);
    let log_d_real = g.softplus(neg_real);
    let log_not_d_fake = g.softplus(fake);
    let a = g.mean_all(log_d_real);
    let b = g.mean_all(log_not_d_fake);
    let s = g.add(a, b);
    g.scale(s, -1.0)
}

/// Mean squared distance of normalized costs from full activation (1.0).
pub fn adv_loss_from_costs(normalized_costs: &[f64]) -> f64 {
    if normalized_costs.is_empty() {
        return 0.0;
    }
    normalized_costs.iter().map(|c| (1.0 - c).powi(2)).sum::<f64>() / normalized_costs.len() as f64
}

/// Graph form of [`adv_loss_from_costs`] on a `[B]` normalized soft-cost vector.
pub fn adv_loss_graph(g: &mut Graph, normalized_cost: Var) -> Var {
    let neg = g.scale(normalized_cost, -1.0);
    let gap = g.add_scalar(neg, 1.0);
    let sq = g.square(gap);
    g.mean_all(sq)
}

/// Adversarial loss of an already-projected batch against `model`.
pub fn adv_loss(model: &AdnnModel, generated: &Tensor, temperature: f32) -> Result<f32> {
    let mut g = Graph::inference();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(generated.clone());
    let fwd = model.forward_graph(&mut g, &p, x)?;
    let cost = model.soft_cost_of(&mut g, &fwd, temperature)?;
    let loss = adv_loss_graph(&mut g, cost);
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gan_loss_at_chance_level() {
        let l = gan_loss(&[0.0; 5], &[0.0; 5]).unwrap();
        assert!((l - 2.0 * 0.5f32.ln()).abs() < 1e-6);
        assert!((l + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn gan_loss_perfect_discriminator_approaches_zero() {
        let l = gan_loss(&[80.0, 200.0], &[-80.0, -1e6]).unwrap();
        assert!(l <= 0.0 && l > -1e-30);
    }

    #[test]
    fn gan_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f32> = (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f: Vec<f32> = (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // Direct probability form.
        let sig = |s: f32| 1.0 / (1.0 + (-f64::from(s)).exp());
        let expected: f64 = r.iter().zip(&f).map(|(&a, &b)| sig(a).ln() + (1.0 - sig(b)).ln()).sum::<f64>() / 32.0;
        assert!((f64::from(gan_loss(&r, &f).unwrap()) - expected).abs() < 1e-6);

        let mut g = Graph::inference();
        let rv = g.constant(Tensor::from_slice(&r));
        let fv = g.constant(Tensor::from_slice(&f));
        let l = gan_loss_graph(&mut g, rv, fv);
        assert!((f64::from(g.value(l).data()[0]) - expected).abs() < 1e-5);
    }

    #[test]
    fn gan_loss_rejects_bad_input() {
        assert!(gan_loss(&[], &[]).is_err());
        assert!(gan_loss(&[0.0], &[0.0, 1.0]).is_err());
        assert!(gan_loss(&[f32::NAN], &[0.0]).is_err());
    }

    #[test]
    fn adv_loss_examples() {
        assert_eq!(adv_loss_from_costs(&[1.0]), 0.0);
        assert_eq!(adv_loss_from_costs(&[0.5]), 0.25);
        assert_eq!(adv_loss_from_costs(&[0.0, 0.5, 1.0, 1.0]), 0.3125);
        let mut g = Graph::inference();
        let c = g.constant(Tensor::from_slice(&[0.0, 0.5, 1.0, 1.0]));
        let l = adv_loss_graph(&mut g, c);
        assert_eq!(g.value(l).data()[0], 0.3125);
    }
}
