//! Hardware-independent cost accounting.
//!
//! FLOPs are counted as two per multiply-accumulate. Elementwise work
//! (activations, residual adds, pooling) is not counted. Every count is an
//! integer held in an `f64`, so sums are exact in any order.

use adaperf_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::adnn::{BlockTrace, Mechanism};
use crate::error::{Error, Result};

/// Dimensions of one counted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerShape {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        out_height: usize,
        out_width: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerShape {
    pub fn flops(&self) -> Result<f64> {
        match *self {
            LayerShape::Conv {
                kernel,
                in_channels,
                out_channels,
                out_height,
                out_width,
            } => {
                let dims = [kernel, in_channels, out_channels, out_height, out_width];
                if dims.contains(&0) {
                    return Err(Error::Invalid(format!("non-positive conv dimension in {self:?}")));
                }
                Ok(2.0 * (kernel * kernel) as f64
                    * in_channels as f64
                    * out_channels as f64
                    * out_height as f64
                    * out_width as f64)
            }
            LayerShape::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Invalid(format!("non-positive dense dimension in {self:?}")));
                }
                Ok(2.0 * inputs as f64 * outputs as f64)
            }
        }
    }
}

/// FLOPs of a block made of the given layers.
pub fn block_flops(layers: &[LayerShape]) -> Result<f64> {
    layers.iter().map(LayerShape::flops).sum()
}

/// Per-block FLOPs weights plus the always-executed cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    block_weights: Vec<f64>,
    stem_flops: f64,
}

impl CostProfile {
    pub fn new(stem_flops: f64, block_weights: Vec<f64>) -> Result<Self> {
        if !(stem_flops >= 0.0) || block_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("cost weights must be non-negative".into()));
        }
        Ok(Self {
            block_weights,
            stem_flops,
        })
    }

    pub fn block_weights(&self) -> &[f64] {
        &self.block_weights
    }

    pub fn stem_flops(&self) -> f64 {
        self.stem_flops
    }

    pub fn num_blocks(&self) -> usize {
        self.block_weights.len()
    }

    pub fn gated_total(&self) -> f64 {
        self.block_weights.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.stem_flops + self.gated_total()
    }

    /// Same profile with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.stem_flops * factor,
            self.block_weights.iter().map(|w| w * factor).collect(),
        )
    }
}

/// Activated FLOPs for a trace: stem plus every activated block.
pub fn hard_cost(trace: &BlockTrace, profile: &CostProfile) -> Result<f64> {
    hard_cost_of(&trace.activated, profile)
}

pub fn hard_cost_of(activated: &[bool], profile: &CostProfile) -> Result<f64> {
    check_len(profile.num_blocks(), activated.len())?;
    Ok(profile.stem_flops
        + activated
            .iter()
            .zip(&profile.block_weights)
            .filter(|(a, _)| **a)
            .map(|(_, w)| w)
            .sum::<f64>())
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Length { expected, actual });
    }
    Ok(())
}

fn check_soft_args(gate_scores: &[f64], thresholds: &[f64], profile: &CostProfile, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_len(profile.num_blocks(), gate_scores.len())?;
    check_len(profile.num_blocks(), thresholds.len())
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic relaxation of [`hard_cost`] for conditional skipping:
/// `stem + sum_i W_i * sigmoid((s_i - tau_i) / T)`.
pub fn soft_cost(gate_scores: &[f64], thresholds: &[f64], profile: &CostProfile, temperature: f64) -> Result<f64> {
    check_soft_args(gate_scores, thresholds, profile, temperature)?;
    Ok(profile.stem_flops
        + gate_scores
            .iter()
            .zip(thresholds)
            .zip(&profile.block_weights)
            .map(|((s, t), w)| w * logistic((s - t) / temperature))
            .sum::<f64>())
}

/// Analytic gradient of [`soft_cost`] with respect to the gate scores.
pub fn soft_cost_grad(
    gate_scores: &[f64],
    thresholds: &[f64],
    profile: &CostProfile,
    temperature: f64,
) -> Result<Vec<f64>> {
    check_soft_args(gate_scores, thresholds, profile, temperature)?;
    Ok(gate_scores
        .iter()
        .zip(thresholds)
        .zip(&profile.block_weights)
        .map(|((s, t), w)| {
            let p = logistic((s - t) / temperature);
            w * p * (1.0 - p) / temperature
        })
        .collect())
}

/// Expected cost of an early-exit model when each exit fires with probability
/// `sigmoid((s_i - tau_i) / T)`. Block `i` runs iff no earlier exit fired; the
/// last block always runs once reached.
pub fn soft_cost_early_exit(
    gate_scores: &[f64],
    thresholds: &[f64],
    profile: &CostProfile,
    temperature: f64,
) -> Result<f64> {
    check_soft_args(gate_scores, thresholds, profile, temperature)?;
    let mut reach = 1.0;
    let mut cost = profile.stem_flops;
    for ((s, t), w) in gate_scores.iter().zip(thresholds).zip(&profile.block_weights) {
        cost += w * reach;
        reach *= 1.0 - logistic((s - t) / temperature);
    }
    Ok(cost)
}

/// Soft cost for either mechanism.
pub fn soft_cost_for(
    mechanism: Mechanism,
    gate_scores: &[f64],
    thresholds: &[f64],
    profile: &CostProfile,
    temperature: f64,
) -> Result<f64> {
    match mechanism {
        Mechanism::ConditionalSkipping => soft_cost(gate_scores, thresholds, profile, temperature),
        Mechanism::EarlyTermination => soft_cost_early_exit(gate_scores, thresholds, profile, temperature),
    }
}

/// Maps `[stem_flops, total]` onto `[0, 1]`.
pub fn normalized_cost(cost: f64, profile: &CostProfile) -> Result<f64> {
    let span = profile.gated_total();
    if span <= 0.0 {
        return Err(Error::Invalid("degenerate cost profile: total equals stem cost".into()));
    }
    Ok((cost - profile.stem_flops) / span)
}

/// Differentiable normalized soft cost on a graph. Each entry of `gate_scores`
/// is a `[B]` vector of gate scores for one block; the result is `[B]`.
pub fn soft_cost_graph(
    g: &mut Graph,
    mechanism: Mechanism,
    gate_scores: &[Var],
    thresholds: &[f32],
    profile: &CostProfile,
    temperature: f32,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_len(profile.num_blocks(), gate_scores.len())?;
    check_len(profile.num_blocks(), thresholds.len())?;
    let span = profile.gated_total();
    if span <= 0.0 {
        return Err(Error::Invalid("degenerate cost profile: total equals stem cost".into()));
    }
    let mut acc: Option<Var> = None;
    let mut reach: Option<Var> = None;
    for ((&s, &tau), &w) in gate_scores.iter().zip(thresholds).zip(profile.block_weights()) {
        let shifted = g.add_scalar(s, -tau);
        let z = g.scale(shifted, 1.0 / temperature);
        let p = g.sigmoid(z);
        let frac = (w / span) as f32;
        let term = match mechanism {
            Mechanism::ConditionalSkipping => g.scale(p, frac),
            Mechanism::EarlyTermination => {
                let term = match reach {
                    Some(r) => g.scale(r, frac),
                    None => {
                        let ones = g.scale(p, 0.0);
                        g.add_scalar(ones, frac)
                    }
                };
                let neg = g.scale(p, -1.0);
                let stay = g.add_scalar(neg, 1.0);
                reach = Some(match reach {
                    Some(r) => g.mul(r, stay),
                    None => stay,
                });
                term
            }
        };
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Empty("cost profile has no blocks".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> CostProfile {
        CostProfile::new(5.0, vec![10.0, 20.0, 30.0]).unwrap()
    }

    #[test]
    fn layer_counts() {
        assert_eq!(LayerShape::Dense { inputs: 10, outputs: 10 }.flops().unwrap(), 200.0);
        let conv = LayerShape::Conv {
            kernel: 3,
            in_channels: 1,
            out_channels: 1,
            out_height: 1,
            out_width: 1,
        };
        assert_eq!(conv.flops().unwrap(), 18.0);
        assert!(LayerShape::Dense { inputs: 0, outputs: 3 }.flops().is_err());
    }

    #[test]
    fn hard_cost_cases() {
        let p = profile();
        assert_eq!(hard_cost_of(&[false, false, false], &p).unwrap(), 5.0);
        assert_eq!(hard_cost_of(&[true, true, true], &p).unwrap(), p.total());
        assert_eq!(hard_cost_of(&[true, false, true], &p).unwrap(), 45.0);
        assert!(matches!(
            hard_cost_of(&[true], &p),
            Err(Error::Length { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn soft_cost_at_threshold_is_half_weight() {
        let p = profile();
        let t = [0.5, 0.3, 0.9];
        let c = soft_cost(&t, &t, &p, 0.1).unwrap();
        assert!((c - (5.0 + 30.0)).abs() < 1e-12);
        assert!(soft_cost(&t, &t, &p, 0.0).is_err());
        assert!(soft_cost(&t, &t, &p, -1.0).is_err());
    }

    #[test]
    fn normalized_cost_endpoints() {
        let p = CostProfile::new(0.0, vec![10.0, 10.0]).unwrap();
        assert_eq!(normalized_cost(20.0, &p).unwrap(), 1.0);
        assert_eq!(normalized_cost(0.0, &p).unwrap(), 0.0);
        assert_eq!(normalized_cost(10.0, &p).unwrap(), 0.5);
        let degenerate = CostProfile::new(3.0, vec![0.0]).unwrap();
        assert!(normalized_cost(3.0, &degenerate).is_err());
    }

    #[test]
    fn early_exit_soft_cost_limits() {
        let p = profile();
        let tau = [0.5; 3];
        // Confident first exit: only block 0 runs.
        let c = soft_cost_early_exit(&[0.9, 0.1, 0.1], &tau, &p, 1e-3).unwrap();
        assert!((c - 15.0).abs() < 1e-9);
        // Nothing exits early: every block runs.
        let c = soft_cost_early_exit(&[0.1, 0.1, 0.1], &tau, &p, 1e-3).unwrap();
        assert!((c - p.total()).abs() < 1e-9);
    }

    #[test]
    fn graph_cost_matches_scalar_version() {
        let p = profile();
        let scores = [[0.2f32, 0.7], [0.55, 0.45], [0.9, 0.1]];
        let tau = [0.5f32, 0.4, 0.6];
        for mech in [Mechanism::ConditionalSkipping, Mechanism::EarlyTermination] {
            let mut g = Graph::inference();
            let vars: Vec<Var> = scores
                .iter()
                .map(|s| g.constant(adaperf_autograd::Tensor::from_slice(s)))
                .collect();
            let out = soft_cost_graph(&mut g, mech, &vars, &tau, &p, 0.1).unwrap();
            for b in 0..2 {
                let s: Vec<f64> = scores.iter().map(|r| r[b] as f64).collect();
                let t: Vec<f64> = tau.iter().map(|&v| v as f64).collect();
                let exact = soft_cost_for(mech, &s, &t, &p, 0.1).unwrap();
                let expect = normalized_cost(exact, &p).unwrap();
                assert!((g.value(out).data()[b] as f64 - expect).abs() < 1e-5, "{mech:?}");
            }
        }
    }
}
