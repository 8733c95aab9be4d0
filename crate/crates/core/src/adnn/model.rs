use std::path::Path;

use adaperf_autograd::{kaiming_uniform, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{AdnnSpec, BlockTrace, Mechanism, STEM_KERNEL};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flops::{CostProfile, LayerShape};

const CHECKPOINT_KIND: &str = "adnn";

/// Initial gate bias; `sigmoid(0.5) ~ 0.62`, so gates start open.
const GATE_BIAS_INIT: f32 = 0.5;

#[derive(Debug, Clone)]
struct BlockParams {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    /// Gate (`C -> 1`) for skipping, exit classifier (`C -> K`) for early exit.
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<BlockParams>,
    classifier: Option<(ParamId, ParamId)>,
}

impl Layout {
    fn resolve(spec: &AdnnSpec, params: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))
        };
        let blocks = (0..spec.num_blocks())
            .map(|i| {
                Ok(BlockParams {
                    conv1_w: id(&format!("block{i}.conv1.w"))?,
                    conv1_b: id(&format!("block{i}.conv1.b"))?,
                    conv2_w: id(&format!("block{i}.conv2.w"))?,
                    conv2_b: id(&format!("block{i}.conv2.b"))?,
                    head_w: id(&format!("block{i}.head.w"))?,
                    head_b: id(&format!("block{i}.head.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = match spec.mechanism {
            Mechanism::ConditionalSkipping => Some((id("classifier.w")?, id("classifier.b")?)),
            Mechanism::EarlyTermination => None,
        };
        Ok(Self {
            stem_w: id("stem.w")?,
            stem_b: id("stem.b")?,
            blocks,
            classifier,
        })
    }
}

/// An adaptive model with instrumented gates.
#[derive(Debug, Clone)]
pub struct AdnnModel {
    spec: AdnnSpec,
    params: ParamStore,
    layout: Layout,
}

/// Batched, differentiable forward pass over every block.
pub struct GraphForward {
    /// Classification heads: the single classifier for skipping models, one
    /// exit per block for early-exit models.
    pub heads: Vec<Var>,
    /// `[B]` gate score vector per block.
    pub gate_scores: Vec<Var>,
    /// `activated[b][i]` under the hard decision rule.
    pub activated: Vec<Vec<bool>>,
}

/// Builds a conditional-skipping model.
pub fn build_skip_model(spec: &AdnnSpec, rng_seed: u64) -> Result<AdnnModel> {
    if spec.mechanism != Mechanism::ConditionalSkipping {
        return Err(Error::Config("build_skip_model needs a conditional_skipping spec".into()));
    }
    AdnnModel::build(spec, rng_seed)
}

/// Builds an early-termination model.
pub fn build_early_exit_model(spec: &AdnnSpec, rng_seed: u64) -> Result<AdnnModel> {
    if spec.mechanism != Mechanism::EarlyTermination {
        return Err(Error::Config("build_early_exit_model needs an early_termination spec".into()));
    }
    AdnnModel::build(spec, rng_seed)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: AdnnSpec,
}

impl AdnnModel {
    /// Initializes weights for either mechanism.
    pub fn build(spec: &AdnnSpec, rng_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut p = ParamStore::new();
        let c = spec.channels();
        let cin = spec.input_shape[0];
        p.weight("stem.w", kaiming_uniform(&mut rng, &[c, cin, STEM_KERNEL, STEM_KERNEL], cin * STEM_KERNEL * STEM_KERNEL));
        p.weight("stem.b", Tensor::zeros(&[c]));
        for (i, b) in spec.blocks.iter().enumerate() {
            let k = b.shape.kernel;
            let fan = c * k * k;
            p.weight(format!("block{i}.conv1.w"), kaiming_uniform(&mut rng, &[c, c, k, k], fan));
            p.weight(format!("block{i}.conv1.b"), Tensor::zeros(&[c]));
            // Small residual branches keep the untrained stack near identity.
            let w2 = kaiming_uniform(&mut rng, &[c, c, k, k], fan).map(|v| v * 0.1);
            p.weight(format!("block{i}.conv2.w"), w2);
            p.weight(format!("block{i}.conv2.b"), Tensor::zeros(&[c]));
            match spec.mechanism {
                Mechanism::ConditionalSkipping => {
                    p.weight(format!("block{i}.head.w"), kaiming_uniform(&mut rng, &[1, c], c));
                    p.weight(format!("block{i}.head.b"), Tensor::full(&[1], GATE_BIAS_INIT));
                }
                Mechanism::EarlyTermination => {
                    p.weight(format!("block{i}.head.w"), kaiming_uniform(&mut rng, &[spec.num_classes, c], c));
                    p.weight(format!("block{i}.head.b"), Tensor::zeros(&[spec.num_classes]));
                }
            }
        }
        if spec.mechanism == Mechanism::ConditionalSkipping {
            p.weight("classifier.w", kaiming_uniform(&mut rng, &[spec.num_classes, c], c));
            p.weight("classifier.b", Tensor::zeros(&[spec.num_classes]));
        }
        let layout = Layout::resolve(spec, &p)?;
        Ok(Self {
            spec: spec.clone(),
            params: p,
            layout,
        })
    }

    pub fn spec(&self) -> &AdnnSpec {
        &self.spec
    }

    pub fn mechanism(&self) -> Mechanism {
        self.spec.mechanism
    }

    pub fn num_blocks(&self) -> usize {
        self.spec.num_blocks()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cost_profile(&self) -> CostProfile {
        self.spec.cost_profile()
    }

    pub fn thresholds(&self) -> Vec<f32> {
        self.spec.thresholds()
    }

    /// Replaces the comparison thresholds; weights are untouched.
    pub fn set_thresholds(&mut self, taus: &[f32]) -> Result<()> {
        if taus.len() != self.num_blocks() {
            return Err(Error::Length {
                expected: self.num_blocks(),
                actual: taus.len(),
            });
        }
        if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Invalid(format!("threshold {t} outside [0, 1]")));
        }
        for (b, &t) in self.spec.blocks.iter_mut().zip(taus) {
            b.threshold = t;
        }
        Ok(())
    }

    /// Copy of the model with new thresholds.
    pub fn with_thresholds(&self, taus: &[f32]) -> Result<Self> {
        let mut m = self.clone();
        m.set_thresholds(taus)?;
        Ok(m)
    }

    /// Hash of the spec and weights together.
    pub fn fingerprint(&self) -> String {
        let mut h = self.spec.hash();
        for (_, _, t) in self.params.entries() {
            h.push_str(&format!("{:08x}", t.data().iter().fold(0u32, |a, v| a.rotate_left(5) ^ v.to_bits())));
        }
        super::spec::hash_json(&h)
    }

    /// Normalizes `x` to a single-item `[1, C, H, W]` tensor.
    fn single_input(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.spec.input_shape;
        let ok = match x.shape() {
            [cc, hh, ww] => [*cc, *hh, *ww] == [c, h, w],
            [1, cc, hh, ww] => [*cc, *hh, *ww] == [c, h, w],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(x.clone().reshape(&[1, c, h, w])?)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        match x.shape() {
            [_, cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => Ok(()),
            s => Err(Error::Shape(format!("batch {s:?} does not match model input {:?}", self.spec.input_shape))),
        }
    }

    fn stem(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p[self.layout.stem_w], self.spec.stem_stride, STEM_KERNEL / 2);
        let y = g.add_channel_bias(y, p[self.layout.stem_b]);
        g.relu(y)
    }

    /// Residual branch of block `i` (without the skip connection).
    fn residual(&self, g: &mut Graph, p: &Bound, i: usize, h: Var) -> Var {
        let bp = &self.layout.blocks[i];
        let pad = self.spec.blocks[i].shape.kernel / 2;
        let y = g.conv2d(h, p[bp.conv1_w], 1, pad);
        let y = g.add_channel_bias(y, p[bp.conv1_b]);
        let y = g.relu(y);
        let y = g.conv2d(y, p[bp.conv2_w], 1, pad);
        g.add_channel_bias(y, p[bp.conv2_b])
    }

    fn dense(&self, g: &mut Graph, w: Var, b: Var, h: Var) -> Var {
        let pooled = g.global_avg_pool(h);
        let y = g.linear(pooled, w);
        g.add_channel_bias(y, b)
    }

    /// Gate score `[B]` of a skipping block, computed from the block input.
    fn gate(&self, g: &mut Graph, p: &Bound, i: usize, h: Var) -> Var {
        let bp = &self.layout.blocks[i];
        let z = self.dense(g, p[bp.head_w], p[bp.head_b], h);
        let batch = g.value(z).shape()[0];
        let z = g.reshape(z, &[batch]);
        g.sigmoid(z)
    }

    /// Runs one input with real skipping / early exit and records the trace.
    pub fn forward_with_trace(&self, x: &Tensor) -> Result<BlockTrace> {
        let x = self.single_input(x)?;
        let n = self.num_blocks();
        let c = self.spec.channels();
        let k = self.spec.num_classes;
        let always = self.spec.always_on_layers();
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let mut h = self.stem(&mut g, &p, xv);
        let mut flops = always[0].flops()?;
        let mut gate_scores = vec![0.0f32; n];
        let mut activated = vec![false; n];
        match self.spec.mechanism {
            Mechanism::ConditionalSkipping => {
                let gate_flops = LayerShape::Dense { inputs: c, outputs: 1 }.flops()?;
                for i in 0..n {
                    let s = self.gate(&mut g, &p, i, h);
                    flops += gate_flops;
                    let score = g.value(s).data()[0];
                    gate_scores[i] = score;
                    if score > self.spec.blocks[i].threshold {
                        activated[i] = true;
                        let r = self.residual(&mut g, &p, i, h);
                        h = g.add(h, r);
                        flops += self.spec.blocks[i].flops_weight;
                    }
                }
                let (w, b) = self.layout.classifier.expect("skipping model has a classifier");
                let logits = self.dense(&mut g, p[w], p[b], h);
                flops += LayerShape::Dense { inputs: c, outputs: k }.flops()?;
                Ok(BlockTrace {
                    gate_scores,
                    activated,
                    exit_index: None,
                    logits: g.value(logits).data().to_vec(),
                    executed_flops: flops,
                })
            }
            Mechanism::EarlyTermination => {
                for i in 0..n {
                    let r = self.residual(&mut g, &p, i, h);
                    h = g.add(h, r);
                    let bp = &self.layout.blocks[i];
                    let logits = self.dense(&mut g, p[bp.head_w], p[bp.head_b], h);
                    let conf = g.max_softmax(logits);
                    flops += self.spec.blocks[i].flops_weight;
                    activated[i] = true;
                    let score = g.value(conf).data()[0];
                    gate_scores[i] = score;
                    if score > self.spec.blocks[i].threshold || i + 1 == n {
                        return Ok(BlockTrace {
                            gate_scores,
                            activated,
                            exit_index: Some(i),
                            logits: g.value(logits).data().to_vec(),
                            executed_flops: flops,
                        });
                    }
                }
                unreachable!("the last block always exits")
            }
        }
    }

    /// One trace per batch item; identical to calling [`Self::forward_with_trace`] in a loop.
    pub fn forward_batch_with_trace(&self, xs: &Tensor) -> Result<Vec<BlockTrace>> {
        self.check_batch(xs)?;
        (0..xs.batch()).map(|i| self.forward_with_trace(&xs.item(i))).collect()
    }

    /// Flattened output of the first convolution stage (stem conv + rectifier).
    pub fn first_stage_features(&self, x: &Tensor) -> Result<Vec<f32>> {
        let x = self.single_input(x)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let h = self.stem(&mut g, &p, xv);
        Ok(g.value(h).data().to_vec())
    }

    pub fn feature_len(&self) -> usize {
        self.spec.stem_output_shape().iter().product()
    }

    /// Batched differentiable pass. Every block's residual branch is computed;
    /// for skipping models it is multiplied by the hard gate decision, whose
    /// gradient is passed straight through to the gate score.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<GraphForward> {
        self.check_batch(g.value(x))?;
        let batch = g.value(x).batch();
        let n = self.num_blocks();
        let mut h = self.stem(g, p, x);
        let mut gate_scores = Vec::with_capacity(n);
        let mut activated = vec![vec![false; n]; batch];
        let mut heads = Vec::new();
        match self.spec.mechanism {
            Mechanism::ConditionalSkipping => {
                for i in 0..n {
                    let tau = self.spec.blocks[i].threshold;
                    let s = self.gate(g, p, i, h);
                    let mask = g.step_ste(s, tau);
                    for (b, row) in activated.iter_mut().enumerate() {
                        row[i] = g.value(s).data()[b] > tau;
                    }
                    let r = self.residual(g, p, i, h);
                    let r = g.scale_per_sample(r, mask);
                    h = g.add(h, r);
                    gate_scores.push(s);
                }
                let (w, b) = self.layout.classifier.expect("skipping model has a classifier");
                heads.push(self.dense(g, p[w], p[b], h));
            }
            Mechanism::EarlyTermination => {
                let mut exited = vec![false; batch];
                for i in 0..n {
                    let r = self.residual(g, p, i, h);
                    h = g.add(h, r);
                    let bp = &self.layout.blocks[i];
                    let logits = self.dense(g, p[bp.head_w], p[bp.head_b], h);
                    let conf = g.max_softmax(logits);
                    let tau = self.spec.blocks[i].threshold;
                    for b in 0..batch {
                        if !exited[b] {
                            activated[b][i] = true;
                            exited[b] = g.value(conf).data()[b] > tau;
                        }
                    }
                    heads.push(logits);
                    gate_scores.push(conf);
                }
            }
        }
        Ok(GraphForward {
            heads,
            gate_scores,
            activated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            &self.spec.hash(),
            &CheckpointMeta { spec: self.spec.clone() },
            &self.params,
        )
    }

    /// Loads a checkpoint; when `expected` is given its hash must match the embedded spec.
    pub fn load(path: &Path, expected: Option<&AdnnSpec>) -> Result<Self> {
        let ck = checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = ck.meta_as()?;
        let embedded = meta.spec.hash();
        if embedded != ck.hash {
            return Err(Error::HashMismatch {
                expected: ck.hash,
                found: embedded,
            });
        }
        if let Some(spec) = expected {
            if spec.hash() != ck.hash {
                return Err(Error::HashMismatch {
                    expected: spec.hash(),
                    found: ck.hash,
                });
            }
        }
        meta.spec.validate()?;
        let layout = Layout::resolve(&meta.spec, &ck.params)?;
        Ok(Self {
            spec: meta.spec,
            params: ck.params,
            layout,
        })
    }

    /// Names of the parameters belonging to block `i`.
    pub fn block_param_names(&self, i: usize) -> Vec<String> {
        ["conv1.w", "conv1.b", "conv2.w", "conv2.b"]
            .iter()
            .map(|s| format!("block{i}.{s}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::hard_cost;
    use adaperf_autograd::softmax_rows;
    use rand::Rng;

    fn random_input(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(&shape, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn force_gates(model: &mut AdnnModel, bias: f32) {
        for i in 0..model.num_blocks() {
            let w = model.params.id(&format!("block{i}.head.w")).unwrap();
            let b = model.params.id(&format!("block{i}.head.b")).unwrap();
            model.params.get_mut(w).data_mut().fill(0.0);
            model.params.get_mut(b).data_mut().fill(bias);
        }
    }

    fn small(mech: Mechanism, n: usize) -> AdnnSpec {
        AdnnSpec::uniform(mech, [3, 16, 16], 4, 8, n, 2, 0.5).unwrap()
    }

    #[test]
    fn saturated_and_dead_gates() {
        let mut m = build_skip_model(&small(Mechanism::ConditionalSkipping, 3), 1).unwrap();
        let x = random_input(0, [3, 16, 16]);
        force_gates(&mut m, 100.0);
        let t = m.forward_with_trace(&x).unwrap();
        assert_eq!(t.gate_scores, vec![1.0; 3]);
        assert_eq!(t.activated, vec![true; 3]);

        force_gates(&mut m, -100.0);
        let t = m.forward_with_trace(&x).unwrap();
        assert_eq!(t.activated, vec![false; 3]);
        // With every block skipped the classifier sees the stem output directly.
        let feats = m.first_stage_features(&x).unwrap();
        let c = m.spec.channels();
        let hw = feats.len() / c;
        let (w, b) = m.layout.classifier.unwrap();
        let (w, b) = (m.params.get(w).data(), m.params.get(b).data());
        for (k, &logit) in t.logits.iter().enumerate() {
            let mut acc = b[k];
            for ch in 0..c {
                let pooled = feats[ch * hw..(ch + 1) * hw].iter().sum::<f32>() / hw as f32;
                acc += w[k * c + ch] * pooled;
            }
            assert!((acc - logit).abs() < 1e-5);
        }
    }

    #[test]
    fn activation_matches_scalar_comparison() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let mut m = build_skip_model(&spec, 9).unwrap();
        m.set_thresholds(&[0.7, 0.72, 0.74, 0.73, 0.71, 0.75, 0.7, 0.73]).unwrap();
        for s in 0..20 {
            let t = m.forward_with_trace(&random_input(s, [3, 32, 32])).unwrap();
            for i in 0..8 {
                assert!((0.0..=1.0).contains(&t.gate_scores[i]));
                assert_eq!(t.activated[i], t.gate_scores[i] > m.thresholds()[i]);
            }
            assert_eq!(hard_cost(&t, &m.cost_profile()).unwrap(), t.executed_flops);
        }
    }

    #[test]
    fn early_exit_extremes() {
        let spec = small(Mechanism::EarlyTermination, 5);
        let mut m = build_early_exit_model(&spec, 2).unwrap();
        let x = random_input(3, [3, 16, 16]);
        m.set_thresholds(&[1.0; 5]).unwrap();
        let t = m.forward_with_trace(&x).unwrap();
        assert_eq!(t.exit_index, Some(4));
        assert_eq!(t.activated, vec![true; 5]);
        m.set_thresholds(&[0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let t = m.forward_with_trace(&x).unwrap();
        assert_eq!(t.exit_index, Some(0));
        assert_eq!(t.activated, vec![true, false, false, false, false]);
        assert_eq!(t.executed_flops, hard_cost(&t, &m.cost_profile()).unwrap());
    }

    #[test]
    fn early_exit_index_recomputed_from_logits() {
        let spec = small(Mechanism::EarlyTermination, 6);
        let m = build_early_exit_model(&spec, 5).unwrap();
        // Median per-exit confidence, so exits spread over several blocks.
        let full = m.with_thresholds(&[1.0; 6]).unwrap();
        let confs: Vec<Vec<f32>> = (0..31)
            .map(|s| full.forward_with_trace(&random_input(100 + s, [3, 16, 16])).unwrap().gate_scores)
            .collect();
        let taus: Vec<f32> = (0..6)
            .map(|i| {
                let mut col: Vec<f32> = confs.iter().map(|c| c[i]).collect();
                col.sort_by(f32::total_cmp);
                col[15]
            })
            .collect();
        let m = m.with_thresholds(&taus).unwrap();
        let mut exits = std::collections::BTreeSet::new();
        for s in 0..100 {
            let x = random_input(100 + s, [3, 16, 16]);
            let t = m.forward_with_trace(&x).unwrap();
            // Independent replay: rerun every block, recompute confidences.
            let all = m.with_thresholds(&[1.0; 6]).unwrap();
            let mut g = Graph::inference();
            let p = all.params.bind(&mut g, false);
            let xv = g.constant(x.clone().reshape(&[1, 3, 16, 16]).unwrap());
            let fwd = all.forward_graph(&mut g, &p, xv).unwrap();
            let expected = (0..6)
                .find(|&i| {
                    let probs = softmax_rows(g.value(fwd.heads[i]).data(), 4);
                    probs.iter().cloned().fold(f32::MIN, f32::max) > m.thresholds()[i]
                })
                .unwrap_or(5);
            assert_eq!(t.exit_index, Some(expected));
            exits.insert(expected);
        }
        assert!(exits.len() > 1, "thresholds should produce varied exits: {exits:?}");
    }

    #[test]
    fn traces_are_deterministic_and_batch_equivalent() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let m = build_skip_model(&spec, 3).unwrap();
        let xs = Tensor::stack(&(0..4).map(|s| random_input(s, [3, 32, 32]).reshape(&[1, 3, 32, 32]).unwrap()).collect::<Vec<_>>()).unwrap();
        let batch = m.forward_batch_with_trace(&xs).unwrap();
        for (i, t) in batch.iter().enumerate() {
            let again = m.forward_with_trace(&xs.item(i)).unwrap();
            assert!(t.bit_eq(&again));
        }
    }

    #[test]
    fn graph_forward_agrees_with_traced_inference() {
        for mech in [Mechanism::ConditionalSkipping, Mechanism::EarlyTermination] {
            let spec = small(mech, 4);
            let m = build_skip_model(&spec, 7)
                .or_else(|_| build_early_exit_model(&spec, 7))
                .unwrap()
                .with_thresholds(&[0.6, 0.7, 0.3, 0.8])
                .unwrap();
            let xs = Tensor::stack(&(0..3).map(|s| random_input(40 + s, [3, 16, 16]).reshape(&[1, 3, 16, 16]).unwrap()).collect::<Vec<_>>()).unwrap();
            let mut g = Graph::inference();
            let p = m.params.bind(&mut g, false);
            let xv = g.constant(xs.clone());
            let fwd = m.forward_graph(&mut g, &p, xv).unwrap();
            for b in 0..3 {
                let t = m.forward_with_trace(&xs.item(b)).unwrap();
                assert_eq!(fwd.activated[b], t.activated);
            }
        }
    }

    #[test]
    fn ablating_skipped_blocks_leaves_logits_unchanged() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let m = build_skip_model(&spec, 21).unwrap();
        let m = m.with_thresholds(&[0.72, 0.0, 0.75, 0.7, 1.0, 0.73, 0.71, 0.74]).unwrap();
        let mut checked = 0;
        for s in 0..10 {
            let x = random_input(200 + s, [3, 32, 32]);
            let t = m.forward_with_trace(&x).unwrap();
            let mut ablated = m.clone();
            for i in (0..8).filter(|&i| !t.activated[i]) {
                for name in m.block_param_names(i) {
                    let id = ablated.params.id(&name).unwrap();
                    ablated.params.get_mut(id).data_mut().fill(0.0);
                }
                checked += 1;
            }
            let t2 = ablated.forward_with_trace(&x).unwrap();
            assert!(t.bit_eq(&t2));
        }
        assert!(checked > 0);
    }

    #[test]
    fn threshold_updates() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let m = build_skip_model(&spec, 5).unwrap().with_thresholds(&[0.75; 8]).unwrap();
        let same = m.with_thresholds(&m.thresholds()).unwrap();
        let lower = m.with_thresholds(&[0.65; 8]).unwrap();
        for s in 0..100 {
            let x = random_input(300 + s, [3, 32, 32]);
            let t = m.forward_with_trace(&x).unwrap();
            assert!(t.bit_eq(&same.forward_with_trace(&x).unwrap()));
            assert!(lower.forward_with_trace(&x).unwrap().num_activated() >= t.num_activated());
        }
        assert!(m.with_thresholds(&[0.5; 7]).is_err());
        assert!(m.with_thresholds(&[1.2; 8]).is_err());
    }

    #[test]
    fn shape_and_mechanism_errors() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        assert!(build_early_exit_model(&spec, 0).is_err());
        let m = build_skip_model(&spec, 0).unwrap();
        assert!(matches!(m.forward_with_trace(&Tensor::zeros(&[3, 16, 16])), Err(Error::Shape(_))));
        let mut bad = spec.clone();
        bad.input_shape = [3, 64, 64];
        assert!(matches!(build_skip_model(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adnn.ckpt");
        let spec = AdnnSpec::reference(Mechanism::EarlyTermination);
        let m = build_early_exit_model(&spec, 8).unwrap();
        m.save(&path).unwrap();
        let back = AdnnModel::load(&path, Some(&spec)).unwrap();
        assert!(back.params().bit_eq(m.params()));
        let x = random_input(1, [3, 32, 32]);
        assert!(back.forward_with_trace(&x).unwrap().bit_eq(&m.forward_with_trace(&x).unwrap()));
        let other = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        assert!(matches!(AdnnModel::load(&path, Some(&other)), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn features_have_first_stage_shape() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let m = build_skip_model(&spec, 0).unwrap();
        let x = random_input(5, [3, 32, 32]);
        let f = m.first_stage_features(&x).unwrap();
        assert_eq!(f.len(), 16 * 16 * 16);
        assert_eq!(f.len(), m.feature_len());
        assert_eq!(f, m.first_stage_features(&x).unwrap());
    }
}
