use std::path::Path;

use adaperf_autograd::{kaiming_uniform, BatchStats, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::budget::{clip_graph, PerturbationBudget};
use crate::checkpoint;
use crate::error::{Error, Result};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const KERNEL: usize = 3;

/// Encoder / residual core / decoder perturbation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_shape: [usize; 3],
    /// Output channels of the two stride-2 encoder convolutions.
    pub encoder_channels: [usize; 2],
    pub residual_blocks: usize,
}

impl GeneratorSpec {
    pub fn for_input(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            encoder_channels: [16, 32],
            residual_blocks: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "generator input {:?} must have height and width divisible by 4",
                self.input_shape
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("generator channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub input_shape: [usize; 3],
    /// Output channels of the three stride-2 convolutions.
    pub channels: [usize; 3],
}

impl DiscriminatorSpec {
    pub fn for_input(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            channels: [16, 32, 64],
        }
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "discriminator input {:?} must have height and width divisible by 8",
                self.input_shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    fn add(p: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: p.weight(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: p.weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            mean: p.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            var: p.buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    fn resolve(p: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: lookup(p, &format!("{name}.gamma"))?,
            beta: lookup(p, &format!("{name}.beta"))?,
            mean: lookup(p, &format!("{name}.running_mean"))?,
            var: lookup(p, &format!("{name}.running_var"))?,
        })
    }
}

fn lookup(p: &ParamStore, name: &str) -> Result<ParamId> {
    p.id(name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))
}

/// Whether batch norms use batch statistics (and report them) or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct GenLayout {
    enc: [(ParamId, BatchNorm); 2],
    res: Vec<[(ParamId, BatchNorm); 2]>,
    dec1: (ParamId, BatchNorm),
    dec2: (ParamId, ParamId),
}

impl GenLayout {
    fn resolve(spec: &GeneratorSpec, p: &ParamStore) -> Result<Self> {
        let conv = |name: &str| -> Result<(ParamId, BatchNorm)> {
            Ok((lookup(p, &format!("{name}.w"))?, BatchNorm::resolve(p, &format!("{name}.bn"))?))
        };
        Ok(Self {
            enc: [conv("enc1")?, conv("enc2")?],
            res: (0..spec.residual_blocks)
                .map(|i| Ok([conv(&format!("res{i}.a"))?, conv(&format!("res{i}.b"))?]))
                .collect::<Result<_>>()?,
            dec1: conv("dec1")?,
            dec2: (lookup(p, "dec2.w")?, lookup(p, "dec2.b")?),
        })
    }
}

/// Maps a seed to a bounded perturbation.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    budget: PerturbationBudget,
    params: ParamStore,
    layout: GenLayout,
}

/// Checkpoint metadata binding a generator to its budget and target model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub spec: GeneratorSpec,
    pub budget: PerturbationBudget,
    /// Hash of the adaptive model the generator was trained against.
    pub target_hash: String,
    pub train_config: Option<serde_json::Value>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, budget: PerturbationBudget, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let cin = spec.input_shape[0];
        let [c1, c2] = spec.encoder_channels;
        let mut conv = |p: &mut ParamStore, name: &str, cout: usize, cin: usize| {
            p.weight(
                format!("{name}.w"),
                kaiming_uniform(&mut rng, &[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL),
            );
            BatchNorm::add(p, &format!("{name}.bn"), cout);
        };
        conv(&mut p, "enc1", c1, cin);
        conv(&mut p, "enc2", c2, c1);
        for i in 0..spec.residual_blocks {
            conv(&mut p, &format!("res{i}.a"), c2, c2);
            conv(&mut p, &format!("res{i}.b"), c2, c2);
        }
        // Transposed convolutions store weights as [in, out, k, k].
        conv(&mut p, "dec1", c1, c2);
        let dec1 = p.id("dec1.w").expect("just added");
        *p.get_mut(dec1) = kaiming_uniform(&mut rng, &[c2, c1, KERNEL, KERNEL], c2 * KERNEL * KERNEL);
        p.weight("dec2.w", kaiming_uniform(&mut rng, &[c1, cin, KERNEL, KERNEL], c1 * KERNEL * KERNEL));
        p.weight("dec2.b", Tensor::zeros(&[cin]));
        let layout = GenLayout::resolve(&spec, &p)?;
        Ok(Self {
            spec,
            budget,
            params: p,
            layout,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn budget(&self) -> &PerturbationBudget {
        &self.budget
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn bn(&self, g: &mut Graph, p: &Bound, x: Var, bn: &BatchNorm, mode: Mode, stats: &mut Vec<BatchStats>) -> Var {
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, p[bn.gamma], p[bn.beta], BN_EPS);
                stats.push(s);
                y
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                p[bn.gamma],
                p[bn.beta],
                self.params.get(bn.mean).data(),
                self.params.get(bn.var).data(),
                BN_EPS,
            ),
        }
    }

    /// Raw perturbation `[B, C, H, W]` with every entry inside
    /// `[-entry_scale, entry_scale]`, plus the batch statistics seen in
    /// training mode (in layer order).
    pub fn perturbation(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode) -> (Var, Vec<BatchStats>) {
        let mut stats = Vec::new();
        let mut h = x;
        for (w, bn) in &self.layout.enc {
            h = g.conv2d(h, p[*w], 2, KERNEL / 2);
            h = self.bn(g, p, h, bn, mode, &mut stats);
            h = g.relu(h);
        }
        for [(wa, bna), (wb, bnb)] in &self.layout.res {
            let mut r = g.conv2d(h, p[*wa], 1, KERNEL / 2);
            r = self.bn(g, p, r, bna, mode, &mut stats);
            r = g.relu(r);
            r = g.conv2d(r, p[*wb], 1, KERNEL / 2);
            r = self.bn(g, p, r, bnb, mode, &mut stats);
            h = g.add(h, r);
        }
        let (w, bn) = &self.layout.dec1;
        h = g.conv_transpose2d(h, p[*w], 2, KERNEL / 2, 1);
        h = self.bn(g, p, h, bn, mode, &mut stats);
        h = g.relu(h);
        let (w, b) = self.layout.dec2;
        h = g.conv_transpose2d(h, p[w], 2, KERNEL / 2, 1);
        h = g.add_channel_bias(h, p[b]);
        let h = g.tanh(h);
        let scale = self.budget.entry_scale(self.spec.input_shape.iter().product());
        (g.scale(h, scale), stats)
    }

    /// Projected test samples `clip(x + G(x))` on a graph.
    pub fn generate_graph(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode) -> (Var, Vec<BatchStats>) {
        let (delta, stats) = self.perturbation(g, p, x, mode);
        let raw = g.add(x, delta);
        (clip_graph(g, x, raw, &self.budget), stats)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let bns: Vec<BatchNorm> = self
            .layout
            .enc
            .iter()
            .map(|(_, b)| b.clone())
            .chain(self.layout.res.iter().flat_map(|pair| pair.iter().map(|(_, b)| b.clone())))
            .chain(std::iter::once(self.layout.dec1.1.clone()))
            .collect();
        debug_assert_eq!(bns.len(), stats.len());
        for (bn, s) in bns.iter().zip(stats) {
            for (r, v) in self.params.get_mut(bn.mean).data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            for (r, v) in self.params.get_mut(bn.var).data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.spec.input_shape;
        match x.shape() {
            [_, cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => Ok(x.clone()),
            [cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => Ok(x.clone().reshape(&[1, c, h, w])?),
            s => Err(Error::Shape(format!(
                "generator input {s:?} does not match {:?}",
                self.spec.input_shape
            ))),
        }
    }

    /// One inference pass plus projection for a seed or a batch of seeds.
    /// The result has the same shape as `seeds`.
    pub fn generate(&self, seeds: &Tensor) -> Result<Tensor> {
        let x = self.check_input(seeds)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let (out, _) = self.generate_graph(&mut g, &p, xv, Mode::Eval);
        Ok(g.value(out).clone().reshape(seeds.shape())?)
    }

    pub fn save(&self, path: &Path, target_hash: &str, train_config: Option<serde_json::Value>) -> Result<()> {
        let meta = GeneratorMeta {
            spec: self.spec.clone(),
            budget: self.budget,
            target_hash: target_hash.to_string(),
            train_config,
        };
        checkpoint::save(path, "generator", &crate::adnn::hash_json(&meta), &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, GeneratorMeta)> {
        let ck = checkpoint::load_kind(path, "generator")?;
        let meta: GeneratorMeta = ck.meta_as()?;
        if crate::adnn::hash_json(&meta) != ck.hash {
            return Err(Error::HashMismatch {
                expected: ck.hash,
                found: crate::adnn::hash_json(&meta),
            });
        }
        meta.spec.validate()?;
        let layout = GenLayout::resolve(&meta.spec, &ck.params)?;
        Ok((
            Self {
                spec: meta.spec.clone(),
                budget: meta.budget,
                params: ck.params,
                layout,
            },
            meta,
        ))
    }
}

/// Convolutional critic producing one unbounded realism score per input.
#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
    dense: (ParamId, ParamId),
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = spec.input_shape[0];
        let mut convs = Vec::new();
        for (i, &cout) in spec.channels.iter().enumerate() {
            let w = p.weight(
                format!("conv{i}.w"),
                kaiming_uniform(&mut rng, &[cout, cin, KERNEL, KERNEL], cin * KERNEL * KERNEL),
            );
            let b = p.weight(format!("conv{i}.b"), Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        let flat = cin * (spec.input_shape[1] / 8) * (spec.input_shape[2] / 8);
        let w = p.weight("dense.w", kaiming_uniform(&mut rng, &[1, flat], flat));
        let b = p.weight("dense.b", Tensor::zeros(&[1]));
        Ok(Self {
            spec,
            params: p,
            convs,
            dense: (w, b),
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Scores `[B]` (logits; the probability of "real" is their sigmoid).
    pub fn scores(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for &(w, b) in &self.convs {
            h = g.conv2d(h, p[w], 2, KERNEL / 2);
            h = g.add_channel_bias(h, p[b]);
            h = g.relu(h);
        }
        let shape = g.value(h).shape().to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1..].iter().product()]);
        let (w, b) = self.dense;
        let y = g.linear(flat, p[w]);
        let y = g.add_channel_bias(y, p[b]);
        g.reshape(y, &[shape[0]])
    }

    pub fn save(&self, path: &Path, hash: &str) -> Result<()> {
        checkpoint::save(path, "discriminator", hash, &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load_kind(path, "discriminator")?;
        let spec: DiscriminatorSpec = ck.meta_as()?;
        let mut d = Self::new(spec, 0)?;
        d.params.load_from(&ck.params)?;
        Ok(d)
    }
}
