//! Define-by-run tape with reverse-mode differentiation.

use serde::{Deserialize, Serialize};

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector norm used for perturbation magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PNorm {
    L2,
    Linf,
}

impl PNorm {
    pub fn of(self, values: &[f32]) -> f32 {
        match self {
            // Accumulated in f64 so budget checks on long vectors are not dominated by rounding.
            PNorm::L2 => values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32,
            PNorm::Linf => values.iter().fold(0.0f32, |m, v| m.max(v.abs())),
        }
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f32, f32),
    Linear(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        in_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumPerSample(Var),
    ScalePerSample(Var, Var),
    StepSte(Var),
    ProjectL2 {
        x: Var,
        eps: f32,
        norms: Vec<f32>,
    },
    NormPerSample {
        x: Var,
        norm: PNorm,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    MaxSoftmax {
        logits: Var,
        probs: Vec<f32>,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations so gradients can be propagated back to leaves.
///
/// An inference graph ([`Graph::inference`]) keeps values only and drops all
/// saved state, so it never tracks gradients.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A trainable leaf. On an inference graph this is a constant.
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.record;
        self.push_raw(t, Op::Leaf, rg)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shape");
        let out = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shape");
        let out = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shape");
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.val(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.val(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Adds a per-channel bias `[C]` to a `[B, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val(x);
        let c = xv.shape()[1];
        assert_eq!(self.val(b).len(), c, "bias length");
        let inner = xv.item_len() / c;
        let bias = self.val(b).data();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        self.push(out, Op::AddChannelBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f32::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// `log(1 + exp(x))`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.val(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let out = self.val(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// `x [B, in] -> x * w^T` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (b, din) = self.val(x).dims2().expect("linear input");
        let (dout, win) = self.val(w).dims2().expect("linear weight");
        assert_eq!(din, win, "linear fan-in");
        let mut out = Tensor::zeros(&[b, dout]);
        kernels::gemm(
            b,
            din,
            dout,
            1.0,
            self.val(x).data(),
            false,
            self.val(w).data(),
            true,
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::Linear(x, w), &[x, w])
    }

    /// 2-d convolution with a square `[Cout, Cin, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Var {
        let (b, c, h, wd) = self.val(x).dims4().expect("conv input");
        let (cout, cin, k, k2) = self.val(w).dims4().expect("conv weight");
        assert!(cin == c && k == k2, "conv weight {:?} vs input {:?}", self.val(w).shape(), self.val(x).shape());
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let mut out = Tensor::zeros(&[b, cout, geom.out_height(), geom.out_width()]);
        kernels::conv2d_forward(self.val(x).data(), b, &geom, self.val(w).data(), cout, out.data_mut());
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels: cout,
            },
            &[x, w],
        )
    }

    /// Transposed convolution with a `[Cin, Cout, k, k]` kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Var {
        let (b, cin, h, wd) = self.val(x).dims4().expect("convT input");
        let (win, cout, k, k2) = self.val(w).dims4().expect("convT weight");
        assert!(win == cin && k == k2, "convT weight");
        let ho = (h - 1) * stride + k + output_padding - 2 * padding;
        let wo = (wd - 1) * stride + k + output_padding - 2 * padding;
        let geom = ConvGeom {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding,
        };
        debug_assert_eq!((geom.out_height(), geom.out_width()), (h, wd));
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        kernels::conv_transpose2d_forward(self.val(x).data(), b, &geom, self.val(w).data(), cin, out.data_mut());
        self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels: cin,
            },
            &[x, w],
        )
    }

    /// Training-mode batch normalization over `(B, H, W)` for each channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> (Var, BatchStats) {
        let xv = self.val(x);
        let c = xv.shape()[1];
        let inner = xv.item_len() / c;
        let b = xv.batch();
        let count = (b * inner) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for n in 0..b {
            for ch in 0..c {
                let s = &xv.data()[(n * c + ch) * inner..(n * c + ch + 1) * inner];
                for &v in s {
                    mean[ch] += v as f64;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for n in 0..b {
            for ch in 0..c {
                let s = &xv.data()[(n * c + ch) * inner..(n * c + ch + 1) * inner];
                for &v in s {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let mean_f: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let stats = BatchStats {
            mean: mean_f.clone(),
            var: sq
                .iter()
                .map(|s| (s / (count - 1.0).max(1.0)) as f32)
                .collect(),
        };
        let (y, xhat) = self.normalize(x, gamma, beta, &mean_f, &inv_std);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: true,
        };
        (self.push(y, op, &[x, gamma, beta]), stats)
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Var {
        let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: false,
        };
        self.push(y, op, &[x, gamma, beta])
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f32], inv_std: &[f32]) -> (Tensor, Vec<f32>) {
        let xv = self.val(x);
        let c = xv.shape()[1];
        let inner = xv.item_len() / c;
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for (i, (&v, (xh, o))) in xv
            .data()
            .iter()
            .zip(xhat.iter_mut().zip(out.data_mut()))
            .enumerate()
        {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + bt[ch];
        }
        (out, xhat)
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.val(x).dims4().expect("gap input");
        let inner = h * w;
        let data: Vec<f32> = self
            .val(x)
            .data()
            .chunks(inner)
            .map(|s| s.iter().sum::<f32>() / inner as f32)
            .collect();
        let out = Tensor::new(&[b, c], data).expect("gap shape");
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.val(x).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).mean());
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sums every non-batch dimension: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let n = xv.item_len();
        let data: Vec<f32> = xv.data().chunks(n).map(|s| s.iter().sum()).collect();
        let out = Tensor::new(&[xv.batch()], data).expect("row sum");
        self.push(out, Op::SumPerSample(x), &[x])
    }

    /// Multiplies each batch item of `x` by the matching entry of `s [B]`.
    pub fn scale_per_sample(&mut self, x: Var, s: Var) -> Var {
        let xv = self.val(x);
        let sv = self.val(s);
        assert_eq!(xv.batch(), sv.len(), "per-sample scale length");
        let n = xv.item_len();
        let mut out = xv.clone();
        for (chunk, &f) in out.data_mut().chunks_mut(n).zip(sv.data()) {
            for v in chunk {
                *v *= f;
            }
        }
        self.push(out, Op::ScalePerSample(x, s), &[x, s])
    }

    /// Hard step `1[x > threshold]` whose backward pass is the identity.
    pub fn step_ste(&mut self, x: Var, threshold: f32) -> Var {
        let out = self.val(x).map(|v| if v > threshold { 1.0 } else { 0.0 });
        self.push(out, Op::StepSte(x), &[x])
    }

    /// Per-sample projection onto the L2 ball of radius `eps`.
    pub fn project_l2(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.val(x);
        let n = xv.item_len();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.batch());
        for chunk in out.data_mut().chunks_mut(n) {
            let norm = PNorm::L2.of(chunk);
            norms.push(norm);
            if norm > eps {
                let f = eps / norm;
                for v in chunk {
                    *v *= f;
                }
            }
        }
        self.push(out, Op::ProjectL2 { x, eps, norms }, &[x])
    }

    /// Per-sample vector norm: `[B, ...] -> [B]`.
    pub fn norm_per_sample(&mut self, x: Var, norm: PNorm) -> Var {
        let xv = self.val(x);
        let n = xv.item_len();
        let mut argmax = Vec::new();
        let data: Vec<f32> = xv
            .data()
            .chunks(n)
            .map(|s| match norm {
                PNorm::L2 => PNorm::L2.of(s),
                PNorm::Linf => {
                    let (idx, m) = s
                        .iter()
                        .enumerate()
                        .fold((0, 0.0f32), |(bi, bm), (i, v)| if v.abs() > bm { (i, v.abs()) } else { (bi, bm) });
                    argmax.push(idx);
                    m
                }
            })
            .collect();
        let out = Tensor::new(&[xv.batch()], data).expect("norm shape");
        self.push(out, Op::NormPerSample { x, norm, argmax }, &[x])
    }

    /// Per-sample softmax cross-entropy: `[B, K] -> [B]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (b, k) = self.val(logits).dims2().expect("logits");
        assert_eq!(b, labels.len(), "label count");
        let probs = softmax_rows(self.val(logits).data(), k);
        let data: Vec<f32> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                assert!(y < k, "label {y} out of range");
                -(probs[i * k + y].max(1e-30)).ln()
            })
            .collect();
        let out = Tensor::new(&[b], data).expect("ce shape");
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Largest softmax probability per row: `[B, K] -> [B]`.
    pub fn max_softmax(&mut self, logits: Var) -> Var {
        let (b, k) = self.val(logits).dims2().expect("logits");
        let probs = softmax_rows(self.val(logits).data(), k);
        let mut argmax = Vec::with_capacity(b);
        let data: Vec<f32> = probs
            .chunks(k)
            .map(|row| {
                let (i, m) = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bm), (i, &v)| if v > bm { (i, v) } else { (bi, bm) });
                argmax.push(i);
                m
            })
            .collect();
        let out = Tensor::new(&[b], data).expect("max softmax shape");
        self.push(out, Op::MaxSoftmax { logits, probs, argmax }, &[logits])
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || gy.clone());
                self.acc(grads, *b, || gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || gy.clone());
                self.acc(grads, *b, || gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.acc(grads, *a, || gy.zip_map(bv, |g, x| g * x));
                self.acc(grads, *b, || gy.zip_map(av, |g, x| g * x));
            }
            Op::Scale(a, s) => self.acc(grads, *a, || gy.map(|g| g * s)),
            Op::AddScalar(a) => self.acc(grads, *a, || gy.clone()),
            Op::AddChannelBias(x, b) => {
                self.acc(grads, *x, || gy.clone());
                self.acc(grads, *b, || {
                    let c = gy.shape()[1];
                    let inner = gy.item_len() / c;
                    let mut gb = Tensor::zeros(&[c]);
                    for (i, &g) in gy.data().iter().enumerate() {
                        gb.data_mut()[(i / inner) % c] += g;
                    }
                    gb
                });
            }
            Op::Relu(a) => self.acc(grads, *a, || gy.zip_map(y, |g, o| if o > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(a) => self.acc(grads, *a, || gy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, || gy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Softplus(a) => {
                let av = self.val(*a);
                self.acc(grads, *a, || gy.zip_map(av, |g, x| g * sigmoid(x)));
            }
            Op::Square(a) => {
                let av = self.val(*a);
                self.acc(grads, *a, || gy.zip_map(av, |g, x| 2.0 * g * x));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.val(*a);
                self.acc(grads, *a, || gy.zip_map(av, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }));
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (b, din) = xv.dims2().unwrap();
                let dout = wv.shape()[0];
                self.acc(grads, *x, || {
                    let mut gx = Tensor::zeros(&[b, din]);
                    kernels::gemm(b, dout, din, 1.0, gy.data(), false, wv.data(), false, 0.0, gx.data_mut());
                    gx
                });
                self.acc(grads, *w, || {
                    let mut gw = Tensor::zeros(&[dout, din]);
                    kernels::gemm(dout, b, din, 1.0, gy.data(), true, xv.data(), false, 0.0, gw.data_mut());
                    gw
                });
            }
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels,
            } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let mut gx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                kernels::conv2d_backward(
                    xv.data(),
                    xv.batch(),
                    geom,
                    wv.data(),
                    *out_channels,
                    gy.data(),
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    self.acc(grads, *x, || t);
                }
                if let Some(t) = gw {
                    self.acc(grads, *w, || t);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels,
            } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let mut gx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                kernels::conv_transpose2d_backward(
                    xv.data(),
                    xv.batch(),
                    geom,
                    wv.data(),
                    *in_channels,
                    gy.data(),
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    self.acc(grads, *x, || t);
                }
                if let Some(t) = gw {
                    self.acc(grads, *w, || t);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = gy.shape()[1];
                let inner = gy.item_len() / c;
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for (i, (&g, &xh)) in gy.data().iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xh;
                }
                let gam = self.val(*gamma).data();
                self.acc(grads, *x, || {
                    let count = (gy.len() / c) as f32;
                    let mut gx = Tensor::zeros(gy.shape());
                    for (i, (o, (&g, &xh))) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(gy.data().iter().zip(xhat))
                        .enumerate()
                    {
                        let ch = (i / inner) % c;
                        let k = gam[ch] * inv_std[ch];
                        *o = if *train {
                            k * (g - sum_g[ch] / count - xh * sum_gx[ch] / count)
                        } else {
                            k * g
                        };
                    }
                    gx
                });
                self.acc(grads, *gamma, || Tensor::from_slice(&sum_gx));
                self.acc(grads, *beta, || Tensor::from_slice(&sum_g));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.val(*x);
                let (_, _, h, w) = xv.dims4().unwrap();
                let inner = h * w;
                self.acc(grads, *x, || {
                    let mut gx = Tensor::zeros(xv.shape());
                    for (chunk, &g) in gx.data_mut().chunks_mut(inner).zip(gy.data()) {
                        chunk.fill(g / inner as f32);
                    }
                    gx
                });
            }
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                self.acc(grads, *x, || gy.clone().reshape(&shape).unwrap());
            }
            Op::SumAll(x) => {
                let g = gy.data()[0];
                self.acc(grads, *x, || Tensor::full(self.val(*x).shape(), g));
            }
            Op::MeanAll(x) => {
                let n = self.val(*x).len() as f32;
                let g = gy.data()[0] / n;
                self.acc(grads, *x, || Tensor::full(self.val(*x).shape(), g));
            }
            Op::SumPerSample(x) => {
                let xv = self.val(*x);
                let n = xv.item_len();
                self.acc(grads, *x, || {
                    let mut gx = Tensor::zeros(xv.shape());
                    for (chunk, &g) in gx.data_mut().chunks_mut(n).zip(gy.data()) {
                        chunk.fill(g);
                    }
                    gx
                });
            }
            Op::ScalePerSample(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s));
                let n = xv.item_len();
                self.acc(grads, *x, || {
                    let mut gx = gy.clone();
                    for (chunk, &f) in gx.data_mut().chunks_mut(n).zip(sv.data()) {
                        for v in chunk {
                            *v *= f;
                        }
                    }
                    gx
                });
                self.acc(grads, *s, || {
                    let data = gy
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(sv.shape(), data).unwrap()
                });
            }
            Op::StepSte(x) => self.acc(grads, *x, || gy.clone()),
            Op::ProjectL2 { x, eps, norms } => {
                let xv = self.val(*x);
                let n = xv.item_len();
                self.acc(grads, *x, || {
                    let mut gx = gy.clone();
                    for ((gc, xc), &norm) in gx.data_mut().chunks_mut(n).zip(xv.data().chunks(n)).zip(norms) {
                        if norm <= *eps {
                            continue;
                        }
                        let dot: f32 = gc.iter().zip(xc).map(|(g, x)| g * x).sum::<f32>() / norm;
                        let f = eps / norm;
                        for (g, &xi) in gc.iter_mut().zip(xc) {
                            *g = f * (*g - xi / norm * dot);
                        }
                    }
                    gx
                });
            }
            Op::NormPerSample { x, norm, argmax } => {
                let xv = self.val(*x);
                let n = xv.item_len();
                self.acc(grads, *x, || {
                    let mut gx = Tensor::zeros(xv.shape());
                    for (b, (gc, xc)) in gx.data_mut().chunks_mut(n).zip(xv.data().chunks(n)).enumerate() {
                        let g = gy.data()[b];
                        let nv = y.data()[b];
                        match norm {
                            PNorm::L2 => {
                                if nv > 0.0 {
                                    for (o, &xi) in gc.iter_mut().zip(xc) {
                                        *o = g * xi / nv;
                                    }
                                }
                            }
                            PNorm::Linf => {
                                let i = argmax[b];
                                if xc[i] != 0.0 {
                                    gc[i] = g * xc[i].signum();
                                }
                            }
                        }
                    }
                    gx
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.val(*logits).shape()[1];
                self.acc(grads, *logits, || {
                    let mut gl = Tensor::new(self.val(*logits).shape(), probs.clone()).unwrap();
                    for (b, (row, &y)) in gl.data_mut().chunks_mut(k).zip(labels).enumerate() {
                        row[y] -= 1.0;
                        let g = gy.data()[b];
                        for v in row {
                            *v *= g;
                        }
                    }
                    gl
                });
            }
            Op::MaxSoftmax { logits, probs, argmax } => {
                let k = self.val(*logits).shape()[1];
                self.acc(grads, *logits, || {
                    let mut gl = Tensor::zeros(self.val(*logits).shape());
                    for (b, (row, p)) in gl.data_mut().chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        let m = argmax[b];
                        let g = gy.data()[b];
                        for j in 0..k {
                            let delta = if j == m { 1.0 } else { 0.0 };
                            row[j] = g * p[m] * (delta - p[j]);
                        }
                    }
                    gl
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax of a flat `[rows, k]` buffer.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}
