use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flops::{block_flops, CostProfile, LayerShape};

/// How an adaptive model decides which computation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// A gated block is bypassed (identity) unless its gate score beats the threshold.
    ConditionalSkipping,
    /// Inference stops at the first exit head whose confidence beats the threshold.
    EarlyTermination,
}

/// Dimensions of a residual block: two `kernel x kernel` convolutions
/// mapping `channels -> channels` at `height x width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: usize,
    /// FLOPs executed when the block is active.
    pub flops_weight: f64,
    /// Activation threshold; a block fires on `score > threshold`.
    pub threshold: f32,
    pub shape: BlockShape,
}

/// Declarative description of an adaptive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdnnSpec {
    pub mechanism: Mechanism,
    /// `(channels, height, width)` of one input.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Stride of the 3x3 stem convolution.
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
}

pub(crate) const STEM_KERNEL: usize = 3;

impl AdnnSpec {
    /// Uniform model: a stem followed by `num_blocks` equal residual blocks.
    pub fn uniform(
        mechanism: Mechanism,
        input_shape: [usize; 3],
        num_classes: usize,
        channels: usize,
        num_blocks: usize,
        stem_stride: usize,
        threshold: f32,
    ) -> Result<Self> {
        if stem_stride == 0 {
            return Err(Error::Config("stem stride must be positive".into()));
        }
        let (h, w) = stem_out(input_shape, stem_stride);
        let shape = BlockShape {
            channels,
            height: h,
            width: w,
            kernel: 3,
        };
        let mut blocks = Vec::with_capacity(num_blocks);
        for index in 0..num_blocks {
            blocks.push(BlockSpec {
                index,
                flops_weight: block_flops(&block_layers(mechanism, &shape, num_classes))?,
                threshold,
                shape,
            });
        }
        let spec = Self {
            mechanism,
            input_shape,
            num_classes,
            stem_stride,
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default subject: 3x32x32 inputs, stride-2 stem, 8 blocks of 16 channels, 10 classes, tau = 0.5.
    pub fn reference(mechanism: Mechanism) -> Self {
        Self::uniform(mechanism, [3, 32, 32], 10, 16, 8, 2, 0.5).expect("reference spec is valid")
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.blocks.first().map(|b| b.shape.channels).unwrap_or(0)
    }

    pub fn thresholds(&self) -> Vec<f32> {
        self.blocks.iter().map(|b| b.threshold).collect()
    }

    /// Shape of the stem output, which is also every block's input shape.
    pub fn stem_output_shape(&self) -> [usize; 3] {
        let (h, w) = stem_out(self.input_shape, self.stem_stride);
        [self.channels(), h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("an adaptive model needs at least one block".into()));
        }
        if self.input_shape.contains(&0) || self.stem_stride == 0 {
            return Err(Error::Config(format!(
                "invalid input shape {:?} / stem stride {}",
                self.input_shape, self.stem_stride
            )));
        }
        let [_, h, w] = self.stem_output_shape();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i {
                return Err(Error::Config(format!("block indices must be 0..N, found {} at {i}", b.index)));
            }
            if !(0.0..=1.0).contains(&b.threshold) {
                return Err(Error::Config(format!("threshold {} of block {i} outside [0, 1]", b.threshold)));
            }
            if b.shape.kernel % 2 == 0 || b.shape.kernel == 0 {
                return Err(Error::Config(format!("block {i}: kernel must be odd")));
            }
            if b.shape.height != h || b.shape.width != w || b.shape.channels != self.channels() {
                return Err(Error::Config(format!(
                    "block {i} shape {:?} does not match stem output {:?} of input {:?}",
                    b.shape,
                    self.stem_output_shape(),
                    self.input_shape
                )));
            }
            let expected = block_flops(&block_layers(self.mechanism, &b.shape, self.num_classes))?;
            if b.flops_weight != expected {
                return Err(Error::Config(format!(
                    "block {i}: flops_weight {} but layer shapes give {expected}",
                    b.flops_weight
                )));
            }
        }
        Ok(())
    }

    /// Layers that run regardless of gating: the stem, and for conditional
    /// skipping also every gate and the classifier head.
    pub fn always_on_layers(&self) -> Vec<LayerShape> {
        let [c, h, w] = self.stem_output_shape();
        let mut layers = vec![LayerShape::Conv {
            kernel: STEM_KERNEL,
            in_channels: self.input_shape[0],
            out_channels: c,
            out_height: h,
            out_width: w,
        }];
        if self.mechanism == Mechanism::ConditionalSkipping {
            layers.extend(self.blocks.iter().map(|_| LayerShape::Dense { inputs: c, outputs: 1 }));
            layers.push(LayerShape::Dense {
                inputs: c,
                outputs: self.num_classes,
            });
        }
        layers
    }

    pub fn cost_profile(&self) -> CostProfile {
        let stem = block_flops(&self.always_on_layers()).expect("validated spec");
        CostProfile::new(stem, self.blocks.iter().map(|b| b.flops_weight).collect()).expect("non-negative weights")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Layers of one gated block. Early-exit blocks include their exit head.
pub fn block_layers(mechanism: Mechanism, shape: &BlockShape, num_classes: usize) -> Vec<LayerShape> {
    let conv = LayerShape::Conv {
        kernel: shape.kernel,
        in_channels: shape.channels,
        out_channels: shape.channels,
        out_height: shape.height,
        out_width: shape.width,
    };
    let mut layers = vec![conv, conv];
    if mechanism == Mechanism::EarlyTermination {
        layers.push(LayerShape::Dense {
            inputs: shape.channels,
            outputs: num_classes,
        });
    }
    layers
}

fn stem_out(input: [usize; 3], stride: usize) -> (usize, usize) {
    let pad = STEM_KERNEL / 2;
    let f = |d: usize| (d + 2 * pad).saturating_sub(STEM_KERNEL) / stride.max(1) + 1;
    (f(input[1]), f(input[2]))
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

/// Per-input record of what an adaptive model executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    /// Gate score of each block; zero for blocks never reached.
    pub gate_scores: Vec<f32>,
    pub activated: Vec<bool>,
    /// Exit taken by an early-termination model.
    pub exit_index: Option<usize>,
    pub logits: Vec<f32>,
    /// FLOPs counted layer by layer during execution.
    pub executed_flops: f64,
}

impl BlockTrace {
    pub fn num_activated(&self) -> usize {
        self.activated.iter().filter(|a| **a).count()
    }

    pub fn predicted_class(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// Bitwise equality of every field.
    pub fn bit_eq(&self, other: &BlockTrace) -> bool {
        let f32_eq = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        f32_eq(&self.gate_scores, &other.gate_scores)
            && f32_eq(&self.logits, &other.logits)
            && self.activated == other.activated
            && self.exit_index == other.exit_index
            && self.executed_flops.to_bits() == other.executed_flops.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_spec_is_consistent() {
        for mech in [Mechanism::ConditionalSkipping, Mechanism::EarlyTermination] {
            let spec = AdnnSpec::reference(mech);
            spec.validate().unwrap();
            assert_eq!(spec.num_blocks(), 8);
            assert_eq!(spec.stem_output_shape(), [16, 16, 16]);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        spec.blocks[3].index = 7;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        let mut spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        spec.blocks[0].threshold = 1.5;
        assert!(spec.validate().is_err());

        let mut spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        spec.input_shape = [3, 64, 64];
        assert!(matches!(spec.validate(), Err(Error::Config(m)) if m.contains("stem output")));

        let mut spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        spec.blocks[2].flops_weight += 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = AdnnSpec::reference(Mechanism::EarlyTermination);
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: AdnnSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
    }
}
