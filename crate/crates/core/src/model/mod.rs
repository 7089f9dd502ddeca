//! The fully convolutional classifier.
//!
//! ```text
//! (p, t) map -> replicate x3 -> backbone -> (C, p/32, ceil(t/32))
//!   -> mean over frequency -> (C, t') -> 1x1 conv, 2 outputs -> (2, t')  [TimeActivations]
//!   -> mean over time -> 2 logits -> softmax
//! ```
//!
//! Every backbone layer is a convolution followed by batch norm and ReLU6.

mod config;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{
    mobilenet_v1_blocks, BackboneConfig, BlockKind, BlockSpec, ModelConfig, BACKBONE_STRIDE,
};

use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::nncore::ops::{self, Mode, Padding};
use crate::nncore::{round_to_f32, NodeId, Parameter, Tape, Tensor};
use crate::{AD, NON_AD};

/// Number of output classes (non-AD, AD).
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Convolution + batch norm + ReLU6.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: LayerKind,
    pub stride: usize,
    pub kernel: Parameter,
    pub bn: BatchNorm,
}

/// Per-time-step class evidence before the final pooling, `(t', 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeActivations {
    /// `values[j] = [non_ad, ad]` at time step `j`.
    pub values: Vec<[f64; NUM_CLASSES]>,
    /// Frame count of the feature map the activations came from.
    pub source_t: usize,
}

impl TimeActivations {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One class's evidence over time.
    pub fn class_row(&self, class_index: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[class_index]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
    pub label: usize,
    pub time_activations: TimeActivations,
}

/// Argmax over the two classes; a tie goes to non-AD.
pub fn argmax_label(probs: &[f64; NUM_CLASSES]) -> usize {
    if probs[AD] > probs[NON_AD] {
        AD
    } else {
        NON_AD
    }
}

/// Recorded forward pass of a batch.
pub struct ForwardTrace {
    pub tape: Tape,
    /// `(N, 2)` pooled logits.
    pub logits: NodeId,
    /// `(N, 2, t')` head output.
    pub time_activations: NodeId,
    /// Leaf ids in [`FcnModel::parameters`] order.
    pub param_ids: Vec<NodeId>,
    /// Batch-norm node of each layer.
    pub bn_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    pub config: ModelConfig,
    pub layers: Vec<ConvLayer>,
    /// `(2, C_final, 1)`.
    pub head_weight: Parameter,
    /// `(2)`.
    pub head_bias: Parameter,
}

fn uniform(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(shape, |_| rng.random_range(-limit..limit));
    round_to_f32(&mut t);
    t
}

/// `(3, p, t)` tensor with the map copied into every channel.
pub fn replicate_channels(map: &FeatureMap) -> Tensor {
    let plane: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![3, map.p(), map.t()], data).expect("non-empty feature map")
}

/// Zero-pads maps on the right to the longest one: `(N, 3, p, t_max)` plus
/// each sample's original length.
pub fn pad_batch(maps: &[&FeatureMap]) -> Result<(Tensor, Vec<usize>)> {
    let Some(first) = maps.first() else {
        return Err(Error::Argument("cannot batch an empty list of feature maps".into()));
    };
    let p = first.p();
    if let Some(m) = maps.iter().find(|m| m.p() != p) {
        return Err(Error::Shape(format!(
            "feature maps in a batch must share p: {p} vs {}",
            m.p()
        )));
    }
    let t_max = maps.iter().map(|m| m.t()).max().unwrap();
    let mut data = vec![0.0; maps.len() * 3 * p * t_max];
    for (n, map) in maps.iter().enumerate() {
        for c in 0..3 {
            for r in 0..p {
                let dst = &mut data[((n * 3 + c) * p + r) * t_max..][..map.t()];
                for (d, &v) in dst.iter_mut().zip(map.row(r)) {
                    *d = v as f64;
                }
            }
        }
    }
    let valid = maps.iter().map(|m| m.t()).collect();
    Ok((Tensor::new(vec![maps.len(), 3, p, t_max], data)?, valid))
}

impl FcnModel {
    /// Fresh model. Backbone kernels are Glorot-uniform; the head uses
    /// uniform fan-in scaling `U(-1/sqrt(C), 1/sqrt(C))` for weights and bias.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = &config.backbone;
        let mut layers = Vec::new();
        let mut cin = bb.input_channels;
        let mut dw_index = 0;
        for spec in &bb.blocks {
            let cout = bb.channels(spec.out_channels);
            match spec.kind {
                BlockKind::Standard => {
                    let name = if layers.is_empty() {
                        "conv1".to_string()
                    } else {
                        format!("conv{}", layers.len() + 1)
                    };
                    let limit = (6.0 / ((cin + cout) * 9) as f64).sqrt();
                    layers.push(ConvLayer {
                        name,
                        kind: LayerKind::Standard,
                        stride: spec.stride,
                        kernel: Parameter::new(uniform(&[cout, cin, 3, 3], limit, &mut rng)),
                        bn: BatchNorm::new(cout),
                    });
                }
                BlockKind::DepthwiseSeparable => {
                    dw_index += 1;
                    let limit = (6.0 / 18.0f64).sqrt();
                    layers.push(ConvLayer {
                        name: format!("conv_dw_{dw_index}"),
                        kind: LayerKind::Depthwise,
                        stride: spec.stride,
                        kernel: Parameter::new(uniform(&[cin, 3, 3], limit, &mut rng)),
                        bn: BatchNorm::new(cin),
                    });
                    let limit = (6.0 / (cin + cout) as f64).sqrt();
                    layers.push(ConvLayer {
                        name: format!("conv_pw_{dw_index}"),
                        kind: LayerKind::Pointwise,
                        stride: 1,
                        kernel: Parameter::new(uniform(&[cout, cin, 1, 1], limit, &mut rng)),
                        bn: BatchNorm::new(cout),
                    });
                }
            }
            cin = cout;
        }
        let limit = 1.0 / (cin as f64).sqrt();
        let head_weight = Parameter::new(uniform(&[NUM_CLASSES, cin, 1], limit, &mut rng));
        let head_bias = Parameter::new(uniform(&[NUM_CLASSES], limit, &mut rng));
        Ok(FcnModel {
            config,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn final_channels(&self) -> usize {
        self.head_weight.value.shape()[1]
    }

    /// Trainable parameters in a fixed order: per layer kernel, gamma, beta;
    /// then head weight and bias.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.extend([&l.kernel, &l.bn.gamma, &l.bn.beta]);
        }
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    /// Backbone scalars counted the usual way for MobileNet: kernels plus the
    /// four batch-norm vectors (gamma, beta, running mean, running variance).
    pub fn backbone_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.value.numel() + 4 * l.bn.gamma.value.numel())
            .sum()
    }

    fn check_input(&self, p: usize, valid: &[usize]) -> Result<()> {
        if p != self.config.mfcc.n_mfcc {
            return Err(Error::Shape(format!(
                "model expects {} MFCC rows, got {p}",
                self.config.mfcc.n_mfcc
            )));
        }
        if let Some(&t) = valid.iter().find(|&&t| t < BACKBONE_STRIDE) {
            return Err(Error::InputTooShort {
                t,
                min: BACKBONE_STRIDE,
            });
        }
        Ok(())
    }

    /// Records a forward pass over an `(N, 3, p, t)` batch.
    ///
    /// With `masked_gap`, activations past each sample's valid length are
    /// zeroed after every layer and the time pooling covers only the valid
    /// steps, so trailing zero-padding cannot leak into the result.
    pub fn forward_trace(
        &self,
        batch: &Tensor,
        valid: &[usize],
        mode: Mode,
        masked_gap: bool,
        track_grads: bool,
    ) -> Result<ForwardTrace> {
        let [n, c, p, t] = *batch.shape() else {
            return Err(Error::Shape(format!("batch must be (N,3,p,t), got {:?}", batch.shape())));
        };
        if c != self.config.backbone.input_channels {
            return Err(Error::Shape(format!("batch has {c} channels, expected 3")));
        }
        if valid.len() != n || valid.iter().any(|&v| v > t) {
            return Err(Error::Shape(format!(
                "valid lengths {valid:?} do not fit a batch of {n} x {t}"
            )));
        }
        self.check_input(p, valid)?;

        let mut tape = Tape::new();
        let mut param_ids = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut x = tape.leaf(batch.clone(), false);
        let mut widths = valid.to_vec();
        for layer in &self.layers {
            let k = tape.leaf(layer.kernel.value.clone(), track_grads);
            let g = tape.leaf(layer.bn.gamma.value.clone(), track_grads);
            let b = tape.leaf(layer.bn.beta.value.clone(), track_grads);
            param_ids.extend([k, g, b]);
            let conv = match layer.kind {
                LayerKind::Depthwise => tape.depthwise_conv2d(x, k, layer.stride, Padding::Same)?,
                LayerKind::Standard | LayerKind::Pointwise => {
                    tape.conv2d(x, k, layer.stride, Padding::Same)?
                }
            };
            let bn = match mode {
                Mode::Train => tape.batchnorm_train(conv, g, b)?,
                Mode::Infer => {
                    tape.batchnorm_infer(conv, g, b, &layer.bn.running_mean, &layer.bn.running_var)?
                }
            };
            bn_nodes.push(bn);
            x = tape.relu6(bn);
            if masked_gap {
                widths.iter_mut().for_each(|w| *w = w.div_ceil(layer.stride));
                x = tape.mask_columns(x, &widths)?;
            }
        }
        let pooled = tape.mean_axis(x, 2)?;
        let hw = tape.leaf(self.head_weight.value.clone(), track_grads);
        let hb = tape.leaf(self.head_bias.value.clone(), track_grads);
        param_ids.extend([hw, hb]);
        let time_activations = tape.conv1d(pooled, hw, Some(hb))?;
        let logits = if masked_gap {
            tape.masked_mean_last(time_activations, &widths)?
        } else {
            tape.mean_axis(time_activations, 2)?
        };
        Ok(ForwardTrace {
            tape,
            logits,
            time_activations,
            param_ids,
            bn_nodes,
        })
    }

    /// Folds the batch statistics of a training-mode trace into the running
    /// estimates.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        let momentum = self.config.backbone.bn_momentum;
        for (layer, &node) in self.layers.iter_mut().zip(&trace.bn_nodes) {
            if let Some(cache) = trace.tape.bn_cache(node) {
                let bn = &mut layer.bn;
                ops::update_running_stats(&mut bn.running_mean, &mut bn.running_var, cache, momentum);
                for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    /// Predictions for every sample of a finished trace.
    pub fn predictions(trace: &ForwardTrace, source_t: &[usize]) -> Result<Vec<Prediction>> {
        let logits = trace.tape.value(trace.logits);
        let acts = trace.tape.value(trace.time_activations);
        let [n, k, tp] = *acts.shape() else {
            return Err(Error::Shape("time activations must be (N,2,t')".into()));
        };
        (0..n)
            .map(|b| {
                let row = &logits.data()[b * k..(b + 1) * k];
                let sm = ops::softmax(row)?;
                let probs = [sm[0], sm[1]];
                let values = (0..tp)
                    .map(|j| [acts.data()[(b * k) * tp + j], acts.data()[(b * k + 1) * tp + j]])
                    .collect();
                Ok(Prediction {
                    label: argmax_label(&probs),
                    probs,
                    time_activations: TimeActivations {
                        values,
                        source_t: source_t[b],
                    },
                })
            })
            .collect()
    }

    /// Classifies one feature map whose first `valid_len` columns are real
    /// audio. Train mode uses batch statistics and updates the running ones.
    pub fn forward(
        &mut self,
        map: &FeatureMap,
        mode: Mode,
        masked_gap: bool,
        valid_len: usize,
    ) -> Result<Prediction> {
        if valid_len == 0 || valid_len > map.t() {
            return Err(Error::Argument(format!(
                "valid_len {valid_len} must lie in 1..={}",
                map.t()
            )));
        }
        if map.t() < BACKBONE_STRIDE {
            return Err(Error::InputTooShort {
                t: map.t(),
                min: BACKBONE_STRIDE,
            });
        }
        let batch = replicate_channels(map).reshape(&[1, 3, map.p(), map.t()])?;
        let trace = self.forward_trace(&batch, &[valid_len], mode, masked_gap, false)?;
        if mode == Mode::Train {
            self.update_running_stats(&trace);
        }
        Ok(Self::predictions(&trace, &[map.t()])?.remove(0))
    }

    /// Inference on a single map, as a batch of one.
    pub fn predict(&self, map: &FeatureMap) -> Result<Prediction> {
        self.predict_with(map, false)
    }

    pub fn predict_with(&self, map: &FeatureMap, masked_gap: bool) -> Result<Prediction> {
        if map.t() < BACKBONE_STRIDE {
            return Err(Error::InputTooShort {
                t: map.t(),
                min: BACKBONE_STRIDE,
            });
        }
        let batch = replicate_channels(map).reshape(&[1, 3, map.p(), map.t()])?;
        let trace = self.forward_trace(&batch, &[map.t()], Mode::Infer, masked_gap, false)?;
        Ok(Self::predictions(&trace, &[map.t()])?.remove(0))
    }

    /// Rounds all trainable state and running statistics to f32.
    pub fn round_to_f32(&mut self) {
        for p in self.parameters_mut() {
            round_to_f32(&mut p.value);
        }
        for l in &mut self.layers {
            for v in l.bn.running_mean.iter_mut().chain(l.bn.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FcnModel {
        FcnModel::new(ModelConfig::with_width(0.25), 7).unwrap()
    }

    fn wave_map(t: usize) -> FeatureMap {
        let vals = (0..64 * t)
            .map(|i| ((i % t) as f32 * 0.37).sin() * 10.0 + (i / t) as f32 * 0.1)
            .collect();
        FeatureMap::new(64, t, vals).unwrap()
    }

    #[test]
    fn replicate_makes_three_equal_channels() {
        let map = wave_map(431);
        let x = replicate_channels(&map);
        assert_eq!(x.shape(), &[3, 64, 431]);
        let plane = 64 * 431;
        assert_eq!(x.data()[..plane], x.data()[plane..2 * plane]);
        assert_eq!(x.data()[..plane], x.data()[2 * plane..]);
        let z = replicate_channels(&FeatureMap::zeros(64, 40));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_batch_appends_zero_columns() {
        let (a, b) = (wave_map(100), wave_map(150));
        let (x, valid) = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 64, 150]);
        assert_eq!(valid, vec![100, 150]);
        for c in 0..3 {
            for r in 0..64 {
                let row = &x.data()[((c) * 64 + r) * 150..][..150];
                assert!(row[100..].iter().all(|&v| v == 0.0));
                assert_eq!(row[7], a.get(r, 7) as f64);
            }
        }
        let (single, v) = pad_batch(&[&a]).unwrap();
        assert_eq!(single.shape(), &[1, 3, 64, 100]);
        assert_eq!(v, vec![100]);
        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn time_steps_follow_ceil_t_over_32() {
        let m = small();
        let pred = m.predict(&wave_map(431)).unwrap();
        assert_eq!(pred.time_activations.len(), 14);
        assert_eq!(pred.time_activations.source_t, 431);
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn short_input_is_rejected() {
        let m = small();
        assert!(matches!(
            m.predict(&wave_map(31)),
            Err(Error::InputTooShort { t: 31, .. })
        ));
    }

    #[test]
    fn zero_head_outputs_softmax_of_bias() {
        let mut m = small();
        m.head_weight.value = Tensor::zeros(m.head_weight.value.shape());
        m.head_bias.value = Tensor::new(vec![2], vec![0.3, -1.1]).unwrap();
        let expected = ops::softmax(&[0.3, -1.1]).unwrap();
        for t in [40, 97] {
            let p = m.predict(&wave_map(t)).unwrap();
            assert!((p.probs[0] - expected[0]).abs() < 1e-12);
            assert_eq!(p.label, 0);
        }
    }

    #[test]
    fn tie_goes_to_non_ad() {
        assert_eq!(argmax_label(&[0.5, 0.5]), NON_AD);
        assert_eq!(argmax_label(&[0.4, 0.6]), AD);
    }

    #[test]
    fn train_mode_forward_moves_running_stats() {
        let mut m = small();
        let before = m.layers[0].bn.running_mean.clone();
        let map = wave_map(64);
        m.forward(&map, Mode::Infer, false, 64).unwrap();
        assert_eq!(m.layers[0].bn.running_mean, before);
        m.forward(&map, Mode::Train, false, 64).unwrap();
        assert_ne!(m.layers[0].bn.running_mean, before);
    }

    #[test]
    fn full_width_channel_schedule() {
        let m = FcnModel::new(ModelConfig::with_width(1.0), 0).unwrap();
        assert_eq!(m.final_channels(), 1024);
        assert_eq!(m.layers.len(), 27);
        let q = small();
        assert_eq!(q.final_channels(), 256);
    }

    #[test]
    fn config_rejects_bad_stride_product() {
        let mut c = ModelConfig::with_width(0.25);
        c.backbone.blocks.pop();
        c.backbone.blocks.last_mut().unwrap().stride = 1;
        assert!(FcnModel::new(c, 0).is_err());
        assert!(FcnModel::new(ModelConfig::with_width(1.5), 0).is_err());
    }
}
