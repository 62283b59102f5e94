//! A small convolutional classifier with a single growing head.
//!
//! Layout: `conv1 .. convN` (each `conv -> bias -> ReLU`, padding `k/2`),
//! global average pooling, then a linear head with one row per class seen so
//! far. Layer activations can be captured by name for Grad-CAM.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::saliency::Explainable;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Zero,
}

fn default_blocks() -> Vec<ConvBlockSpec> {
    [16, 32, 64]
        .into_iter()
        .map(|c| ConvBlockSpec {
            out_channels: c,
            kernel: 3,
            stride: 2,
        })
        .collect()
}

fn default_target() -> String {
    "conv3".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    #[serde(default = "default_blocks")]
    pub conv_blocks: Vec<ConvBlockSpec>,
    #[serde(default = "default_target")]
    pub target_layer: String,
    #[serde(default)]
    pub head_init: HeadInit,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            conv_blocks: default_blocks(),
            target_layer: default_target(),
            head_init: HeadInit::Zero,
        }
    }
}

/// Input geometry, channel-first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn rgb(height: usize, width: usize) -> Self {
        InputShape {
            channels: 3,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(channels, height, width)` of one conv layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<NamedTensor>,
    /// Global class ids in head-row order.
    pub classes_seen: Vec<usize>,
    /// Optimizer steps taken.
    pub version: u64,
}

impl ModelState {
    pub fn num_classes(&self) -> usize {
        self.classes_seen.len()
    }

    /// Head row of a global class id.
    pub fn class_index(&self, class_id: usize) -> Option<usize> {
        self.classes_seen.iter().position(|&c| c == class_id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

pub struct ForwardOutput {
    /// `[N, classes]` pre-softmax scores.
    pub logits: Tensor,
    /// `[N, K, u, v]` activations of the target layer.
    pub feature_maps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    input: InputShape,
    layers: Vec<LayerShape>,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, input: InputShape) -> Result<Self> {
        if spec.conv_blocks.is_empty() {
            return Err(Error::config("model.conv_blocks", "need at least one block"));
        }
        let mut layers = Vec::new();
        let (mut h, mut w) = (input.height, input.width);
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let field = format!("model.conv_blocks[{i}]");
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::config(field, "channels, kernel and stride must be positive"));
            }
            let pad = b.kernel / 2;
            if h + 2 * pad < b.kernel || w + 2 * pad < b.kernel {
                return Err(Error::config(field, format!("kernel does not fit a {h}x{w} input")));
            }
            h = (h + 2 * pad - b.kernel) / b.stride + 1;
            w = (w + 2 * pad - b.kernel) / b.stride + 1;
            layers.push(LayerShape {
                channels: b.out_channels,
                height: h,
                width: w,
            });
        }
        let this = Classifier {
            spec,
            input,
            layers,
        };
        let t = this.layer_shape(&this.spec.target_layer).ok_or_else(|| {
            Error::config(
                "model.target_layer",
                format!("unknown layer `{}`", this.spec.target_layer),
            )
        })?;
        if t.height < 2 || t.width < 2 {
            return Err(Error::config(
                "model.target_layer",
                format!(
                    "`{}` is {}x{}; need at least 2x2",
                    this.spec.target_layer, t.height, t.width
                ),
            ));
        }
        Ok(this)
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.layers.len()).map(|i| format!("conv{i}")).collect()
    }

    pub fn layer_shape(&self, name: &str) -> Option<LayerShape> {
        let i: usize = name.strip_prefix("conv")?.parse().ok()?;
        (i >= 1).then(|| self.layers.get(i - 1).copied()).flatten()
    }

    pub fn target_shape(&self) -> LayerShape {
        self.layer_shape(&self.spec.target_layer)
            .expect("validated at construction")
    }

    fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").channels
    }

    /// SHA-256 of the architecture, stored in checkpoints.
    pub fn spec_hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(&(&self.spec, &self.input)).expect("serializable");
        Sha256::digest(json).into()
    }

    /// Fresh parameters: He-uniform convolutions, zero biases, empty head.
    pub fn init(&self, rng: &mut impl Rng) -> ModelState {
        let mut params = Vec::new();
        let mut cin = self.input.channels;
        for (i, b) in self.spec.conv_blocks.iter().enumerate() {
            let fan_in = (cin * b.kernel * b.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = b.out_channels * cin * b.kernel * b.kernel;
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(NamedTensor {
                name: format!("conv{}.weight", i + 1),
                tensor: Tensor::new(vec![b.out_channels, cin, b.kernel, b.kernel], data)
                    .expect("sized"),
            });
            params.push(NamedTensor {
                name: format!("conv{}.bias", i + 1),
                tensor: Tensor::zeros(vec![b.out_channels]),
            });
            cin = b.out_channels;
        }
        params.push(NamedTensor {
            name: "head.weight".into(),
            tensor: Tensor::zeros(vec![0, self.feature_dim()]),
        });
        params.push(NamedTensor {
            name: "head.bias".into(),
            tensor: Tensor::zeros(vec![0]),
        });
        ModelState {
            params,
            classes_seen: Vec::new(),
            version: 0,
        }
    }

    /// Appends zero-initialized head rows for `new_class_ids`.
    pub fn expand_head(&self, state: &ModelState, new_class_ids: &[usize]) -> Result<ModelState> {
        let mut seen = state.classes_seen.clone();
        for &c in new_class_ids {
            if seen.contains(&c) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} already has a head row"
                )));
            }
            seen.push(c);
        }
        let mut next = state.clone();
        let k = self.feature_dim();
        let added = new_class_ids.len();
        for p in next.params.iter_mut() {
            if p.name == "head.weight" {
                let mut data = std::mem::take(&mut p.tensor).into_data();
                data.extend(std::iter::repeat(0.0).take(added * k));
                p.tensor = Tensor::new(vec![seen.len(), k], data)?;
            } else if p.name == "head.bias" {
                let mut data = std::mem::take(&mut p.tensor).into_data();
                data.extend(std::iter::repeat(0.0).take(added));
                p.tensor = Tensor::new(vec![seen.len()], data)?;
            }
        }
        next.classes_seen = seen;
        Ok(next)
    }

    pub fn check_state(&self, state: &ModelState) -> Result<()> {
        let expected = 2 * self.layers.len() + 2;
        if state.params.len() != expected {
            return Err(Error::Shape(format!(
                "model state has {} tensors, architecture needs {expected}",
                state.params.len()
            )));
        }
        let head = state
            .param("head.weight")
            .ok_or_else(|| Error::Shape("missing head.weight".into()))?;
        if head.shape() != [state.classes_seen.len(), self.feature_dim()] {
            return Err(Error::Shape(format!(
                "head.weight {:?} for {} classes",
                head.shape(),
                state.classes_seen.len()
            )));
        }
        Ok(())
    }

    pub fn check_images(&self, images: &[usize]) -> Result<()> {
        let i = self.input;
        if images.len() != 4 || images[1..] != [i.channels, i.height, i.width] {
            return Err(Error::Shape(format!(
                "images {:?} do not match the configured input [N, {}, {}, {}]",
                images, i.channels, i.height, i.width
            )));
        }
        if images[0] == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Graph forward pass. `params` follow the order of [`ModelState::params`].
    /// Returns logits and, when `capture` names a layer, its activations.
    pub fn forward_graph(
        &self,
        params: &[Var],
        x: &Var,
        capture: Option<&str>,
    ) -> Result<(Var, Option<Var>)> {
        self.check_images(x.shape())?;
        if let Some(name) = capture {
            if self.layer_shape(name).is_none() {
                return Err(Error::InvalidArgument(format!("unknown layer `{name}`")));
            }
        }
        let n = x.shape()[0];
        let mut h = x.clone();
        let mut captured = None;
        for (i, b) in self.spec.conv_blocks.iter().enumerate() {
            let z = ag::conv2d(&h, &params[2 * i], b.stride, b.kernel / 2)?;
            let z = ag::add_channel_bias(&z, &params[2 * i + 1])?;
            h = ag::relu(&z);
            if capture == Some(format!("conv{}", i + 1).as_str()) {
                captured = Some(h.clone());
            }
        }
        let s = h.shape().to_vec();
        let (k, p) = (s[1], s[2] * s[3]);
        let idx: Vec<usize> = (0..n * k * p).map(|j| j / p).collect();
        let pooled = ag::scale(&ag::scatter_add(&h, Rc::new(idx), vec![n, k])?, 1.0 / p as f64);
        let w = &params[params.len() - 2];
        let bias = &params[params.len() - 1];
        let classes = w.shape()[0];
        if classes == 0 {
            return Err(Error::InvalidArgument("model has no classes yet".into()));
        }
        let logits = ag::matmul(&pooled, &ag::transpose(w)?)?;
        let logits = ag::add_channel_bias(&logits, bias)?;
        Ok((logits, captured))
    }

    /// Plain forward pass: logits plus target-layer activations.
    pub fn forward(&self, state: &ModelState, images: &Tensor) -> Result<ForwardOutput> {
        self.check_state(state)?;
        let _ng = ag::no_grad();
        let view = ModelView::constant(self, state);
        let x = Var::constant(images.clone());
        let (logits, maps) = view.scores(&x, Some(&self.spec.target_layer))?;
        Ok(ForwardOutput {
            logits: logits.value().clone(),
            feature_maps: maps.expect("captured").value().clone(),
        })
    }

    /// Argmax head rows for each image.
    pub fn predict(&self, state: &ModelState, images: &Tensor) -> Result<Vec<usize>> {
        self.check_state(state)?;
        let _ng = ag::no_grad();
        let view = ModelView::constant(self, state);
        let (logits, _) = view.scores(&Var::constant(images.clone()), None)?;
        Ok(argmax_rows(logits.value()))
    }
}

/// Index of the largest entry of each row of an `[N, C]` tensor (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// A classifier bound to one set of parameter nodes.
pub struct ModelView<'a> {
    pub classifier: &'a Classifier,
    pub params: Vec<Var>,
}

impl<'a> ModelView<'a> {
    pub fn constant(classifier: &'a Classifier, state: &ModelState) -> Self {
        ModelView {
            classifier,
            params: state
                .params
                .iter()
                .map(|p| Var::constant(p.tensor.clone()))
                .collect(),
        }
    }

    /// Parameters become differentiable leaves.
    pub fn trainable(classifier: &'a Classifier, state: &ModelState) -> Self {
        ModelView {
            classifier,
            params: state
                .params
                .iter()
                .map(|p| Var::leaf(p.tensor.clone()))
                .collect(),
        }
    }
}

impl Explainable for ModelView<'_> {
    fn scores(&self, x: &Var, layer: Option<&str>) -> Result<(Var, Option<Var>)> {
        self.classifier.forward_graph(&self.params, x, layer)
    }

    fn default_layer(&self) -> Option<&str> {
        Some(&self.classifier.spec.target_layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Classifier, ModelState) {
        let c = Classifier::new(ClassifierSpec::default(), InputShape::rgb(32, 32)).unwrap();
        let s = c.init(&mut ChaCha8Rng::seed_from_u64(0));
        (c, s)
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, 32, 32], (0..n * 3072).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn default_backbone_target_is_4x4() {
        let (c, _) = setup();
        let t = c.target_shape();
        assert_eq!((t.channels, t.height, t.width), (64, 4, 4));
    }

    #[test]
    fn forward_shapes() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &(0..10).collect::<Vec<_>>()).unwrap();
        let out = c.forward(&s, &images(4, 1)).unwrap();
        assert_eq!(out.logits.shape(), &[4, 10]);
        assert_eq!(out.feature_maps.shape(), &[4, 64, 4, 4]);
    }

    #[test]
    fn zero_head_gives_equal_logits() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[3, 1, 4]).unwrap();
        let out = c.forward(&s, &images(2, 2)).unwrap();
        for row in out.logits.data().chunks(3) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn forward_is_pure() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[0, 1]).unwrap();
        let x = images(3, 4);
        let a = c.forward(&s, &x).unwrap();
        let b = c.forward(&s, &x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.feature_maps, b.feature_maps);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[0]).unwrap();
        assert!(c.forward(&s, &Tensor::zeros(vec![0, 3, 32, 32])).is_err());
        assert!(c.forward(&s, &Tensor::zeros(vec![1, 3, 16, 32])).is_err());
        let (_, empty) = setup();
        assert!(c.forward(&empty, &images(1, 0)).is_err());
    }

    #[test]
    fn expansion_preserves_old_rows() {
        let (c, s) = setup();
        let mut s = c.expand_head(&s, &[0, 1, 2, 3, 4]).unwrap();
        // give the head non-trivial contents
        for p in s.params.iter_mut().filter(|p| p.name.starts_with("head")) {
            let n = p.tensor.len();
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin() / n as f64;
            }
        }
        let x = images(2, 3);
        let before = c.forward(&s, &x).unwrap().logits;
        let grown = c.expand_head(&s, &[5, 6, 7, 8, 9]).unwrap();
        let after = c.forward(&grown, &x).unwrap().logits;
        for n in 0..2 {
            assert_eq!(&before.data()[n * 5..n * 5 + 5], &after.data()[n * 10..n * 10 + 5]);
        }
        assert_eq!(grown.num_classes(), 10);
    }

    #[test]
    fn expand_by_nothing_is_identity() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[1, 2]).unwrap();
        assert_eq!(c.expand_head(&s, &[]).unwrap(), s);
    }

    #[test]
    fn stepwise_and_joint_expansion_agree() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[0, 1, 2, 3, 4]).unwrap();
        let stepwise = c
            .expand_head(&c.expand_head(&s, &[5]).unwrap(), &[6])
            .unwrap();
        let joint = c.expand_head(&s, &[5, 6]).unwrap();
        assert_eq!(stepwise, joint);
    }

    #[test]
    fn duplicate_class_is_rejected() {
        let (c, s) = setup();
        let s = c.expand_head(&s, &[1]).unwrap();
        assert!(c.expand_head(&s, &[1]).is_err());
        assert!(c.expand_head(&s, &[2, 2]).is_err());
    }

    #[test]
    fn tiny_target_layer_is_rejected() {
        let spec = ClassifierSpec {
            conv_blocks: vec![ConvBlockSpec {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            }; 3],
            target_layer: "conv3".into(),
            head_init: HeadInit::Zero,
        };
        assert!(Classifier::new(spec.clone(), InputShape::rgb(8, 8)).is_err());
        assert!(Classifier::new(spec, InputShape::rgb(16, 16)).is_ok());
    }
}
