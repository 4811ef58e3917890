//! The adapter, the stand-in backbone classifier, and the composed pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::colorsim::{ImageF, ImageU8};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channels the adapter works on.
pub const RGB: usize = 3;

/// How adapter weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterInit {
    /// Unit intra-channel weights, zero inter-channel weights, zero bias.
    Identity,
    /// Glorot-uniform weights (negative control).
    Glorot,
    /// He-normal weights (negative control).
    He,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer<T> {
    /// `[1, 1, 3, 3]`: input channel × output channel mixing matrix.
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Stack of spatially 1×1, 3→3 channel convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterNet<T> {
    layers: Vec<AdapterLayer<T>>,
}

impl<T: Scalar> AdapterNet<T> {
    /// Identity-initialized adapter: for any non-negative input the output
    /// equals the input exactly, whatever `k` is.
    pub fn identity(k: usize) -> Result<Self> {
        Self::build(k, AdapterInit::Identity, 0)
    }

    pub fn build(k: usize, init: AdapterInit, seed: u64) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument(
                "adapter needs at least one layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..k)
            .map(|_| {
                let weights = match init {
                    AdapterInit::Identity => Tensor::from_fn(&[1, 1, RGB, RGB], |i| {
                        if i / RGB == i % RGB {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }),
                    AdapterInit::Glorot => {
                        let limit = (6.0 / (RGB + RGB) as f64).sqrt();
                        let dist = Uniform::new(-limit, limit).expect("valid range");
                        Tensor::from_fn(&[1, 1, RGB, RGB], |_| {
                            T::from_f64_lossy(dist.sample(&mut rng))
                        })
                    }
                    AdapterInit::He => {
                        let dist = Normal::new(0.0, (2.0 / RGB as f64).sqrt()).expect("valid std");
                        Tensor::from_fn(&[1, 1, RGB, RGB], |_| {
                            T::from_f64_lossy(dist.sample(&mut rng))
                        })
                    }
                };
                AdapterLayer {
                    weights: weights.with_requires_grad(true),
                    bias: Tensor::zeros(&[RGB]).with_requires_grad(true),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<AdapterLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "adapter needs at least one layer".into(),
            ));
        }
        for l in &layers {
            if l.weights.shape() != [1, 1, RGB, RGB] {
                return Err(Error::Shape {
                    op: "adapter",
                    dim: "weights",
                    expected: RGB * RGB,
                    got: l.weights.numel(),
                });
            }
            if l.bias.shape() != [RGB] {
                return Err(Error::Shape {
                    op: "adapter",
                    dim: "bias",
                    expected: RGB,
                    got: l.bias.numel(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[AdapterLayer<T>] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Registers parameters on the tape, in [`Self::params`] order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    pub fn forward_bound(&self, tape: &mut Tape<T>, params: &[Var], mut x: Var) -> Result<Var> {
        for pair in params.chunks_exact(2) {
            x = tape.conv2d(x, pair[0], pair[1], 1, Padding::Same)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// Runs the adapter on an NHWC batch.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.leaf(images);
        let y = self.forward_bound(&mut tape, &params, x)?;
        Ok(tape.to_tensor(y))
    }

    pub fn cast<U: Scalar>(&self) -> AdapterNet<U> {
        AdapterNet {
            layers: self
                .layers
                .iter()
                .map(|l| AdapterLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl AdapterNet<f32> {
    /// Runs the detached adapter on 8-bit images and re-quantizes the output
    /// (clamped to [0, 1]) for inspection.
    pub fn export_images(&self, images: &[ImageU8]) -> Result<Vec<ImageU8>> {
        images
            .iter()
            .map(|img| {
                let batch = images_to_tensor(std::slice::from_ref(img))?;
                let out = self.forward(&batch)?;
                Ok(ImageF::new(img.height(), img.width(), out.into_data())?.to_u8())
            })
            .collect()
    }
}

/// Packs same-sized images into an NHWC tensor in [0, 1].
pub fn images_to_tensor<T: Scalar>(images: &[ImageU8]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * RGB);
    let scale = T::from_f64_lossy(255.0);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape {
                op: "images_to_tensor",
                dim: "height*width",
                expected: h * w,
                got: img.height() * img.width(),
            });
        }
        data.extend(img.pixels().iter().map(|&v| T::from_u8(v).unwrap() / scale));
    }
    Tensor::new(vec![images.len(), h, w, RGB], data)
}

/// One entry of a backbone architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    /// `kernel`×`kernel` convolution, stride 1, same padding.
    Conv {
        kernel: usize,
        out_channels: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Flatten,
    Dense {
        units: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ArchConfig {
    /// VGG-style classifier for 32×32×3 images and 10 classes.
    pub fn small_vgg() -> Self {
        use LayerSpec::*;
        Self {
            input: [32, 32, 3],
            layers: vec![
                Conv {
                    kernel: 3,
                    out_channels: 16,
                },
                Relu,
                Conv {
                    kernel: 3,
                    out_channels: 16,
                },
                Relu,
                MaxPool2,
                Conv {
                    kernel: 3,
                    out_channels: 32,
                },
                Relu,
                Conv {
                    kernel: 3,
                    out_channels: 32,
                },
                Relu,
                MaxPool2,
                Flatten,
                Dense { units: 128 },
                Relu,
                Dense { units: 10 },
            ],
        }
    }

    /// Parameter tensor shapes (weights then bias, per weight-bearing layer),
    /// validating the layer sequence along the way.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let invalid = |msg: String| Err(Error::InvalidArgument(format!("architecture: {msg}")));
        let [mut h, mut w, mut c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return invalid(format!("input {:?} has an empty dimension", self.input));
        }
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                } => {
                    if flat.is_some() {
                        return invalid(format!("layer {i}: conv after flatten"));
                    }
                    if kernel == 0 || out_channels == 0 {
                        return invalid(format!("layer {i}: empty conv"));
                    }
                    shapes.push(vec![kernel, kernel, c, out_channels]);
                    shapes.push(vec![out_channels]);
                    c = out_channels;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool2 => {
                    if flat.is_some() || h % 2 != 0 || w % 2 != 0 {
                        return invalid(format!("layer {i}: maxpool2 on {h}x{w}"));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Flatten => {
                    if flat.is_some() {
                        return invalid(format!("layer {i}: second flatten"));
                    }
                    flat = Some(h * w * c);
                }
                LayerSpec::Dense { units } => {
                    let Some(d) = flat else {
                        return invalid(format!("layer {i}: dense before flatten"));
                    };
                    if units == 0 {
                        return invalid(format!("layer {i}: empty dense"));
                    }
                    shapes.push(vec![d, units]);
                    shapes.push(vec![units]);
                    flat = Some(units);
                }
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return invalid("last layer must be dense".into());
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) => *units,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv { weights: Tensor<T>, bias: Tensor<T> },
    Relu,
    MaxPool2,
    Flatten,
    Dense { weights: Tensor<T>, bias: Tensor<T> },
}

impl<T> Layer<T> {
    fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv { weights, bias } | Layer::Dense { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Conv { weights, bias } | Layer::Dense { weights, bias } => Some((weights, bias)),
            _ => None,
        }
    }
}

/// Frozen-by-default classifier.
///
/// Trainable (weight-bearing) layers are numbered from the output end:
/// trainable layer 1 is the final dense layer, 2 the one before it, and so
/// on. ReLU, pooling and flatten layers are not counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    arch: ArchConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// He-normal weights and zero biases; every layer starts trainable.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<Tensor<T>> = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
                }
            })
            .collect();
        let mut b = Self::from_params(arch, tensors)?;
        b.set_trainable_last(b.num_trainable_layers())?;
        Ok(b)
    }

    /// Assembles a backbone from parameter tensors in [`ArchConfig::param_shapes`]
    /// order. All layers come back frozen.
    pub fn from_params(arch: &ArchConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Shape {
                op: "backbone",
                dim: "parameter_count",
                expected: shapes.len(),
                got: params.len(),
            });
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::Shape {
                    op: "backbone",
                    dim: "parameter",
                    expected: s.iter().product(),
                    got: p.numel(),
                });
            }
        }
        let mut params = params.into_iter().map(|p| p.with_requires_grad(false));
        let layers = arch
            .layers
            .iter()
            .map(|spec| match spec {
                LayerSpec::Conv { .. } => Layer::Conv {
                    weights: params.next().unwrap(),
                    bias: params.next().unwrap(),
                },
                LayerSpec::Dense { .. } => Layer::Dense {
                    weights: params.next().unwrap(),
                    bias: params.next().unwrap(),
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Flatten => Layer::Flatten,
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// Indices into [`Self::layers`] of the weight-bearing layers, input to output.
    pub fn trainable_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_trainable_layers(&self) -> usize {
        self.trainable_layer_indices().len()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Freezes everything except the last `n` weight-bearing layers.
    pub fn set_trainable_last(&mut self, n: usize) -> Result<()> {
        let total = self.num_trainable_layers();
        if n > total {
            return Err(Error::InvalidArgument(format!(
                "cannot unfreeze {n} of {total} trainable layers"
            )));
        }
        for (rank_from_input, idx) in self.trainable_layer_indices().into_iter().enumerate() {
            let trainable = rank_from_input >= total - n;
            let (w, b) = self.layers[idx].params_mut().unwrap();
            w.set_requires_grad(trainable);
            b.set_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.set_trainable_last(0).expect("zero is always in range");
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }

    /// All parameter tensors, weights before bias, input to output.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params_mut()
            .into_iter()
            .filter(|p| p.requires_grad())
            .collect()
    }

    /// One digest per parameter tensor, in [`Self::params`] order.
    pub fn param_digests(&self) -> Vec<[u8; 32]> {
        self.params().iter().map(|p| p.digest()).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    /// Logits for an NHWC batch that has already been mean-subtracted.
    pub fn forward_bound(&self, tape: &mut Tape<T>, params: &[Var], mut x: Var) -> Result<Var> {
        let mut p = params.chunks_exact(2);
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { .. } => {
                    let wb = p.next().expect("bound params match layers");
                    tape.conv2d(x, wb[0], wb[1], 1, Padding::Same)?
                }
                Layer::Dense { .. } => {
                    let wb = p.next().expect("bound params match layers");
                    tape.dense(x, wb[0], wb[1])?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool2 => tape.maxpool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.leaf(input);
        let y = self.forward_bound(&mut tape, &params, x)?;
        Ok(tape.to_tensor(y))
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut b = Backbone::from_params(
            &self.arch,
            self.params().into_iter().map(|p| p.cast()).collect(),
        )
        .expect("same architecture");
        for (dst, src) in b.params_mut().into_iter().zip(self.params()) {
            dst.set_requires_grad(src.requires_grad());
        }
        b
    }
}

/// Adapter (optional) → per-channel mean subtraction → backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline<T> {
    pub adapter: Option<AdapterNet<T>>,
    pub channel_means: [T; RGB],
    pub backbone: Backbone<T>,
}

/// Inputs may exceed [0, 1] by at most this much.
pub const INPUT_RANGE_SLACK: f64 = 1e-6;

impl<T: Scalar> Pipeline<T> {
    pub fn new(backbone: Backbone<T>, channel_means: [T; RGB]) -> Self {
        Self {
            adapter: None,
            channel_means,
            backbone,
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterNet<T>) -> Self {
        self.adapter = Some(adapter);
        self
    }

    /// Records the full pipeline on `tape`. `adapter_params` and
    /// `backbone_params` come from the respective `bind` calls.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        adapter_params: &[Var],
        backbone_params: &[Var],
        images: Var,
    ) -> Result<Var> {
        let mut x = images;
        if let Some(adapter) = &self.adapter {
            x = adapter.forward_bound(tape, adapter_params, x)?;
        }
        let x = tape.sub_channel(x, &self.channel_means)?;
        self.backbone.forward_bound(tape, backbone_params, x)
    }

    /// Logits for a batch of [0, 1] images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        check_unit_range(images.data())?;
        let mut tape = Tape::new();
        let ap = self
            .adapter
            .as_ref()
            .map(|a| a.bind(&mut tape))
            .unwrap_or_default();
        let bp = self.backbone.bind(&mut tape);
        let x = tape.leaf(images);
        let y = self.forward_bound(&mut tape, &ap, &bp, x)?;
        Ok(tape.to_tensor(y))
    }
}

pub fn check_unit_range<T: Scalar>(data: &[T]) -> Result<()> {
    for (index, &v) in data.iter().enumerate() {
        let v = v.as_f64();
        if !(-INPUT_RANGE_SLACK..=1.0 + INPUT_RANGE_SLACK).contains(&v) {
            return Err(Error::InputRange { index, value: v });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_vgg_has_six_trainable_layers() {
        let b = Backbone::<f32>::build(&ArchConfig::small_vgg(), 1).unwrap();
        assert_eq!(b.num_trainable_layers(), 6);
        // conv 3→16, 16→16, 16→32, 32→32; dense 2048→128, 128→10
        let expected = (27 * 16 + 16)
            + (144 * 16 + 16)
            + (144 * 32 + 32)
            + (288 * 32 + 32)
            + (2048 * 128 + 128)
            + (128 * 10 + 10);
        assert_eq!(b.num_params(), expected);
    }

    #[test]
    fn last_n_unfreezes_from_the_output_end() {
        let mut b = Backbone::<f32>::build(&ArchConfig::small_vgg(), 1).unwrap();
        b.set_trainable_last(1).unwrap();
        let flags: Vec<bool> = b.params().iter().map(|p| p.requires_grad()).collect();
        assert_eq!(
            flags,
            [false, false, false, false, false, false, false, false, false, false, true, true]
        );
        b.set_trainable_last(2).unwrap();
        assert_eq!(b.params().iter().filter(|p| p.requires_grad()).count(), 4);
        assert!(b.set_trainable_last(7).is_err());
        b.freeze();
        assert!(b.is_fully_frozen());
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        use LayerSpec::*;
        let bad = [
            vec![Dense { units: 4 }],
            vec![Conv {
                kernel: 3,
                out_channels: 4,
            }],
            vec![
                Flatten,
                Conv {
                    kernel: 1,
                    out_channels: 2,
                },
                Dense { units: 2 },
            ],
            vec![MaxPool2, MaxPool2, MaxPool2, Flatten, Dense { units: 2 }],
        ];
        for layers in bad {
            let arch = ArchConfig {
                input: [4, 4, 3],
                layers,
            };
            assert!(Backbone::<f32>::build(&arch, 0).is_err(), "{arch:?}");
        }
    }

    #[test]
    fn zero_adapter_depth_is_rejected() {
        assert!(AdapterNet::<f32>::identity(0).is_err());
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let b = Backbone::<f32>::build(&ArchConfig::small_vgg(), 3).unwrap();
        let p = Pipeline::new(b, [0.5, 0.4, 0.3]);
        let logits = p.logits(&Tensor::zeros(&[1, 32, 32, 3])).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_input_is_an_error() {
        let b = Backbone::<f32>::build(&ArchConfig::small_vgg(), 3).unwrap();
        let p = Pipeline::new(b, [0.0; 3]);
        let mut x = Tensor::zeros(&[1, 32, 32, 3]);
        x.data_mut()[5] = 1.01;
        assert!(matches!(
            p.logits(&x),
            Err(Error::InputRange { index: 5, .. })
        ));
        x.data_mut()[5] = -1e-7;
        assert!(p.logits(&x).is_ok());
    }
}
